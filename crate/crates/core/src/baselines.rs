//! FedAvg and FedProx on a linear softmax head over the same embeddings.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::{EmbeddingDataset, PartitionPlan};
use crate::error::{input, CoreError, Result};
use crate::metrics::CurveRow;
use crate::rolann::{argmax, design_matrix};
use crate::wire::{encode_weights, Envelope, MsgType};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Algorithm {
    FedAvg,
    FedProx { mu: f64 },
}

impl Algorithm {
    pub fn mu(&self) -> f64 {
        match self {
            Algorithm::FedAvg => 0.0,
            Algorithm::FedProx { mu } => *mu,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx { .. } => "fedprox",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { algorithm: Algorithm::FedAvg, rounds: 10, local_epochs: 1, learning_rate: 0.01, batch_size: 64, seed: 0 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return input("rounds, local epochs and batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return input(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        let mu = self.algorithm.mu();
        if !(mu >= 0.0 && mu.is_finite()) {
            return input(format!("mu must be >= 0, got {mu}"));
        }
        Ok(())
    }
}

/// `d × C` weights; the last row is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub w: DMatrix<f64>,
}

impl LinearHead {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self { w: DMatrix::zeros(features + 1, classes) }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        if x.ncols() + 1 != self.w.nrows() {
            return input(format!("samples have {} features, head expects {}", x.ncols(), self.w.nrows() - 1));
        }
        let scores = design_matrix(x, true).tr_mul(&self.w);
        Ok(scores.row_iter().map(|r| argmax(r.iter().copied())).collect())
    }

    pub fn accuracy(&self, ds: &EmbeddingDataset) -> Result<f64> {
        Ok(crate::rolann::accuracy(&self.predict(&ds.data)?, &ds.labels))
    }
}

fn softmax_rows(z: &mut DMatrix<f64>) {
    for mut row in z.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// `E` epochs of mini-batch SGD on softmax cross-entropy with the proximal
/// term `(μ/2)‖W − W_g‖²`. The proximal part is applied in closed form
/// (`W ← (W − η·g + η·μ·W_g) / (1 + η·μ)`), which equals the explicit step
/// for `μ = 0` and stays stable for any `η·μ`.
pub fn local_train(
    head: &LinearHead,
    ds: &EmbeddingDataset,
    cfg: &BaselineConfig,
    w_global: &DMatrix<f64>,
    round: usize,
    client: usize,
) -> Result<LinearHead> {
    cfg.validate()?;
    if head.w.shape() != w_global.shape() || head.w.nrows() != ds.dim() + 1 || head.w.ncols() != ds.n_classes {
        return input("head, global weights and dataset disagree on shape");
    }
    let xt = design_matrix(&ds.data, true).transpose();
    let mut w = head.w.clone();
    let (lr, mu) = (cfg.learning_rate, cfg.algorithm.mu());
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((round as u64) << 32) | client as u64);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = xt.select_rows(batch);
            let mut p = &xb * &w;
            softmax_rows(&mut p);
            for (r, &i) in batch.iter().enumerate() {
                p[(r, ds.labels[i])] -= 1.0;
            }
            let grad = xb.tr_mul(&p) / batch.len() as f64;
            w -= grad * lr;
            if mu > 0.0 {
                w = (w + w_global * (lr * mu)) / (1.0 + lr * mu);
            }
        }
    }
    Ok(LinearHead { w })
}

/// `W = Σ (m_k / Σ m) · W_k`.
pub fn fedavg_round(heads: &[LinearHead], sample_counts: &[usize]) -> Result<LinearHead> {
    if heads.is_empty() || heads.len() != sample_counts.len() {
        return input("need one sample count per head");
    }
    let total: usize = sample_counts.iter().sum();
    if total == 0 {
        return input("sample counts sum to zero");
    }
    let mut w = DMatrix::zeros(heads[0].w.nrows(), heads[0].w.ncols());
    for (h, &m) in heads.iter().zip(sample_counts) {
        if h.w.shape() != w.shape() {
            return input("heads disagree on shape");
        }
        w += &h.w * (m as f64 / total as f64);
    }
    Ok(LinearHead { w })
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub final_head: LinearHead,
    pub rows: Vec<CurveRow>,
}

/// Runs `R` rounds in process. Bytes count one weight upload and one
/// download per client per round, each framed in an envelope.
pub fn run_baseline(
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    plan: &PartitionPlan,
    cfg: &BaselineConfig,
    alpha: f64,
) -> Result<History> {
    run_baseline_with(train, test, plan, cfg, alpha, |_, locals: &[LinearHead], global: &LinearHead| {
        let up: usize = locals
            .iter()
            .map(|h| Envelope::new(MsgType::Update, 0, 0, encode_weights(&h.w)).encoded_len())
            .sum();
        let down = Envelope::new(MsgType::Model, 0, 0, encode_weights(&global.w)).encoded_len();
        Ok::<u64, CoreError>((up + locals.len() * down) as u64)
    })
}

/// Like [`run_baseline`], but each round's weights go through `exchange`,
/// which transmits them and returns the bytes it sent. The curve's byte
/// column is the running sum of those returns.
pub fn run_baseline_with<E, F>(
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    plan: &PartitionPlan,
    cfg: &BaselineConfig,
    alpha: f64,
    mut exchange: F,
) -> std::result::Result<History, E>
where
    E: From<CoreError>,
    F: FnMut(usize, &[LinearHead], &LinearHead) -> std::result::Result<u64, E>,
{
    cfg.validate()?;
    plan.check_cover(train.len())?;
    let clients: Vec<EmbeddingDataset> = plan.assignments.iter().map(|idx| train.subset(idx)).collect();
    let counts: Vec<usize> = clients.iter().map(|c| c.len()).collect();
    let mut global = LinearHead::zeros(train.dim(), train.n_classes);
    let start = Instant::now();
    let mut cum_bytes = 0u64;
    let mut rows = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let locals = clients
            .iter()
            .enumerate()
            .map(|(k, ds)| local_train(&global, ds, cfg, &global.w, round, k))
            .collect::<Result<Vec<_>>>()?;
        global = fedavg_round(&locals, &counts)?;
        cum_bytes += exchange(round, &locals, &global)?;
        rows.push(CurveRow {
            round,
            algorithm: cfg.algorithm.name().to_string(),
            alpha,
            accuracy: global.accuracy(test)?,
            cum_bytes,
            cum_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(History { final_head: global, rows })
}
