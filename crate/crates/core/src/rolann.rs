//! Closed-form ROLANN output layer with exact federated aggregation.
//!
//! Each client summarises its data per class by the left singular pair
//! `(U, S)` of the weighted design matrix `x·diag(f′)` (features × samples)
//! and the moment vector `M = x·(f′ ⊙ f′ ⊙ d̄)`. Concatenating `U·diag(S)`
//! blocks and re-factorising reproduces the pooled Gram matrix, and moments
//! simply add, so the federated weights equal the centralised ones.

use fedhenet_ckks::{Ciphertext, EncryptionContext};
use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::data::EmbeddingDataset;
use crate::error::{input, CoreError, Result};
use crate::linalg::thin_left_svd;

/// With `λ = 0` every singular value must exceed this.
pub const MIN_SINGULAR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Identity,
    Logistic,
}

impl ActivationKind {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Identity => x,
            ActivationKind::Logistic => logistic(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub lambda: f64,
    /// One-hot clamping, used by the logistic activation only.
    pub epsilon: f64,
    pub activation: ActivationKind,
    pub include_bias: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self { lambda: 0.01, epsilon: 0.05, activation: ActivationKind::Logistic, include_bias: true }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return input(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return input(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon));
        }
        Ok(())
    }

    pub fn input_dim(&self, features: usize) -> usize {
        features + usize::from(self.include_bias)
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row `i` is `1 − eps` at `labels[i]` and `eps` elsewhere.
pub fn encode_targets(labels: &[usize], classes: usize, eps: f64) -> Result<DMatrix<f64>> {
    if !(0.0..0.5).contains(&eps) {
        return input(format!("eps must lie in [0, 0.5), got {eps}"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return input(format!("label {bad} outside [0, {classes})"));
    }
    Ok(DMatrix::from_fn(labels.len(), classes, |i, c| if labels[i] == c { 1.0 - eps } else { eps }))
}

/// `f⁻¹` applied entrywise.
pub fn preactivation_targets(t: &DMatrix<f64>, activation: ActivationKind) -> Result<DMatrix<f64>> {
    match activation {
        ActivationKind::Identity => Ok(t.clone()),
        ActivationKind::Logistic => {
            if let Some(bad) = t.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
                return Err(CoreError::Numeric(format!("logit undefined for target {bad}")));
            }
            Ok(t.map(|v| (v / (1.0 - v)).ln()))
        }
    }
}

/// `f′` evaluated at the pre-activation targets.
pub fn activation_derivative(dbar: &DMatrix<f64>, activation: ActivationKind) -> DMatrix<f64> {
    match activation {
        ActivationKind::Identity => DMatrix::from_element(dbar.nrows(), dbar.ncols(), 1.0),
        ActivationKind::Logistic => dbar.map(|x| {
            let s = logistic(x);
            s * (1.0 - s)
        }),
    }
}

/// Features × samples design matrix, with a trailing row of ones when
/// `include_bias` is set.
pub fn design_matrix(x: &DMatrix<f64>, include_bias: bool) -> DMatrix<f64> {
    let (m, n) = x.shape();
    let d = n + usize::from(include_bias);
    DMatrix::from_fn(d, m, |i, j| if i < n { x[(j, i)] } else { 1.0 })
}

/// Left singular pair of a weighted design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
}

impl Factor {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    fn scaled(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        us
    }

    /// `U·diag(1/(s² + λ))·Uᵀ`, the per-class solve operator.
    pub fn solve_operator(&self, lambda: f64) -> DMatrix<f64> {
        let mut left = self.u.clone();
        for (j, mut col) in left.column_iter_mut().enumerate() {
            col /= self.s[j] * self.s[j] + lambda;
        }
        left * self.u.transpose()
    }

    fn apply(&self, lambda: f64, m: &DVector<f64>) -> DVector<f64> {
        let mut proj = self.u.tr_mul(m);
        for (j, p) in proj.iter_mut().enumerate() {
            *p /= self.s[j] * self.s[j] + lambda;
        }
        &self.u * proj
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factors {
    /// One factor for every class; arises when `f′ ≡ 1`.
    Shared(Factor),
    PerClass(Vec<Factor>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Moment {
    Plain(DVector<f64>),
    Encrypted(Ciphertext),
}

impl Moment {
    pub fn is_encrypted(&self) -> bool {
        matches!(self, Moment::Encrypted(_))
    }
}

/// Per-class sufficient statistics; a single client's update and any
/// aggregate of updates share this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Statistics {
    pub dim: usize,
    pub sample_count: u64,
    pub factors: Factors,
    pub moments: Vec<Moment>,
}

pub type AggregatedState = Statistics;

/// Borrowed view of one class's `(U, S, M)` triple.
pub struct ClassUpdate<'a> {
    pub factor: &'a Factor,
    pub moment: &'a Moment,
}

impl Statistics {
    pub fn classes(&self) -> usize {
        self.moments.len()
    }

    pub fn factor(&self, class: usize) -> &Factor {
        match &self.factors {
            Factors::Shared(f) => f,
            Factors::PerClass(fs) => &fs[class],
        }
    }

    pub fn class(&self, class: usize) -> ClassUpdate<'_> {
        ClassUpdate { factor: self.factor(class), moment: &self.moments[class] }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self.factors, Factors::Shared(_))
    }

    pub fn is_encrypted(&self) -> bool {
        self.moments.first().is_some_and(Moment::is_encrypted)
    }

    fn validate(&self) -> Result<()> {
        if self.moments.is_empty() {
            return input("statistics carry no classes");
        }
        let factors: Vec<&Factor> = match &self.factors {
            Factors::Shared(f) => vec![f],
            Factors::PerClass(fs) if fs.len() == self.moments.len() => fs.iter().collect(),
            Factors::PerClass(fs) => {
                return input(format!("{} factors for {} classes", fs.len(), self.moments.len()))
            }
        };
        for f in factors {
            if f.u.nrows() != self.dim || f.u.ncols() != f.s.len() {
                return input(format!(
                    "factor shape {}×{} with {} singular values, expected {} rows",
                    f.u.nrows(),
                    f.u.ncols(),
                    f.s.len(),
                    self.dim
                ));
            }
        }
        let encrypted = self.is_encrypted();
        for m in &self.moments {
            match m {
                Moment::Plain(v) if v.len() != self.dim => {
                    return input(format!("moment of length {} for dimension {}", v.len(), self.dim))
                }
                m if m.is_encrypted() != encrypted => return input("mixed plaintext and encrypted moments"),
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub stats: Statistics,
}

pub fn compute_client_update<R: RngCore>(
    client_id: u32,
    ds: &EmbeddingDataset,
    hp: &HyperParams,
    encryptor: Option<(&EncryptionContext, &mut R)>,
) -> Result<ClientUpdate> {
    Ok(ClientUpdate { client_id, stats: compute_statistics(ds, hp, encryptor)? })
}

pub fn compute_statistics<R: RngCore>(
    ds: &EmbeddingDataset,
    hp: &HyperParams,
    encryptor: Option<(&EncryptionContext, &mut R)>,
) -> Result<Statistics> {
    hp.validate()?;
    ds.validate()?;
    let x = design_matrix(&ds.data, hp.include_bias);
    let eps = match hp.activation {
        ActivationKind::Identity => 0.0,
        ActivationKind::Logistic => hp.epsilon,
    };
    let t = encode_targets(&ds.labels, ds.n_classes, eps)?;
    let dbar = preactivation_targets(&t, hp.activation)?;
    let fprime = activation_derivative(&dbar, hp.activation);
    let (factors, plain_moments) = match hp.activation {
        ActivationKind::Identity => {
            let (u, s) = thin_left_svd(&x)?;
            let moments = (0..ds.n_classes).map(|c| &x * dbar.column(c)).collect();
            (Factors::Shared(Factor { u, s }), moments)
        }
        ActivationKind::Logistic => {
            let mut factors = Vec::with_capacity(ds.n_classes);
            let mut moments = Vec::with_capacity(ds.n_classes);
            for c in 0..ds.n_classes {
                let f = fprime.column(c);
                let mut weighted = x.clone();
                for (j, mut col) in weighted.column_iter_mut().enumerate() {
                    col *= f[j];
                }
                let (u, s) = thin_left_svd(&weighted)?;
                factors.push(Factor { u, s });
                let target = f.component_mul(&f).component_mul(&dbar.column(c));
                moments.push(&x * target);
            }
            (Factors::PerClass(factors), moments)
        }
    };
    let moments = plain_moments.into_iter().map(Moment::Plain).collect();
    let stats = Statistics { dim: x.nrows(), sample_count: ds.len() as u64, factors, moments };
    match encryptor {
        None => Ok(stats),
        Some((ctx, rng)) => encrypt_moments(stats, ctx, rng),
    }
}

/// Replaces plaintext moments by encryptions laid out for `matvec_plain`.
pub fn encrypt_moments<R: RngCore>(stats: Statistics, ctx: &EncryptionContext, rng: &mut R) -> Result<Statistics> {
    let moments = stats
        .moments
        .iter()
        .map(|m| match m {
            Moment::Plain(v) => Ok(Moment::Encrypted(ctx.encrypt_for_matvec(v.as_slice(), rng)?)),
            Moment::Encrypted(_) => input("moments are already encrypted"),
        })
        .collect::<Result<_>>()?;
    Ok(Statistics { moments, ..stats })
}

/// Folds any number of updates or aggregates into one. Encrypted moments are
/// summed homomorphically and need `ctx`.
pub fn aggregate(inputs: &[&Statistics], ctx: Option<&EncryptionContext>) -> Result<Statistics> {
    let first = *inputs.first().ok_or_else(|| CoreError::Input("nothing to aggregate".into()))?;
    for s in inputs {
        s.validate()?;
        if s.dim != first.dim || s.classes() != first.classes() {
            return input(format!(
                "update of dimension {} with {} classes cannot join {} / {}",
                s.dim,
                s.classes(),
                first.dim,
                first.classes()
            ));
        }
        if s.is_encrypted() != first.is_encrypted() {
            return input("mixed plaintext and encrypted updates");
        }
    }
    let classes = first.classes();
    let merge = |pick: &dyn Fn(&Statistics) -> &Factor| -> Result<Factor> {
        let blocks: Vec<DMatrix<f64>> = inputs.iter().map(|s| pick(s).scaled()).collect();
        let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
        let mut b = DMatrix::zeros(first.dim, cols);
        let mut at = 0;
        for blk in &blocks {
            b.columns_mut(at, blk.ncols()).copy_from(blk);
            at += blk.ncols();
        }
        let (u, s) = thin_left_svd(&b)?;
        Ok(Factor { u, s })
    };
    let factors = if inputs.iter().all(|s| s.is_shared()) {
        Factors::Shared(merge(&|s| s.factor(0))?)
    } else {
        Factors::PerClass((0..classes).map(|c| merge(&move |s| s.factor(c))).collect::<Result<_>>()?)
    };
    let moments = (0..classes)
        .map(|c| {
            if first.is_encrypted() {
                let ctx = ctx.ok_or_else(|| CoreError::Input("encrypted aggregation needs a context".into()))?;
                let cts: Vec<Ciphertext> = inputs
                    .iter()
                    .map(|s| match &s.moments[c] {
                        Moment::Encrypted(ct) => ct.clone(),
                        Moment::Plain(_) => unreachable!("representation checked above"),
                    })
                    .collect();
                Ok(Moment::Encrypted(ctx.add_many(&cts)?))
            } else {
                let mut sum = DVector::zeros(first.dim);
                for s in inputs {
                    if let Moment::Plain(v) = &s.moments[c] {
                        sum += v;
                    }
                }
                Ok(Moment::Plain(sum))
            }
        })
        .collect::<Result<_>>()?;
    let sample_count = inputs.iter().map(|s| s.sample_count).sum();
    Ok(Statistics { dim: first.dim, sample_count, factors, moments })
}

/// `d × C` output-layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub w: DMatrix<f64>,
    pub activation: ActivationKind,
    pub include_bias: bool,
}

/// Weight columns still under encryption; only a key holder can open them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedModel {
    pub dim: usize,
    pub columns: Vec<Ciphertext>,
    pub activation: ActivationKind,
    pub include_bias: bool,
}

impl EncryptedModel {
    pub fn decrypt(&self, ctx: &EncryptionContext) -> Result<GlobalModel> {
        let mut w = DMatrix::zeros(self.dim, self.columns.len());
        for (c, ct) in self.columns.iter().enumerate() {
            let slots = ctx.decrypt(ct)?;
            if slots.len() < self.dim {
                return input(format!("ciphertext has {} slots, model needs {}", slots.len(), self.dim));
            }
            w.column_mut(c).copy_from_slice(&slots[..self.dim]);
        }
        Ok(GlobalModel { w, activation: self.activation, include_bias: self.include_bias })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Solution {
    Plain(GlobalModel),
    Encrypted(EncryptedModel),
}

impl Solution {
    /// Plaintext weights, decrypting with `ctx` when needed.
    pub fn into_plain(self, ctx: Option<&EncryptionContext>) -> Result<GlobalModel> {
        match self {
            Solution::Plain(m) => Ok(m),
            Solution::Encrypted(e) => {
                e.decrypt(ctx.ok_or_else(|| CoreError::Input("encrypted model needs a key holder".into()))?)
            }
        }
    }
}

/// `w_c = U·diag(1/(s² + λ))·Uᵀ·M_c`, evaluated homomorphically when the
/// moments are encrypted.
pub fn solve_weights(agg: &Statistics, hp: &HyperParams, ctx: Option<&EncryptionContext>) -> Result<Solution> {
    agg.validate()?;
    let lambda = hp.lambda;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return input(format!("lambda must be finite and >= 0, got {lambda}"));
    }
    if lambda == 0.0 {
        for c in 0..agg.classes() {
            let f = agg.factor(c);
            let smin = f.s.iter().cloned().fold(f64::INFINITY, f64::min);
            if f.rank() < agg.dim || smin <= MIN_SINGULAR {
                return Err(CoreError::Numeric(format!(
                    "singular system for class {c} with lambda = 0: rank {} of {}, smallest singular value {smin:e}",
                    f.rank(),
                    agg.dim
                )));
            }
        }
    }
    let classes = agg.classes();
    if agg.is_encrypted() {
        let ctx = ctx.ok_or_else(|| CoreError::Input("encrypted solve needs an evaluation context".into()))?;
        let row_major = |a: DMatrix<f64>| -> Vec<f64> { a.transpose().as_slice().to_vec() };
        let shared_op = match &agg.factors {
            Factors::Shared(f) => Some(row_major(f.solve_operator(lambda))),
            Factors::PerClass(_) => None,
        };
        let mut columns = Vec::with_capacity(classes);
        for c in 0..classes {
            let op = match &shared_op {
                Some(op) => std::borrow::Cow::Borrowed(op),
                None => std::borrow::Cow::Owned(row_major(agg.factor(c).solve_operator(lambda))),
            };
            let Moment::Encrypted(ct) = &agg.moments[c] else { unreachable!("validated") };
            columns.push(ctx.matvec_plain(&op, agg.dim, ct)?);
        }
        return Ok(Solution::Encrypted(EncryptedModel {
            dim: agg.dim,
            columns,
            activation: hp.activation,
            include_bias: hp.include_bias,
        }));
    }
    let mut w = DMatrix::zeros(agg.dim, classes);
    for c in 0..classes {
        let Moment::Plain(m) = &agg.moments[c] else { unreachable!("validated") };
        w.set_column(c, &agg.factor(c).apply(lambda, m));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("non-finite weights".into()));
    }
    Ok(Solution::Plain(GlobalModel { w, activation: hp.activation, include_bias: hp.include_bias }))
}

impl GlobalModel {
    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn classes(&self) -> usize {
        self.w.ncols()
    }

    /// Pre-activation scores `Xᵀ·W`, one row per sample.
    pub fn raw_scores(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let expected = self.dim() - usize::from(self.include_bias);
        if x.ncols() != expected {
            return input(format!("samples have {} features, model expects {expected}", x.ncols()));
        }
        Ok(design_matrix(x, self.include_bias).tr_mul(&self.w))
    }

    /// Scores after the output activation.
    pub fn scores(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.raw_scores(x)?.map(|v| self.activation.apply(v)))
    }

    /// Argmax class per sample, lowest index on ties.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        let scores = self.raw_scores(x)?;
        Ok(scores.row_iter().map(|r| argmax(r.iter().copied())).collect())
    }
}

pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Single-client solve on the pooled data.
pub fn centralized_fit(ds: &EmbeddingDataset, hp: &HyperParams) -> Result<GlobalModel> {
    let stats = compute_statistics::<rand::rngs::ThreadRng>(ds, hp, None)?;
    solve_weights(&stats, hp, None)?.into_plain(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax([1.0, 1.0].into_iter()), 0);
        assert_eq!(argmax([0.0, 2.0, 2.0].into_iter()), 1);
    }

    #[test]
    fn design_matrix_appends_bias_row() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let d = design_matrix(&x, true);
        assert_eq!(d, DMatrix::from_row_slice(3, 2, &[1.0, 3.0, 2.0, 4.0, 1.0, 1.0]));
    }
}
