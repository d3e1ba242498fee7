//! `run`: a whole experiment in one process, with every byte counted at the
//! transport boundary.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fedhenet_ckks::{keygen, EncryptionContext, HeParams, KeySet, Role};
use fedhenet_core::baselines::{run_baseline_with, Algorithm, BaselineConfig, LinearHead};
use fedhenet_core::data::{load_femb, partition, EmbeddingDataset, PartitionPlan};
use fedhenet_core::metrics::{
    curve_to_csv, entries_to_text, ByteLedger, CurveRow, Direction, LogEntry, MessageLog, PhaseTimes, RunReport,
};
use fedhenet_core::rolann::{accuracy, ActivationKind, GlobalModel, HyperParams};
use fedhenet_core::wire::{encode_weights, Envelope, MsgType};
use fedhenet_federation::counting::CountingTransport;
use fedhenet_federation::mqtt::MqttTransport;
use fedhenet_federation::protocol::{RoundConfig, COORDINATOR_ID};
use fedhenet_federation::simulate::simulate_round;
use fedhenet_federation::transport::{update_topic, LoopbackBroker, Transport};

use crate::config::{Activation, AlgorithmName, ExperimentConfig, TransportKind};
use crate::error::{CliError, Result};

/// Loaded inputs of an experiment.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub train: EmbeddingDataset,
    /// The training set stands in when no test file is configured.
    pub test: EmbeddingDataset,
    pub plan: PartitionPlan,
}

pub struct RunOutput {
    pub report: RunReport,
    pub log: Vec<LogEntry>,
    /// `None` when the process only ever saw ciphertexts.
    pub weights: Option<Weights>,
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Rolann(GlobalModel),
    /// Final head of a baseline run.
    Linear(LinearHead),
}

pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    load_femb(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn prepare(cfg: ExperimentConfig) -> Result<Prepared> {
    let train_path = cfg.data.train.clone().ok_or_else(|| CliError::Config("data.train is not set".into()))?;
    let train = load_dataset(&train_path)?;
    let test = match &cfg.data.test {
        Some(p) => load_dataset(p)?,
        None => train.clone(),
    };
    if test.dim() != train.dim() || test.n_classes != train.n_classes {
        return Err(CliError::Data(format!(
            "test set is {}-dimensional with {} classes, training set {} / {}",
            test.dim(),
            test.n_classes,
            train.dim(),
            train.n_classes
        )));
    }
    let plan = partition(&train, &cfg.partition.spec())?;
    Ok(Prepared { cfg, train, test, plan })
}

pub fn hyper_params(cfg: &ExperimentConfig) -> HyperParams {
    let a = &cfg.algorithm;
    HyperParams {
        lambda: a.lambda,
        epsilon: a.epsilon,
        activation: match a.activation {
            Activation::Logistic => ActivationKind::Logistic,
            Activation::Identity => ActivationKind::Identity,
        },
        include_bias: a.bias,
    }
}

pub fn round_config(cfg: &ExperimentConfig, clients: usize) -> RoundConfig {
    let t = &cfg.transport;
    RoundConfig {
        round_id: t.round_id,
        client_ids: (0..clients as u32).collect(),
        timeout: Duration::from_secs_f64(t.timeout_secs),
        he_enabled: cfg.he.enabled,
        hp: hyper_params(cfg),
        resend_interval: t.resend_secs.map(Duration::from_secs_f64),
    }
}

fn check_capacity(params: &HeParams, dim: usize) -> Result<()> {
    if 2 * dim > params.slot_count() {
        return Err(CliError::Config(format!(
            "ring degree {} holds {} slots; dimension {dim} needs a ring degree of at least {}",
            params.ring_degree,
            params.slot_count(),
            (4 * dim).next_power_of_two()
        )));
    }
    Ok(())
}

/// Client keys from `he.key_file`, or fresh keys from `he.seed`.
pub fn key_holder_keys(cfg: &ExperimentConfig, dim: usize) -> Result<KeySet> {
    let keys = match &cfg.he.key_file {
        Some(path) => {
            let keys = KeySet::load(path)?;
            if keys.secret.is_none() {
                return Err(CliError::Config(format!(
                    "{} has no secret key; clients need the file written by `keygen --out`",
                    path.display()
                )));
            }
            keys
        }
        None => {
            let params = cfg.he.ring_degree.map_or_else(HeParams::default, HeParams::with_ring_degree);
            check_capacity(&params, dim)?;
            keygen(&params, &params.default_rotation_steps(dim), cfg.he.seed)?
        }
    };
    check_capacity(&keys.params, dim)?;
    Ok(keys)
}

/// Evaluation-only keys; a file with a secret key is refused.
pub fn coordinator_keys(path: &Path) -> Result<KeySet> {
    let keys = KeySet::load(path)?;
    if keys.secret.is_some() {
        return Err(CliError::Config(format!(
            "{} contains the secret key; give the coordinator the public file from `keygen --public-out`",
            path.display()
        )));
    }
    Ok(keys)
}

/// Opens a counted endpoint per role.
pub struct Endpoints {
    cfg: ExperimentConfig,
    broker: LoopbackBroker,
    pub ledger: Arc<ByteLedger>,
    pub log: Arc<MessageLog>,
}

impl Endpoints {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            broker: LoopbackBroker::new(),
            ledger: Arc::new(ByteLedger::new()),
            log: Arc::new(MessageLog::new()),
        }
    }

    pub fn connect(&self, role: &str) -> fedhenet_federation::Result<Box<dyn Transport>> {
        let inner: Box<dyn Transport> = match self.cfg.transport.kind {
            TransportKind::Loopback => Box::new(self.broker.connect()),
            TransportKind::Mqtt => {
                let url = self.cfg.transport.broker_url.as_deref().unwrap_or(crate::DEFAULT_BROKER);
                let id = format!("fedhenet-{}-{role}", std::process::id());
                let timeout = Duration::from_secs_f64(self.cfg.transport.timeout_secs);
                Box::new(MqttTransport::connect(url, &id, timeout)?)
            }
        };
        Ok(Box::new(CountingTransport::new(inner, self.ledger.clone(), self.log.clone())))
    }

    /// Log entries in a stable order, independent of thread scheduling.
    pub fn sorted_log(&self) -> Vec<LogEntry> {
        let mut entries = self.log.entries();
        entries.sort_by_key(|e| (e.round, e.direction, e.msg_type, e.sender));
        entries
    }
}

pub fn run_experiment(p: &Prepared) -> Result<RunOutput> {
    match p.cfg.algorithm.name {
        AlgorithmName::Fedhenet => run_fedhenet(p),
        AlgorithmName::Fedavg | AlgorithmName::Fedprox => run_baseline_experiment(p),
    }
}

fn base_report(p: &Prepared, algorithm: &str) -> RunReport {
    let cfg = &p.cfg;
    let scheme = cfg.partition.scheme();
    RunReport {
        run_id: cfg.run_id.clone().unwrap_or_else(|| {
            format!("{}-{algorithm}-{scheme}-k{}", cfg.dataset_name(), cfg.partition.clients)
        }),
        algorithm: algorithm.to_string(),
        dataset: cfg.dataset_name(),
        clients: p.plan.clients(),
        partition: scheme.to_string(),
        config: cfg.echo(),
        ..Default::default()
    }
}

fn run_fedhenet(p: &Prepared) -> Result<RunOutput> {
    let start = Instant::now();
    let cfg = &p.cfg;
    let rc = round_config(cfg, p.plan.clients());
    let dim = rc.hp.input_dim(p.train.dim());
    let (client_ctx, coordinator_ctx) = if cfg.he.enabled {
        let keys = key_holder_keys(cfg, dim)?;
        let client = EncryptionContext::from_keys(&keys, Role::KeyHolder)?;
        let coordinator = EncryptionContext::from_keys(&keys.without_secret(), Role::Coordinator)?;
        (Some(client), Some(coordinator))
    } else {
        (None, None)
    };
    let parts: Vec<EmbeddingDataset> = p.plan.assignments.iter().map(|a| p.train.subset(a)).collect();
    let endpoints = Endpoints::new(cfg);
    let connect = |role: &str| endpoints.connect(role);

    let round_start = Instant::now();
    let outcome =
        simulate_round(&parts, &rc, coordinator_ctx.as_ref(), client_ctx.as_ref(), &connect, cfg.he.seed)?;
    let round_seconds = round_start.elapsed().as_secs_f64();
    let summary = outcome.summary?;
    if let Some(reason) = &summary.abort_reason {
        return Err(CliError::Transport(format!("round aborted: {reason}")));
    }
    let reports = outcome.clients.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
    let model: GlobalModel = reports[0].model.clone();
    let predictions = model.predict(&p.test.data)?;
    let test_accuracy = accuracy(&predictions, &p.test.labels);

    let k = reports.len() as f64;
    let mean = |f: &dyn Fn(&fedhenet_federation::protocol::ClientReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let compute = mean(&|r| r.compute_seconds);
    let encryption = mean(&|r| r.encryption_seconds);
    let slowest = reports.iter().map(|r| r.compute_seconds + r.encryption_seconds).fold(0.0, f64::max);
    let transport = (round_seconds - slowest - summary.aggregate_seconds - summary.solve_seconds).max(0.0);

    let mut report = base_report(p, "fedhenet");
    report.bytes_up = endpoints.ledger.total(Direction::Up);
    report.bytes_down = endpoints.ledger.total(Direction::Down);
    report.test_accuracy = test_accuracy;
    report.inflation_ratio = reports[0].inflation_ratio;
    report.encryption_overhead = cfg.he.enabled.then(|| if compute > 0.0 { encryption / compute } else { 0.0 });
    report.phases = PhaseTimes {
        client_compute: compute,
        encryption,
        aggregate: summary.aggregate_seconds,
        solve: summary.solve_seconds,
        transport,
    };
    report.wall_seconds = start.elapsed().as_secs_f64();
    report.curve = vec![CurveRow {
        round: 1,
        algorithm: "fedhenet".into(),
        alpha: cfg.partition.scheme().alpha_label(),
        accuracy: test_accuracy,
        cum_bytes: report.total_bytes(),
        cum_seconds: report.wall_seconds,
    }];
    if !cfg.output.timing {
        zero_timing(&mut report);
    }
    Ok(RunOutput {
        report,
        log: endpoints.sorted_log(),
        weights: Some(Weights::Rolann(model)),
        predictions,
    })
}

fn run_baseline_experiment(p: &Prepared) -> Result<RunOutput> {
    let start = Instant::now();
    let cfg = &p.cfg;
    let a = &cfg.algorithm;
    let algorithm = match a.name {
        AlgorithmName::Fedprox => Algorithm::FedProx { mu: a.mu },
        _ => Algorithm::FedAvg,
    };
    let bc = BaselineConfig {
        algorithm,
        rounds: a.rounds,
        local_epochs: a.local_epochs,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let endpoints = Endpoints::new(cfg);
    let clients: Vec<Box<dyn Transport>> =
        (0..p.plan.clients()).map(|k| endpoints.connect(&format!("client-{k}"))).collect::<std::result::Result<_, _>>()?;
    let coordinator = endpoints.connect("coordinator")?;
    let mut transport_seconds = 0.0;
    let history = run_baseline_with(
        &p.train,
        &p.test,
        &p.plan,
        &bc,
        cfg.partition.scheme().alpha_label(),
        |round, locals: &[LinearHead], global: &LinearHead| -> Result<u64> {
            let started = Instant::now();
            let round = round as u32;
            let mut sent = 0u64;
            for (k, (head, client)) in locals.iter().zip(&clients).enumerate() {
                let env = Envelope::new(MsgType::Update, round, k as u32, encode_weights(&head.w)).encode();
                client.publish(&update_topic(round, k as u32), &env)?;
                sent += env.len() as u64;
            }
            let env = Envelope::new(MsgType::Model, round, COORDINATOR_ID, encode_weights(&global.w)).encode();
            for k in 0..locals.len() {
                coordinator.publish(&format!("fedhenet/{round}/model/{k}"), &env)?;
                sent += env.len() as u64;
            }
            transport_seconds += started.elapsed().as_secs_f64();
            Ok(sent)
        },
    )?;
    for t in clients.iter().chain(std::iter::once(&coordinator)) {
        t.close()?;
    }
    let head = history.final_head;
    let predictions = head.predict(&p.test.data)?;

    let mut report = base_report(p, algorithm.name());
    report.bytes_up = endpoints.ledger.total(Direction::Up);
    report.bytes_down = endpoints.ledger.total(Direction::Down);
    report.test_accuracy = accuracy(&predictions, &p.test.labels);
    report.wall_seconds = start.elapsed().as_secs_f64();
    report.phases = PhaseTimes {
        client_compute: (report.wall_seconds - transport_seconds).max(0.0),
        transport: transport_seconds,
        ..Default::default()
    };
    report.curve = history.rows;
    if !cfg.output.timing {
        zero_timing(&mut report);
    }
    Ok(RunOutput { report, log: endpoints.sorted_log(), weights: Some(Weights::Linear(head)), predictions })
}

fn zero_timing(report: &mut RunReport) {
    report.phases = PhaseTimes::default();
    report.wall_seconds = 0.0;
    report.encryption_overhead = report.encryption_overhead.map(|_| 0.0);
    for row in &mut report.curve {
        row.cum_seconds = 0.0;
    }
}

/// Writes `report.txt`, `curve.csv` and `messages.log` into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
    };
    write("report.txt", out.report.to_text())?;
    write("curve.csv", curve_to_csv(&out.report.curve))?;
    write("messages.log", entries_to_text(&out.log))?;
    Ok(())
}
