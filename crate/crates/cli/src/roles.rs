//! Deployed roles: one `coordinator` process and one `client --id N`
//! process per party, meeting on an MQTT broker.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use fedhenet_ckks::{EncryptionContext, Role};
use fedhenet_core::data::{partition, EmbeddingDataset, PartitionPlan};
use fedhenet_core::metrics::{ByteLedger, CurveRow, Direction, MessageLog, PhaseTimes, RunReport};
use fedhenet_core::rolann::{accuracy, Solution};
use fedhenet_federation::counting::CountingTransport;
use fedhenet_federation::mqtt::MqttTransport;
use fedhenet_federation::protocol::{client_run, coordinator_run};
use fedhenet_federation::transport::Transport;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::experiment::{
    coordinator_keys, key_holder_keys, load_dataset, round_config, write_outputs, RunOutput, Weights,
};

struct Counted {
    transport: CountingTransport<MqttTransport>,
    ledger: Arc<ByteLedger>,
    log: Arc<MessageLog>,
}

fn connect(cfg: &ExperimentConfig, role: &str) -> Result<Counted> {
    let url = cfg.transport.broker_url.as_deref().unwrap_or(crate::DEFAULT_BROKER);
    let id = cfg.run_id.as_deref().map_or_else(|| format!("fedhenet-{role}"), |run| format!("fedhenet-{run}-{role}"));
    let timeout = Duration::from_secs_f64(cfg.transport.timeout_secs);
    let inner = MqttTransport::connect(url, &id, timeout)?;
    let ledger = Arc::new(ByteLedger::new());
    let log = Arc::new(MessageLog::new());
    Ok(Counted { transport: CountingTransport::new(inner, ledger.clone(), log.clone()), ledger, log })
}

fn sorted(log: &MessageLog) -> Vec<fedhenet_core::metrics::LogEntry> {
    let mut entries = log.entries();
    entries.sort_by_key(|e| (e.round, e.direction, e.msg_type, e.sender));
    entries
}

fn report_base(cfg: &ExperimentConfig, role: &str) -> RunReport {
    RunReport {
        run_id: cfg.run_id.clone().unwrap_or_else(|| format!("{}-fedhenet-{role}", cfg.dataset_name())),
        algorithm: "fedhenet".into(),
        dataset: cfg.dataset_name(),
        clients: cfg.partition.clients,
        partition: cfg.partition.scheme().to_string(),
        config: cfg.echo(),
        ..Default::default()
    }
}

/// Runs one round as coordinator. With HE on it loads only the public
/// evaluation keys; the model it publishes stays encrypted, so accuracy is
/// reported as NaN.
pub fn run_coordinator(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let rc = round_config(cfg, cfg.partition.clients);
    let ctx = if cfg.he.enabled {
        let path = cfg.he.public_key_file.as_deref().ok_or_else(|| {
            CliError::Config("he.public_key_file is required for the coordinator when HE is on".into())
        })?;
        Some(EncryptionContext::from_keys(&coordinator_keys(path)?, Role::Coordinator)?)
    } else {
        None
    };
    let counted = connect(cfg, "coordinator")?;
    let summary = coordinator_run(&rc, ctx.as_ref(), &counted.transport)?;
    counted.transport.close()?;
    if let Some(reason) = &summary.abort_reason {
        return Err(CliError::Transport(format!("round aborted: {reason}")));
    }
    let mut report = report_base(cfg, "coordinator");
    report.bytes_up = summary.bytes_in;
    report.bytes_down = summary.bytes_out;
    report.test_accuracy = f64::NAN;
    let mut weights = None;
    let mut predictions = Vec::new();
    if let Some(Solution::Plain(model)) = &summary.model {
        if let Some(path) = &cfg.data.test {
            let test = load_dataset(path)?;
            predictions = model.predict(&test.data)?;
            report.test_accuracy = accuracy(&predictions, &test.labels);
        }
        weights = Some(Weights::Rolann(model.clone()));
    }
    report.phases =
        PhaseTimes { aggregate: summary.aggregate_seconds, solve: summary.solve_seconds, ..Default::default() };
    report.wall_seconds = start.elapsed().as_secs_f64();
    if !cfg.output.timing {
        report.phases = PhaseTimes::default();
        report.wall_seconds = 0.0;
    }
    log::info!(
        "round {} done: {} updates, {} duplicates, {} ignored",
        summary.round_id,
        summary.received.len(),
        summary.duplicates,
        summary.ignored
    );
    Ok(RunOutput { report, log: sorted(&counted.log), weights, predictions })
}

/// The client's share of the training set: from a saved plan when given,
/// otherwise recomputed from the configured partition.
pub fn client_part(cfg: &ExperimentConfig, train: &EmbeddingDataset, id: u32, plan: Option<&Path>) -> Result<EmbeddingDataset> {
    let plan = match plan {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("cannot read plan {}: {e}", path.display())))?;
            PartitionPlan::from_text(&text, &train.labels, train.n_classes)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        None => partition(train, &cfg.partition.spec())?,
    };
    let k = plan.clients();
    let assignment = plan
        .assignments
        .get(id as usize)
        .ok_or_else(|| CliError::Config(format!("client id {id} is out of range for {k} clients")))?;
    Ok(train.subset(assignment))
}

pub fn run_client(cfg: &ExperimentConfig, id: u32, plan: Option<&Path>) -> Result<RunOutput> {
    let start = Instant::now();
    if id as usize >= cfg.partition.clients {
        return Err(CliError::Config(format!(
            "client id {id} is out of range for {} clients",
            cfg.partition.clients
        )));
    }
    let rc = round_config(cfg, cfg.partition.clients);
    // Keys and the dataset are checked before touching the network.
    let train_path = cfg.data.train.as_deref().ok_or_else(|| CliError::Config("data.train is not set".into()))?;
    let train = load_dataset(train_path)?;
    let part = client_part(cfg, &train, id, plan)?;
    let ctx = if cfg.he.enabled {
        let keys = key_holder_keys(cfg, rc.hp.input_dim(train.dim()))?;
        Some(EncryptionContext::from_keys(&keys, Role::KeyHolder)?)
    } else {
        None
    };
    let counted = connect(cfg, &format!("client-{id}"))?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.he.seed);
    rng.set_stream(id as u64);
    let result = client_run(id, &part, &rc, ctx.as_ref(), &counted.transport, &mut rng);
    counted.transport.close()?;
    let client = result?;

    let test = match &cfg.data.test {
        Some(p) => load_dataset(p)?,
        None => train,
    };
    let predictions = client.model.predict(&test.data)?;
    let mut report = report_base(cfg, &format!("client-{id}"));
    report.bytes_up = counted.ledger.total(Direction::Up);
    report.bytes_down = counted.ledger.total(Direction::Down);
    report.test_accuracy = accuracy(&predictions, &test.labels);
    report.inflation_ratio = client.inflation_ratio;
    report.encryption_overhead = cfg
        .he
        .enabled
        .then(|| if client.compute_seconds > 0.0 { client.encryption_seconds / client.compute_seconds } else { 0.0 });
    report.phases = PhaseTimes {
        client_compute: client.compute_seconds,
        encryption: client.encryption_seconds,
        transport: (client.wall_seconds - client.compute_seconds - client.encryption_seconds).max(0.0),
        ..Default::default()
    };
    report.wall_seconds = start.elapsed().as_secs_f64();
    report.curve = vec![CurveRow {
        round: 1,
        algorithm: "fedhenet".into(),
        alpha: cfg.partition.scheme().alpha_label(),
        accuracy: report.test_accuracy,
        cum_bytes: report.total_bytes(),
        cum_seconds: report.wall_seconds,
    }];
    if !cfg.output.timing {
        report.phases = PhaseTimes::default();
        report.wall_seconds = 0.0;
        report.encryption_overhead = report.encryption_overhead.map(|_| 0.0);
        report.curve[0].cum_seconds = 0.0;
    }
    Ok(RunOutput { report, log: sorted(&counted.log), weights: Some(Weights::Rolann(client.model)), predictions })
}

/// `out/client-N` next to the coordinator's files in `out`.
pub fn write_client_outputs(out: &RunOutput, dir: &Path, id: u32) -> Result<()> {
    write_outputs(out, &dir.join(format!("client-{id}")))
}
