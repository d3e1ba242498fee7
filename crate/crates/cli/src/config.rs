//! Experiment configuration: a TOML file with flag overrides on top.
//!
//! ```toml
//! run_id = "blobs-fedhenet"
//!
//! [data]
//! train = "fixtures/blobs_train.femb"   # relative to this file
//! test = "fixtures/blobs_test.femb"
//!
//! [algorithm]
//! name = "fedhenet"          # fedhenet | fedavg | fedprox
//! lambda = 0.01
//! epsilon = 0.05
//! activation = "logistic"    # logistic | identity
//! bias = true
//! rounds = 10                # baselines only, as are the keys below
//! local_epochs = 1
//! learning_rate = 0.01
//! batch_size = 64
//! mu = 0.01                  # fedprox only
//! seed = 0
//!
//! [partition]
//! scheme = "dirichlet"       # iid | dirichlet | single-class
//! alpha = 0.1
//! clients = 10
//! seed = 0
//!
//! [he]
//! enabled = true
//! key_file = "keys.fhk"          # keys with the secret, for clients and `run`
//! public_key_file = "keys.pub.fhk"   # evaluation keys for `coordinator`
//! seed = 0                       # keygen seed when `run` has no key file
//! ring_degree = 8192
//!
//! [transport]
//! kind = "loopback"          # loopback | mqtt
//! broker_url = "mqtt://localhost:1883"
//! timeout_secs = 300
//! resend_secs = 5
//! round_id = 0
//!
//! [output]
//! dir = "out/blobs"
//! timing = true              # false zeroes time columns for reproducible CSVs
//! ```
//!
//! Every key is optional except `data.train`. `FEDHENET_BROKER_URL` replaces
//! `transport.broker_url`; command-line flags win over both.

use std::ops::Range;
use std::path::{Path, PathBuf};

use fedhenet_core::data::{PartitionSpec, Scheme};
use clap::ValueEnum;
use serde::Deserialize;

use crate::error::CliError;

pub const BROKER_ENV: &str = "FEDHENET_BROKER_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmName {
    Fedhenet,
    Fedavg,
    Fedprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Logistic,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    Iid,
    Dirichlet,
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Loopback,
    Mqtt,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Dataset id for reports; defaults to the training file stem.
    pub name: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmSection {
    pub name: AlgorithmName,
    pub lambda: f64,
    pub epsilon: f64,
    pub activation: Activation,
    pub bias: bool,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mu: f64,
    pub seed: u64,
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        Self {
            name: AlgorithmName::Fedhenet,
            lambda: 0.01,
            epsilon: 0.05,
            activation: Activation::Logistic,
            bias: true,
            rounds: 10,
            local_epochs: 1,
            learning_rate: 0.01,
            batch_size: 64,
            mu: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub scheme: SchemeName,
    pub alpha: Option<f64>,
    pub clients: usize,
    pub seed: u64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self { scheme: SchemeName::Iid, alpha: None, clients: 10, seed: 0 }
    }
}

impl PartitionSection {
    /// The partition scheme; call after `validate`.
    pub fn scheme(&self) -> Scheme {
        match self.scheme {
            SchemeName::Iid => Scheme::Iid,
            SchemeName::Dirichlet => Scheme::Dirichlet { alpha: self.alpha.unwrap_or(f64::NAN) },
            SchemeName::SingleClass => Scheme::SingleClass,
        }
    }

    pub fn spec(&self) -> PartitionSpec {
        PartitionSpec { scheme: self.scheme(), clients: self.clients, seed: self.seed }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeSection {
    pub enabled: bool,
    pub key_file: Option<PathBuf>,
    pub public_key_file: Option<PathBuf>,
    pub seed: u64,
    pub ring_degree: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportSection {
    pub kind: TransportKind,
    pub broker_url: Option<String>,
    pub timeout_secs: f64,
    pub resend_secs: Option<f64>,
    pub round_id: u32,
}

impl Default for TransportSection {
    fn default() -> Self {
        Self { kind: TransportKind::Loopback, broker_url: None, timeout_secs: 300.0, resend_secs: None, round_id: 0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), timing: true }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_id: Option<String>,
    pub data: DataSection,
    pub algorithm: AlgorithmSection,
    pub partition: PartitionSection,
    pub he: HeSection,
    pub transport: TransportSection,
    pub output: OutputSection,
}

/// Where a value came from, for error messages.
#[derive(Debug, Clone, Default)]
pub struct Source {
    path: Option<PathBuf>,
    raw: String,
}

impl Source {
    fn position(&self, span: Range<usize>) -> String {
        let before = &self.raw[..span.start.min(self.raw.len())];
        let line = before.matches('\n').count() + 1;
        let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        match &self.path {
            Some(p) => format!("{}:{line}:{col}", p.display()),
            None => format!("line {line}, column {col}"),
        }
    }

    /// Position of `section.key` in the file, if it was written there.
    fn locate(&self, key: &str) -> Option<String> {
        let doc = toml_edit::ImDocument::parse(self.raw.as_str()).ok()?;
        let mut item = doc.as_item();
        for part in key.split('.') {
            item = item.get(part)?;
        }
        let span = item.span().or_else(|| item.as_value().and_then(|v| v.span()))?;
        Some(self.position(span))
    }
}

/// Config plus the text it was parsed from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub source: Source,
}

impl LoadedConfig {
    pub fn parse(raw: &str, path: Option<&Path>) -> Result<Self, CliError> {
        let source = Source { path: path.map(Path::to_path_buf), raw: raw.to_string() };
        let mut config: ExperimentConfig = toml::from_str(raw).map_err(|e| {
            let at = e.span().map(|s| source.position(s)).unwrap_or_else(|| "config".into());
            CliError::Config(format!("{at}: {}", e.message()))
        })?;
        if let Some(dir) = path.and_then(Path::parent) {
            config.resolve_paths(dir);
        }
        Ok(Self { config, source })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&raw, Some(path))
    }

    /// Config built from defaults alone (all settings via flags).
    pub fn defaults() -> Self {
        Self { config: ExperimentConfig::default(), source: Source::default() }
    }

    /// Checks semantic constraints, citing the offending key's position.
    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let fail = |key: &str, msg: String| {
            let at = self.source.locate(key).map(|p| format!("{p}: ")).unwrap_or_default();
            Err(CliError::Config(format!("{at}{key}: {msg}")))
        };
        let a = &c.algorithm;
        if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
            return fail("algorithm.lambda", format!("must be a finite value ≥ 0, got {}", a.lambda));
        }
        if !(a.epsilon > 0.0 && a.epsilon < 0.5) && a.activation == Activation::Logistic {
            return fail("algorithm.epsilon", format!("must lie in (0, 0.5), got {}", a.epsilon));
        }
        if a.name != AlgorithmName::Fedhenet {
            if a.rounds == 0 {
                return fail("algorithm.rounds", "must be at least 1".into());
            }
            if a.local_epochs == 0 {
                return fail("algorithm.local_epochs", "must be at least 1".into());
            }
            if a.batch_size == 0 {
                return fail("algorithm.batch_size", "must be at least 1".into());
            }
            if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
                return fail("algorithm.learning_rate", format!("must be positive, got {}", a.learning_rate));
            }
            if a.name == AlgorithmName::Fedprox && !(a.mu >= 0.0 && a.mu.is_finite()) {
                return fail("algorithm.mu", format!("must be ≥ 0, got {}", a.mu));
            }
        }
        let p = &c.partition;
        if p.clients == 0 {
            return fail("partition.clients", "must be at least 1".into());
        }
        match (p.scheme, p.alpha) {
            (SchemeName::Dirichlet, None) => {
                return fail("partition.alpha", "required when partition.scheme = \"dirichlet\"".into())
            }
            (SchemeName::Dirichlet, Some(alpha)) if !(alpha > 0.0 && alpha.is_finite()) => {
                return fail("partition.alpha", format!("must be positive, got {alpha}"))
            }
            _ => {}
        }
        if let Some(n) = c.he.ring_degree {
            if !n.is_power_of_two() || n < 16 {
                return fail("he.ring_degree", format!("must be a power of two ≥ 16, got {n}"));
            }
        }
        let t = &c.transport;
        if !(t.timeout_secs > 0.0 && t.timeout_secs.is_finite()) {
            return fail("transport.timeout_secs", format!("must be positive, got {}", t.timeout_secs));
        }
        if let Some(r) = t.resend_secs {
            if !(r > 0.0 && r.is_finite()) {
                return fail("transport.resend_secs", format!("must be positive, got {r}"));
            }
        }
        if t.kind == TransportKind::Mqtt && t.broker_url.is_none() {
            return fail(
                "transport.broker_url",
                format!("required for kind = \"mqtt\" (or set {BROKER_ENV})"),
            );
        }
        if c.data.train.is_none() {
            return fail("data.train", "a training FEMB file is required".into());
        }
        Ok(())
    }
}

impl ExperimentConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data.train);
        fix(&mut self.data.test);
        fix(&mut self.he.key_file);
        fix(&mut self.he.public_key_file);
        if self.output.dir.is_relative() {
            self.output.dir = base.join(&self.output.dir);
        }
    }

    /// Applies `FEDHENET_BROKER_URL`; an explicit broker selects MQTT.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(BROKER_ENV) {
            if !url.is_empty() {
                self.transport.broker_url = Some(url);
                self.transport.kind = TransportKind::Mqtt;
            }
        }
    }

    pub fn dataset_name(&self) -> String {
        self.data.name.clone().unwrap_or_else(|| {
            self.data
                .train
                .as_ref()
                .and_then(|p| p.file_stem())
                .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
        })
    }

    /// Flattened `key = value` echo for reports.
    pub fn echo(&self) -> Vec<(String, String)> {
        let a = &self.algorithm;
        let p = &self.partition;
        let mut out = vec![
            ("algorithm.name".into(), format!("{:?}", a.name).to_lowercase()),
            ("partition.scheme".into(), p.scheme().to_string()),
            ("partition.clients".into(), p.clients.to_string()),
            ("partition.seed".into(), p.seed.to_string()),
        ];
        if a.name == AlgorithmName::Fedhenet {
            out.push(("algorithm.lambda".into(), a.lambda.to_string()));
            out.push(("algorithm.epsilon".into(), a.epsilon.to_string()));
            out.push(("algorithm.activation".into(), format!("{:?}", a.activation).to_lowercase()));
            out.push(("algorithm.bias".into(), a.bias.to_string()));
            out.push(("he.enabled".into(), self.he.enabled.to_string()));
        } else {
            out.push(("algorithm.rounds".into(), a.rounds.to_string()));
            out.push(("algorithm.local_epochs".into(), a.local_epochs.to_string()));
            out.push(("algorithm.learning_rate".into(), a.learning_rate.to_string()));
            out.push(("algorithm.batch_size".into(), a.batch_size.to_string()));
            if a.name == AlgorithmName::Fedprox {
                out.push(("algorithm.mu".into(), a.mu.to_string()));
            }
            out.push(("algorithm.seed".into(), a.seed.to_string()));
        }
        out.push(("transport.kind".into(), format!("{:?}", self.transport.kind).to_lowercase()));
        out.push(("output.timing".into(), self.output.timing.to_string()));
        out
    }
}
