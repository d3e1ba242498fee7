use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedhenet_ckks::{keygen, HeParams};
use fedhenet_cli::config::{Activation, AlgorithmName, ExperimentConfig, LoadedConfig, SchemeName, TransportKind};
use fedhenet_cli::experiment::{load_dataset, prepare, run_experiment, write_outputs};
use fedhenet_cli::roles::{run_client, run_coordinator, write_client_outputs};
use fedhenet_cli::{CliError, Result};
use fedhenet_core::data::{partition, save_femb, synth_blobs};
use fedhenet_core::metrics::{curve_to_csv, entries_from_text, load_report, recount};

#[derive(Parser)]
#[command(name = "fedhenet", version, about = "Federated closed-form training over CKKS-encrypted statistics")]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a whole experiment in-process and write its report.
    Run(Overrides),
    /// Serve one round as coordinator over MQTT.
    Coordinator(Overrides),
    /// Take part in one round as client `--id` over MQTT.
    Client {
        #[arg(long)]
        id: u32,
        /// Partition plan written by `fedhenet partition`.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write the partition plan for the configured training set.
    Partition {
        #[command(flatten)]
        overrides: Overrides,
        /// Output file; stdout when omitted.
        #[arg(long = "plan-out")]
        plan_out: Option<PathBuf>,
    },
    /// Generate a key set: the full file for clients and a public one for the coordinator.
    Keygen {
        /// Model input dimension (features plus one with bias).
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        ring_degree: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "keys.fhk")]
        out: PathBuf,
        #[arg(long)]
        public_out: Option<PathBuf>,
    },
    /// Recount a run's bytes from messages.log, check report.txt and rewrite curve.csv.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Write a synthetic Gaussian-blob dataset as a train/test FEMB pair.
    Synth {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 200)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmName>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    activation: Option<Activation>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeName>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    /// Seeds the partition, baseline training and HE key generation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_switch)]
    he: Option<bool>,
    #[arg(long)]
    key_file: Option<PathBuf>,
    #[arg(long)]
    public_key_file: Option<PathBuf>,
    /// MQTT broker URL; selects the MQTT transport for `run`.
    #[arg(long)]
    broker: Option<String>,
    /// Round and connection timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Zero every time column so repeated runs give identical files.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    run_id: Option<String>,
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got `{s}`")),
    }
}

impl Overrides {
    /// Config file, then environment, then flags.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut loaded = match &self.config {
            Some(path) => LoadedConfig::load(path)?,
            None => LoadedConfig::defaults(),
        };
        let c = &mut loaded.config;
        c.apply_env();
        set(&mut c.data.train, self.train.clone().map(Some));
        set(&mut c.data.test, self.test.clone().map(Some));
        set(&mut c.algorithm.name, self.algorithm);
        set(&mut c.algorithm.rounds, self.rounds);
        set(&mut c.algorithm.lambda, self.lambda);
        set(&mut c.algorithm.activation, self.activation);
        set(&mut c.partition.scheme, self.scheme);
        set(&mut c.partition.alpha, self.alpha.map(Some));
        set(&mut c.partition.clients, self.clients);
        if let Some(seed) = self.seed {
            c.partition.seed = seed;
            c.algorithm.seed = seed;
            c.he.seed = seed;
        }
        set(&mut c.he.enabled, self.he);
        set(&mut c.he.key_file, self.key_file.clone().map(Some));
        set(&mut c.he.public_key_file, self.public_key_file.clone().map(Some));
        if let Some(url) = &self.broker {
            c.transport.broker_url = Some(url.clone());
            c.transport.kind = TransportKind::Mqtt;
        }
        set(&mut c.transport.timeout_secs, self.timeout);
        set(&mut c.output.dir, self.out.clone());
        if self.no_timing {
            c.output.timing = false;
        }
        set(&mut c.run_id, self.run_id.clone().map(Some));
        loaded.validate()?;
        Ok(loaded.config)
    }

    /// As [`Overrides::resolve`], for the roles that always speak MQTT.
    fn resolve_deployed(&self) -> Result<ExperimentConfig> {
        let mut o = self.clone();
        // Validation requires a broker for MQTT; fill in the default first.
        if o.broker.is_none() && std::env::var(fedhenet_cli::config::BROKER_ENV).map_or(true, |v| v.is_empty()) {
            o.broker = Some(configured_broker(&o)?.unwrap_or_else(|| fedhenet_cli::DEFAULT_BROKER.into()));
        }
        o.resolve()
    }
}

fn configured_broker(o: &Overrides) -> Result<Option<String>> {
    Ok(match &o.config {
        Some(path) => LoadedConfig::load(path)?.config.transport.broker_url,
        None => None,
    })
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedhenet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(o) => {
            let cfg = o.resolve()?;
            let dir = cfg.output.dir.clone();
            let out = run_experiment(&prepare(cfg)?)?;
            write_outputs(&out, &dir)?;
            summarize(&out.report, &dir);
        }
        Command::Coordinator(o) => {
            let cfg = o.resolve_deployed()?;
            let out = run_coordinator(&cfg)?;
            write_outputs(&out, &cfg.output.dir)?;
            summarize(&out.report, &cfg.output.dir);
        }
        Command::Client { id, plan, overrides } => {
            let cfg = overrides.resolve_deployed()?;
            let out = run_client(&cfg, id, plan.as_deref())?;
            write_client_outputs(&out, &cfg.output.dir, id)?;
            summarize(&out.report, &cfg.output.dir.join(format!("client-{id}")));
        }
        Command::Partition { overrides, plan_out } => {
            let cfg = overrides.resolve()?;
            let train = load_dataset(cfg.data.train.as_deref().expect("validated"))?;
            let text = partition(&train, &cfg.partition.spec())?.to_text();
            match plan_out {
                Some(path) => write_file(&path, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
        Command::Keygen { dim, ring_degree, seed, out, public_out } => {
            let params = ring_degree.map_or_else(HeParams::default, HeParams::with_ring_degree);
            if 2 * dim > params.slot_count() {
                return Err(CliError::Config(format!(
                    "dimension {dim} needs {} slots; ring degree {} has {}",
                    2 * dim,
                    params.ring_degree,
                    params.slot_count()
                )));
            }
            let keys = keygen(&params, &params.default_rotation_steps(dim), seed)?;
            write_file(&out, &keys.to_bytes())?;
            let public_out = public_out.unwrap_or_else(|| public_path(&out));
            write_file(&public_out, &keys.without_secret().to_bytes())?;
            println!("wrote {} (clients) and {} (coordinator)", out.display(), public_out.display());
        }
        Command::Report { dir } => report(&dir)?,
        Command::Synth { classes, dim, train_per_class, test_per_class, separation, seed, train_out, test_out } => {
            // Means are fixed by the class index, so an offset seed gives a
            // fresh test sample from the same distribution.
            let train = synth_blobs(classes, dim, train_per_class, separation, seed)?;
            let test = synth_blobs(classes, dim, test_per_class, separation, seed ^ 0x7E57)?;
            save_femb(&train, &train_out).map_err(|e| CliError::Data(format!("{}: {e}", train_out.display())))?;
            save_femb(&test, &test_out).map_err(|e| CliError::Data(format!("{}: {e}", test_out.display())))?;
        }
    }
    Ok(())
}

fn public_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "keys".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.pub.fhk"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn summarize(report: &fedhenet_core::metrics::RunReport, dir: &Path) {
    println!(
        "{}: accuracy {:.4}, {} bytes up, {} bytes down -> {}",
        report.run_id,
        report.test_accuracy,
        report.bytes_up,
        report.bytes_down,
        dir.display()
    );
}

fn report(dir: &Path) -> Result<()> {
    let report = load_report(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let log_path = dir.join("messages.log");
    let text = std::fs::read_to_string(&log_path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", log_path.display())))?;
    let entries = entries_from_text(&text).map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    let (up, down) = recount(&entries);
    if (up, down) != (report.bytes_up, report.bytes_down) {
        return Err(CliError::Data(format!(
            "messages.log sums to {up} up / {down} down but report.txt states {} / {}",
            report.bytes_up, report.bytes_down
        )));
    }
    write_file(&dir.join("curve.csv"), curve_to_csv(&report.curve).as_bytes())?;
    println!("{}: {} messages, {up} bytes up, {down} bytes down (matches report.txt)", dir.display(), entries.len());
    Ok(())
}
