//! The `fedhenet` binary end to end on the bundled fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use fedhenet_core::data::{load_femb, partition, PartitionPlan, PartitionSpec, Scheme};
use fedhenet_federation::broker::EmbeddedBroker;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn fedhenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedhenet"))
        .args(args)
        .env_remove("FEDHENET_BROKER_URL")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn config(name: &str) -> String {
    fixtures().join(name).to_string_lossy().into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn field<'a>(report: &'a str, key: &str) -> &'a str {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .unwrap_or_else(|| panic!("report has no {key}"))
}

#[test]
fn repeated_runs_write_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    for algorithm in ["fedhenet", "fedavg"] {
        let dirs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("{algorithm}-{i}"))).collect();
        for d in &dirs {
            let cfg = config(&format!("{algorithm}.toml"));
            ok(&fedhenet(&["run", "-c", &cfg, "--no-timing", "--out", d.to_str().unwrap()]));
        }
        for name in ["curve.csv", "report.txt", "messages.log"] {
            assert_eq!(read(&dirs[0], name), read(&dirs[1], name), "{algorithm} {name}");
        }
    }
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    ok(&fedhenet(&[
        "run", "-c", &config("fedavg.toml"), "--rounds", "2", "--scheme", "iid", "--clients", "4", "--out",
        out.to_str().unwrap(),
    ]));
    let report = read(&out, "report.txt");
    assert_eq!(field(&report, "clients"), "4");
    assert_eq!(field(&report, "partition"), "iid");
    assert_eq!(read(&out, "curve.csv").lines().count(), 3);
}

#[test]
fn bad_config_exits_2_with_a_position() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[data]\ntrain = \"x.femb\"\n\n[partition]\nscheme = \"dirichlet\"\nclients = 0\n").unwrap();
    let out = fedhenet(&["run", "-c", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml:6:"), "{err}");

    std::fs::write(&path, "[algorithm]\nlambda = \"much\"\n").unwrap();
    let out = fedhenet(&["run", "-c", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml:2:"));
}

#[test]
fn missing_data_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.femb");
    let out = fedhenet(&["run", "--train", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.femb"));
}

#[test]
fn keygen_then_encrypted_run_reports_inflation() {
    let tmp = tempfile::tempdir().unwrap();
    let keys = tmp.path().join("keys.fhk");
    ok(&fedhenet(&["keygen", "--dim", "33", "--ring-degree", "256", "--out", keys.to_str().unwrap()]));
    let public = tmp.path().join("keys.pub.fhk");
    assert!(public.exists());

    let (plain, he) = (tmp.path().join("plain"), tmp.path().join("he"));
    let cfg = config("fedhenet.toml");
    ok(&fedhenet(&["run", "-c", &cfg, "--out", plain.to_str().unwrap()]));
    ok(&fedhenet(&["run", "-c", &cfg, "--he", "on", "--key-file", keys.to_str().unwrap(), "--out", he.to_str().unwrap()]));
    let (plain, he) = (read(&plain, "report.txt"), read(&he, "report.txt"));
    let ratio: f64 = field(&he, "he.inflation_ratio").parse().unwrap();
    assert!(ratio > 1.0, "{ratio}");
    assert!(field(&he, "he.encryption_overhead").parse::<f64>().unwrap() >= 0.0);
    assert_eq!(field(&he, "test_accuracy"), field(&plain, "test_accuracy"));

    // Clients refuse the evaluation-only file.
    let out = fedhenet(&["run", "-c", &cfg, "--he", "on", "--key-file", public.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn client_without_a_broker_exits_3_within_the_timeout() {
    let started = Instant::now();
    let out = fedhenet(&[
        "client", "--id", "7", "-c", &config("fedhenet.toml"), "--broker", "mqtt://127.0.0.1:1", "--timeout", "2",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(started.elapsed() < Duration::from_secs(10), "{:?}", started.elapsed());
}

#[test]
fn client_id_outside_the_partition_exits_2() {
    let out = fedhenet(&["client", "--id", "10", "-c", &config("fedhenet.toml"), "--broker", "mqtt://127.0.0.1:1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_recounts_and_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    ok(&fedhenet(&["run", "-c", &config("fedavg.toml"), "--out", dir.to_str().unwrap()]));
    let curve = read(&dir, "curve.csv");
    ok(&fedhenet(&["report", "--dir", dir.to_str().unwrap()]));
    assert_eq!(read(&dir, "curve.csv"), curve);

    let report = read(&dir, "report.txt");
    let up = field(&report, "bytes_up").to_string();
    let tampered = report.replace(&format!("bytes_up = {up}"), &format!("bytes_up = {}", up.parse::<u64>().unwrap() + 1));
    std::fs::write(dir.join("report.txt"), tampered).unwrap();
    assert_eq!(fedhenet(&["report", "--dir", dir.to_str().unwrap()]).status.code(), Some(5));
}

#[test]
fn partition_writes_the_plan_clients_would_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = tmp.path().join("plan.txt");
    ok(&fedhenet(&["partition", "-c", &config("fedhenet.toml"), "--plan-out", plan.to_str().unwrap()]));
    let train = load_femb(fixtures().join("blobs_train.femb")).unwrap();
    let parsed = PartitionPlan::from_text(&std::fs::read_to_string(&plan).unwrap(), &train.labels, train.n_classes).unwrap();
    let spec = PartitionSpec { scheme: Scheme::Dirichlet { alpha: 0.1 }, clients: 10, seed: 0 };
    assert_eq!(parsed, partition(&train, &spec).unwrap());
}

#[test]
fn deployed_round_over_mqtt_matches_the_in_process_run() {
    let _embedded;
    let broker = match std::env::var("FEDHENET_BROKER_URL") {
        Ok(url) => url,
        Err(_) => match EmbeddedBroker::start() {
            Ok(b) => {
                _embedded = b;
                _embedded.url()
            }
            Err(e) => {
                eprintln!("skipping deployed round: {e}");
                return;
            }
        },
    };
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("deployed");
    let cfg = config("fedhenet.toml");
    let run_id = format!("t{}", std::process::id());
    let common = ["-c", &cfg, "--clients", "3", "--broker", &broker, "--timeout", "60", "--run-id", &run_id];
    let spawn = |extra: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_fedhenet"))
            .args(extra)
            .args(common)
            .args(["--out", out.to_str().unwrap()])
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap()
    };
    let coordinator = spawn(&["coordinator"]);
    std::thread::sleep(Duration::from_millis(500));
    let clients: Vec<_> = (0..3).map(|id| spawn(&["client", "--id", &id.to_string()])).collect();
    for c in clients {
        ok(&c.wait_with_output().unwrap());
    }
    ok(&coordinator.wait_with_output().unwrap());

    let local = tmp.path().join("local");
    ok(&fedhenet(&["run", "-c", &cfg, "--clients", "3", "--out", local.to_str().unwrap()]));
    let local = read(&local, "report.txt");
    let coordinator = read(&out, "report.txt");
    assert_eq!(field(&coordinator, "test_accuracy"), field(&local, "test_accuracy"));
    let up: u64 = (0..3).map(|id| field(&read(&out.join(format!("client-{id}")), "report.txt"), "bytes_up").parse::<u64>().unwrap()).sum();
    assert_eq!(up.to_string(), field(&local, "bytes_up"));
    assert_eq!(field(&coordinator, "bytes_up"), field(&local, "bytes_up"));
    assert_eq!(field(&coordinator, "bytes_down"), field(&local, "bytes_down"));
}
