use std::sync::Arc;

use fedhenet_core::metrics::{
    curve_from_csv, curve_to_csv, emit_report, load_report, ByteLedger, CurveRow, Direction, PhaseTimes, RunReport,
    CSV_HEADER,
};
use fedhenet_core::wire::MsgType;

fn row(round: usize, bytes: u64) -> CurveRow {
    CurveRow { round, algorithm: "fedavg".into(), alpha: 0.1, accuracy: 0.5 + round as f64 / 64.0, cum_bytes: bytes, cum_seconds: round as f64 * 0.25 }
}

fn sample_report() -> RunReport {
    RunReport {
        run_id: "blobs-fedhenet".into(),
        algorithm: "fedhenet".into(),
        dataset: "fixtures/blobs_train.femb".into(),
        clients: 10,
        partition: "dirichlet(0.1)".into(),
        config: vec![("lambda".into(), "0.01".into()), ("he".into(), "on".into())],
        bytes_up: 12345,
        bytes_down: 678,
        phases: PhaseTimes { client_compute: 0.5, encryption: 0.125, aggregate: 0.25, solve: 0.0625, transport: 0.01 },
        wall_seconds: 1.5,
        test_accuracy: 0.875,
        inflation_ratio: Some(31.03),
        encryption_overhead: Some(0.04),
        curve: vec![row(1, 13023)],
    }
}

#[test]
fn report_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = sample_report();
    emit_report(&report, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.lines().filter(|l| !l.starts_with('#')).all(|l| l.contains(" = ")));
    assert!(text.contains("energy is not measured"));
    let back = load_report(dir.path()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn report_without_he_fields() {
    let report = RunReport { inflation_ratio: None, encryption_overhead: None, ..sample_report() };
    let back = RunReport::from_text(&report.to_text()).unwrap();
    assert_eq!(back.inflation_ratio, None);
    assert!(RunReport::from_text("run_id = x\n").is_err());
    assert!(RunReport::from_text("garbage line\n").is_err());
}

#[test]
fn csv_roundtrip_and_schema() {
    let rows: Vec<CurveRow> = (1..=10).map(|r| row(r, r as u64 * 1000)).collect();
    let csv = curve_to_csv(&rows);
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(csv.lines().count(), 11);
    assert_eq!(curve_from_csv(&csv).unwrap(), rows);
    assert!(curve_from_csv("round,accuracy\n1,0.5\n").is_err());
    assert!(curve_from_csv(&format!("{CSV_HEADER}\n1,x,0,0,0\n")).is_err());
}

#[test]
fn ledger_accepts_concurrent_increments() {
    let ledger = Arc::new(ByteLedger::new());
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let l = Arc::clone(&ledger);
            std::thread::spawn(move || {
                for i in 0..1000 {
                    l.record(if t % 2 == 0 { Direction::Up } else { Direction::Down }, MsgType::Update, i % 7);
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let per_thread: u64 = (0..1000).map(|i| (i % 7) as u64).sum();
    assert_eq!(ledger.total(Direction::Up), 4 * per_thread);
    assert_eq!(ledger.get(Direction::Down, MsgType::Update).messages, 4000);
}
