mod common;

use std::time::Duration;

use common::{blobs_split, drain, he_pair, max_abs_diff, round, run_round};
use fedhenet_ckks::{keygen, EncryptionContext, HeParams, Role};
use fedhenet_core::data::{EmbeddingDataset, Scheme};
use fedhenet_core::rolann::{centralized_fit, compute_statistics, encrypt_moments, GlobalModel, Solution};
use fedhenet_core::wire::{decode_model, encode_update, Envelope, MsgType};
use fedhenet_federation::protocol::{
    coordinator_run, ClientPhase, Coordinator, CoordinatorPhase, RoundConfig, COORDINATOR_ID,
};
use fedhenet_federation::transport::{model_topic, update_topic, LoopbackBroker, Transport};
use fedhenet_federation::FedError;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn loopback() -> (LoopbackBroker, impl Fn(&str) -> Box<dyn Transport> + Sync) {
    let broker = LoopbackBroker::new();
    let b = broker.clone();
    (broker, move |_: &str| Box::new(b.connect()) as Box<dyn Transport>)
}

fn plain_model(summary: &fedhenet_federation::protocol::CoordinatorSummary) -> GlobalModel {
    match summary.model.clone().expect("round published a model") {
        Solution::Plain(m) => m,
        Solution::Encrypted(_) => panic!("expected a plaintext model"),
    }
}

/// Update envelopes for each part, as a client would publish them.
fn update_envelopes(parts: &[EmbeddingDataset], cfg: &RoundConfig) -> Vec<Vec<u8>> {
    parts
        .iter()
        .zip(&cfg.client_ids)
        .map(|(ds, &id)| {
            let s = compute_statistics::<ChaCha20Rng>(ds, &cfg.hp, None).unwrap();
            Envelope::new(MsgType::Update, cfg.round_id, id, encode_update(&s)).encode()
        })
        .collect()
}

#[test]
fn single_client_with_mock_he_equals_centralized() {
    let (ds, parts) = blobs_split(Scheme::Iid, 1, 3);
    let dim = ds.dim() + 1;
    let params = HeParams::for_dimension(dim);
    let steps = params.default_rotation_steps(dim);
    let client = EncryptionContext::mock(params.clone(), &steps, Role::KeyHolder).unwrap();
    let coordinator = EncryptionContext::mock(params, &steps, Role::Coordinator).unwrap();
    let mut cfg = round(1);
    cfg.he_enabled = true;
    let (_b, connect) = loopback();
    let (summary, reports) = run_round(&parts, &cfg, Some(&coordinator), Some(&client), &connect);
    let summary = summary.unwrap();
    assert!(matches!(summary.model, Some(Solution::Encrypted(_))));
    let model = reports.into_iter().next().unwrap().unwrap().model;
    let oracle = centralized_fit(&ds, &cfg.hp).unwrap();
    assert!(max_abs_diff(&model.w, &oracle.w) <= 1e-8);
}

#[test]
fn three_clients_with_ckks_are_within_he_tolerance() {
    let (ds, parts) = blobs_split(Scheme::Dirichlet { alpha: 0.5 }, 3, 11);
    let (client, coordinator) = he_pair(ds.dim() + 1, 5);
    let mut cfg = round(3);
    cfg.he_enabled = true;
    let (_b, connect) = loopback();
    let (summary, reports) = run_round(&parts, &cfg, Some(&coordinator), Some(&client), &connect);
    assert!(summary.unwrap().succeeded());
    let oracle = centralized_fit(&ds, &cfg.hp).unwrap();
    let models: Vec<GlobalModel> = reports.into_iter().map(|r| r.unwrap().model).collect();
    for m in &models {
        assert!(max_abs_diff(&m.w, &oracle.w) <= 1e-2);
        assert_eq!(m.w, models[0].w, "every client decrypts the same broadcast");
    }
}

#[test]
fn identical_datasets_match_duplicated_centralized_fit() {
    let (ds, _) = blobs_split(Scheme::Iid, 1, 8);
    let cfg = round(2);
    let (_b, connect) = loopback();
    let (summary, _) = run_round(&[ds.clone(), ds.clone()], &cfg, None, None, &connect);
    let doubled = EmbeddingDataset::concat(&[&ds, &ds]).unwrap();
    let oracle = centralized_fit(&doubled, &cfg.hp).unwrap();
    assert!(max_abs_diff(&plain_model(&summary.unwrap()).w, &oracle.w) <= 1e-8);
}

#[test]
fn dirichlet_five_clients_plaintext_matches_centralized() {
    let (ds, parts) = blobs_split(Scheme::Dirichlet { alpha: 0.1 }, 5, 21);
    let cfg = round(5);
    let (_b, connect) = loopback();
    let (summary, reports) = run_round(&parts, &cfg, None, None, &connect);
    let summary = summary.unwrap();
    let oracle = centralized_fit(&ds, &cfg.hp).unwrap();
    let w = plain_model(&summary).w;
    assert!(max_abs_diff(&w, &oracle.w) <= 1e-8);
    assert_eq!(summary.received.len(), 5);
    for r in reports {
        assert_eq!(r.unwrap().model.w, w);
    }
}

#[test]
fn missing_client_times_out_with_abort() {
    let (_, parts) = blobs_split(Scheme::Iid, 2, 4);
    let mut cfg = round(2);
    cfg.timeout = Duration::from_secs(1);
    let (broker, connect) = loopback();
    let observer = broker.connect();
    let replies = observer.subscribe(&model_topic(cfg.round_id)).unwrap();
    let (summary, reports) = run_round(&parts[..1], &cfg, None, None, &connect);
    let summary = summary.unwrap();
    assert!(!summary.succeeded());
    assert!(summary.abort_reason.as_deref().unwrap().contains("timeout"));
    assert!(summary.model.is_none());
    assert!(matches!(&reports[0], Err(FedError::Aborted(r)) if r.contains("client(s) 1")));
    let seen = drain(&replies);
    assert_eq!(seen.len(), 1);
    assert_eq!(Envelope::decode(&seen[0].payload).unwrap().msg_type, MsgType::Abort);
}

#[test]
fn client_without_coordinator_times_out() {
    let (_, parts) = blobs_split(Scheme::Iid, 1, 4);
    let mut cfg = round(1);
    cfg.timeout = Duration::from_millis(300);
    let t = LoopbackBroker::new().connect();
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut client = fedhenet_federation::protocol::Client::new(0, &cfg, None, &t).unwrap();
    assert!(matches!(client.run(&parts[0], &mut rng), Err(FedError::Timeout(_))));
    assert!(matches!(client.phase(), ClientPhase::Failed(_)));
    assert!(client.run(&parts[0], &mut rng).is_err());
}

#[test]
fn duplicate_deliveries_leave_the_model_unchanged() {
    let (ds, parts) = blobs_split(Scheme::SingleClass, 3, 6);
    let cfg = round(3);
    let envs = update_envelopes(&parts, &cfg);

    let broker = LoopbackBroker::new();
    let coord_t = broker.connect();
    let pub_t = broker.connect();
    let mut coordinator = Coordinator::new(&cfg, None, &coord_t).unwrap();
    for _ in 0..4 {
        pub_t.publish(&update_topic(7, 0), &envs[0]).unwrap();
    }
    pub_t.publish(&update_topic(7, 2), &envs[2]).unwrap();
    pub_t.publish(&update_topic(7, 2), &envs[2]).unwrap();
    pub_t.publish(&update_topic(7, 1), &envs[1]).unwrap();
    let summary = coordinator.run().unwrap();
    assert_eq!(summary.duplicates, 4);
    assert_eq!(summary.received, vec![0, 2, 1]);

    let (_b, connect) = loopback();
    let (clean, _) = run_round(&parts, &cfg, None, None, &connect);
    assert_eq!(plain_model(&summary).w, plain_model(&clean.unwrap()).w);
    let oracle = centralized_fit(&ds, &cfg.hp).unwrap();
    assert!(max_abs_diff(&plain_model(&summary).w, &oracle.w) <= 1e-8);
}

#[test]
fn client_resends_are_deduplicated() {
    let (ds, parts) = blobs_split(Scheme::Iid, 2, 9);
    let mut cfg = round(2);
    cfg.resend_interval = Some(Duration::from_millis(5));
    let (_b, connect) = loopback();
    let coord_t = connect("coordinator");
    let mut coordinator = Coordinator::new(&cfg, None, coord_t.as_ref()).unwrap();
    let (summary, first) = std::thread::scope(|s| {
        let c0 = s.spawn(|| {
            let t = connect("c0");
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            fedhenet_federation::protocol::client_run(0, &parts[0], &cfg, None, t.as_ref(), &mut rng)
        });
        // Let client 0 repeat itself before client 1 shows up.
        std::thread::sleep(Duration::from_millis(60));
        let c1 = s.spawn(|| {
            let t = connect("c1");
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            fedhenet_federation::protocol::client_run(1, &parts[1], &cfg, None, t.as_ref(), &mut rng)
        });
        let summary = coordinator.run().unwrap();
        let first = c0.join().unwrap().unwrap();
        c1.join().unwrap().unwrap();
        (summary, first)
    });
    assert!(first.publishes > 1);
    assert!(summary.duplicates >= 1);
    let oracle = centralized_fit(&ds, &cfg.hp).unwrap();
    assert!(max_abs_diff(&plain_model(&summary).w, &oracle.w) <= 1e-8);
}

#[test]
fn arrival_order_does_not_change_the_model() {
    let (ds, parts) = blobs_split(Scheme::Dirichlet { alpha: 0.3 }, 4, 13);
    let cfg = round(4);
    let envs = update_envelopes(&parts, &cfg);
    let oracle = centralized_fit(&ds, &cfg.hp).unwrap();
    let orders: [[usize; 4]; 6] =
        [[0, 1, 2, 3], [3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1], [3, 0, 1, 2], [1, 2, 3, 0]];
    let mut reference: Option<GlobalModel> = None;
    for order in orders {
        let broker = LoopbackBroker::new();
        let coord_t = broker.connect();
        let pub_t = broker.connect();
        let replies = pub_t.subscribe(&model_topic(7)).unwrap();
        let mut coordinator = Coordinator::new(&cfg, None, &coord_t).unwrap();
        for &k in &order {
            pub_t.publish(&update_topic(7, k as u32), &envs[k]).unwrap();
        }
        let summary = coordinator.run().unwrap();
        assert_eq!(summary.received, order.iter().map(|&k| k as u32).collect::<Vec<_>>());
        let m = plain_model(&summary);
        assert!(max_abs_diff(&m.w, &oracle.w) <= 1e-8);
        match &reference {
            None => reference = Some(m),
            Some(r) => assert_eq!(r.w, m.w),
        }
        let seen = drain(&replies);
        assert_eq!(seen.len(), 1, "exactly one MODEL per round");
        let env = Envelope::decode(&seen[0].payload).unwrap();
        assert_eq!((env.msg_type, env.round, env.sender), (MsgType::Model, 7, COORDINATOR_ID));
        assert_eq!(decode_model(&env.payload, None).unwrap(), summary.model.clone().unwrap());
        assert!(coordinator.run().is_err(), "a round publishes once");
        assert_eq!(coordinator.phase(), &CoordinatorPhase::Published);
    }
}

#[test]
fn junk_is_ignored() {
    let (ds, parts) = blobs_split(Scheme::Iid, 2, 2);
    let cfg = round(2);
    let envs = update_envelopes(&parts, &cfg);
    let broker = LoopbackBroker::new();
    let coord_t = broker.connect();
    let pub_t = broker.connect();
    let mut coordinator = Coordinator::new(&cfg, None, &coord_t).unwrap();

    pub_t.publish(&update_topic(7, 0), b"not an envelope").unwrap();
    let mut corrupt = envs[0].clone();
    corrupt[40] ^= 0xff;
    pub_t.publish(&update_topic(7, 0), &corrupt).unwrap();
    let stats = compute_statistics::<ChaCha20Rng>(&parts[0], &cfg.hp, None).unwrap();
    let foreign_round = Envelope::new(MsgType::Update, 8, 0, encode_update(&stats)).encode();
    pub_t.publish(&update_topic(7, 0), &foreign_round).unwrap();
    let undeclared = Envelope::new(MsgType::Update, 7, 99, encode_update(&stats)).encode();
    pub_t.publish(&update_topic(7, 99), &undeclared).unwrap();
    let wrong_type = Envelope::new(MsgType::Model, 7, 0, vec![]).encode();
    pub_t.publish(&update_topic(7, 0), &wrong_type).unwrap();
    let bad_payload = Envelope::new(MsgType::Update, 7, 1, vec![1, 2, 3]).encode();
    pub_t.publish(&update_topic(7, 1), &bad_payload).unwrap();
    let mock = EncryptionContext::mock(HeParams::for_dimension(7), &[1, 2, 4], Role::KeyHolder).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let encrypted = encrypt_moments(stats.clone(), &mock, &mut rng).unwrap();
    let mismatch = Envelope::new(MsgType::Update, 7, 0, encode_update(&encrypted)).encode();
    pub_t.publish(&update_topic(7, 0), &mismatch).unwrap();

    for e in &envs {
        pub_t.publish(&update_topic(7, 0), e).unwrap();
    }
    let summary = coordinator.run().unwrap();
    assert_eq!(summary.ignored, 7);
    assert_eq!(summary.received, vec![0, 1]);
    let oracle = centralized_fit(&ds, &cfg.hp).unwrap();
    assert!(max_abs_diff(&plain_model(&summary).w, &oracle.w) <= 1e-8);
}

#[test]
fn coordinator_is_blind() {
    let params = HeParams::for_dimension(7);
    let keys = keygen(&params, &params.default_rotation_steps(7), 1).unwrap();
    assert!(EncryptionContext::from_keys(&keys, Role::Coordinator).is_err());
    let holder = EncryptionContext::from_keys(&keys, Role::KeyHolder).unwrap();
    let blind = EncryptionContext::from_keys(&keys.without_secret(), Role::Coordinator).unwrap();
    assert!(!blind.can_decrypt());
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let ct = holder.encrypt(&[1.0, 2.0], &mut rng).unwrap();
    assert!(blind.decrypt(&ct).is_err());

    let mut cfg = round(1);
    cfg.he_enabled = true;
    let t = LoopbackBroker::new().connect();
    assert!(matches!(Coordinator::new(&cfg, Some(&holder), &t), Err(FedError::Protocol(_))));
    assert!(matches!(coordinator_run(&cfg, None, &t), Err(FedError::Protocol(_))));

    // The blind coordinator only ever sees and publishes ciphertexts.
    let (ds, parts) = blobs_split(Scheme::Iid, 2, 1);
    let (client, coordinator) = he_pair(ds.dim() + 1, 9);
    let mut cfg = round(2);
    cfg.he_enabled = true;
    let (_b, connect) = loopback();
    let (summary, _) = run_round(&parts, &cfg, Some(&coordinator), Some(&client), &connect);
    match summary.unwrap().model.unwrap() {
        Solution::Encrypted(e) => assert!(e.decrypt(&coordinator).is_err()),
        Solution::Plain(_) => panic!("HE round published plaintext weights"),
    }
}

#[test]
fn invalid_round_configs_are_rejected() {
    let t = LoopbackBroker::new().connect();
    for cfg in [
        RoundConfig::new(0, vec![]),
        RoundConfig::new(0, vec![1, 1]),
        RoundConfig::new(0, vec![COORDINATOR_ID]),
        RoundConfig { timeout: Duration::ZERO, ..RoundConfig::new(0, vec![1]) },
    ] {
        assert!(Coordinator::new(&cfg, None, &t).is_err());
    }
    let cfg = RoundConfig::new(0, vec![1]);
    assert!(fedhenet_federation::protocol::Client::new(2, &cfg, None, &t).is_err());
}
