#![allow(dead_code)]

use std::sync::mpsc::Receiver;
use std::time::Duration;

use fedhenet_ckks::{keygen, EncryptionContext, HeParams, Role};
use fedhenet_core::data::{partition, synth_blobs, EmbeddingDataset, PartitionSpec, Scheme};
use fedhenet_federation::protocol::{ClientReport, CoordinatorSummary, RoundConfig};
use fedhenet_federation::simulate::simulate_round;
use fedhenet_federation::transport::{Message, Transport};
use fedhenet_federation::Result;

/// Runs a round with client noise seeded at 1000; unwraps endpoint errors.
pub fn run_round(
    parts: &[EmbeddingDataset],
    cfg: &RoundConfig,
    coordinator_ctx: Option<&EncryptionContext>,
    client_ctx: Option<&EncryptionContext>,
    connect: &(dyn Fn(&str) -> Box<dyn Transport> + Sync),
) -> (Result<CoordinatorSummary>, Vec<Result<ClientReport>>) {
    let wrapped = |name: &str| Ok(connect(name));
    let out = simulate_round(parts, cfg, coordinator_ctx, client_ctx, &wrapped, 1000).unwrap();
    (out.summary, out.clients)
}

pub fn blobs_split(scheme: Scheme, clients: usize, seed: u64) -> (EmbeddingDataset, Vec<EmbeddingDataset>) {
    let ds = synth_blobs(3, 6, 30, 2.0, seed).unwrap();
    let plan = partition(&ds, &PartitionSpec { scheme, clients, seed }).unwrap();
    let parts = plan.assignments.iter().map(|a| ds.subset(a)).collect();
    (ds, parts)
}

pub fn round(clients: usize) -> RoundConfig {
    let mut cfg = RoundConfig::new(7, (0..clients as u32).collect());
    cfg.timeout = Duration::from_secs(60);
    cfg
}

/// Small-ring CKKS pair: (client, coordinator).
pub fn he_pair(dim: usize, seed: u64) -> (EncryptionContext, EncryptionContext) {
    let params = HeParams::for_dimension(dim);
    let keys = keygen(&params, &params.default_rotation_steps(dim), seed).unwrap();
    let client = EncryptionContext::from_keys(&keys, Role::KeyHolder).unwrap();
    let coordinator = EncryptionContext::from_keys(&keys.without_secret(), Role::Coordinator).unwrap();
    (client, coordinator)
}

pub fn drain(rx: &Receiver<Message>) -> Vec<Message> {
    let mut out = Vec::new();
    while let Ok(m) = rx.recv_timeout(Duration::from_millis(200)) {
        out.push(m);
    }
    out
}

pub fn max_abs_diff(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).abs().max()
}
