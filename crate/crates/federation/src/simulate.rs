//! One process hosting the coordinator and every client, each on its own
//! endpoint and thread.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use fedhenet_ckks::EncryptionContext;
use fedhenet_core::data::EmbeddingDataset;

use crate::error::Result;
use crate::protocol::{Client, ClientReport, Coordinator, CoordinatorSummary, RoundConfig};
use crate::transport::Transport;

/// Opens an endpoint for the named role (`coordinator`, `client-<id>`).
pub type Connect<'a> = dyn Fn(&str) -> Result<Box<dyn Transport>> + Sync + 'a;

pub struct RoundOutcome {
    pub summary: Result<CoordinatorSummary>,
    /// One entry per part, in `cfg.client_ids` order.
    pub clients: Vec<Result<ClientReport>>,
}

/// Client `k` holds `parts[k]`, uses id `cfg.client_ids[k]` and draws its
/// encryption noise from ChaCha20 seeded with `seed` on stream `id`. Fewer
/// parts than declared ids leaves the rest silent.
pub fn simulate_round(
    parts: &[EmbeddingDataset],
    cfg: &RoundConfig,
    coordinator_ctx: Option<&EncryptionContext>,
    client_ctx: Option<&EncryptionContext>,
    connect: &Connect<'_>,
    seed: u64,
) -> Result<RoundOutcome> {
    let coord_transport = connect("coordinator")?;
    let mut coordinator = Coordinator::new(cfg, coordinator_ctx, coord_transport.as_ref())?;
    let outcome = std::thread::scope(|s| {
        let coord = s.spawn(move || coordinator.run());
        let clients: Vec<_> = parts
            .iter()
            .zip(&cfg.client_ids)
            .map(|(ds, &id)| {
                s.spawn(move || {
                    let t = connect(&format!("client-{id}"))?;
                    let mut rng = ChaCha20Rng::seed_from_u64(seed);
                    rng.set_stream(id as u64);
                    let out = Client::new(id, cfg, client_ctx, t.as_ref()).and_then(|mut c| c.run(ds, &mut rng));
                    t.close()?;
                    out
                })
            })
            .collect();
        let clients = clients.into_iter().map(|h| h.join().expect("client thread panicked")).collect();
        let summary = coord.join().expect("coordinator thread panicked");
        RoundOutcome { summary, clients }
    });
    coord_transport.close()?;
    Ok(outcome)
}
