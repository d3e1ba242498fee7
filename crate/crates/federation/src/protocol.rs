//! The single-round coordinator and client state machines.
//!
//! Clients publish one UPDATE on `fedhenet/<round>/update/<id>` and wait for
//! MODEL or ABORT on `fedhenet/<round>/model`. The coordinator folds updates
//! in declared client order, parking early arrivals. Once every declared
//! client has reported it solves and publishes exactly one MODEL; if the
//! deadline passes first it publishes an ABORT instead.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use fedhenet_ckks::{inflation_ratio, EncryptionContext};
use fedhenet_core::data::EmbeddingDataset;
use fedhenet_core::rolann::{
    aggregate, compute_statistics, encrypt_moments, solve_weights, GlobalModel, HyperParams, Moment, Solution,
    Statistics,
};
use fedhenet_core::wire::{decode_abort, decode_model, decode_update, encode_model, encode_update, Envelope, MsgType};
use rand::RngCore;

use crate::error::{FedError, Result};
use crate::transport::{model_topic, update_filter, update_topic, Message, Transport};

/// Sender id the coordinator stamps on MODEL and ABORT envelopes.
pub const COORDINATOR_ID: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub round_id: u32,
    /// Declared participants; the round needs an update from each.
    pub client_ids: Vec<u32>,
    pub timeout: Duration,
    pub he_enabled: bool,
    pub hp: HyperParams,
    /// Clients republish their UPDATE at this period until a reply arrives.
    pub resend_interval: Option<Duration>,
}

impl RoundConfig {
    pub fn new(round_id: u32, client_ids: Vec<u32>) -> Self {
        Self {
            round_id,
            client_ids,
            timeout: Duration::from_secs(300),
            he_enabled: false,
            hp: HyperParams::default(),
            resend_interval: None,
        }
    }

    pub fn expected_clients(&self) -> usize {
        self.client_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.client_ids.is_empty() {
            return Err(FedError::Protocol("a round needs at least one client".into()));
        }
        let unique: BTreeSet<_> = self.client_ids.iter().collect();
        if unique.len() != self.client_ids.len() {
            return Err(FedError::Protocol("client ids must be distinct".into()));
        }
        if self.client_ids.contains(&COORDINATOR_ID) {
            return Err(FedError::Protocol(format!("client id {COORDINATOR_ID} is reserved")));
        }
        if self.timeout.is_zero() {
            return Err(FedError::Protocol("timeout must be positive".into()));
        }
        if self.resend_interval.is_some_and(|d| d.is_zero()) {
            return Err(FedError::Protocol("resend interval must be positive".into()));
        }
        self.hp.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoordinatorPhase {
    WaitingForUpdates(BTreeSet<u32>),
    Aggregating,
    Published,
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientPhase {
    Idle,
    UpdateSent,
    ModelReceived(GlobalModel),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorSummary {
    pub round_id: u32,
    /// Accepted senders in arrival order.
    pub received: Vec<u32>,
    pub duplicates: usize,
    /// Malformed, foreign or mismatched messages that were dropped.
    pub ignored: usize,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub aggregate_seconds: f64,
    pub solve_seconds: f64,
    pub wall_seconds: f64,
    /// The published model; `None` when the round aborted.
    pub model: Option<Solution>,
    pub abort_reason: Option<String>,
}

impl CoordinatorSummary {
    pub fn succeeded(&self) -> bool {
        self.abort_reason.is_none()
    }
}

pub struct Coordinator<'a> {
    cfg: &'a RoundConfig,
    ctx: Option<&'a EncryptionContext>,
    transport: &'a dyn Transport,
    inbox: Receiver<Message>,
    phase: CoordinatorPhase,
}

impl<'a> Coordinator<'a> {
    /// Checks the configuration and subscribes; updates published after this
    /// returns are not missed.
    pub fn new(cfg: &'a RoundConfig, ctx: Option<&'a EncryptionContext>, transport: &'a dyn Transport) -> Result<Self> {
        cfg.validate()?;
        if cfg.he_enabled {
            match ctx {
                None => return Err(FedError::Protocol("HE is enabled but no evaluation keys were given".into())),
                Some(c) if c.can_decrypt() => {
                    return Err(FedError::Protocol("coordinator context must not hold a secret key".into()))
                }
                Some(_) => {}
            }
        }
        let inbox = transport.subscribe(&update_filter(cfg.round_id))?;
        Ok(Self { cfg, ctx, transport, inbox, phase: CoordinatorPhase::WaitingForUpdates(BTreeSet::new()) })
    }

    pub fn phase(&self) -> &CoordinatorPhase {
        &self.phase
    }

    pub fn run(&mut self) -> Result<CoordinatorSummary> {
        let received_set = match &self.phase {
            CoordinatorPhase::WaitingForUpdates(r) if r.is_empty() => r.clone(),
            _ => return Err(FedError::Protocol(format!("round {} already ran", self.cfg.round_id))),
        };
        let start = Instant::now();
        let deadline = start + self.cfg.timeout;
        let ctx = if self.cfg.he_enabled { self.ctx } else { None };
        let mut summary = CoordinatorSummary {
            round_id: self.cfg.round_id,
            received: Vec::new(),
            duplicates: 0,
            ignored: 0,
            bytes_in: 0,
            bytes_out: 0,
            aggregate_seconds: 0.0,
            solve_seconds: 0.0,
            wall_seconds: 0.0,
            model: None,
            abort_reason: None,
        };
        let mut received = received_set;
        let mut partial: Option<Statistics> = None;
        let mut parked: BTreeMap<u32, Statistics> = BTreeMap::new();
        let mut next = 0;
        let mut shape: Option<(usize, usize)> = None;
        let declared: BTreeSet<u32> = self.cfg.client_ids.iter().copied().collect();

        while received.len() < declared.len() {
            let now = Instant::now();
            let msg = match self.inbox.recv_timeout(deadline.saturating_duration_since(now)) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => {
                    let missing: Vec<String> = declared.difference(&received).map(|c| c.to_string()).collect();
                    let reason = format!("timeout: no update from client(s) {}", missing.join(", "));
                    self.abort(&reason, &mut summary)?;
                    summary.wall_seconds = start.elapsed().as_secs_f64();
                    return Ok(summary);
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(FedError::Transport("inbound queue closed".into()));
                }
            };
            summary.bytes_in += msg.payload.len() as u64;
            let env = match Envelope::decode(&msg.payload) {
                Ok(e) => e,
                Err(e) => {
                    log::warn!("dropping malformed message on {}: {e}", msg.topic);
                    summary.ignored += 1;
                    continue;
                }
            };
            if env.msg_type != MsgType::Update || env.round != self.cfg.round_id || !declared.contains(&env.sender) {
                log::warn!("dropping {} for round {} from {}", env.msg_type.name(), env.round, env.sender);
                summary.ignored += 1;
                continue;
            }
            if received.contains(&env.sender) {
                log::debug!("duplicate update from client {}", env.sender);
                summary.duplicates += 1;
                continue;
            }
            let t = Instant::now();
            let checked = decode_update(&env.payload, ctx.map(|c| c.params()))
                .map_err(FedError::from)
                .and_then(|u| self.check_update(&u, shape).map(|_| u));
            summary.aggregate_seconds += t.elapsed().as_secs_f64();
            let update = match checked {
                Ok(u) => u,
                Err(e) => {
                    log::warn!("rejecting update from client {}: {e}", env.sender);
                    summary.ignored += 1;
                    continue;
                }
            };
            shape = Some((update.dim, update.classes()));
            received.insert(env.sender);
            summary.received.push(env.sender);
            parked.insert(env.sender, update);
            self.phase = CoordinatorPhase::WaitingForUpdates(received.clone());

            // Folding in declared order keeps W independent of arrival order
            // down to the last bit.
            let t = Instant::now();
            while let Some(u) = self.cfg.client_ids.get(next).and_then(|id| parked.remove(id)) {
                partial = Some(match partial.take() {
                    None => u,
                    Some(p) => match aggregate(&[&p, &u], ctx) {
                        Ok(s) => s,
                        Err(e) => {
                            self.abort(&format!("aggregation failed: {e}"), &mut summary)?;
                            return Err(e.into());
                        }
                    },
                });
                next += 1;
            }
            summary.aggregate_seconds += t.elapsed().as_secs_f64();
        }

        self.phase = CoordinatorPhase::Aggregating;
        let agg = partial.expect("every declared update was folded");
        let t = Instant::now();
        let solved = solve_weights(&agg, &self.cfg.hp, ctx);
        summary.solve_seconds = t.elapsed().as_secs_f64();
        let solution = match solved {
            Ok(s) => s,
            Err(e) => {
                self.abort(&format!("solve failed: {e}"), &mut summary)?;
                return Err(e.into());
            }
        };
        let env = Envelope::new(MsgType::Model, self.cfg.round_id, COORDINATOR_ID, encode_model(&solution)).encode();
        self.transport.publish(&model_topic(self.cfg.round_id), &env)?;
        summary.bytes_out += env.len() as u64;
        self.phase = CoordinatorPhase::Published;
        summary.model = Some(solution);
        summary.wall_seconds = start.elapsed().as_secs_f64();
        Ok(summary)
    }

    fn check_update(&self, u: &Statistics, shape: Option<(usize, usize)>) -> Result<()> {
        if u.is_encrypted() != self.cfg.he_enabled {
            return Err(FedError::Protocol(format!(
                "update encryption ({}) does not match the round ({})",
                u.is_encrypted(),
                self.cfg.he_enabled
            )));
        }
        if let Some((dim, classes)) = shape {
            if (u.dim, u.classes()) != (dim, classes) {
                return Err(FedError::Protocol(format!(
                    "update is {}×{}, earlier updates are {dim}×{classes}",
                    u.dim,
                    u.classes()
                )));
            }
        }
        Ok(())
    }

    fn abort(&mut self, reason: &str, summary: &mut CoordinatorSummary) -> Result<()> {
        log::warn!("aborting round {}: {reason}", self.cfg.round_id);
        let env = Envelope::new(MsgType::Abort, self.cfg.round_id, COORDINATOR_ID, reason.as_bytes().to_vec()).encode();
        self.phase = CoordinatorPhase::Aborted(reason.to_string());
        summary.abort_reason = Some(reason.to_string());
        self.transport.publish(&model_topic(self.cfg.round_id), &env)?;
        summary.bytes_out += env.len() as u64;
        Ok(())
    }
}

pub fn coordinator_run(
    cfg: &RoundConfig,
    ctx: Option<&EncryptionContext>,
    transport: &dyn Transport,
) -> Result<CoordinatorSummary> {
    Coordinator::new(cfg, ctx, transport)?.run()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub model: GlobalModel,
    /// Plaintext statistics time.
    pub compute_seconds: f64,
    pub encryption_seconds: f64,
    pub decryption_seconds: f64,
    /// Envelope size of one UPDATE.
    pub update_bytes: u64,
    pub publishes: usize,
    pub wall_seconds: f64,
    /// Ciphertext bytes over plaintext bytes for one moment.
    pub inflation_ratio: Option<f64>,
}

pub struct Client<'a> {
    id: u32,
    cfg: &'a RoundConfig,
    ctx: Option<&'a EncryptionContext>,
    transport: &'a dyn Transport,
    inbox: Receiver<Message>,
    phase: ClientPhase,
}

impl<'a> Client<'a> {
    pub fn new(
        id: u32,
        cfg: &'a RoundConfig,
        ctx: Option<&'a EncryptionContext>,
        transport: &'a dyn Transport,
    ) -> Result<Self> {
        cfg.validate()?;
        if !cfg.client_ids.contains(&id) {
            return Err(FedError::Protocol(format!("client {id} is not declared for round {}", cfg.round_id)));
        }
        if cfg.he_enabled && !ctx.is_some_and(EncryptionContext::can_decrypt) {
            return Err(FedError::Protocol("HE is enabled but the client holds no secret key".into()));
        }
        let inbox = transport.subscribe(&model_topic(cfg.round_id))?;
        Ok(Self { id, cfg, ctx, transport, inbox, phase: ClientPhase::Idle })
    }

    pub fn phase(&self) -> &ClientPhase {
        &self.phase
    }

    pub fn run<R: RngCore>(&mut self, ds: &EmbeddingDataset, rng: &mut R) -> Result<ClientReport> {
        if self.phase != ClientPhase::Idle {
            return Err(FedError::Protocol(format!("client {} already ran", self.id)));
        }
        let result = self.run_inner(ds, rng);
        if let Err(e) = &result {
            self.phase = ClientPhase::Failed(e.to_string());
        }
        result
    }

    fn run_inner<R: RngCore>(&mut self, ds: &EmbeddingDataset, rng: &mut R) -> Result<ClientReport> {
        let start = Instant::now();
        let deadline = start + self.cfg.timeout;
        let stats = compute_statistics::<R>(ds, &self.cfg.hp, None)?;
        let compute_seconds = start.elapsed().as_secs_f64();

        let t = Instant::now();
        let ctx = if self.cfg.he_enabled { self.ctx } else { None };
        let stats = match ctx {
            Some(c) => encrypt_moments(stats, c, rng)?,
            None => stats,
        };
        let encryption_seconds = t.elapsed().as_secs_f64();
        let inflation = match &stats.moments[0] {
            Moment::Encrypted(ct) => Some(inflation_ratio(ct, stats.dim)),
            Moment::Plain(_) => None,
        };
        let expected = (stats.dim, stats.classes());

        let env = Envelope::new(MsgType::Update, self.cfg.round_id, self.id, encode_update(&stats)).encode();
        drop(stats);
        let topic = update_topic(self.cfg.round_id, self.id);
        self.transport.publish(&topic, &env)?;
        let mut publishes = 1;
        self.phase = ClientPhase::UpdateSent;
        let mut next_resend = self.cfg.resend_interval.map(|d| Instant::now() + d);

        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err(FedError::Timeout(format!(
                    "client {}: no model for round {} within {:?}",
                    self.id, self.cfg.round_id, self.cfg.timeout
                )));
            }
            if let Some(at) = next_resend {
                if now >= at {
                    self.transport.publish(&topic, &env)?;
                    publishes += 1;
                    next_resend = self.cfg.resend_interval.map(|d| now + d);
                }
            }
            let wake = next_resend.map_or(deadline, |at| at.min(deadline));
            let msg = match self.inbox.recv_timeout(wake.saturating_duration_since(now)) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(FedError::Transport("model subscription closed".into()));
                }
            };
            let reply = match Envelope::decode(&msg.payload) {
                Ok(e) if e.round == self.cfg.round_id && e.sender == COORDINATOR_ID => e,
                Ok(e) => {
                    log::debug!("client {}: ignoring {} for round {}", self.id, e.msg_type.name(), e.round);
                    continue;
                }
                Err(e) => {
                    log::warn!("client {}: dropping malformed message: {e}", self.id);
                    continue;
                }
            };
            match reply.msg_type {
                MsgType::Abort => return Err(FedError::Aborted(decode_abort(&reply.payload))),
                MsgType::Update => continue,
                MsgType::Model => {
                    let t = Instant::now();
                    let model = decode_model(&reply.payload, ctx.map(|c| c.params()))?.into_plain(ctx)?;
                    let decryption_seconds = t.elapsed().as_secs_f64();
                    if (model.dim(), model.classes()) != expected {
                        return Err(FedError::Protocol(format!(
                            "model is {}×{}, expected {}×{}",
                            model.dim(),
                            model.classes(),
                            expected.0,
                            expected.1
                        )));
                    }
                    self.phase = ClientPhase::ModelReceived(model.clone());
                    return Ok(ClientReport {
                        model,
                        compute_seconds,
                        encryption_seconds,
                        decryption_seconds,
                        update_bytes: env.len() as u64,
                        publishes,
                        wall_seconds: start.elapsed().as_secs_f64(),
                        inflation_ratio: inflation,
                    });
                }
            }
        }
    }
}

pub fn client_run<R: RngCore>(
    id: u32,
    ds: &EmbeddingDataset,
    cfg: &RoundConfig,
    ctx: Option<&EncryptionContext>,
    transport: &dyn Transport,
    rng: &mut R,
) -> Result<ClientReport> {
    Client::new(id, cfg, ctx, transport)?.run(ds, rng)
}
