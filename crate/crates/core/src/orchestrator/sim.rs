//! Experiment driver over the simulated network.

use sha2::{Digest, Sha256};

use super::{
    annotate_lag, Arrival, ClientStep, ExperimentError, RoundRecord, RunOutput, Strategy, Testbed,
};
use crate::clocksync::{sync_round, SyncFailure};
use crate::harness::config::ExperimentConfig;
use crate::transport::wire::{encode, Message};
use crate::transport::{send, Delivery, Event, EventQueue, NodeId};

/// Sync attempts per client before it proceeds with an uncorrected clock.
const SYNC_ATTEMPTS: usize = 5;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Capture every delivered frame in delivery order.
    pub transcript: bool,
}

/// Hashes every random draw shared between strategies.
pub(crate) struct DrawLog(Sha256);

impl DrawLog {
    pub(crate) fn new() -> Self {
        Self(Sha256::new())
    }

    pub(crate) fn delivery(&mut self, d: &Delivery) {
        match d {
            Delivery::Scheduled { delay, .. } => {
                self.0.update([1]);
                self.0.update(delay.to_bits().to_le_bytes());
            }
            Delivery::Dropped => self.0.update([0]),
        }
    }

    pub(crate) fn step(&mut self, step: &ClientStep) {
        self.0.update(step.update.client_id.to_le_bytes());
        self.0.update(step.update.round.to_le_bytes());
        self.0.update(step.lag_rounds.to_le_bytes());
        self.0.update(step.extra_delay.to_bits().to_le_bytes());
    }

    pub(crate) fn raw(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub(crate) fn finish(self) -> String {
        self.0
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

struct Run {
    tb: Testbed,
    queue: EventQueue,
    pending: Vec<Arrival>,
    records: Vec<RoundRecord>,
    globals: Vec<crate::learner::ModelParams>,
    lags: Vec<(u32, u16, u32)>,
    draws: DrawLog,
    transcript: Option<Vec<u8>>,
    finished_at: f64,
}

impl Run {
    fn broadcast(&mut self, now: f64) -> Result<(), ExperimentError> {
        let round = self.tb.server.round;
        let msg = Message::GlobalModel {
            round,
            params: self.tb.server.global.values().to_vec(),
        };
        for (i, link) in self.tb.links.iter_mut().enumerate() {
            let d = send(
                &mut link.downlink,
                &mut self.queue,
                now,
                NodeId::Client(i as u16),
                msg.clone(),
            )?;
            self.draws.delivery(&d);
            if d == Delivery::Dropped {
                log::debug!("round {round}: global model to client {i} dropped");
            }
        }
        self.queue.schedule(
            now + self.tb.server.round_timeout,
            NodeId::Server,
            Message::RoundDone { round },
        )?;
        Ok(())
    }

    fn aggregate(&mut self, now: f64) -> Result<(), ExperimentError> {
        let arrivals = std::mem::take(&mut self.pending);
        let mut record = self.tb.server.server_round(arrivals, now)?;
        annotate_lag(&mut record, &self.lags);
        if !record.stragglers.is_empty() {
            log::info!(
                "round {}: stragglers timed out: {:?}",
                record.round,
                record.stragglers
            );
        }
        self.records.push(record);
        self.globals.push(self.tb.server.global.clone());
        self.finished_at = now;
        if self.tb.server.round < self.tb.rounds {
            self.broadcast(now)?;
        }
        Ok(())
    }

    fn handle(&mut self, ev: Event) -> Result<(), ExperimentError> {
        let now = ev.at();
        let self_timer = ev.dst == NodeId::Server && matches!(ev.msg, Message::RoundDone { .. });
        if let (Some(t), false) = (self.transcript.as_mut(), self_timer) {
            t.extend_from_slice(&encode(&ev.msg)?);
        }
        let server_round = self.tb.server.round;
        let done = server_round >= self.tb.rounds;
        match (ev.dst, ev.msg) {
            (NodeId::Client(id), Message::GlobalModel { round, params }) => {
                let client = &mut self.tb.clients[id as usize];
                if client.last_round().is_some_and(|r| round <= r) {
                    log::debug!(
                        "client {id}: ignoring out-of-order global model for round {round}"
                    );
                    return Ok(());
                }
                let global = crate::learner::ModelParams::from_values(
                    self.tb.server.global.layer_sizes().to_vec(),
                    params,
                )?;
                let step = client.client_step(round, &global, now)?;
                self.draws.step(&step);
                self.lags.push((round, id, step.lag_rounds));
                let msg = Message::ClientUpdate {
                    round,
                    client_id: id,
                    generated_at: crate::secs_to_nanos(step.update.generated_at),
                    m_n: step.update.m_n,
                    params: step.update.params.into_values(),
                };
                let d = send(
                    &mut self.tb.links[id as usize].uplink,
                    &mut self.queue,
                    step.send_at,
                    NodeId::Server,
                    msg,
                )?;
                self.draws.delivery(&d);
            }
            (
                NodeId::Server,
                Message::ClientUpdate {
                    round,
                    client_id,
                    generated_at,
                    m_n,
                    params,
                },
            ) => {
                if done || round != server_round {
                    log::debug!("late update from client {client_id} for round {round} ignored");
                    return Ok(());
                }
                if self.pending.iter().any(|a| a.update.client_id == client_id) {
                    return Err(ExperimentError::Protocol(format!(
                        "duplicate update from client {client_id} in round {round}"
                    )));
                }
                let arrived_at = self.tb.server.clock.read_clock(now)?;
                let params = crate::learner::ModelParams::from_values(
                    self.tb.server.global.layer_sizes().to_vec(),
                    params,
                )?;
                self.pending.push(Arrival {
                    update: crate::aggregation::ClientUpdate {
                        client_id,
                        round,
                        params,
                        generated_at: crate::nanos_to_secs(generated_at),
                        m_n,
                    },
                    arrived_at,
                });
                if self.pending.len() == self.tb.clients.len() {
                    self.aggregate(now)?;
                }
            }
            (NodeId::Server, Message::RoundDone { round }) => {
                if !done && round == server_round {
                    self.aggregate(now)?;
                }
            }
            (dst, msg) => {
                return Err(ExperimentError::Protocol(format!(
                    "unexpected {msg:?} at {dst:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Runs one strategy end to end: clock sync for every client, then
/// `cfg.rounds` synchronous rounds.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    options: &RunOptions,
) -> Result<RunOutput, ExperimentError> {
    let mut tb = Testbed::build(cfg, strategy)?;
    let initial = tb.initial.clone();
    let mut draws = DrawLog::new();
    let mut transcript = options.transcript.then(Vec::new);
    let mut sync = Vec::with_capacity(tb.clients.len());
    let mut start = 0.0f64;

    for (i, client) in tb.clients.iter_mut().enumerate() {
        let link = &mut tb.links[i];
        let mut at = 0.0;
        let mut estimate = None;
        for attempt in 0..SYNC_ATTEMPTS {
            match sync_round(
                &client.clock,
                &mut tb.server.clock,
                link,
                at,
                tb.sync_samples,
            ) {
                Ok(outcome) => {
                    for s in &outcome.samples {
                        draws.raw(&s.t1.to_le_bytes());
                        draws.raw(&s.t4.to_le_bytes());
                        if let Some(t) = transcript.as_mut() {
                            t.extend_from_slice(&encode(&Message::SyncRequest { t1: s.t1 })?);
                            t.extend_from_slice(&encode(&Message::SyncResponse {
                                t1: s.t1,
                                t2: s.t2,
                                t3: s.t3,
                            })?);
                        }
                    }
                    log::info!(
                        "client {} ({}): offset {:+.6} s, delay {:.6} s",
                        i,
                        client.name,
                        outcome.estimate.offset,
                        outcome.estimate.round_trip_delay
                    );
                    client.clock = outcome.clock;
                    estimate = Some(outcome.estimate);
                    start = start.max(outcome.finished_at);
                    break;
                }
                Err(SyncFailure::Dropped { at: t, .. })
                | Err(SyncFailure::NoUsableSample { at: t, .. }) => {
                    log::warn!("client {i}: sync attempt {attempt} failed");
                    draws.raw(&[0xff]);
                    at = t;
                    start = start.max(t);
                }
                Err(SyncFailure::NoSamples) => {
                    return Err(ExperimentError::Setting {
                        field: "sync.samples".into(),
                        message: "must be at least 1".into(),
                    })
                }
                Err(SyncFailure::Clock(e)) => return Err(e.into()),
            }
        }
        if estimate.is_none() {
            log::warn!("client {i}: proceeding with an uncorrected clock");
        }
        client.sync = estimate;
        sync.push(estimate);
    }

    let rounds = tb.rounds;
    let mut run = Run {
        tb,
        queue: EventQueue::new(start),
        pending: Vec::new(),
        records: Vec::with_capacity(rounds as usize),
        globals: Vec::with_capacity(rounds as usize),
        lags: Vec::new(),
        draws,
        transcript,
        finished_at: start,
    };
    if rounds > 0 {
        run.broadcast(start)?;
    }
    while let Some(ev) = run.queue.pop() {
        run.handle(ev)?;
        if run.tb.server.round >= rounds {
            break;
        }
    }
    if run.tb.server.round < rounds {
        return Err(ExperimentError::Protocol(format!(
            "event queue drained at round {} of {rounds}",
            run.tb.server.round
        )));
    }
    Ok(RunOutput {
        strategy,
        records: run.records,
        initial,
        globals: run.globals,
        draw_digest: run.draws.finish(),
        sync,
        transcript: run.transcript,
        end_time: run.finished_at,
    })
}
