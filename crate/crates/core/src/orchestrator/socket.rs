//! Experiment driver over loopback TCP.
//!
//! Server and clients run as threads in this process and exchange real wire
//! frames. True time is wall-clock time since the run started, so
//! timestamps (and SyncFed weights with `gamma > 0`) differ from the
//! simulated run, while everything seeded (data, lag draws, training) is
//! shared. Configured latency is injected by sleeping; loss applies only to
//! client updates so that sync and control traffic cannot stall the run.

use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::sim::DrawLog;
use super::{
    annotate_lag, Arrival, ClientState, ExperimentError, RunOptions, RunOutput, Strategy, Testbed,
};
use crate::aggregation::ClientUpdate;
use crate::clocksync::{filter_samples, SyncEstimate, SyncSample};
use crate::harness::config::ExperimentConfig;
use crate::learner::ModelParams;
use crate::transport::socket::{read_frame, write_frame, FrameError};
use crate::transport::wire::{encode, Message};
use crate::transport::Link;

const ACCEPT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone, Copy)]
struct WallClock(Instant);

impl WallClock {
    fn secs(self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }

    fn nanos(self) -> i64 {
        self.0.elapsed().as_nanos() as i64
    }

    fn sleep_until(self, t: f64) {
        let now = self.secs();
        if t > now {
            thread::sleep(Duration::from_secs_f64(t - now));
        }
    }
}

fn sleep_secs(d: f64) {
    if d > 0.0 {
        thread::sleep(Duration::from_secs_f64(d));
    }
}

struct ClientResult {
    lags: Vec<(u32, u16, u32)>,
    draws: Vec<u8>,
    sync: Option<SyncEstimate>,
}

fn client_loop(
    mut client: ClientState,
    mut link: Link,
    mut stream: TcpStream,
    wall: WallClock,
    layer_sizes: Vec<usize>,
    n_samples: usize,
) -> Result<ClientResult, ExperimentError> {
    let id = client.client_id;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let t1 = client.clock.read_nanos(wall.nanos())?;
        sleep_secs(link.uplink.sample().unwrap_or(0.0));
        write_frame(&mut stream, &Message::SyncRequest { t1 })?;
        let (t2, t3) = match read_frame(&mut stream)? {
            Message::SyncResponse { t1: echo, t2, t3 } if echo == t1 => (t2, t3),
            other => {
                return Err(ExperimentError::Protocol(format!(
                    "client {id}: expected sync response, got {other:?}"
                )))
            }
        };
        sleep_secs(link.downlink.sample().unwrap_or(0.0));
        let t4 = client.clock.read_nanos(wall.nanos())?;
        samples.push(SyncSample { t1, t2, t3, t4 });
    }
    let sync = filter_samples(&samples);
    match &sync {
        Some(est) => client.clock.step(est.offset, wall.secs())?,
        None => log::warn!("client {id}: no usable sync sample; clock left uncorrected"),
    }
    client.sync = sync;

    let mut draws = DrawLog::new();
    let mut lags = Vec::new();
    loop {
        match read_frame(&mut stream) {
            Ok(Message::GlobalModel { round, params }) => {
                if link.downlink.sample().map(sleep_secs).is_none() {
                    log::debug!("client {id}: global model for round {round} lost");
                    continue;
                }
                if client.last_round().is_some_and(|r| round <= r) {
                    continue;
                }
                let global = ModelParams::from_values(layer_sizes.clone(), params)?;
                let step = client.client_step(round, &global, wall.secs())?;
                draws.step(&step);
                lags.push((round, id, step.lag_rounds));
                wall.sleep_until(step.send_at);
                let Some(delay) = link.uplink.sample() else {
                    log::debug!("client {id}: update for round {round} lost");
                    continue;
                };
                sleep_secs(delay);
                let msg = Message::ClientUpdate {
                    round,
                    client_id: id,
                    generated_at: crate::secs_to_nanos(step.update.generated_at),
                    m_n: step.update.m_n,
                    params: step.update.params.into_values(),
                };
                write_frame(&mut stream, &msg)?;
            }
            Ok(Message::RoundDone { .. }) => {}
            Ok(other) => {
                return Err(ExperimentError::Protocol(format!(
                    "client {id}: unexpected {other:?}"
                )))
            }
            Err(FrameError::Closed) => break,
            Err(e) => return Err(e.into()),
        }
    }
    let mut draws_bytes = draws.finish().into_bytes();
    draws_bytes.extend_from_slice(&id.to_le_bytes());
    Ok(ClientResult {
        lags,
        draws: draws_bytes,
        sync,
    })
}

type Inbound = (usize, Result<Message, FrameError>);

fn spawn_reader(idx: usize, mut stream: TcpStream, tx: Sender<Inbound>) {
    thread::spawn(move || loop {
        let frame = read_frame(&mut stream);
        let stop = frame.is_err();
        if tx.send((idx, frame)).is_err() || stop {
            break;
        }
    });
}

fn accept_one(listener: &TcpListener) -> Result<TcpStream, ExperimentError> {
    let deadline = Instant::now() + ACCEPT_TIMEOUT;
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                return Ok(stream);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() > deadline {
                    return Err(ExperimentError::Protocol("client did not connect".into()));
                }
                thread::sleep(Duration::from_millis(1));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

struct Server {
    writers: Vec<TcpStream>,
    rx: Receiver<Inbound>,
    transcript: Option<Vec<u8>>,
}

impl Server {
    fn record(&mut self, msg: &Message) -> Result<(), ExperimentError> {
        if let Some(t) = self.transcript.as_mut() {
            t.extend_from_slice(&encode(msg)?);
        }
        Ok(())
    }

    fn send(&mut self, idx: usize, msg: &Message) -> Result<(), ExperimentError> {
        self.record(msg)?;
        write_frame(&mut self.writers[idx], msg)?;
        Ok(())
    }

    /// Next inbound frame, or `None` once `deadline` passes.
    fn recv(
        &mut self,
        deadline: Option<Instant>,
    ) -> Result<Option<(usize, Message)>, ExperimentError> {
        let got = match deadline {
            Some(d) => match self
                .rx
                .recv_timeout(d.saturating_duration_since(Instant::now()))
            {
                Ok(v) => v,
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(ExperimentError::Protocol(
                        "all client connections closed".into(),
                    ))
                }
            },
            None => self
                .rx
                .recv()
                .map_err(|_| ExperimentError::Protocol("all client connections closed".into()))?,
        };
        match got {
            (idx, Ok(msg)) => {
                self.record(&msg)?;
                Ok(Some((idx, msg)))
            }
            (idx, Err(FrameError::Closed)) => Err(ExperimentError::Protocol(format!(
                "client {idx} disconnected"
            ))),
            (_, Err(e)) => Err(e.into()),
        }
    }
}

/// Runs one strategy with every message crossing a TCP connection bound at
/// `addr` (use port 0 for an ephemeral port).
pub fn run_experiment_socket(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    addr: impl ToSocketAddrs,
    options: &RunOptions,
) -> Result<RunOutput, ExperimentError> {
    let tb = Testbed::build(cfg, strategy)?;
    let Testbed {
        mut server,
        clients,
        links,
        initial,
        rounds,
        sync_samples,
    } = tb;
    let n = clients.len();
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let wall = WallClock(Instant::now());
    let (tx, rx) = mpsc::channel();

    let mut handles: Vec<JoinHandle<Result<ClientResult, ExperimentError>>> = Vec::with_capacity(n);
    let mut writers = Vec::with_capacity(n);
    for (i, (client, link)) in clients.into_iter().zip(links).enumerate() {
        let layer_sizes = initial.layer_sizes().to_vec();
        handles.push(thread::spawn(move || {
            let stream = TcpStream::connect(local)?;
            stream.set_nodelay(true)?;
            client_loop(client, link, stream, wall, layer_sizes, sync_samples)
        }));
        // Clients connect one at a time, so accept order is client order.
        let stream = accept_one(&listener)?;
        spawn_reader(i, stream.try_clone()?, tx.clone());
        writers.push(stream);
    }
    drop(tx);

    let mut srv = Server {
        writers,
        rx,
        transcript: options.transcript.then(Vec::new),
    };
    let result = serve(&mut srv, &mut server, n, rounds, sync_samples, wall);
    for w in &srv.writers {
        let _ = w.shutdown(std::net::Shutdown::Both);
    }
    let mut client_results = Vec::with_capacity(n);
    let mut client_error = None;
    for h in handles {
        match h.join() {
            Ok(Ok(r)) => client_results.push(r),
            Ok(Err(e)) => {
                client_error.get_or_insert(e);
            }
            Err(_) => {
                client_error
                    .get_or_insert(ExperimentError::Protocol("client thread panicked".into()));
            }
        }
    }
    let (mut records, globals, end_time) = match (result, client_error) {
        (Ok(v), None) => v,
        (Err(e), None) | (Ok(_), Some(e)) => return Err(e),
        // A client failure usually explains the server-side symptom.
        (Err(_), Some(e)) => return Err(e),
    };
    let lags: Vec<(u32, u16, u32)> = client_results
        .iter()
        .flat_map(|r| r.lags.iter().copied())
        .collect();
    for r in &mut records {
        annotate_lag(r, &lags);
    }
    let mut draws = DrawLog::new();
    for r in &client_results {
        draws.raw(&r.draws);
    }
    Ok(RunOutput {
        strategy,
        records,
        initial,
        globals,
        draw_digest: draws.finish(),
        sync: client_results.iter().map(|r| r.sync).collect(),
        transcript: srv.transcript.take(),
        end_time,
    })
}

type Served = (Vec<super::RoundRecord>, Vec<ModelParams>, f64);

fn serve(
    srv: &mut Server,
    server: &mut super::ServerState,
    n: usize,
    rounds: u32,
    sync_samples: usize,
    wall: WallClock,
) -> Result<Served, ExperimentError> {
    let mut answered = vec![0usize; n];
    while answered.iter().any(|&c| c < sync_samples) {
        let Some((idx, msg)) = srv.recv(None)? else {
            unreachable!("no deadline")
        };
        match msg {
            Message::SyncRequest { t1 } => {
                let t2 = server.clock.read_nanos(wall.nanos())?;
                let t3 = server.clock.read_nanos(wall.nanos())?.max(t2);
                srv.send(idx, &Message::SyncResponse { t1, t2, t3 })?;
                answered[idx] += 1;
            }
            other => {
                return Err(ExperimentError::Protocol(format!(
                    "client {idx}: {other:?} during sync"
                )))
            }
        }
    }

    let timeout = Duration::from_secs_f64(server.round_timeout);
    let mut records = Vec::with_capacity(rounds as usize);
    let mut globals = Vec::with_capacity(rounds as usize);
    let mut end_time = wall.secs();
    while server.round < rounds {
        let round = server.round;
        let msg = Message::GlobalModel {
            round,
            params: server.global.values().to_vec(),
        };
        for idx in 0..n {
            srv.send(idx, &msg)?;
        }
        let deadline = Instant::now() + timeout;
        let mut pending: Vec<Arrival> = Vec::with_capacity(n);
        while pending.len() < n {
            let Some((idx, msg)) = srv.recv(Some(deadline))? else {
                break;
            };
            match msg {
                Message::ClientUpdate {
                    round: r,
                    client_id,
                    generated_at,
                    m_n,
                    params,
                } => {
                    if client_id as usize != idx {
                        return Err(ExperimentError::Protocol(format!(
                            "connection {idx} sent an update labelled client {client_id}"
                        )));
                    }
                    if r != round {
                        log::debug!("late update from client {client_id} for round {r} ignored");
                        continue;
                    }
                    if pending.iter().any(|a| a.update.client_id == client_id) {
                        return Err(ExperimentError::Protocol(format!(
                            "duplicate update from client {client_id} in round {round}"
                        )));
                    }
                    let arrived_at = server.clock.read_clock(wall.secs())?;
                    pending.push(Arrival {
                        update: ClientUpdate {
                            client_id,
                            round: r,
                            params: ModelParams::from_values(
                                server.global.layer_sizes().to_vec(),
                                params,
                            )?,
                            generated_at: crate::nanos_to_secs(generated_at),
                            m_n,
                        },
                        arrived_at,
                    });
                }
                other => {
                    return Err(ExperimentError::Protocol(format!(
                        "client {idx}: unexpected {other:?}"
                    )))
                }
            }
        }
        end_time = wall.secs();
        let record = server.server_round(pending, end_time)?;
        records.push(record);
        globals.push(server.global.clone());
        for idx in 0..n {
            srv.send(idx, &Message::RoundDone { round })?;
        }
    }
    Ok((records, globals, end_time))
}
