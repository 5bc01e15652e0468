//! Message transport: wire codec, simulated network, and socket framing.
//!
//! The simulated network is a single-threaded discrete-event loop. Messages
//! are enqueued with a delivery time drawn from a per-link [`LatencyModel`]
//! and handled in `(time, sequence)` order.

pub mod socket;
pub mod wire;

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::{nanos_to_secs, secs_to_nanos};
pub use wire::Message;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("message scheduled at {at}s, before current simulation time {now}s")]
    Causality { at: f64, now: f64 },
    #[error("invalid latency parameter {field}: {value}")]
    InvalidLatency { field: &'static str, value: f64 },
}

/// One-way delay distribution of a link direction.
#[derive(Debug, Clone)]
pub struct LatencyModel {
    base_delay: f64,
    jitter_stddev: f64,
    drop_probability: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl LatencyModel {
    pub fn new(
        base_delay: f64,
        jitter_stddev: f64,
        drop_probability: f64,
        seed: u64,
    ) -> Result<Self, TransportError> {
        if !(base_delay.is_finite() && base_delay >= 0.0) {
            return Err(TransportError::InvalidLatency {
                field: "base_delay",
                value: base_delay,
            });
        }
        if !(jitter_stddev.is_finite() && jitter_stddev >= 0.0) {
            return Err(TransportError::InvalidLatency {
                field: "jitter_stddev",
                value: jitter_stddev,
            });
        }
        if !(0.0..1.0).contains(&drop_probability) {
            return Err(TransportError::InvalidLatency {
                field: "drop_probability",
                value: drop_probability,
            });
        }
        Ok(Self {
            base_delay,
            jitter_stddev,
            drop_probability,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn ideal(seed: u64) -> Self {
        Self::new(0.0, 0.0, 0.0, seed).expect("zero latency is valid")
    }

    pub fn base_delay(&self) -> f64 {
        self.base_delay
    }

    pub fn jitter_stddev(&self) -> f64 {
        self.jitter_stddev
    }

    pub fn drop_probability(&self) -> f64 {
        self.drop_probability
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Draws one delivery: `None` when the message is dropped, otherwise the
    /// one-way delay in seconds, clamped at zero.
    ///
    /// Both the drop and the jitter draw are taken on every call so the
    /// stream position does not depend on the parameters.
    pub fn sample(&mut self) -> Option<f64> {
        let drop_draw: f64 = self.rng.random();
        let z: f64 = Normal::new(0.0, 1.0)
            .expect("unit normal")
            .sample(&mut self.rng);
        if drop_draw < self.drop_probability {
            return None;
        }
        Some((self.base_delay + self.jitter_stddev * z).max(0.0))
    }
}

/// Both directions of a client-server link.
#[derive(Debug, Clone)]
pub struct Link {
    /// Client to server.
    pub uplink: LatencyModel,
    /// Server to client.
    pub downlink: LatencyModel,
}

impl Link {
    /// Same delay distribution both ways; the downlink gets its own stream.
    pub fn symmetric(model: LatencyModel, downlink_seed: u64) -> Self {
        let downlink = LatencyModel {
            seed: downlink_seed,
            rng: ChaCha8Rng::seed_from_u64(downlink_seed),
            ..model.clone()
        };
        Self {
            uplink: model,
            downlink,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Server,
    Client(u16),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub at_ns: i64,
    pub seq: u64,
    pub dst: NodeId,
    pub msg: Message,
}

impl Event {
    pub fn at(&self) -> f64 {
        nanos_to_secs(self.at_ns)
    }
}

#[derive(Debug)]
struct Entry(Event);

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        (self.0.at_ns, self.0.seq) == (other.0.at_ns, other.0.seq)
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.0.at_ns, self.0.seq).cmp(&(other.0.at_ns, other.0.seq))
    }
}

/// Min-ordered delivery queue with FIFO tie-breaking.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<Entry>>,
    next_seq: u64,
    now_ns: i64,
}

impl EventQueue {
    pub fn new(start: f64) -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now_ns: secs_to_nanos(start),
        }
    }

    pub fn now(&self) -> f64 {
        nanos_to_secs(self.now_ns)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Enqueues `msg` for delivery at `at` seconds.
    pub fn schedule(&mut self, at: f64, dst: NodeId, msg: Message) -> Result<(), TransportError> {
        let at_ns = secs_to_nanos(at);
        if at_ns < self.now_ns {
            return Err(TransportError::Causality {
                at,
                now: self.now(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry(Event {
            at_ns,
            seq,
            dst,
            msg,
        })));
        Ok(())
    }

    /// Moves the clock forward without handling anything.
    pub fn advance_to(&mut self, t: f64) -> Result<(), TransportError> {
        let t_ns = secs_to_nanos(t);
        if t_ns < self.now_ns {
            return Err(TransportError::Causality {
                at: t,
                now: self.now(),
            });
        }
        if let Some(Reverse(Entry(head))) = self.heap.peek() {
            if head.at_ns < t_ns {
                return Err(TransportError::Causality {
                    at: head.at(),
                    now: t,
                });
            }
        }
        self.now_ns = t_ns;
        Ok(())
    }

    pub fn pop(&mut self) -> Option<Event> {
        let Reverse(Entry(ev)) = self.heap.pop()?;
        self.now_ns = ev.at_ns;
        Some(ev)
    }
}

/// Outcome of [`send`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delivery {
    Scheduled { at: f64, delay: f64 },
    Dropped,
}

/// Sends `msg` over `link` at true time `now`.
pub fn send(
    link: &mut LatencyModel,
    queue: &mut EventQueue,
    now: f64,
    dst: NodeId,
    msg: Message,
) -> Result<Delivery, TransportError> {
    if secs_to_nanos(now) < queue.now_ns {
        return Err(TransportError::Causality {
            at: now,
            now: queue.now(),
        });
    }
    match link.sample() {
        None => Ok(Delivery::Dropped),
        Some(delay) => {
            let at = now + delay;
            queue.schedule(at, dst, msg)?;
            Ok(Delivery::Scheduled { at, delay })
        }
    }
}

/// Pops and handles events until the queue is empty; returns the final
/// simulation time. The handler may enqueue further events.
pub fn run_until_idle<E, F>(queue: &mut EventQueue, mut handler: F) -> Result<f64, E>
where
    E: From<TransportError>,
    F: FnMut(&mut EventQueue, Event) -> Result<(), E>,
{
    while let Some(ev) = queue.pop() {
        handler(queue, ev)?;
    }
    Ok(queue.now())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokyo_one_way_delay() {
        let mut link = LatencyModel::new(0.238017 / 2.0, 0.0, 0.0, 1).unwrap();
        let mut q = EventQueue::new(10.0);
        let d = send(
            &mut link,
            &mut q,
            10.0,
            NodeId::Client(2),
            Message::RoundDone { round: 0 },
        )
        .unwrap();
        match d {
            Delivery::Scheduled { at, .. } => assert!((at - 10.1190085).abs() < 1e-12),
            Delivery::Dropped => panic!("dropped"),
        }
    }

    #[test]
    fn certain_drop_enqueues_nothing() {
        // drop_probability must be < 1; the closest representable value always drops
        // for a uniform draw in [0, 1).
        let mut link = LatencyModel::new(0.01, 0.0, 1.0 - f64::EPSILON, 2).unwrap();
        let mut q = EventQueue::new(0.0);
        for _ in 0..100 {
            let d = send(
                &mut link,
                &mut q,
                0.0,
                NodeId::Server,
                Message::RoundDone { round: 0 },
            )
            .unwrap();
            assert_eq!(d, Delivery::Dropped);
        }
        assert!(q.is_empty());
        assert!(LatencyModel::new(0.0, 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn same_instant_is_fifo() {
        let mut link = LatencyModel::ideal(0);
        let mut q = EventQueue::new(0.0);
        for round in 0..5 {
            send(
                &mut link,
                &mut q,
                1.0,
                NodeId::Server,
                Message::RoundDone { round },
            )
            .unwrap();
        }
        let mut seen = Vec::new();
        run_until_idle::<TransportError, _>(&mut q, |_, ev| {
            if let Message::RoundDone { round } = ev.msg {
                seen.push(round);
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_queue_returns_start() {
        let mut q = EventQueue::new(3.5);
        let end = run_until_idle::<TransportError, _>(&mut q, |_, _| Ok(())).unwrap();
        assert_eq!(end, 3.5);
    }

    #[test]
    fn single_event_time() {
        let mut q = EventQueue::new(0.0);
        q.schedule(5.0, NodeId::Server, Message::RoundDone { round: 0 })
            .unwrap();
        assert_eq!(
            run_until_idle::<TransportError, _>(&mut q, |_, _| Ok(())).unwrap(),
            5.0
        );
    }

    #[test]
    fn event_chain() {
        let mut q = EventQueue::new(2.0);
        q.schedule(3.0, NodeId::Server, Message::RoundDone { round: 1 })
            .unwrap();
        let mut calls = 0;
        let end = run_until_idle::<TransportError, _>(&mut q, |q, ev| {
            calls += 1;
            if let Message::RoundDone { round } = ev.msg {
                if round < 3 {
                    q.schedule(
                        ev.at() + 1.0,
                        NodeId::Server,
                        Message::RoundDone { round: round + 1 },
                    )?;
                }
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 3);
        assert_eq!(end, 5.0);
    }

    #[test]
    fn scheduling_in_the_past_is_fatal() {
        let mut q = EventQueue::new(0.0);
        q.schedule(4.0, NodeId::Server, Message::RoundDone { round: 0 })
            .unwrap();
        let err = run_until_idle(&mut q, |q, _| {
            q.schedule(1.0, NodeId::Server, Message::RoundDone { round: 9 })
        })
        .unwrap_err();
        assert!(matches!(err, TransportError::Causality { .. }));
    }

    #[test]
    fn delays_clamped_nonnegative() {
        let mut link = LatencyModel::new(0.001, 0.5, 0.0, 11).unwrap();
        for _ in 0..1000 {
            assert!(link.sample().unwrap() >= 0.0);
        }
    }

    #[test]
    fn schedules_are_reproducible() {
        let draw = |seed| {
            let mut link = LatencyModel::new(0.05, 0.01, 0.1, seed).unwrap();
            (0..50).map(|_| link.sample()).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }
}
