//! Simulated physical clocks and NTP-style offset estimation.
//!
//! A [`ClockState`] maps simulation true time to a local reading with a fixed
//! offset, a constant frequency error in ppm, and Gaussian read jitter.
//! [`sync_round`] runs a burst of four-timestamp exchanges over a [`Link`],
//! keeps the lower-delay half, and step-corrects the client clock.
//!
//! Offsets follow the NTP sign convention: `offset = server - client`, i.e.
//! the amount that must be added to the client clock to agree with the server.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::transport::Link;
use crate::{nanos_to_secs, secs_to_nanos};

/// Server-side processing time between receive (t2) and transmit (t3).
const SERVER_TURNAROUND_NS: i64 = 50_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClockError {
    #[error("clock read at true time {requested}s precedes clock epoch {epoch}s")]
    BeforeEpoch { requested: f64, epoch: f64 },
    #[error("invalid clock parameter {field}: {value}")]
    InvalidParameter { field: &'static str, value: f64 },
}

/// A drifting, jittery local clock.
#[derive(Debug, Clone)]
pub struct ClockState {
    base_offset_ns: i64,
    drift_ppm: f64,
    jitter_stddev: f64,
    epoch_true_ns: i64,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl ClockState {
    pub fn new(
        base_offset: f64,
        drift_ppm: f64,
        jitter_stddev: f64,
        epoch_true_time: f64,
        rng_seed: u64,
    ) -> Result<Self, ClockError> {
        if !base_offset.is_finite() {
            return Err(ClockError::InvalidParameter {
                field: "base_offset",
                value: base_offset,
            });
        }
        if !drift_ppm.is_finite() || drift_ppm <= -1e6 {
            return Err(ClockError::InvalidParameter {
                field: "drift_ppm",
                value: drift_ppm,
            });
        }
        if !jitter_stddev.is_finite() || jitter_stddev < 0.0 {
            return Err(ClockError::InvalidParameter {
                field: "jitter_stddev",
                value: jitter_stddev,
            });
        }
        if !epoch_true_time.is_finite() {
            return Err(ClockError::InvalidParameter {
                field: "epoch_true_time",
                value: epoch_true_time,
            });
        }
        Ok(Self {
            base_offset_ns: secs_to_nanos(base_offset),
            drift_ppm,
            jitter_stddev,
            epoch_true_ns: secs_to_nanos(epoch_true_time),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        })
    }

    /// A clock that reads true time exactly.
    pub fn ideal() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0, 0).expect("ideal clock parameters are valid")
    }

    pub fn base_offset(&self) -> f64 {
        nanos_to_secs(self.base_offset_ns)
    }

    pub fn drift_ppm(&self) -> f64 {
        self.drift_ppm
    }

    pub fn jitter_stddev(&self) -> f64 {
        self.jitter_stddev
    }

    pub fn epoch_true_time(&self) -> f64 {
        nanos_to_secs(self.epoch_true_ns)
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Reading at `true_time` in integer nanoseconds.
    pub fn read_nanos(&mut self, true_ns: i64) -> Result<i64, ClockError> {
        if true_ns < self.epoch_true_ns {
            return Err(ClockError::BeforeEpoch {
                requested: nanos_to_secs(true_ns),
                epoch: nanos_to_secs(self.epoch_true_ns),
            });
        }
        let noise = if self.jitter_stddev > 0.0 {
            let normal = Normal::new(0.0, self.jitter_stddev).expect("validated stddev");
            secs_to_nanos(normal.sample(&mut self.rng))
        } else {
            0
        };
        Ok(true_ns + self.base_offset_ns + self.drift_nanos(true_ns) + noise)
    }

    /// Reading at `true_time` in seconds.
    pub fn read_clock(&mut self, true_time: f64) -> Result<f64, ClockError> {
        self.read_nanos(secs_to_nanos(true_time)).map(nanos_to_secs)
    }

    /// Steps the clock by `correction` seconds at `true_time`.
    ///
    /// The drift accumulated since the previous epoch is folded into the base
    /// offset, so readings stay continuous apart from the step. Drift rate is
    /// unchanged.
    pub fn step(&mut self, correction: f64, true_time: f64) -> Result<(), ClockError> {
        let true_ns = secs_to_nanos(true_time);
        if true_ns < self.epoch_true_ns {
            return Err(ClockError::BeforeEpoch {
                requested: true_time,
                epoch: self.epoch_true_time(),
            });
        }
        self.base_offset_ns += self.drift_nanos(true_ns) + secs_to_nanos(correction);
        self.epoch_true_ns = true_ns;
        Ok(())
    }

    fn drift_nanos(&self, true_ns: i64) -> i64 {
        let elapsed = (true_ns - self.epoch_true_ns) as f64;
        (elapsed * self.drift_ppm * 1e-6).round() as i64
    }
}

/// One four-timestamp exchange, all values in integer nanoseconds.
///
/// `t1`/`t4` are client clock readings, `t2`/`t3` server clock readings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncSample {
    pub t1: i64,
    pub t2: i64,
    pub t3: i64,
    pub t4: i64,
}

impl SyncSample {
    pub fn from_secs(t1: f64, t2: f64, t3: f64, t4: f64) -> Self {
        Self {
            t1: secs_to_nanos(t1),
            t2: secs_to_nanos(t2),
            t3: secs_to_nanos(t3),
            t4: secs_to_nanos(t4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncEstimate {
    /// Server minus client, seconds.
    pub offset: f64,
    pub round_trip_delay: f64,
    pub sample_count: usize,
}

/// Offset and round-trip delay of a single exchange.
///
/// A negative delay is returned as computed; [`filter_samples`] drops it.
pub fn estimate_offset_delay(sample: &SyncSample) -> SyncEstimate {
    let SyncSample { t1, t2, t3, t4 } = *sample;
    let twice_offset = (t2 - t1) + (t3 - t4);
    let delay = (t4 - t1) - (t3 - t2);
    SyncEstimate {
        offset: twice_offset as f64 / 2e9,
        round_trip_delay: nanos_to_secs(delay),
        sample_count: 1,
    }
}

/// Keep-best-half filter: drops negative-delay samples, then keeps the
/// `ceil(n / 2)` lowest-delay survivors and averages their offsets and delays.
///
/// Returns `None` when no sample has a nonnegative delay.
pub fn filter_samples(samples: &[SyncSample]) -> Option<SyncEstimate> {
    let mut measured: Vec<SyncEstimate> = samples
        .iter()
        .map(estimate_offset_delay)
        .filter(|e| e.round_trip_delay >= 0.0)
        .collect();
    if measured.is_empty() {
        return None;
    }
    // Stable sort keeps exchange order among equal delays.
    measured.sort_by(|a, b| a.round_trip_delay.total_cmp(&b.round_trip_delay));
    let keep = measured.len().div_ceil(2);
    let kept = &measured[..keep];
    let n = kept.len() as f64;
    Some(SyncEstimate {
        offset: kept.iter().map(|e| e.offset).sum::<f64>() / n,
        round_trip_delay: kept.iter().map(|e| e.round_trip_delay).sum::<f64>() / n,
        sample_count: keep,
    })
}

/// Result of a successful [`sync_round`].
#[derive(Debug, Clone)]
pub struct SyncOutcome {
    pub estimate: SyncEstimate,
    /// Client clock after the step correction.
    pub clock: ClockState,
    pub samples: Vec<SyncSample>,
    /// True time at which the last exchange completed and the step was applied.
    pub finished_at: f64,
}

#[derive(Debug, Error, Clone)]
pub enum SyncFailure {
    #[error("sync round needs at least one sample")]
    NoSamples,
    #[error("sync exchange {exchange} lost on the link ({} samples collected)", .samples.len())]
    Dropped {
        exchange: usize,
        samples: Vec<SyncSample>,
        at: f64,
    },
    #[error("no sync sample had a nonnegative round-trip delay")]
    NoUsableSample { samples: Vec<SyncSample>, at: f64 },
    #[error(transparent)]
    Clock(#[from] ClockError),
}

/// Runs `n_samples` back-to-back exchanges starting at `true_time` and returns
/// the step-corrected client clock.
///
/// The client clock passed in is not modified; on failure the caller keeps
/// using it uncorrected.
pub fn sync_round(
    client: &ClockState,
    server: &mut ClockState,
    link: &mut Link,
    true_time: f64,
    n_samples: usize,
) -> Result<SyncOutcome, SyncFailure> {
    if n_samples == 0 {
        return Err(SyncFailure::NoSamples);
    }
    let mut clock = client.clone();
    let mut samples = Vec::with_capacity(n_samples);
    let mut now = secs_to_nanos(true_time);
    for exchange in 0..n_samples {
        let t1 = clock.read_nanos(now)?;
        let Some(out) = link.uplink.sample() else {
            return Err(SyncFailure::Dropped {
                exchange,
                samples,
                at: nanos_to_secs(now),
            });
        };
        let arrive = now + secs_to_nanos(out);
        let t2 = server.read_nanos(arrive)?;
        let depart = arrive + SERVER_TURNAROUND_NS;
        let t3 = server.read_nanos(depart)?.max(t2);
        let Some(back) = link.downlink.sample() else {
            return Err(SyncFailure::Dropped {
                exchange,
                samples,
                at: nanos_to_secs(depart),
            });
        };
        now = depart + secs_to_nanos(back);
        let t4 = clock.read_nanos(now)?;
        samples.push(SyncSample { t1, t2, t3, t4 });
    }
    let finished_at = nanos_to_secs(now);
    let Some(estimate) = filter_samples(&samples) else {
        return Err(SyncFailure::NoUsableSample {
            samples,
            at: finished_at,
        });
    };
    clock.step(estimate.offset, finished_at)?;
    Ok(SyncOutcome {
        estimate,
        clock,
        samples,
        finished_at,
    })
}

/// Chrony-style status for one client, gathered over a window of sync polls.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncReport {
    /// Hop count to the reference clock; always 1 in the simulated topology.
    pub stratum: u32,
    pub last_offset: f64,
    pub rms_offset: f64,
    /// Estimated frequency error of the client clock in ppm, negative = slow.
    pub residual_drift_ppm: f64,
    pub round_trip_delay: f64,
    pub polls: usize,
}

/// Polls the server `polls` times, `interval` seconds apart, step-correcting
/// after each poll. The offset re-accumulated between polls measures the
/// client's uncorrected frequency error.
pub fn sync_window(
    client: &ClockState,
    server: &mut ClockState,
    link: &mut Link,
    start: f64,
    n_samples: usize,
    polls: usize,
    interval: f64,
) -> Result<(SyncReport, ClockState), SyncFailure> {
    let mut clock = client.clone();
    let mut offsets = Vec::with_capacity(polls);
    let mut drift_samples = Vec::new();
    let mut last_delay = 0.0;
    let mut poll_start = start;
    let mut last_finish: Option<f64> = None;
    for _ in 0..polls.max(1) {
        let outcome = sync_round(&clock, server, link, poll_start, n_samples)?;
        if let Some(prev) = last_finish {
            let elapsed = outcome.finished_at - prev;
            if elapsed > 0.0 {
                drift_samples.push(-outcome.estimate.offset / elapsed * 1e6);
            }
        }
        offsets.push(outcome.estimate.offset);
        last_delay = outcome.estimate.round_trip_delay;
        last_finish = Some(outcome.finished_at);
        clock = outcome.clock;
        poll_start = outcome.finished_at + interval;
    }
    let rms = (offsets.iter().map(|o| o * o).sum::<f64>() / offsets.len() as f64).sqrt();
    let residual = if drift_samples.is_empty() {
        0.0
    } else {
        drift_samples.iter().sum::<f64>() / drift_samples.len() as f64
    };
    Ok((
        SyncReport {
            stratum: 1,
            last_offset: *offsets.last().expect("at least one poll"),
            rms_offset: rms,
            residual_drift_ppm: residual,
            round_trip_delay: last_delay,
            polls: offsets.len(),
        },
        clock,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::LatencyModel;
    use proptest::prelude::*;

    fn clock(offset: f64, drift: f64, jitter: f64) -> ClockState {
        ClockState::new(offset, drift, jitter, 0.0, 1).unwrap()
    }

    fn symmetric_link(delay: f64, jitter: f64, seed: u64) -> Link {
        Link::symmetric(
            LatencyModel::new(delay, jitter, 0.0, seed).unwrap(),
            seed + 1000,
        )
    }

    #[test]
    fn identity_clock_reads_true_time() {
        assert_eq!(clock(0.0, 0.0, 0.0).read_clock(100.0).unwrap(), 100.0);
    }

    #[test]
    fn slow_clock_loses_drift_times_elapsed() {
        let r = clock(0.0, -21.667, 0.0).read_clock(1000.0).unwrap();
        assert!((r - 999.978333).abs() < 1e-9, "{r}");
    }

    #[test]
    fn pure_offset() {
        assert_eq!(clock(0.5, 0.0, 0.0).read_clock(10.0).unwrap(), 10.5);
    }

    #[test]
    fn read_before_epoch_rejected() {
        let mut c = ClockState::new(0.0, 0.0, 0.0, 5.0, 0).unwrap();
        assert!(matches!(
            c.read_clock(4.0),
            Err(ClockError::BeforeEpoch { .. })
        ));
    }

    #[test]
    fn jittery_reads_are_reproducible() {
        let mut a = clock(0.0, 3.0, 1e-3);
        let mut b = clock(0.0, 3.0, 1e-3);
        for t in [1.0, 2.0, 3.0] {
            assert_eq!(a.read_clock(t).unwrap(), b.read_clock(t).unwrap());
        }
    }

    #[test]
    fn step_keeps_drift() {
        let mut c = clock(0.2, 12.0, 0.0);
        let before = c.read_clock(50.0).unwrap();
        c.step(-0.2, 50.0).unwrap();
        assert_eq!(c.drift_ppm(), 12.0);
        let after = c.read_clock(50.0).unwrap();
        assert!((before - 0.2 - after).abs() < 1e-9);
    }

    #[test]
    fn offset_delay_formulas() {
        let e = estimate_offset_delay(&SyncSample::from_secs(0.0, 15.0, 25.0, 30.0));
        assert_eq!(e.offset, 5.0);
        assert_eq!(e.round_trip_delay, 20.0);
    }

    #[test]
    fn symmetric_delay_recovers_offset() {
        // Server ahead of client by 5 ms, 10 ms each way.
        let e = estimate_offset_delay(&SyncSample::from_secs(0.0, 0.015, 0.015, 0.020));
        assert!((e.offset - 0.005).abs() < 1e-15);
    }

    #[test]
    fn asymmetric_delay_biases_offset() {
        // No true offset, 10 ms out, 20 ms back.
        let e = estimate_offset_delay(&SyncSample::from_secs(0.0, 0.010, 0.010, 0.030));
        assert!((e.offset + 0.005).abs() < 1e-15);
    }

    #[test]
    fn filter_keeps_best_half() {
        let samples = [
            SyncSample {
                t1: 0,
                t2: 10,
                t3: 10,
                t4: 20,
            }, // delay 20, offset 0
            SyncSample {
                t1: 0,
                t2: 100,
                t3: 100,
                t4: 100,
            }, // delay 100, offset 50
            SyncSample {
                t1: 0,
                t2: 12,
                t3: 12,
                t4: 20,
            }, // delay 20, offset 2
            SyncSample {
                t1: 0,
                t2: 90,
                t3: 90,
                t4: 100,
            }, // delay 100, offset 40
        ];
        let e = filter_samples(&samples).unwrap();
        assert_eq!(e.sample_count, 2);
        assert!((e.offset - 1e-9).abs() < 1e-18);
    }

    #[test]
    fn filter_drops_negative_delay() {
        let bad = SyncSample {
            t1: 100,
            t2: 0,
            t3: 50,
            t4: 0,
        };
        assert!(estimate_offset_delay(&bad).round_trip_delay < 0.0);
        assert!(filter_samples(&[bad]).is_none());
    }

    #[test]
    fn lossless_sync_recovers_offset() {
        let client = clock(1.0, 0.0, 0.0);
        let mut server = ClockState::ideal();
        let mut link = symmetric_link(0.0, 0.0, 3);
        let out = sync_round(&client, &mut server, &mut link, 0.0, 1).unwrap();
        assert_eq!(out.estimate.offset, -1.0);
        let mut corrected = out.clock;
        assert_eq!(
            corrected.read_clock(12.5).unwrap(),
            server.read_clock(12.5).unwrap()
        );
    }

    #[test]
    fn constant_symmetric_delay_recovers_offset() {
        for d in [0.001, 0.0442, 11.9] {
            let client = clock(-0.37, 0.0, 0.0);
            let mut server = ClockState::ideal();
            let mut link = symmetric_link(d, 0.0, 9);
            let out = sync_round(&client, &mut server, &mut link, 1.0, 4).unwrap();
            assert!((out.estimate.offset - 0.37).abs() < 1e-9, "d={d}");
        }
    }

    #[test]
    fn second_round_is_idempotent() {
        let client = clock(0.731, 0.0, 0.0);
        let mut server = ClockState::ideal();
        let mut link = symmetric_link(0.02, 0.0, 4);
        let first = sync_round(&client, &mut server, &mut link, 0.0, 8).unwrap();
        let second =
            sync_round(&first.clock, &mut server, &mut link, first.finished_at, 8).unwrap();
        assert!(second.estimate.offset.abs() <= 1e-12);
    }

    #[test]
    fn dropped_exchange_reports_partial_samples() {
        let client = clock(0.0, 0.0, 0.0);
        let mut server = ClockState::ideal();
        let mut link = Link::symmetric(LatencyModel::new(0.01, 0.0, 0.999_999, 5).unwrap(), 6);
        match sync_round(&client, &mut server, &mut link, 0.0, 3) {
            Err(SyncFailure::Dropped {
                exchange, samples, ..
            }) => {
                assert_eq!(samples.len(), exchange)
            }
            other => panic!("expected drop, got {other:?}"),
        }
    }

    #[test]
    fn zero_samples_rejected() {
        let mut server = ClockState::ideal();
        let mut link = symmetric_link(0.0, 0.0, 1);
        assert!(matches!(
            sync_round(&ClockState::ideal(), &mut server, &mut link, 0.0, 0),
            Err(SyncFailure::NoSamples)
        ));
    }

    #[test]
    fn window_recovers_drift() {
        let client = clock(0.4, -21.667, 0.0);
        let mut server = ClockState::ideal();
        let mut link = symmetric_link(0.0002, 0.0, 2);
        let (report, _) = sync_window(&client, &mut server, &mut link, 0.0, 8, 6, 2.0).unwrap();
        assert_eq!(report.stratum, 1);
        assert!(
            (report.residual_drift_ppm + 21.667).abs() < 0.01,
            "{report:?}"
        );
        assert!(report.last_offset.abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn symmetric_exactness(theta_ns in -10_000_000_000i64..10_000_000_000, d_ns in 0i64..1_000_000_000, turn in 0i64..1_000_000) {
            // Server = client + theta.
            let t1 = 0;
            let t2 = t1 + d_ns + theta_ns;
            let t3 = t2 + turn;
            let t4 = t3 - theta_ns + d_ns;
            let e = estimate_offset_delay(&SyncSample { t1, t2, t3, t4 });
            let truth = theta_ns as f64 / 1e9;
            prop_assert!((e.offset - truth).abs() <= f64::EPSILON * truth.abs().max(f64::MIN_POSITIVE));
        }

        #[test]
        fn asymmetry_bound(d_out in 0i64..1_000_000_000, d_ret in 0i64..1_000_000_000) {
            let e = estimate_offset_delay(&SyncSample { t1: 0, t2: d_out, t3: d_out, t4: d_out + d_ret });
            prop_assert_eq!(e.offset, (d_out - d_ret) as f64 / 2e9);
        }

        #[test]
        fn monotone_reads(drift in -999_999.0f64..1e4, t1 in 0.0f64..1e5, dt in 1e-6f64..1e3) {
            let mut c = ClockState::new(0.3, drift, 0.0, 0.0, 0).unwrap();
            let a = c.read_clock(t1).unwrap();
            let b = c.read_clock(t1 + dt).unwrap();
            prop_assert!(b > a || (drift < -999_000.0 && b >= a));
        }

        #[test]
        fn drift_invariant(drift in -500.0f64..500.0, t1 in 0.0f64..1e4, dt in 0.0f64..1e4) {
            let mut c = ClockState::new(-1.25, drift, 0.0, 0.0, 0).unwrap();
            let a = c.read_nanos(secs_to_nanos(t1)).unwrap();
            let b = c.read_nanos(secs_to_nanos(t1 + dt)).unwrap();
            let expect = (secs_to_nanos(t1 + dt) - secs_to_nanos(t1)) as f64 * (1.0 + drift * 1e-6);
            prop_assert!(((b - a) as f64 - expect).abs() <= 1.0);
        }
    }
}
