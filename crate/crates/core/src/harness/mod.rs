//! Experiment execution, SyncFed-vs-FedAvg comparison, and result files.
//!
//! Output layout for one comparison (all CSV uses `\n` and `.` decimals):
//!
//! - `syncfed.csv`, `fedavg.csv`: one row per round (see [`emit_csv`]).
//! - `summary.csv`: `metric,syncfed,fedavg,delta`.
//! - `deltas.csv`: per-round SyncFed minus FedAvg accuracy and AoI.
//! - `accuracy_plot.csv`, `aoi_plot.csv`: long format `round,strategy,value`.
//! - `config.json`: the effective configuration with every default filled.
//!
//! `compare --seeds K` writes one such directory per seed, named
//! `seed-{master_seed + i}`, plus `seeds.csv` in the parent.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::clocksync::{sync_window, SyncFailure, SyncReport};
use crate::orchestrator::{
    run_experiment, ExperimentError, RoundRecord, RunOptions, RunOutput, Strategy, Testbed,
};
use config::{ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("paired runs consumed different random draws (syncfed {syncfed}, fedavg {fedavg})")]
    Unpaired { syncfed: String, fedavg: String },
    #[error("clock sync failed for client {client}: {source}")]
    Sync { client: String, source: SyncFailure },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Renders one CSV document with `\n` line endings.
fn csv_text<R: AsRef<[String]>>(header: &[String], rows: impl IntoIterator<Item = R>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row.as_ref()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Client ids appearing in any record, ascending.
fn client_ids(records: &[RoundRecord]) -> Vec<u16> {
    let mut ids: Vec<u16> = records
        .iter()
        .flat_map(|r| {
            r.clients
                .iter()
                .map(|c| c.client_id)
                .chain(r.stragglers.iter().copied())
        })
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Per-round CSV text. Columns: `round, server_time_s, accuracy,
/// effective_aoi_s, reference_aoi_s`, then `client{id}_staleness_s`,
/// `client{id}_lambda`, `client{id}_weight` for each client in id order, then
/// `stationary_accuracy`. Cells of clients not aggregated that round are empty.
pub fn csv_string(records: &[RoundRecord]) -> String {
    let ids = client_ids(records);
    let mut header = strings(&[
        "round",
        "server_time_s",
        "accuracy",
        "effective_aoi_s",
        "reference_aoi_s",
    ]);
    for id in &ids {
        header.extend([
            format!("client{id}_staleness_s"),
            format!("client{id}_lambda"),
            format!("client{id}_weight"),
        ]);
    }
    header.push("stationary_accuracy".into());
    let rows = records.iter().map(|r| {
        let mut row = vec![
            r.round.to_string(),
            num(r.server_time),
            num(r.accuracy),
            num(r.effective_aoi),
            num(r.reference_aoi),
        ];
        for id in &ids {
            match r.clients.iter().find(|c| c.client_id == *id) {
                Some(c) => row.extend([num(c.staleness), num(c.lambda), num(c.weight)]),
                None => row.extend([String::new(), String::new(), String::new()]),
            }
        }
        row.push(num(r.stationary_accuracy));
        row
    });
    csv_text(&header, rows)
}

pub fn emit_csv(records: &[RoundRecord], path: &Path) -> Result<(), HarnessError> {
    fs::write(path, csv_string(records)).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub final_accuracy: f64,
    pub mean_last5_accuracy: f64,
    /// Mean over aggregated rounds; NaN if none.
    pub mean_effective_aoi: f64,
    /// Rounds completed when accuracy first reached the threshold.
    pub rounds_to_threshold: Option<u32>,
    pub accuracy: Vec<f64>,
    pub effective_aoi: Vec<f64>,
}

impl StrategySummary {
    pub fn from_records(strategy: Strategy, records: &[RoundRecord], threshold: f64) -> Self {
        let accuracy: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
        let effective_aoi: Vec<f64> = records.iter().map(|r| r.effective_aoi).collect();
        let tail = &accuracy[accuracy.len().saturating_sub(5)..];
        let aoi: Vec<f64> = effective_aoi
            .iter()
            .copied()
            .filter(|v| !v.is_nan())
            .collect();
        Self {
            strategy,
            final_accuracy: accuracy.last().copied().unwrap_or(f64::NAN),
            mean_last5_accuracy: mean(tail),
            mean_effective_aoi: mean(&aoi),
            rounds_to_threshold: records
                .iter()
                .find(|r| r.accuracy >= threshold)
                .map(|r| r.round + 1),
            accuracy,
            effective_aoi,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// SyncFed minus FedAvg for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundDelta {
    pub round: u32,
    pub accuracy: f64,
    pub effective_aoi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSummary {
    pub seed: u64,
    pub strategies: Vec<StrategySummary>,
    /// Empty unless both strategies ran.
    pub deltas: Vec<RoundDelta>,
}

impl ComparisonSummary {
    pub fn from_runs(seed: u64, runs: &[&RunOutput], threshold: f64) -> Self {
        let strategies: Vec<StrategySummary> = runs
            .iter()
            .map(|r| StrategySummary::from_records(r.strategy, &r.records, threshold))
            .collect();
        let mut summary = Self {
            seed,
            strategies,
            deltas: Vec::new(),
        };
        if let (Some(s), Some(f)) = (
            summary.get(Strategy::Syncfed),
            summary.get(Strategy::Fedavg),
        ) {
            let rounds = runs[0].records.iter().map(|r| r.round);
            summary.deltas = rounds
                .enumerate()
                .map(|(i, round)| RoundDelta {
                    round,
                    accuracy: s.accuracy[i] - f.accuracy[i],
                    effective_aoi: s.effective_aoi[i] - f.effective_aoi[i],
                })
                .collect();
        }
        summary
    }

    pub fn get(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }
}

fn plot_csv(summary: &ComparisonSummary, series: impl Fn(&StrategySummary) -> &[f64]) -> String {
    let rows = summary.strategies.iter().flat_map(|s| {
        series(s)
            .iter()
            .enumerate()
            .map(move |(round, v)| vec![round.to_string(), s.strategy.to_string(), num(*v)])
    });
    csv_text(&strings(&["round", "strategy", "value"]), rows)
}

/// Writes `accuracy_plot.csv` and `aoi_plot.csv` into `dir`.
pub fn emit_plotdata(
    summary: &ComparisonSummary,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    let acc = dir.join("accuracy_plot.csv");
    fs::write(&acc, plot_csv(summary, |s| &s.accuracy)).map_err(io_err(&acc))?;
    let aoi = dir.join("aoi_plot.csv");
    fs::write(&aoi, plot_csv(summary, |s| &s.effective_aoi)).map_err(io_err(&aoi))?;
    Ok(vec![acc, aoi])
}

type Metric<'a> = (&'a str, fn(&StrategySummary) -> f64);

pub fn summary_csv(summary: &ComparisonSummary) -> String {
    let cell =
        |s: Strategy, f: fn(&StrategySummary) -> f64| summary.get(s).map(f).unwrap_or(f64::NAN);
    let metrics: [Metric; 4] = [
        ("final_accuracy", |s| s.final_accuracy),
        ("mean_last5_accuracy", |s| s.mean_last5_accuracy),
        ("mean_effective_aoi_s", |s| s.mean_effective_aoi),
        ("rounds_to_threshold", |s| {
            s.rounds_to_threshold.map_or(f64::NAN, f64::from)
        }),
    ];
    let rows = metrics.iter().map(|(name, f)| {
        let (a, b) = (cell(Strategy::Syncfed, *f), cell(Strategy::Fedavg, *f));
        vec![name.to_string(), num(a), num(b), num(a - b)]
    });
    csv_text(&strings(&["metric", "syncfed", "fedavg", "delta"]), rows)
}

pub fn deltas_csv(summary: &ComparisonSummary) -> String {
    let rows = summary
        .deltas
        .iter()
        .map(|d| vec![d.round.to_string(), num(d.accuracy), num(d.effective_aoi)]);
    csv_text(
        &strings(&["round", "accuracy_delta", "effective_aoi_delta_s"]),
        rows,
    )
}

/// Tracks files written so a failed run can remove them.
struct Outputs {
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new() -> Self {
        Self {
            written: Vec::new(),
        }
    }

    fn write(&mut self, path: PathBuf, contents: &[u8]) -> Result<(), HarnessError> {
        fs::write(&path, contents).map_err(io_err(&path))?;
        self.written.push(path);
        Ok(())
    }

    fn discard(self) {
        for p in self.written {
            let _ = fs::remove_file(p);
        }
    }
}

fn guarded<T>(f: impl FnOnce(&mut Outputs) -> Result<T, HarnessError>) -> Result<T, HarnessError> {
    let mut outputs = Outputs::new();
    match f(&mut outputs) {
        Ok(v) => Ok(v),
        Err(e) => {
            outputs.discard();
            Err(e)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunSettings {
    pub options: RunOptions,
    /// Where to write the binary frame log, if captured.
    pub transcript_path: Option<PathBuf>,
}

/// Runs one strategy and writes `{strategy}.csv`, plot data, and the config
/// echo into `out_dir`.
pub fn run_single(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    out_dir: &Path,
    settings: &RunSettings,
) -> Result<RunOutput, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut options = settings.options.clone();
    options.transcript |= settings.transcript_path.is_some();
    let run = run_experiment(cfg, strategy, &options)?;
    guarded(|out| {
        out.write(
            out_dir.join(format!("{strategy}.csv")),
            csv_string(&run.records).as_bytes(),
        )?;
        let summary = ComparisonSummary::from_runs(cfg.seed, &[&run], cfg.accuracy_threshold);
        out.written.extend(emit_plotdata(&summary, out_dir)?);
        out.write(out_dir.join("config.json"), cfg.to_json().as_bytes())?;
        if let (Some(path), Some(bytes)) = (&settings.transcript_path, &run.transcript) {
            out.write(path.clone(), bytes)?;
        }
        Ok(())
    })?;
    log::info!("{strategy}: draw digest {}", run.draw_digest);
    Ok(run)
}

/// Both strategies from one config, run concurrently.
pub fn run_pair(
    cfg: &ExperimentConfig,
    options: &RunOptions,
) -> Result<(RunOutput, RunOutput), HarnessError> {
    let (s, f) = std::thread::scope(|scope| {
        let s = scope.spawn(|| run_experiment(cfg, Strategy::Syncfed, options));
        let f = run_experiment(cfg, Strategy::Fedavg, options);
        (s.join().expect("syncfed run panicked"), f)
    });
    let (s, f) = (s?, f?);
    log::info!(
        "draw digests: syncfed {} fedavg {}",
        s.draw_digest,
        f.draw_digest
    );
    if s.draw_digest != f.draw_digest {
        return Err(HarnessError::Unpaired {
            syncfed: s.draw_digest,
            fedavg: f.draw_digest,
        });
    }
    Ok((s, f))
}

/// Paired SyncFed and FedAvg runs with identical seeds; writes the full
/// comparison output set into `out_dir`.
pub fn run_compare(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ComparisonSummary, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (s, f) = run_pair(cfg, &RunOptions::default())?;
    let summary = ComparisonSummary::from_runs(cfg.seed, &[&s, &f], cfg.accuracy_threshold);
    guarded(|out| {
        out.write(
            out_dir.join("syncfed.csv"),
            csv_string(&s.records).as_bytes(),
        )?;
        out.write(
            out_dir.join("fedavg.csv"),
            csv_string(&f.records).as_bytes(),
        )?;
        out.write(
            out_dir.join("summary.csv"),
            summary_csv(&summary).as_bytes(),
        )?;
        out.write(out_dir.join("deltas.csv"), deltas_csv(&summary).as_bytes())?;
        out.written.extend(emit_plotdata(&summary, out_dir)?);
        out.write(out_dir.join("config.json"), cfg.to_json().as_bytes())?;
        Ok(())
    })?;
    Ok(summary)
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed-{seed}"))
}

/// `k` comparisons with seeds `cfg.seed + i`, each in [`seed_dir`], plus
/// `seeds.csv` in `out_dir`.
pub fn run_compare_seeds(
    cfg: &ExperimentConfig,
    k: u32,
    out_dir: &Path,
) -> Result<Vec<ComparisonSummary>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let seeds: Vec<u64> = (0..k as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let results: Vec<Result<ComparisonSummary, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || {
                    let cfg = ExperimentConfig {
                        seed,
                        ..cfg.clone()
                    };
                    run_compare(&cfg, &seed_dir(out_dir, seed))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed run panicked"))
            .collect()
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let path = out_dir.join("seeds.csv");
    fs::write(&path, seeds_csv(&summaries)).map_err(io_err(&path))?;
    Ok(summaries)
}

pub fn seeds_csv(summaries: &[ComparisonSummary]) -> String {
    let header = strings(&[
        "seed",
        "syncfed_final_accuracy",
        "fedavg_final_accuracy",
        "syncfed_mean_effective_aoi_s",
        "fedavg_mean_effective_aoi_s",
    ]);
    let rows = summaries.iter().map(|s| {
        let get = |st, f: fn(&StrategySummary) -> f64| num(s.get(st).map(f).unwrap_or(f64::NAN));
        vec![
            s.seed.to_string(),
            get(Strategy::Syncfed, |x| x.final_accuracy),
            get(Strategy::Fedavg, |x| x.final_accuracy),
            get(Strategy::Syncfed, |x| x.mean_effective_aoi),
            get(Strategy::Fedavg, |x| x.mean_effective_aoi),
        ]
    });
    csv_text(&header, rows)
}

/// Polls per client in [`sync_report`].
pub const REPORT_POLLS: usize = 8;
/// Seconds between polls in [`sync_report`].
pub const REPORT_INTERVAL_S: f64 = 1024.0;

/// Per-client sync status after a window of polls on the simulated network.
pub fn sync_report(cfg: &ExperimentConfig) -> Result<Vec<(String, SyncReport)>, HarnessError> {
    let mut tb = Testbed::build(cfg, Strategy::Syncfed)?;
    let mut out = Vec::with_capacity(tb.clients.len());
    for (client, link) in tb.clients.iter().zip(tb.links.iter_mut()) {
        let (report, _) = sync_window(
            &client.clock,
            &mut tb.server.clock,
            link,
            0.0,
            tb.sync_samples,
            REPORT_POLLS,
            REPORT_INTERVAL_S,
        )
        .map_err(|source| HarnessError::Sync {
            client: client.name.clone(),
            source,
        })?;
        out.push((client.name.clone(), report));
    }
    Ok(out)
}

/// Chrony-style text table for [`sync_report`].
pub fn render_sync_report(server: &str, rows: &[(String, SyncReport)]) -> String {
    let mut out = format!("Reference: {server}\n");
    writeln!(
        out,
        "{:<12} {:>7} {:>14} {:>14} {:>12} {:>12} {:>5}",
        "client", "stratum", "last_offset_s", "rms_offset_s", "drift_ppm", "delay_s", "polls"
    )
    .unwrap();
    for (name, r) in rows {
        writeln!(
            out,
            "{:<12} {:>7} {:>+14.9} {:>14.9} {:>+12.3} {:>12.6} {:>5}",
            name,
            r.stratum,
            r.last_offset,
            r.rms_offset,
            r.residual_drift_ppm,
            r.round_trip_delay,
            r.polls
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::ClientRecord;

    fn record(round: u32, ids: &[u16], stragglers: &[u16]) -> RoundRecord {
        RoundRecord {
            round,
            server_time: 10.5 + round as f64,
            accuracy: 0.25,
            stationary_accuracy: 0.5,
            effective_aoi: 1.0 / 3.0,
            reference_aoi: 2.0,
            clients: ids
                .iter()
                .map(|&client_id| ClientRecord {
                    client_id,
                    generated_at: 10.0,
                    arrived_at: 10.2,
                    staleness: 0.5,
                    negative_staleness: false,
                    lambda: 0.95,
                    weight: 0.5,
                    m_n: 10,
                    lagged: false,
                    lag_rounds: 0,
                })
                .collect(),
            stragglers: stragglers.to_vec(),
            underflow_fallback: false,
            skipped: false,
        }
    }

    #[test]
    fn empty_csv_is_header_only() {
        assert_eq!(
            csv_string(&[]),
            "round,server_time_s,accuracy,effective_aoi_s,reference_aoi_s,stationary_accuracy\n"
        );
    }

    #[test]
    fn one_record_two_lines() {
        let text = csv_string(&[record(0, &[0, 1], &[])]);
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n') && !text.contains('\r'));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "round,server_time_s,accuracy,effective_aoi_s,reference_aoi_s,\
             client0_staleness_s,client0_lambda,client0_weight,\
             client1_staleness_s,client1_lambda,client1_weight,stationary_accuracy"
        );
        assert_eq!(
            lines[1],
            "0,10.5,0.25,0.3333333333333333,2,0.5,0.95,0.5,0.5,0.95,0.5,0.5"
        );
    }

    #[test]
    fn straggler_cells_empty() {
        let text = csv_string(&[record(0, &[0, 1], &[]), record(1, &[1], &[0])]);
        let row = text.lines().nth(2).unwrap();
        assert_eq!(row, "1,11.5,0.25,0.3333333333333333,2,,,,0.5,0.95,0.5,0.5");
        assert_eq!(
            row.split(',').count(),
            text.lines().next().unwrap().split(',').count()
        );
    }

    #[test]
    fn summary_metrics() {
        let mut recs: Vec<RoundRecord> = (0..7).map(|r| record(r, &[0], &[])).collect();
        for (i, r) in recs.iter_mut().enumerate() {
            r.accuracy = i as f64 / 10.0;
        }
        let s = StrategySummary::from_records(Strategy::Syncfed, &recs, 0.35);
        assert_eq!(s.final_accuracy, 0.6);
        assert!((s.mean_last5_accuracy - 0.4).abs() < 1e-12);
        assert_eq!(s.rounds_to_threshold, Some(5));
        assert!((s.mean_effective_aoi - 1.0 / 3.0).abs() < 1e-15);
    }

    fn parse_plot(text: &str) -> Vec<(u32, String, f64)> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(r.headers().unwrap(), vec!["round", "strategy", "value"]);
        r.deserialize().map(|row| row.unwrap()).collect()
    }

    #[test]
    fn plot_data_round_trips() {
        let mk = |strategy, scale: f64| StrategySummary {
            strategy,
            final_accuracy: 0.0,
            mean_last5_accuracy: 0.0,
            mean_effective_aoi: 0.0,
            rounds_to_threshold: None,
            accuracy: (0..20)
                .map(|i| (i as f64 * scale).sin().abs() / 3.0)
                .collect(),
            effective_aoi: (0..20).map(|i| 0.1 + i as f64 * scale).collect(),
        };
        let summary = ComparisonSummary {
            seed: 0,
            strategies: vec![mk(Strategy::Syncfed, 0.37), mk(Strategy::Fedavg, 0.91)],
            deltas: Vec::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        emit_plotdata(&summary, dir.path()).unwrap();
        let acc = parse_plot(&fs::read_to_string(dir.path().join("accuracy_plot.csv")).unwrap());
        let aoi = parse_plot(&fs::read_to_string(dir.path().join("aoi_plot.csv")).unwrap());
        assert_eq!(acc.len(), 40);
        assert_eq!(aoi.len(), 40);
        for s in &summary.strategies {
            let back: Vec<f64> = acc
                .iter()
                .filter(|r| r.1 == s.strategy.name())
                .map(|r| r.2)
                .collect();
            assert_eq!(back, s.accuracy);
            let back: Vec<f64> = aoi
                .iter()
                .filter(|r| r.1 == s.strategy.name())
                .map(|r| r.2)
                .collect();
            assert_eq!(back, s.effective_aoi);
        }
    }

    #[test]
    fn failed_outputs_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        let keep = dir.path().join("a.csv");
        let r: Result<(), HarnessError> = guarded(|out| {
            out.write(keep.clone(), b"x")?;
            out.write(dir.path().join("missing/b.csv"), b"y")?;
            Ok(())
        });
        assert!(matches!(r, Err(HarnessError::Io { .. })));
        assert!(!keep.exists());
    }
}
