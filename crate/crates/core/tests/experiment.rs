use std::fs;
use std::path::Path;

use syncfed_core::harness::config::load_config;
use syncfed_core::harness::{run_compare, run_compare_seeds, seed_dir};
use syncfed_core::transport::socket::read_transcript;
use syncfed_core::{parse_config, run_experiment, ExperimentConfig, Message, RunOptions, Strategy};

fn base(extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
          "rounds": 6, "gamma": 0.1, "seed": 11, "latency_scale": 100,
          "clients": [
            {{"name": "near", "ping_ms": 8.85, "jitter_ms": 0.5, "samples": 60,
              "lag": {{"p_lag": 0.3, "max_lag_rounds": 3, "extra_delay_s": [0, 1]}}}},
            {{"name": "mid", "ping_ms": 23.349, "jitter_ms": 0.5, "samples": 60,
              "lag": {{"p_lag": 0.3, "max_lag_rounds": 3}}}},
            {{"name": "far", "ping_ms": 238.017, "jitter_ms": 1.0, "samples": 60,
              "clock": {{"offset_s": 0.3, "drift_ppm": -21.667}},
              "lag": {{"p_lag": 0.3, "max_lag_rounds": 3}}}}
          ],
          "model": {{"hidden": [8]}},
          "data": {{"drift_rate": 0.2, "validation_samples": 120}}
          {extra}
        }}"#
    );
    parse_config(text.as_bytes()).unwrap()
}

#[test]
fn zero_rounds_leaves_initial_model() {
    let cfg = ExperimentConfig {
        rounds: 0,
        ..base("")
    };
    let out = run_experiment(&cfg, Strategy::Syncfed, &RunOptions::default()).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.final_params(), &out.initial);
}

#[test]
fn runs_are_deterministic_and_rounds_contiguous() {
    let cfg = base("");
    let a = run_experiment(&cfg, Strategy::Syncfed, &RunOptions::default()).unwrap();
    let b = run_experiment(&cfg, Strategy::Syncfed, &RunOptions::default()).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.globals, b.globals);
    let rounds: Vec<u32> = a.records.iter().map(|r| r.round).collect();
    assert_eq!(rounds, (0..6).collect::<Vec<_>>());
    for r in &a.records {
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert!(r.stragglers.is_empty());
        assert_eq!(r.clients.len(), 3);
        let total: f64 = r.clients.iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gamma_zero_matches_fedavg_every_round() {
    let cfg = ExperimentConfig {
        gamma: 0.0,
        ..base("")
    };
    let s = run_experiment(&cfg, Strategy::Syncfed, &RunOptions::default()).unwrap();
    let f = run_experiment(&cfg, Strategy::Fedavg, &RunOptions::default()).unwrap();
    assert_eq!(s.draw_digest, f.draw_digest);
    for (a, b) in s.globals.iter().zip(&f.globals) {
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn syncfed_aoi_never_exceeds_fedavg() {
    let cfg = base("");
    let s = run_experiment(&cfg, Strategy::Syncfed, &RunOptions::default()).unwrap();
    let f = run_experiment(&cfg, Strategy::Fedavg, &RunOptions::default()).unwrap();
    assert_eq!(s.draw_digest, f.draw_digest);
    let mut strict = 0;
    for (a, b) in s.records.iter().zip(&f.records) {
        assert!(
            a.effective_aoi <= b.effective_aoi + 1e-12,
            "round {}",
            a.round
        );
        // Within one run the reference AoI is the FedAvg-weighted value.
        assert!(a.effective_aoi <= a.reference_aoi + 1e-12);
        let st: Vec<f64> = a.clients.iter().map(|c| c.staleness).collect();
        if st.iter().any(|s| (s - st[0]).abs() > 1e-9) {
            assert!(a.effective_aoi < a.reference_aoi);
            strict += 1;
        }
    }
    assert!(strict > 0);
}

#[test]
fn staleness_traces_link_delay() {
    let cfg = |ping: f64| {
        parse_config(
            format!(
                r#"{{"rounds": 2, "gamma": 0.1, "seed": 5, "latency_scale": 1,
                    "clients": [{{"name": "solo", "ping_ms": {ping}, "compute_time_s": 0,
                                 "lag": {{"extra_delay_s": [2, 2]}}}}],
                    "model": {{"hidden": [4]}}, "data": {{"validation_samples": 30}}}}"#
            )
            .as_bytes(),
        )
        .unwrap()
    };
    let out = run_experiment(&cfg(0.0), Strategy::Syncfed, &RunOptions::default()).unwrap();
    for r in &out.records {
        assert!(r.clients[0].staleness.abs() < 1e-9);
    }
    let out = run_experiment(&cfg(1000.0), Strategy::Syncfed, &RunOptions::default()).unwrap();
    for r in &out.records {
        assert!(
            (r.clients[0].staleness - 0.5).abs() < 1e-6,
            "{}",
            r.clients[0].staleness
        );
    }
}

#[test]
fn lossy_links_time_out_without_deadlock() {
    let mut cfg = base("");
    for c in &mut cfg.clients {
        c.drop_probability = 0.4;
    }
    let out = run_experiment(&cfg, Strategy::Syncfed, &RunOptions::default()).unwrap();
    assert_eq!(out.records.len(), 6);
    assert!(out.records.iter().any(|r| !r.stragglers.is_empty()));
    for r in &out.records {
        assert_eq!(r.clients.len() + r.stragglers.len(), 3);
        assert!(out
            .globals
            .iter()
            .all(|g| g.values().iter().all(|v| v.is_finite())));
    }
}

#[test]
fn transcript_replays_as_frames() {
    let cfg = ExperimentConfig {
        rounds: 2,
        ..base("")
    };
    let out = run_experiment(&cfg, Strategy::Fedavg, &RunOptions { transcript: true }).unwrap();
    let frames = read_transcript(out.transcript.as_ref().unwrap()).unwrap();
    let count = |f: fn(&Message) -> bool| frames.iter().filter(|m| f(m)).count();
    assert_eq!(count(|m| matches!(m, Message::SyncRequest { .. })), 3 * 8);
    assert_eq!(count(|m| matches!(m, Message::GlobalModel { .. })), 2 * 3);
    assert_eq!(count(|m| matches!(m, Message::ClientUpdate { .. })), 2 * 3);
    let again = run_experiment(&cfg, Strategy::Fedavg, &RunOptions { transcript: true }).unwrap();
    assert_eq!(out.transcript, again.transcript);
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn compare_with_zero_gamma_has_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        gamma: 0.0,
        ..base("")
    };
    let summary = run_compare(&cfg, dir.path()).unwrap();
    assert_eq!(summary.deltas.len(), 6);
    for d in &summary.deltas {
        assert!(d.accuracy.abs() <= 1e-12 && d.effective_aoi.abs() <= 1e-12);
    }
    for f in [
        "syncfed.csv",
        "fedavg.csv",
        "summary.csv",
        "deltas.csv",
        "accuracy_plot.csv",
        "aoi_plot.csv",
        "config.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(
        read(dir.path(), "accuracy_plot.csv").lines().count(),
        1 + 12
    );
    let echo = parse_config(read(dir.path(), "config.json").as_bytes()).unwrap();
    assert_eq!(echo, cfg);
}

#[test]
fn homogeneous_staleness_gives_zero_aoi_deltas() {
    let mut cfg = base("");
    for c in &mut cfg.clients {
        c.ping_ms = 0.0;
        c.uplink_ms = Some(0.0);
        c.downlink_ms = Some(0.0);
        c.jitter_ms = 0.0;
        c.lag = Default::default();
        c.clock = Default::default();
    }
    let dir = tempfile::tempdir().unwrap();
    let summary = run_compare(&cfg, dir.path()).unwrap();
    for d in &summary.deltas {
        assert!(d.effective_aoi.abs() < 1e-9);
    }
}

#[test]
fn seeds_get_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        rounds: 2,
        ..base("")
    };
    let summaries = run_compare_seeds(&cfg, 3, dir.path()).unwrap();
    assert_eq!(
        summaries.iter().map(|s| s.seed).collect::<Vec<_>>(),
        vec![11, 12, 13]
    );
    for seed in 11..14 {
        assert!(seed_dir(dir.path(), seed).join("summary.csv").exists());
    }
    assert_eq!(read(dir.path(), "seeds.csv").lines().count(), 4);
}

#[test]
fn shipped_testbed_config() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper-testbed.json");
    let cfg = load_config(&path).unwrap();
    let one_way: Vec<f64> = cfg.clients.iter().map(|c| c.one_way_delays().0).collect();
    for (got, want) in one_way.iter().zip([0.004425, 0.0116745, 0.1190085]) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert_eq!(cfg.rounds, 20);
    assert_eq!(cfg.gamma, 0.1);
    assert_eq!(cfg.latency_scale, 100.0);
    assert!(cfg.data.drift_rate > 0.0);
    assert!(cfg
        .clients
        .iter()
        .all(|c| c.lag.p_lag == 0.3 && c.lag.max_lag_rounds == 3));
    let echo = parse_config(cfg.to_json().as_bytes()).unwrap();
    assert_eq!(echo, cfg);
}
