//! Deterministic fixtures for the criterion benchmarks.

use syncfed_core::learner::{generate_synthetic, init_model};
use syncfed_core::{
    parse_config, ClientUpdate, Dataset, ExperimentConfig, Message, ModelParams, SyntheticSpec,
};

/// `n_clients` updates of a `[d, 1]` model with `n_params` parameters,
/// staleness spread over 0..30 s at server time 100 s.
pub fn update_set(n_clients: usize, n_params: usize) -> Vec<ClientUpdate> {
    (0..n_clients)
        .map(|i| {
            let values = (0..n_params)
                .map(|k| ((i * 31 + k * 7) % 97) as f64 / 97.0 - 0.5)
                .collect();
            ClientUpdate {
                client_id: i as u16,
                round: 0,
                params: ModelParams::from_values(vec![n_params - 1, 1], values)
                    .expect("fixture shape"),
                generated_at: 100.0 - 30.0 * i as f64 / n_clients.max(1) as f64,
                m_n: 100 + 17 * i as u64,
            }
        })
        .collect()
}

/// The default `[8, 32, 16, 6]` model with one client's round-0 data.
pub fn training_fixture(samples: usize) -> (ModelParams, Dataset) {
    let params = init_model(&[8, 32, 16, 6], 1).expect("fixture model");
    let spec = SyntheticSpec::with_geometry(6, 8, 1.0, 1.0, 0.1, vec![1.0 / 6.0; 6], samples, 2)
        .expect("fixture spec");
    let data = generate_synthetic(&spec, 0, 3).expect("fixture data");
    (params, data)
}

pub fn client_update_message(n_params: usize) -> Message {
    Message::ClientUpdate {
        round: 7,
        client_id: 2,
        generated_at: 1_234_567_890,
        m_n: 200,
        params: (0..n_params).map(|k| k as f64 * 0.001).collect(),
    }
}

/// Three clients, short run, no lag.
pub fn small_experiment(rounds: u32) -> ExperimentConfig {
    let text = format!(
        r#"{{"rounds": {rounds}, "gamma": 0.1, "seed": 1,
            "clients": [{{"name": "paris", "ping_ms": 8.85}},
                        {{"name": "barcelona", "ping_ms": 23.349}},
                        {{"name": "tokyo", "ping_ms": 238.017}}]}}"#
    );
    parse_config(text.as_bytes()).expect("fixture config")
}
