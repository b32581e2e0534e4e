#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use vip::service::{spawn_local, AppState};
use vip::session::Snapshot;
use vip_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use vip_core::networks::Checkpoint;
use vip_core::query::AnswerVector;
use vip_core::trainer::{train, TrainConfig};

/// A briefly trained checkpoint on a small synthetic task, plus held-out rows.
pub fn small_checkpoint(seed: u64) -> (Checkpoint, Dataset) {
    let spec = SyntheticSpec {
        num_labels: 5,
        num_queries: 12,
        train_rows: 1500,
        test_rows: 200,
        ..SyntheticSpec::symcat_mini(seed)
    };
    let (train_ds, test, _) = generate_synthetic(&spec).unwrap();
    let config = TrainConfig {
        epochs_initial: 8,
        epochs_biased: 4,
        batch_size: 64,
        classifier_hidden: vec![32, 32],
        querier_hidden: vec![32, 32],
        seed,
        ..TrainConfig::fast()
    };
    let trained = train(&train_ds, &config).unwrap();
    let ckpt = Checkpoint::new(
        train_ds.queries().clone(),
        train_ds.labels().to_vec(),
        trained.classifier,
        trained.querier,
        trained.report.config_fingerprint,
    )
    .unwrap();
    (ckpt, test)
}

pub async fn start(ckpt: Checkpoint) -> (String, reqwest::Client) {
    let state = Arc::new(AppState::new([("demo".to_string(), ckpt)]));
    let addr: SocketAddr = spawn_local(state).await.unwrap();
    (format!("http://{addr}"), reqwest::Client::new())
}

/// Answers every proposed query from `x` until the session stops.
pub async fn replay(client: &reqwest::Client, base: &str, ckpt: &Checkpoint, x: &AnswerVector, stop: &str) -> Snapshot {
    let resp = client
        .post(format!("{base}/v1/sessions"))
        .json(&serde_json::json!({"checkpoint": "demo", "stop": stop}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 201);
    let mut snap: Snapshot = resp.json().await.unwrap();
    while let Some(q) = snap.proposed_query.clone() {
        let token = ckpt.queries.get(q.id).unwrap().domain.raw_token(x.get(q.id)).unwrap();
        let resp = client
            .post(format!("{base}/v1/sessions/{}/answers", snap.session_id))
            .json(&serde_json::json!({"query_id": q.id, "value": token}))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        snap = resp.json().await.unwrap();
    }
    snap
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
