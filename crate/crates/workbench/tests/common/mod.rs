#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use gradia_core::model::{init_model, predict, ModelConfig, Parameters};
use gradia_core::synthetic::{generate_dataset, SceneSpec, SplitCounts, SyntheticInstance};
use gradia_core::trainer::TrainConfig;
use gradia_workbench::service::{Service, ServiceOptions};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub fn toy_model() -> ModelConfig {
    ModelConfig {
        input_height: 12,
        input_width: 12,
        ..ModelConfig::tiny()
    }
}

pub fn toy_data(total: usize, seed: u64) -> Vec<SyntheticInstance> {
    let spec = SceneSpec {
        image_size: 12,
        shape_size_range: (2, 3),
        seed,
        ..SceneSpec::default()
    };
    generate_dataset(&spec, SplitCounts::from_total(total)).unwrap()
}

pub fn toy_params(seed: u64) -> Parameters {
    init_model(&toy_model(), seed).unwrap()
}

pub fn quick_finetune() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        learning_rate: 0.05,
        ..TrainConfig::finetune()
    }
}

pub fn toy_service(data: Vec<SyntheticInstance>, params: Parameters, state_dir: Option<PathBuf>) -> Arc<Service> {
    Arc::new(
        Service::new(
            data,
            params,
            ServiceOptions {
                state_dir,
                finetune: quick_finetune(),
                ..ServiceOptions::default()
            },
        )
        .unwrap(),
    )
}

/// Labels chosen so the model is right on exactly the first `correct`
/// instances.
pub fn relabel(data: &mut [SyntheticInstance], params: &Parameters, correct: usize) {
    for (i, d) in data.iter_mut().enumerate() {
        let (p, _) = predict(params, &d.image).unwrap();
        d.label = if i < correct { p } else { 1 - p };
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>, annotator: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(a) = annotator {
        req = req.header("authorization", format!("Bearer {a}"));
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()))
    };
    (status, value)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None, None).await
}

pub async fn post(app: &Router, uri: &str, body: Value, annotator: Option<&str>) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(body), annotator).await
}

pub fn verdict_body(q1: bool, q2: bool) -> Value {
    let a = |b: bool| if b { "yes" } else { "no" };
    serde_json::json!({"q1_sufficient": a(q1), "q2_contextual": a(q2)})
}

/// Polls a job until it leaves the active states, recording every state
/// seen along the way.
pub async fn wait_job(app: &Router, id: u64) -> (Vec<String>, Value) {
    let mut seen: Vec<String> = Vec::new();
    loop {
        let (status, job) = get(app, &format!("/api/jobs/{id}")).await;
        assert_eq!(status, StatusCode::OK, "{job}");
        let state = job["state"].as_str().unwrap().to_string();
        if seen.last() != Some(&state) {
            seen.push(state.clone());
        }
        if state == "done" || state == "failed" {
            return (seen, job);
        }
        tokio::time::sleep(std::time::Duration::from_millis(5)).await;
    }
}
