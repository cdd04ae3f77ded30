#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::Value;

use cat_core::dataspec::{Dataset, PairedInstance, Split, TaskConfig};

/// `n` instances of a preset task with unique texts on both sides and
/// labels cycling through the label set.
pub fn toy(task: &str, n: usize) -> Dataset {
    let t = TaskConfig::preset(task).unwrap();
    let v = (0..n)
        .map(|i| PairedInstance {
            id: format!("ex{i:05}"),
            part1: format!("The {i} quick foxes jump over lazy dog number {}.", i * 7 % 13),
            part2: format!("Fox group {i} sleeps."),
            gold_label: t.label_set[i % t.label_set.len()].clone(),
            answers: vec![],
        })
        .collect();
    Dataset::new(t, Split::Dev, v, "toy").unwrap()
}

type Handler = dyn Fn(usize, &Value) -> (u16, Value) + Send + Sync;

struct Shared {
    handler: Box<Handler>,
    calls: AtomicUsize,
    bodies: Mutex<Vec<Value>>,
    auth: Mutex<Vec<Option<String>>>,
}

/// An in-process `/predict` server. The handler sees the zero-based call
/// number and the JSON body.
pub struct MockServer {
    pub url: String,
    shared: Arc<Shared>,
    _rt: tokio::runtime::Runtime,
}

impl MockServer {
    pub fn start(handler: impl Fn(usize, &Value) -> (u16, Value) + Send + Sync + 'static) -> MockServer {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let shared = Arc::new(Shared {
            handler: Box::new(handler),
            calls: AtomicUsize::new(0),
            bodies: Mutex::new(Vec::new()),
            auth: Mutex::new(Vec::new()),
        });
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let app = Router::new()
            .route("/predict", post(handle))
            .with_state(shared.clone());
        rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
        MockServer { url, shared, _rt: rt }
    }

    /// Answers every pair item with `label_of(part1, part2)`.
    pub fn labelling(label_of: impl Fn(&str, &str) -> String + Send + Sync + 'static) -> MockServer {
        MockServer::start(move |_, body| (200, answer_all(body, &label_of)))
    }

    pub fn calls(&self) -> usize {
        self.shared.calls.load(Ordering::SeqCst)
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.shared.bodies.lock().unwrap().clone()
    }

    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.shared.auth.lock().unwrap().clone()
    }
}

pub fn answer_all(body: &Value, label_of: &dyn Fn(&str, &str) -> String) -> Value {
    let preds: Vec<Value> = body["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|it| {
            let label = match (it["part1"].as_str(), it["part2"].as_str()) {
                (Some(a), Some(b)) => label_of(a, b),
                _ => label_of(it["prompt"].as_str().unwrap_or(""), ""),
            };
            serde_json::json!({"id": it["id"], "label": label, "raw": label})
        })
        .collect();
    serde_json::json!({ "predictions": preds })
}

async fn handle(State(s): State<Arc<Shared>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = s.calls.fetch_add(1, Ordering::SeqCst);
    s.bodies.lock().unwrap().push(body.clone());
    s.auth.lock().unwrap().push(
        headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string),
    );
    let (code, out) = (s.handler)(n, &body);
    (StatusCode::from_u16(code).unwrap(), Json(out))
}
