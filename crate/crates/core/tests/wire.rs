use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use poem_core::remote::{RemoteEncoder, RemoteLm, RetryPolicy};
use poem_core::reward::{score_prompt, ScoreMode, ScoreRequest};
use poem_core::{EncoderBackend, PoemError};
use serde_json::{json, Value};

/// Serves `app` on an ephemeral port from a background runtime.
fn serve(app: Router) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn fast() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 4,
        initial_backoff: Duration::from_millis(5),
        timeout: Duration::from_secs(5),
    }
}

async fn embed(Json(body): Json<Value>) -> Json<Value> {
    let texts = body["texts"].as_array().unwrap();
    let embeddings: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| {
            let n = t.as_str().unwrap().len() as f64;
            vec![1.0, n, -0.5]
        })
        .collect();
    Json(json!({ "embeddings": embeddings, "dim": 3 }))
}

#[test]
fn encoder_success() {
    let addr = serve(Router::new().route("/embed", post(embed)));
    let enc = RemoteEncoder::new(format!("http://{addr}/embed"), fast())
        .unwrap()
        .with_expected_dim(3);
    let out = enc.encode(&["ab", "abcd"]).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[1].values(), &[1.0, 4.0, -0.5]);
}

#[test]
fn encoder_dim_mismatch_is_an_error() {
    let addr = serve(Router::new().route("/embed", post(embed)));
    let enc = RemoteEncoder::new(format!("http://{addr}/embed"), fast())
        .unwrap()
        .with_expected_dim(8);
    let err = enc.encode(&["x"]).unwrap_err();
    assert!(matches!(err, PoemError::Backend { .. }), "{err}");
    assert!(err.to_string().contains("dim"));
}

#[test]
fn encoder_count_mismatch_is_protocol_error() {
    let app = Router::new().route(
        "/embed",
        post(|| async { Json(json!({ "embeddings": [[1.0, 0.0]], "dim": 2 })) }),
    );
    let addr = serve(app);
    let enc = RemoteEncoder::new(format!("http://{addr}/embed"), fast()).unwrap();
    assert!(matches!(
        enc.encode(&["a", "b"]).unwrap_err(),
        PoemError::Protocol { .. }
    ));
}

async fn flaky(
    State(calls): State<Arc<AtomicUsize>>,
    Json(req): Json<ScoreRequest>,
) -> (StatusCode, Json<Value>) {
    let n = calls.fetch_add(1, Ordering::SeqCst);
    if n < 3 {
        return (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({ "error": "warming up" })),
        );
    }
    let labels = req.labels.unwrap();
    let per: BTreeMap<String, f64> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), -(i as f64) - 0.1))
        .collect();
    (StatusCode::OK, Json(json!({ "per_label_logprob": per })))
}

#[test]
fn lm_retries_server_errors_then_succeeds() {
    let calls = Arc::new(AtomicUsize::new(0));
    let app = Router::new()
        .route("/score", post(flaky))
        .with_state(calls.clone());
    let addr = serve(app);
    let lm = RemoteLm::new(format!("http://{addr}/score"), fast()).unwrap();
    let labels = vec!["great".to_string(), "terrible".to_string()];
    let resp = score_prompt(
        &lm,
        "Review: fine Sentiment:",
        ScoreMode::Classify,
        Some(&labels),
        None,
    )
    .unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 4);
    assert_eq!(resp.per_label_logprob.unwrap()["great"], -0.1);
}

#[test]
fn lm_gives_up_after_max_attempts() {
    let calls = Arc::new(AtomicUsize::new(0));
    let app = Router::new()
        .route(
            "/score",
            post(|State(c): State<Arc<AtomicUsize>>| async move {
                c.fetch_add(1, Ordering::SeqCst);
                StatusCode::SERVICE_UNAVAILABLE
            }),
        )
        .with_state(calls.clone());
    let addr = serve(app);
    let lm = RemoteLm::new(format!("http://{addr}/score"), fast()).unwrap();
    let labels = vec!["a".to_string(), "b".to_string()];
    match score_prompt(&lm, "p", ScoreMode::Classify, Some(&labels), None).unwrap_err() {
        PoemError::Backend { attempts, last, .. } => {
            assert_eq!(attempts, 4);
            assert!(last.contains("503"));
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(calls.load(Ordering::SeqCst), 4);
}

#[test]
fn lm_client_error_is_not_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let app = Router::new()
        .route(
            "/score",
            post(|State(c): State<Arc<AtomicUsize>>| async move {
                c.fetch_add(1, Ordering::SeqCst);
                StatusCode::BAD_REQUEST
            }),
        )
        .with_state(calls.clone());
    let addr = serve(app);
    let lm = RemoteLm::new(format!("http://{addr}/score"), fast()).unwrap();
    let labels = vec!["a".to_string(), "b".to_string()];
    assert!(score_prompt(&lm, "p", ScoreMode::Classify, Some(&labels), None).is_err());
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}

#[test]
fn missing_per_label_logprob_is_protocol_error() {
    let app = Router::new().route(
        "/score",
        post(|| async { Json(json!({ "generated_text": "great" })) }),
    );
    let addr = serve(app);
    let lm = RemoteLm::new(format!("http://{addr}/score"), fast()).unwrap();
    let labels = vec!["great".to_string(), "terrible".to_string()];
    let err = score_prompt(&lm, "p", ScoreMode::Classify, Some(&labels), None).unwrap_err();
    match err {
        PoemError::Protocol { detail, .. } => assert!(detail.contains("per_label_logprob")),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn malformed_body_is_protocol_error() {
    let app = Router::new().route("/score", post(|| async { "not json" }));
    let addr = serve(app);
    let lm = RemoteLm::new(format!("http://{addr}/score"), fast()).unwrap();
    let err = score_prompt(&lm, "p", ScoreMode::Generate, None, None).unwrap_err();
    assert!(matches!(err, PoemError::Protocol { .. }), "{err}");
}
