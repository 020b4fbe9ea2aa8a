use std::sync::Arc;
use std::time::Duration;

use arcplan_cli::service::{router, AppState};
use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

fn small_case(max_iters: usize) -> Value {
    json!({
        "phantom": { "dims": [32, 32, 32], "spacing": [8.0, 8.0, 8.0] },
        "planning": { "arc": { "n_cp": 36 }, "optimizer": { "max_iters": max_iters, "tol": 0.0 } }
    })
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value, Option<String>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let retry = resp.headers().get(header::RETRY_AFTER).map(|v| v.to_str().unwrap().to_string());
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value, retry)
}

async fn new_session(app: &Router, iters: usize) -> (String, Value) {
    let (status, body, _) = call(app, "POST", "/api/session", Some(small_case(iters))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    (body["session_id"].as_str().unwrap().to_string(), body)
}

fn app() -> Router {
    router(Arc::new(AppState::default()), None)
}

fn rectum_mean(v: &Value) -> f64 {
    v["metrics"]["structures"]["Rectum"]["dmean"].as_f64().unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn session_starts_at_revision_zero_with_zero_controls() {
    let app = app();
    let (id, created) = new_session(&app, 4).await;
    assert_eq!(created["revision"], 0);
    assert_eq!(created["controls"]["s_rectum"], 0.0);
    assert_eq!(created["controls"]["iters"], 4);
    let (status, metrics, _) = call(&app, "GET", &format!("/api/session/{id}/metrics"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(metrics["revision"], 0);
    assert_eq!(metrics["metrics"], created["metrics"]);
    assert!(metrics["baseline_metrics"]["structures"]["PTV"]["hi"].is_number());
}

#[tokio::test(flavor = "multi_thread")]
async fn replans_are_deterministic_and_steer_the_rectum() {
    let app = app();
    let (id, created) = new_session(&app, 4).await;
    let replan = format!("/api/session/{id}/replan");
    let (s1, a, _) = call(&app, "POST", &replan, Some(json!({ "s_rectum": 0.0, "s_bladder": 0.0 }))).await;
    let (s2, b, _) = call(&app, "POST", &replan, Some(json!({}))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!((a["revision"].as_u64(), b["revision"].as_u64()), (Some(1), Some(2)));
    assert_eq!(a["metrics"], b["metrics"]);
    assert_eq!(a["metrics"], created["metrics"]);

    let (_, spared, _) = call(&app, "POST", &replan, Some(json!({ "s_rectum": 0.02 }))).await;
    assert_eq!(spared["revision"], 3);
    assert_eq!(spared["controls"]["s_rectum"], 0.02);
    assert!(rectum_mean(&spared) <= rectum_mean(&created), "{} > {}", rectum_mean(&spared), rectum_mean(&created));

    // unset fields keep their values
    let (_, kept, _) = call(&app, "POST", &replan, Some(json!({ "iters": 3 }))).await;
    assert_eq!(kept["controls"]["s_rectum"], 0.02);
    assert_eq!(kept["controls"]["iters"], 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn dvh_and_fluence_payloads() {
    let app = app();
    let (id, _) = new_session(&app, 3).await;
    let (status, dvh, _) = call(&app, "GET", &format!("/api/session/{id}/dvh"), None).await;
    assert_eq!(status, StatusCode::OK);
    let curves = dvh["curves"].as_array().unwrap();
    let names: Vec<&str> = curves.iter().map(|c| c["structure"].as_str().unwrap()).collect();
    for s in ["PTV", "Bladder", "Rectum"] {
        assert!(names.contains(&s), "{names:?}");
    }
    for c in curves {
        let v: Vec<f64> = c["volume"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(v[0], 1.0);
        assert!(v.windows(2).all(|w| w[1] <= w[0]) && v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    let (status, f, _) = call(&app, "GET", &format!("/api/session/{id}/fluence/5"), None).await;
    assert_eq!(status, StatusCode::OK);
    let (h, w) = (f["height"].as_u64().unwrap() as usize, f["width"].as_u64().unwrap() as usize);
    assert_eq!(f["optimized"].as_array().unwrap().len(), h * w);
    assert_eq!(f["delivered"].as_array().unwrap().len(), h * w);
    assert_eq!(f["aperture"]["left"].as_array().unwrap().len(), h);
    assert_eq!(f["gantry_angle"], 50.0);

    let (status, err, _) = call(&app, "GET", &format!("/api/session/{id}/fluence/36"), None).await;
    assert_eq!((status, err["field"].as_str()), (StatusCode::NOT_FOUND, Some("cp")));
    let (status, err, _) = call(&app, "GET", &format!("/api/session/{id}/fluence/x"), None).await;
    assert_eq!((status, err["field"].as_str()), (StatusCode::BAD_REQUEST, Some("cp")));
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_requests_name_the_field() {
    let app = app();
    let (id, _) = new_session(&app, 2).await;
    let replan = format!("/api/session/{id}/replan");
    let cases = [
        (json!({ "s_rectum": 0.25 }), "s_rectum"),
        (json!({ "s_bladder": -0.01 }), "s_bladder"),
        (json!({ "lambda_plus": 0.5 }), "lambda_plus"),
        (json!({ "lambda_minus": 0.0 }), "lambda_minus"),
        (json!({ "iters": 0 }), "iters"),
        (json!({ "s_liver": 0.1 }), "s_liver"),
        (json!({ "s_rectum": "high" }), "body"),
    ];
    for (body, field) in cases {
        let (status, err, _) = call(&app, "POST", &replan, Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(err["field"], field, "{body}: {err}");
    }
    let (_, m, _) = call(&app, "GET", &format!("/api/session/{id}/metrics"), None).await;
    assert_eq!(m["revision"], 0, "rejected requests must not replan");

    let (status, err, _) = call(&app, "POST", "/api/session", Some(json!({ "phantom": { "dims": [0, 4, 4] } }))).await;
    assert_eq!((status, err["field"].as_str()), (StatusCode::BAD_REQUEST, Some("phantom")));
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_sessions_are_not_found() {
    let app = app();
    for (method, uri) in [
        ("GET", "/api/session/77/metrics"),
        ("GET", "/api/session/77/dvh"),
        ("GET", "/api/session/77/fluence/0"),
        ("POST", "/api/session/77/replan"),
    ] {
        let (status, err, _) = call(&app, method, uri, Some(json!({}))).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(err["field"], "id");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_replan_is_rejected_busy() {
    let app = app();
    let (id, _) = new_session(&app, 2).await;
    let replan = format!("/api/session/{id}/replan");
    let slow = {
        let (app, replan) = (app.clone(), replan.clone());
        tokio::spawn(async move { call(&app, "POST", &replan, Some(json!({ "iters": 200, "s_rectum": 0.01 }))).await })
    };
    tokio::time::sleep(Duration::from_millis(150)).await;
    let (status, err, retry) = call(&app, "POST", &replan, Some(json!({ "s_rectum": 0.02 }))).await;
    assert_eq!(status, StatusCode::CONFLICT, "{err}");
    assert_eq!(retry.as_deref(), Some("1"));
    assert!(err["retry_after_ms"].as_u64().unwrap() > 0);
    // reads still work while busy
    let (status, _, _) = call(&app, "GET", &format!("/api/session/{id}/metrics"), None).await;
    assert_eq!(status, StatusCode::OK);

    let (status, done, _) = slow.await.unwrap();
    assert_eq!((status, done["revision"].as_u64()), (StatusCode::OK, Some(1)));
    let (status, again, _) = call(&app, "POST", &replan, Some(json!({ "iters": 2 }))).await;
    assert_eq!((status, again["revision"].as_u64()), (StatusCode::OK, Some(2)));

    // another session is independent of this one's lock
    let (other, _) = new_session(&app, 2).await;
    assert_ne!(other, id);
}

#[tokio::test(flavor = "multi_thread")]
async fn static_assets_are_served_without_escaping_the_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    let app = router(Arc::new(AppState::default()), Some(dir.path().to_path_buf()));
    let resp = app.clone().oneshot(Request::get("/").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()[header::CONTENT_TYPE].to_str().unwrap().starts_with("text/html"));
    assert_eq!(to_bytes(resp.into_body(), usize::MAX).await.unwrap(), "<html>ui</html>");
    for uri in ["/../secret", "/missing.js"] {
        let resp = app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
        assert_eq!(resp.status(), StatusCode::NOT_FOUND, "{uri}");
    }
}
