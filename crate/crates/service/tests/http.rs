//! The HTTP interface driven in-process through the router.

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::Engine;
use boxprompt::api::{Counters, ErrorBody, Health, PromptResponse, SessionCreated};
use boxprompt::http::router;
use boxprompt::Service;
use boxprompt_core::config::{ModelConfig, ServeConfig};
use boxprompt_core::image::Image;
use boxprompt_core::mask::{BitMask, Rle};
use boxprompt_core::pipeline::Model;
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::json;
use tower::ServiceExt;

fn service(max_sessions: usize) -> Arc<Service> {
    let cfg = ServeConfig {
        max_sessions,
        max_image_side: 128,
        ..ServeConfig::default()
    };
    Arc::new(Service::from_model(Model::init(ModelConfig::default(), 0).unwrap(), 0, &cfg))
}

fn png(side: usize) -> Vec<u8> {
    Image::from_fn(side, side, 3, |y, x, c| ((x * 7 + y * 3 + c * 11) % 17) as f64 / 16.0)
        .encode_png()
        .unwrap()
}

async fn send<T: DeserializeOwned>(app: &Router, req: Request<Body>) -> (StatusCode, T) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&bytes)));
    (status, body)
}

fn raw_upload(bytes: Vec<u8>) -> Request<Body> {
    Request::post("/sessions")
        .header(header::CONTENT_TYPE, "image/png")
        .body(Body::from(bytes))
        .unwrap()
}

fn prompt_request(id: &str, boxes: serde_json::Value) -> Request<Body> {
    Request::post(format!("/sessions/{id}/prompts"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(json!({ "boxes": boxes }).to_string()))
        .unwrap()
}

async fn create(app: &Router, side: usize) -> SessionCreated {
    let (status, created) = send::<SessionCreated>(app, raw_upload(png(side))).await;
    assert_eq!(status, StatusCode::CREATED);
    created
}

#[tokio::test]
async fn every_upload_encoding_creates_a_session() {
    let app = router(service(8));
    let bytes = png(40);

    let boundary = "XBOUNDARY";
    let mut form = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"a.png\"\r\nContent-Type: image/png\r\n\r\n"
    )
    .into_bytes();
    form.extend_from_slice(&bytes);
    form.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    let multipart = Request::post("/sessions")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(form))
        .unwrap();
    let b64 = base64::engine::general_purpose::STANDARD.encode(&bytes);
    let json_body = Request::post("/sessions")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(json!({ "image_base64": b64 }).to_string()))
        .unwrap();

    let mut ids = Vec::new();
    for req in [multipart, json_body, raw_upload(bytes.clone())] {
        let (status, created) = send::<SessionCreated>(&app, req).await;
        assert_eq!(status, StatusCode::CREATED);
        assert_eq!((created.width, created.height), (40, 40));
        ids.push(created.session_id);
    }
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 3, "the same image uploaded twice still gets distinct sessions");
}

#[tokio::test]
async fn prompts_reuse_the_cached_encoding() {
    let app = router(service(8));
    let id = create(&app, 64).await.session_id;
    let (_, before) = send::<Counters>(&app, Request::get("/debug/counters").body(Body::empty()).unwrap()).await;
    let boxes = json!([[4.0, 4.0, 30.0, 28.0], [20.0, 10.0, 60.0, 50.0]]);
    let (status, first) = send::<PromptResponse>(&app, prompt_request(&id, boxes.clone())).await;
    assert_eq!(status, StatusCode::OK);
    for _ in 0..5 {
        let (_, again) = send::<PromptResponse>(&app, prompt_request(&id, boxes.clone())).await;
        assert_eq!(again.results, first.results, "same session and boxes give the same answer");
    }
    let (_, after) = send::<Counters>(&app, Request::get("/debug/counters").body(Body::empty()).unwrap()).await;
    assert_eq!(after.backbone_invocations, before.backbone_invocations);
    assert_eq!(after.prompt_requests, before.prompt_requests + 6);

    assert_eq!(first.results.len(), 2);
    for r in &first.results {
        let mask = BitMask::from_rle(&r.mask_rle).unwrap();
        assert_eq!((mask.width(), mask.height()), (28, 28));
        assert!(!r.clamped);
        assert!((0.0..=1.0).contains(&r.score));
    }
}

#[tokio::test]
async fn empty_prompt_still_reports_latency() {
    let app = router(service(8));
    let id = create(&app, 32).await.session_id;
    let (status, resp) = send::<PromptResponse>(&app, prompt_request(&id, json!([]))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(resp.results.is_empty());
    assert!(resp.latency_ms >= 0.0);
}

#[tokio::test]
async fn boxes_outside_the_image_are_clamped_or_refused() {
    let app = router(service(8));
    let id = create(&app, 32).await.session_id;
    let (status, resp) = send::<PromptResponse>(&app, prompt_request(&id, json!([[-5.0, 2.0, 40.0, 20.0]]))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(resp.results[0].clamped);

    for bad in [json!([[10.0, 10.0, 2.0, 20.0]]), json!([[40.0, 40.0, 50.0, 50.0]])] {
        let (status, err) = send::<ErrorBody>(&app, prompt_request(&id, bad)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(err.error.code, "malformed_box");
    }
}

#[tokio::test]
async fn error_codes() {
    let app = router(service(8));
    let (status, err) = send::<ErrorBody>(&app, prompt_request("nope", json!([[0.0, 0.0, 4.0, 4.0]]))).await;
    assert_eq!((status, err.error.code.as_str()), (StatusCode::NOT_FOUND, "unknown_session"));

    let (status, err) = send::<ErrorBody>(&app, raw_upload(b"definitely not a png".to_vec())).await;
    assert_eq!((status, err.error.code.as_str()), (StatusCode::BAD_REQUEST, "image_decode_failed"));

    let (status, err) = send::<ErrorBody>(&app, raw_upload(png(200))).await;
    assert_eq!((status, err.error.code.as_str()), (StatusCode::PAYLOAD_TOO_LARGE, "image_too_large"));

    let id = create(&app, 32).await.session_id;
    let req = Request::post(format!("/sessions/{id}/prompts"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{\"boxes\": 3}"))
        .unwrap();
    let (status, err) = send::<ErrorBody>(&app, req).await;
    assert_eq!((status, err.error.code.as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
}

#[tokio::test]
async fn health_reports_the_checkpoint() {
    let svc = service(8);
    let app = router(svc.clone());
    let (status, health) = send::<Health>(&app, Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(health.ok);
    assert_eq!(health.checkpoint_fingerprint, svc.fingerprint());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_uploads_respect_the_session_cap() {
    let app = router(service(3));
    let tasks: Vec<_> = (0..8)
        .map(|i| {
            let app = app.clone();
            tokio::spawn(async move { send::<SessionCreated>(&app, raw_upload(png(24 + i))).await })
        })
        .collect();
    let mut ids = Vec::new();
    for t in tasks {
        let (status, created) = t.await.unwrap();
        assert_eq!(status, StatusCode::CREATED);
        ids.push(created.session_id);
    }
    let (_, c) = send::<Counters>(&app, Request::get("/debug/counters").body(Body::empty()).unwrap()).await;
    assert_eq!((c.sessions_created, c.sessions_evicted, c.live_sessions), (8, 5, 3));
    let mut live = 0;
    for id in &ids {
        let resp = app.clone().oneshot(prompt_request(id, json!([]))).await.unwrap();
        match resp.status() {
            StatusCode::OK => live += 1,
            StatusCode::NOT_FOUND => {}
            other => panic!("unexpected status {other}"),
        }
    }
    assert_eq!(live, 3);
}

#[test]
fn rle_wire_examples_decode_exactly() {
    let decode = |counts: Vec<u64>| BitMask::from_rle(&Rle { counts, width: 2, height: 2 }).unwrap();
    assert_eq!(decode(vec![4]).bits(), &[false; 4]);
    assert_eq!(decode(vec![0, 4]).bits(), &[true; 4]);
    assert_eq!(decode(vec![1, 2, 1]).bits(), &[false, true, true, false]);
    let wire: Rle = serde_json::from_value(json!({ "counts": [1, 2, 1], "width": 2, "height": 2 })).unwrap();
    assert_eq!(decode(wire.counts).count(), 2);
}
