use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

use ctxcomplete_core::beam::Completion;
use ctxcomplete_core::data::{gen_synthetic, synthetic_feature_dim, SyntheticConfig, SyntheticDataset};
use ctxcomplete_core::factorcell::{FactorCellParams, ModelConfig};
use ctxcomplete_core::instance::{InstanceConfig, InstanceHeadParams};
use ctxcomplete_core::model::{ClassProbability, ContextSource, InstanceModel, LanguageModel};
use ctxcomplete_core::tensor::seeded_rng;
use ctxcomplete_core::vocab::Vocab;
use ctxcomplete_service::http::router;
use ctxcomplete_service::{
    ApiError, CompleteResponse, Engine, EngineError, Health, ImageInfo, InstancesResponse, ModelSlot,
};

fn dataset() -> SyntheticDataset {
    gen_synthetic(
        &SyntheticConfig {
            n_scenes: 20,
            ..Default::default()
        },
        &mut seeded_rng(9),
    )
}

fn models(ds: &SyntheticDataset) -> (LanguageModel, InstanceModel) {
    let vocab = Vocab::from_corpus(ds.queries.iter().map(|q| q.query.as_str()));
    let config = ModelConfig::desk(vocab.len(), synthetic_feature_dim());
    let lm = LanguageModel {
        params: FactorCellParams::init(&config, &mut seeded_rng(1)).unwrap(),
        config,
        vocab: vocab.clone(),
    };
    let icfg = InstanceConfig::desk(vocab.len(), ds.catalog.len());
    let inst = InstanceModel {
        params: InstanceHeadParams::init(&icfg, &mut seeded_rng(2)).unwrap(),
        config: icfg,
        vocab,
        catalog: ds.catalog.clone(),
    };
    (lm, inst)
}

fn engine() -> (Engine, SyntheticDataset) {
    let ds = dataset();
    let (lm, inst) = models(&ds);
    (Engine::new(lm, ds.images(), Some(inst)).unwrap(), ds)
}

fn app() -> (Router, Arc<ModelSlot>, SyntheticDataset) {
    let (engine, ds) = engine();
    let slot = Arc::new(ModelSlot::new(engine));
    (router(slot.clone()), slot, ds)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn error(bytes: &[u8]) -> ApiError {
    serde_json::from_slice(bytes)
        .unwrap_or_else(|e| panic!("not an ApiError body ({e}): {}", String::from_utf8_lossy(bytes)))
}

#[tokio::test]
async fn health_reports_version() {
    let (app, slot, _) = app();
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.model_version, slot.get().unwrap().model_version());
    assert_eq!(h.model_version.len(), 16);
}

#[tokio::test]
async fn images_lists_gallery() {
    let (app, _, ds) = app();
    let (status, body) = call(&app, "GET", "/images", None).await;
    assert_eq!(status, StatusCode::OK);
    let images: Vec<ImageInfo> = serde_json::from_slice(&body).unwrap();
    assert_eq!(images.len(), ds.scenes.len());
    for (info, scene) in images.iter().zip(&ds.scenes) {
        assert_eq!(info.id, scene.id);
        assert_eq!(info.instances, scene.classes());
    }
}

#[tokio::test]
async fn complete_is_deterministic_and_consistent_with_scoring() {
    let (app, slot, ds) = app();
    let req = format!(
        r#"{{"prefix":"the b","image_id":"{}","width":6,"k":4}}"#,
        ds.scenes[3].id
    );
    let (status, first) = call(&app, "POST", "/complete", Some(&req)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&first));
    let (_, second) = call(&app, "POST", "/complete", Some(&req)).await;
    assert_eq!(first, second);

    let res: CompleteResponse = serde_json::from_slice(&first).unwrap();
    assert_eq!(res.completions.len(), 4);
    let engine = slot.get().unwrap();
    let source = ContextSource::Features(ds.scenes[3].features.clone());
    for (i, c) in res.completions.iter().enumerate() {
        assert_eq!(c.rank, i + 1);
        assert!(c.text.starts_with("the b"));
        let rescored = engine.language_model().score(&c.text, "the b", &source).unwrap();
        assert_eq!(rescored, c.logprob);
    }
    assert!(res.completions.windows(2).all(|w| w[0].logprob >= w[1].logprob));
}

#[tokio::test]
async fn k_one_returns_one_completion() {
    let (app, _, _) = app();
    let (status, body) = call(
        &app,
        "POST",
        "/complete",
        Some(r#"{"prefix":"a","image_id":"noise","k":1}"#),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let res: CompleteResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(res.completions.len(), 1);
}

#[tokio::test]
async fn noise_seed_selects_context() {
    let (app, _, _) = app();
    let a = call(
        &app,
        "POST",
        "/complete",
        Some(r#"{"prefix":"r","image_id":"noise","seed":1}"#),
    )
    .await;
    let b = call(&app, "POST", "/complete", Some(r#"{"prefix":"r","image_id":"noise"}"#)).await;
    let c = call(
        &app,
        "POST",
        "/complete",
        Some(r#"{"prefix":"r","image_id":"noise","seed":0}"#),
    )
    .await;
    assert_eq!(b, c);
    let a: CompleteResponse = serde_json::from_slice(&a.1).unwrap();
    let b: CompleteResponse = serde_json::from_slice(&b.1).unwrap();
    assert_ne!(a, b);
}

#[tokio::test]
async fn bad_completion_requests() {
    let (app, _, ds) = app();
    let id = &ds.scenes[0].id;

    let (status, body) = call(
        &app,
        "POST",
        "/complete",
        Some(&format!(r#"{{"prefix":"ab§","image_id":"{id}"}}"#)),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err = error(&body);
    assert_eq!(err.code, "unknown_char");
    assert!(err.message.contains('§'), "{}", err.message);

    let (status, body) = call(
        &app,
        "POST",
        "/complete",
        Some(r#"{"prefix":"a","image_id":"scene-999999"}"#),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error(&body).code, "unknown_image");

    let (status, body) = call(
        &app,
        "POST",
        "/complete",
        Some(&format!(r#"{{"prefix":"a","image_id":"{id}","width":2,"k":3}}"#)),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error(&body).code, "invalid_beam");

    let long = "a".repeat(60);
    let (status, body) = call(
        &app,
        "POST",
        "/complete",
        Some(&format!(r#"{{"prefix":"{long}","image_id":"{id}"}}"#)),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error(&body).code, "prefix_too_long");

    for bad in [
        "{",
        r#"{"prefix":"a"}"#,
        r#"{"prefix":"a","image_id":"noise","beam":3}"#,
    ] {
        let (status, body) = call(&app, "POST", "/complete", Some(bad)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(error(&body).code, "invalid_json");
    }
}

#[tokio::test]
async fn instances_are_sorted_probabilities() {
    let (app, slot, _) = app();
    let (status, body) = call(
        &app,
        "POST",
        "/instances",
        Some(r#"{"query":"red wine bottle on the table"}"#),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let res: InstancesResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(res.threshold_used, 0.5);
    let engine = slot.get().unwrap();
    let model = engine.instance_model().unwrap();
    assert_eq!(res.probs.len(), model.catalog.len());
    assert!(res.probs.iter().all(|p| p.p > 0.0 && p.p < 1.0));
    assert!(res.probs.windows(2).all(|w| w[0].p >= w[1].p));

    let direct = model.probs("red wine bottle on the table").unwrap();
    for ClassProbability { class, p } in &res.probs {
        assert_eq!(*p, direct[model.catalog.index_of(class).unwrap()]);
    }

    let (_, body) = call(
        &app,
        "POST",
        "/instances",
        Some(r#"{"query":"red wine bottle on the table","top":3}"#),
    )
    .await;
    let top: InstancesResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(top.probs, res.probs[..3]);
}

#[tokio::test]
async fn bad_instance_requests() {
    let (app, _, _) = app();
    for q in [r#"{"query":""}"#, r#"{"query":"   "}"#] {
        let (status, body) = call(&app, "POST", "/instances", Some(q)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(error(&body).code, "empty_query");
    }
    let long = format!(r#"{{"query":"{}"}}"#, "x".repeat(80));
    let (status, body) = call(&app, "POST", "/instances", Some(&long)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error(&body).code, "query_too_long");
}

#[tokio::test]
async fn every_error_has_a_json_body() {
    let (app, _, _) = app();
    let (status, body) = call(&app, "GET", "/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error(&body).code, "not_found");
    let (status, body) = call(&app, "GET", "/complete", None).await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(error(&body).code, "method_not_allowed");
}

#[tokio::test]
async fn empty_slot_is_unavailable() {
    let app = router(Arc::new(ModelSlot::empty()));
    for (method, uri, body) in [
        ("GET", "/health", None),
        ("GET", "/images", None),
        ("POST", "/complete", Some(r#"{"prefix":"a","image_id":"noise"}"#)),
        ("POST", "/instances", Some(r#"{"query":"a"}"#)),
    ] {
        let (status, bytes) = call(&app, method, uri, body).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
        assert_eq!(error(&bytes).code, "model_not_loaded");
    }
}

#[tokio::test]
async fn missing_instance_model_is_unavailable() {
    let ds = dataset();
    let (lm, _) = models(&ds);
    let app = router(Arc::new(ModelSlot::new(Engine::new(lm, ds.images(), None).unwrap())));
    let (status, _) = call(&app, "POST", "/instances", Some(r#"{"query":"a"}"#)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(&app, "POST", "/complete", Some(r#"{"prefix":"a","image_id":"noise"}"#)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn cors_headers_are_sent() {
    let (app, _, _) = app();
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/complete")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let res = app.oneshot(req).await.unwrap();
    assert!(res.status().is_success());
    assert_eq!(res.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_sequential() {
    let (app, _, ds) = app();
    let reqs: Vec<String> = (0..24)
        .map(|i| {
            let image = if i % 3 == 0 {
                "noise".to_string()
            } else {
                ds.scenes[i % ds.scenes.len()].id.clone()
            };
            let prefix = ["t", "the ", "a r", "wine"][i % 4];
            format!(r#"{{"prefix":"{prefix}","image_id":"{image}","width":4,"k":3,"seed":{i}}}"#)
        })
        .collect();
    let mut sequential = Vec::new();
    for r in &reqs {
        sequential.push(call(&app, "POST", "/complete", Some(r)).await);
    }
    let handles: Vec<_> = reqs
        .iter()
        .cloned()
        .map(|r| {
            let app = app.clone();
            tokio::spawn(async move { call(&app, "POST", "/complete", Some(&r)).await })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(&sequential) {
        assert_eq!(&h.await.unwrap(), want);
    }
}

#[tokio::test]
async fn replacing_the_snapshot_changes_version() {
    let (app, slot, ds) = app();
    let (_, before) = call(&app, "GET", "/health", None).await;
    let (mut lm, inst) = models(&ds);
    lm.params = FactorCellParams::init(&lm.config, &mut seeded_rng(77)).unwrap();
    slot.replace(Some(Engine::new(lm, ds.images(), Some(inst)).unwrap()));
    let (_, after) = call(&app, "GET", "/health", None).await;
    assert_ne!(before, after);
}

#[test]
fn engine_validates_gallery() {
    let ds = dataset();
    let (lm, _) = models(&ds);
    let mut images = ds.images();
    images[1].features.pop();
    assert!(matches!(
        Engine::new(lm.clone(), images, None),
        Err(EngineError::FeatureDim { .. })
    ));
    let mut images = ds.images();
    images[2].id = "noise".into();
    assert!(matches!(
        Engine::new(lm.clone(), images, None),
        Err(EngineError::BadImageId(_))
    ));
    let mut images = ds.images();
    images[2].id = images[0].id.clone();
    assert!(matches!(Engine::new(lm, images, None), Err(EngineError::BadImageId(_))));
}

#[tokio::test]
async fn completion_latency_p95_is_interactive() {
    let (app, _, ds) = app();
    let text = "a red wine bottle on the wooden table near the lamp by a";
    let mut times = Vec::new();
    for i in 0..40 {
        let len = 1 + (i * 7) % 49;
        let prefix: String = text.chars().take(len).collect();
        let image = &ds.scenes[i % ds.scenes.len()].id;
        let req = format!(r#"{{"prefix":"{prefix}","image_id":"{image}"}}"#);
        let start = Instant::now();
        let (status, body) = call(&app, "POST", "/complete", Some(&req)).await;
        times.push(start.elapsed());
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        let res: CompleteResponse = serde_json::from_slice(&body).unwrap();
        assert!(res.completions.iter().all(|c: &Completion| c.text.starts_with(&prefix)));
    }
    times.sort();
    let p95 = times[(times.len() * 95).div_ceil(100) - 1];
    println!("completion p95 latency {p95:?}");
    assert!(p95 < Duration::from_millis(150), "p95 {p95:?}");
}
