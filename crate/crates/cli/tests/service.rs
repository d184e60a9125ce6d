use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use neurocalc::data::png::decode_png;
use neurocalc::data::GlyphAtlas;
use neurocalc::{Model, ModelKind};
use neurocalc_cli::service::{router, AppState};
use neurocalc_cli::Calculator;
use serde_json::{json, Value};
use tower::ServiceExt;

fn frozen(kind: ModelKind, seed: u64) -> Model {
    let mut m: Model = neurocalc::models::build(kind, seed).unwrap();
    m.freeze();
    m
}

fn calculator() -> Calculator {
    Calculator {
        generator: frozen(ModelKind::Generator, 1),
        classifier: frozen(ModelKind::Classifier, 2),
        atlas: GlyphAtlas::synthetic(3, 2),
    }
}

fn loaded(render_seed: Option<u64>) -> Arc<AppState> {
    let state = Arc::new(AppState::new(render_seed));
    state.install(calculator());
    state
}

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(state.clone(), None).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

fn post(body: impl Into<Body>) -> Request<Body> {
    Request::post("/calc")
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap()
}

fn calc(expr: &str) -> Request<Body> {
    post(json!({ "expr": expr }).to_string())
}

fn png_of(v: &Value) -> Vec<u8> {
    let b64 = v["answer_png_base64"].as_str().unwrap();
    base64::engine::general_purpose::STANDARD
        .decode(b64)
        .unwrap()
}

#[tokio::test]
async fn five_plus_two_returns_answer_image() {
    let state = loaded(None);
    let (status, v) = call(&state, calc("5+2")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["true_value"], 7);
    assert!(v["well_formed"].is_boolean());
    assert!(v["latency_ms"].as_f64().unwrap() >= 0.0);
    let img = decode_png(&png_of(&v)).unwrap();
    assert_eq!(img.shape(), &[1, 28, 112]);
    match v.get("parsed_value") {
        Some(p) => assert_eq!(v["correct"], json!(p.as_i64() == Some(7))),
        None => assert_eq!(v["well_formed"], false),
    }
}

#[tokio::test]
async fn extreme_operands_are_accepted() {
    let state = loaded(None);
    for (expr, want) in [("-99--99", 0), ("99+99", 198), ("-99-99", -198), ("0-0", 0)] {
        let (status, v) = call(&state, calc(expr)).await;
        assert_eq!(status, StatusCode::OK, "{expr}");
        assert_eq!(v["true_value"], want, "{expr}");
    }
}

#[tokio::test]
async fn invalid_expressions_are_rejected() {
    let state = loaded(None);
    for expr in ["2*3", "100+1", "5 + 2", "", "5+", "--5+2", "007+1"] {
        let (status, v) = call(&state, calc(expr)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{expr}");
        assert!(v["error"].as_str().unwrap().contains(expr), "{expr}: {v}");
    }
    let (status, _) = call(&state, post("{\"expression\":\"5+2\"}")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&state, post("not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn healthz_gates_on_checkpoint_load() {
    let state = Arc::new(AppState::new(None));
    let health = || Request::get("/healthz").body(Body::empty()).unwrap();
    assert_eq!(
        call(&state, health()).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    assert_eq!(
        call(&state, calc("5+2")).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    state.install(calculator());
    let (status, v) = call(&state, health()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn fixed_render_seed_is_reproducible_and_matches_direct_inference() {
    let state = loaded(Some(42));
    let (_, a) = call(&state, calc("-12+34")).await;
    let (_, b) = call(&state, calc("-12+34")).await;
    assert_eq!(png_of(&a), png_of(&b));
    let direct = calculator()
        .answer(
            neurocalc_cli::parse_expr("-12+34").unwrap(),
            &mut neurocalc::rng::named_stream(42, "-12+34"),
        )
        .unwrap();
    assert_eq!(png_of(&a), direct.png);
    assert_eq!(
        a.get("parsed_value").and_then(Value::as_i64),
        direct.parsed.value
    );
}

#[tokio::test]
async fn cors_preflight_is_allowed() {
    let state = loaded(None);
    let req = Request::options("/calc")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = router(state, None).oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}
