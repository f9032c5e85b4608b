use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use oufield_core::fixture::{generate, FixtureSpec};
use oufield_core::inference::Trace;
use oufield_core::io::{ModelBundle, RunStamp};
use oufield_core::sulfate::Param;
use oufield_service::{router, AppState};

fn bundle_with(traces: &[Trace]) -> ModelBundle {
    let fx = generate(&FixtureSpec::new(6, 6, 11)).unwrap();
    let stamp = RunStamp {
        config_hash: "fixture".into(),
        seed: 3,
    };
    ModelBundle::build(&fx.dataset().unwrap(), traces, &stamp).unwrap()
}

fn spread_trace() -> Trace {
    let th = FixtureSpec::new(6, 6, 11).theta;
    let mut t = Trace::point_mass(&th, 40);
    for (k, row) in t.samples.iter_mut().enumerate() {
        let s = 1.0 + 0.1 * ((k % 7) as f64 - 3.0) / 3.0;
        row[0] *= s;
        row[2] /= s;
        row[4] *= s;
    }
    t
}

fn state() -> AppState {
    AppState::with_bundle(bundle_with(&[spread_trace()])).unwrap()
}

async fn call(state: AppState, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(state: AppState, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(state, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post_raw(state: AppState, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/api/forecast")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(state, req).await
}

async fn post(state: AppState, body: Value) -> (StatusCode, Value) {
    let (s, b) = post_raw(state, &body.to_string()).await;
    (s, serde_json::from_slice(&b).unwrap())
}

#[tokio::test]
async fn facilities_and_model_endpoints() {
    let st = state();
    let (s, v) = get_json(st.clone(), "/api/facilities").await;
    assert_eq!(s, StatusCode::OK);
    let list = v.as_array().unwrap();
    assert_eq!(list.len(), 2);
    for key in ["id", "name", "lon", "lat", "so2_tons"] {
        assert!(list[0].get(key).is_some(), "missing {key}");
    }
    let (s, v) = get_json(st.clone(), "/api/model").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["grid"]["nx"], 6);
    assert_eq!(v["grid"]["origin"].as_array().unwrap().len(), 2);
    assert_eq!(v["delta"], 50.0);
    assert_eq!(v["T"], 1.0);
    assert_eq!(v["n_trace"], 40);
    let gamma = v["theta_posterior_mean"]["gamma"].as_f64().unwrap();
    let ci = v["ci95"]["gamma"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() <= gamma && gamma <= ci[1].as_f64().unwrap());
    let (s, v) = get_json(st, "/api/field/mean").await;
    assert_eq!(s, StatusCode::OK);
    let field = v.as_array().unwrap();
    assert_eq!(field.len(), 36);
    assert!(field.iter().all(|x| x.as_f64().unwrap() > 0.0));
}

#[tokio::test]
async fn no_model_is_conflict() {
    for uri in ["/api/facilities", "/api/model", "/api/field/mean"] {
        let (s, v) = get_json(AppState::empty(), uri).await;
        assert_eq!(s, StatusCode::CONFLICT);
        assert_eq!(v["error"]["code"], "no_model");
    }
    let (s, _) = post(AppState::empty(), json!({"n_draws": 1, "seed": 0})).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn bad_requests() {
    let st = state();
    let (s, v) = post(st.clone(), json!({"reductions": {"nope": 0.5}, "n_draws": 5, "seed": 1})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "unknown_facility");
    assert!(v["error"]["message"].as_str().unwrap().contains("nope"));
    let (s, b) = post_raw(st.clone(), "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["error"]["code"], "bad_request");
    let (s, _) = post(st.clone(), json!({"n_draws": 5})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(st.clone(), json!({"n_draws": 5, "seed": 1, "mode": "sketch"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(st, json!({"n_draws": 5, "seed": 1, "rank": ["F01", "ghost"]})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn repeated_calls_are_byte_identical() {
    let body = json!({"reductions": {"F01": 0.8}, "n_draws": 200, "seed": 42, "mode": "full", "rank": ["F01", "F02"]});
    let (s1, a) = post_raw(state(), &body.to_string()).await;
    let (s2, b) = post_raw(state(), &body.to_string()).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    let preview = json!({"reductions": {"F01": 0.8}, "n_draws": 1, "seed": 42});
    let (_, c) = post_raw(state(), &preview.to_string()).await;
    let (_, d) = post_raw(state(), &preview.to_string()).await;
    assert_eq!(c, d);
}

#[tokio::test]
async fn empty_scenario_on_point_mass_is_zero() {
    let th = FixtureSpec::new(6, 6, 11).theta;
    let st = AppState::with_bundle(bundle_with(&[Trace::point_mass(&th, 5)])).unwrap();
    let (s, v) = post(st.clone(), json!({"reductions": {}, "n_draws": 1, "seed": 7, "mode": "full"})).await;
    assert_eq!(s, StatusCode::OK);
    let field = v["mean_field"].as_array().unwrap();
    assert_eq!(field.len(), 36);
    assert!(field.iter().all(|x| x.as_f64().unwrap() == 0.0));
    let (_, v) = post(st, json!({"reductions": {}, "n_draws": 1, "seed": 7})).await;
    assert!(v["mean_field"].as_array().unwrap().iter().all(|x| x.as_f64().unwrap() == 0.0));
    assert_eq!(v["exposure"]["mean"], 0.0);
}

#[tokio::test]
async fn empty_scenario_exposure_is_noise_only() {
    let n = 400;
    let (_, v) = post(state(), json!({"reductions": {}, "n_draws": n, "seed": 5, "mode": "full"})).await;
    let (mean, lo, hi) = (
        v["exposure"]["mean"].as_f64().unwrap(),
        v["exposure"]["lo"].as_f64().unwrap(),
        v["exposure"]["hi"].as_f64().unwrap(),
    );
    let se = (hi - lo) / (2.0 * 1.96) / (n as f64).sqrt();
    assert!(hi > lo);
    assert!(mean.abs() <= 3.0 * se, "mean {mean}, se {se}");
}

fn exposure_with_se(v: &Value, n: usize) -> (f64, f64) {
    let e = &v["exposure"];
    let (lo, hi) = (e["lo"].as_f64().unwrap(), e["hi"].as_f64().unwrap());
    (e["mean"].as_f64().unwrap(), (hi - lo) / (2.0 * 1.96) / (n as f64).sqrt())
}

#[tokio::test]
async fn superposition_through_the_api() {
    let n = 600;
    let st = state();
    let run = |red: Value, seed: u64| {
        let st = st.clone();
        async move { post(st, json!({"reductions": red, "n_draws": n, "seed": seed, "mode": "full"})).await.1 }
    };
    let a = run(json!({"F01": 1.0}), 1).await;
    let b = run(json!({"F02": 1.0}), 2).await;
    let ab = run(json!({"F01": 1.0, "F02": 1.0}), 3).await;
    let (ma, sa) = exposure_with_se(&a, n);
    let (mb, sb) = exposure_with_se(&b, n);
    let (mab, sab) = exposure_with_se(&ab, n);
    let tol = 3.0 * (sa * sa + sb * sb + sab * sab).sqrt();
    assert!((mab - ma - mb).abs() <= tol, "{mab} vs {ma} + {mb} (tol {tol})");
}

#[tokio::test]
async fn full_ranking_is_sorted_with_intervals() {
    let (s, v) = post(
        state(),
        json!({"reductions": {}, "n_draws": 100, "seed": 8, "mode": "full", "rank": ["F02", "F01"], "fraction_default": 1.0}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let r = v["ranking"].as_array().unwrap();
    assert_eq!(r.len(), 2);
    let means: Vec<f64> = r.iter().map(|e| e["mean"].as_f64().unwrap()).collect();
    assert!(means[0] >= means[1]);
    for e in r {
        assert!(e["lo"].as_f64().unwrap() <= e["hi"].as_f64().unwrap());
    }
    // Without rank the field is absent.
    let (_, v) = post(state(), json!({"n_draws": 3, "seed": 8, "mode": "full"})).await;
    assert!(v.get("ranking").is_none());
}

#[test]
fn bundle_file_round_trip_serves_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bundle.json");
    let b = bundle_with(&[spread_trace()]);
    b.save(&path).unwrap();
    let back = ModelBundle::load(&path).unwrap();
    assert_eq!(back, b);
    assert!((back.posterior_mean().get(Param::Gamma) - b.theta_mean["gamma"]).abs() == 0.0);
}
