//! HTTP API behaviour, exercised in-process through the router.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use nirb_cli::service::{router, AppState};
use nirb_core::config::ProblemConfig;
use nirb_core::pipeline::train_with;
use nirb_core::problems::CountingProvider;
use nirb_core::rbm::{OnlineOperators, ReducedBasisModel};
use nirb_core::{ComplexMatrix, ProblemProvider};

struct Fixture {
    config: ProblemConfig,
    model: Arc<ReducedBasisModel>,
    provider: CountingProvider<Box<dyn ProblemProvider>>,
}

fn fixture(name: &str) -> Fixture {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let config = ProblemConfig::load(&path).unwrap();
    let provider = CountingProvider::new(config.build_provider().unwrap());
    let model = Arc::new(train_with(&config, &provider).unwrap().model);
    provider.reset();
    Fixture {
        config,
        model,
        provider,
    }
}

fn toy() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| fixture("affine_toy.json"))
}

fn kernel() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| fixture("kernel_n200.json"))
}

fn app(f: &Fixture, allow_extrapolation: bool) -> Router {
    router(AppState {
        model: f.model.clone(),
        name: f.config.name.as_str().into(),
        allow_extrapolation,
    })
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = call(app, "POST", uri, Some(body.to_string())).await;
    (s, serde_json::from_slice(&b).unwrap())
}

/// Response without its timing field, for value comparisons.
fn untimed(mut v: Value) -> Value {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(m) => {
                m.remove("wall_time_us");
                m.values_mut().for_each(strip);
            }
            Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    strip(&mut v);
    v
}

fn kernel_point(mu0: f64) -> Value {
    json!({"mu0": mu0, "mu1": 2.0, "mu2": 3.5, "mu3": 1.5})
}

#[tokio::test]
async fn info_reports_the_configured_parameters() {
    let f = kernel();
    let (status, body) = call(&app(f, false), "GET", "/model/info", None).await;
    assert_eq!(status, StatusCode::OK);
    let info: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(info["name"], "sphere-kernel-n200");
    let params = info["parameters"].as_array().unwrap();
    assert_eq!(params.len(), f.config.parameters.len());
    for (p, spec) in params.iter().zip(&f.config.parameters) {
        assert_eq!(p["name"], spec.name.as_str());
        assert_eq!(p["lo"].as_f64().unwrap(), spec.lo);
        assert_eq!(p["hi"].as_f64().unwrap(), spec.hi);
    }
    assert_eq!(info["n_hat"], f.model.n_hat());
    assert_eq!(info["d_z"], f.model.d_z());
    assert_eq!(info["allow_extrapolation"], false);
}

#[tokio::test]
async fn solve_matches_the_model_and_honours_include_gamma() {
    let f = toy();
    let app = app(f, false);
    let (status, body) = post(&app, "/solve", json!({"parameters": {"mu": 0.37}})).await;
    assert_eq!(status, StatusCode::OK);
    let direct = f.model.online_solve(&f.model.domain.point(vec![0.37]).unwrap()).unwrap();
    assert_eq!(body["qoi"]["re"].as_f64().unwrap(), direct.qoi.re);
    assert_eq!(body["qoi"]["im"].as_f64().unwrap(), direct.qoi.im);
    assert_eq!(body["error_bound"].as_f64().unwrap(), direct.error_bound);
    assert!(body.get("gamma_hat").is_none());
    assert_eq!(body["extrapolated"], false);
    assert!(body["wall_time_us"].as_f64().unwrap() >= 0.0);

    let (_, body) = post(&app, "/solve", json!({"parameters": {"mu": 0.37}, "include_gamma": true})).await;
    assert_eq!(body["gamma_hat"].as_array().unwrap().len(), f.model.n_hat());
}

#[tokio::test]
async fn bad_requests_are_rejected_with_400() {
    let app = app(toy(), false);
    for body in [
        json!({"parameters": {"mu": 0.5, "nu": 1.0}}),
        json!({"parameters": {}}),
        json!({"parameters": {"mu": "half"}}),
        json!({"parameters": {"mu": 0.5}, "extra": 1}),
        json!({"params": {"mu": 0.5}}),
    ] {
        let (status, resp) = post(&app, "/solve", body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert!(resp["error"].as_str().is_some_and(|s| !s.is_empty()));
    }
    for raw in ["{not json", "", "[1, 2]"] {
        let (status, _) = call(&app, "POST", "/solve", Some(raw.into())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{raw:?}");
    }
    let (status, _) = post(
        &app,
        "/uq",
        json!({"distributions": {"mu": {"kind": "uniform"}}, "n_samples": 0, "seed": 1}),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(
        &app,
        "/uq",
        json!({"distributions": {"mu": {"kind": "cauchy"}}, "n_samples": 10, "seed": 1}),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(
        &app,
        "/sweep",
        json!({"base": {"mu": 0.5}, "axis": "nu", "values": [0.1]}),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn out_of_box_is_422_unless_extrapolation_is_allowed() {
    let f = toy();
    let strict = app(f, false);
    for mu in [-0.1, 1.5] {
        let (status, _) = post(&strict, "/solve", json!({"parameters": {"mu": mu}})).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let (status, _) = post(
        &strict,
        "/sweep",
        json!({"base": {"mu": 0.5}, "axis": "mu", "lo": 0.0, "hi": 1.2, "count": 5}),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let lax = app(f, true);
    let (status, body) = post(&lax, "/solve", json!({"parameters": {"mu": 1.5}})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["extrapolated"], true);
}

#[tokio::test]
async fn sweep_keeps_request_order() {
    let f = kernel();
    let app = app(f, false);
    // 50 frequencies in a scrambled order.
    let values: Vec<f64> = (0..50).map(|i| 4.5 + 5.5 * ((i * 37) % 50) as f64 / 49.0).collect();
    let (status, body) = post(
        &app,
        "/sweep",
        json!({"base": kernel_point(7.0), "axis": "mu0", "values": values}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["axis"], "mu0");
    let entries = body["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 50);
    for (e, &v) in entries.iter().zip(&values) {
        assert_eq!(e["value"].as_f64().unwrap(), v);
        let (_, single) = post(&app, "/solve", json!({"parameters": kernel_point(v)})).await;
        assert_eq!(untimed(e["solution"].clone()), untimed(single));
    }

    let (_, body) = post(
        &app,
        "/sweep",
        json!({"base": kernel_point(7.0), "axis": "mu0", "lo": 4.5, "hi": 10.0, "count": 12}),
    )
    .await;
    let got: Vec<f64> = body["entries"].as_array().unwrap().iter().map(|e| e["value"].as_f64().unwrap()).collect();
    assert_eq!(got.len(), 12);
    assert!(got.windows(2).all(|w| w[0] < w[1]));
    assert_eq!((got[0], got[11]), (4.5, 10.0));
}

#[tokio::test]
async fn bound_is_tiny_at_a_snapshot() {
    let f = kernel();
    let app = app(f, false);
    let mu = &f.model.snapshot_mus[0];
    let params: serde_json::Map<String, Value> =
        mu.names().iter().zip(mu.coords()).map(|(n, &v)| (n.clone(), json!(v))).collect();
    let (status, body) = post(&app, "/solve", json!({"parameters": params})).await;
    assert_eq!(status, StatusCode::OK);
    let bound = body["error_bound"].as_f64().unwrap();
    assert!(bound <= 1e-6, "bound {bound:e} at a snapshot");
}

#[tokio::test]
async fn uq_is_reproducible_for_a_seed() {
    let app = app(kernel(), false);
    let req = json!({
        "distributions": {
            "mu0": {"kind": "uniform"},
            "mu1": {"kind": "truncated_normal", "mean": 3.0, "std": 0.5},
            "mu2": {"kind": "truncated_log_normal", "mu": 1.0, "sigma": 0.3},
            "mu3": {"kind": "point_mass", "value": 2.0}
        },
        "n_samples": 400,
        "seed": 99,
        "bins": 16
    });
    let (s1, a) = call(&app, "POST", "/uq", Some(req.to_string())).await;
    let (s2, b) = call(&app, "POST", "/uq", Some(req.to_string())).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    let v: Value = serde_json::from_slice(&a).unwrap();
    let counted: u64 = v["re"]["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counted as usize + v["failures"].as_u64().unwrap() as usize, 400);
    assert_eq!(v["re"]["counts"].as_array().unwrap().len(), 16);

    let mut other = req.clone();
    other["seed"] = json!(100);
    let (_, c) = call(&app, "POST", "/uq", Some(other.to_string())).await;
    assert_ne!(a, c);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_clients_get_identical_answers() {
    let f = kernel();
    let app = app(f, false);
    let points: Vec<f64> = (0..25).map(|i| 4.5 + 0.22 * i as f64).collect();
    let mut reference = Vec::new();
    for &p in &points {
        reference.push(untimed(post(&app, "/solve", json!({"parameters": kernel_point(p)})).await.1));
    }
    let reference = Arc::new(reference);
    let points = Arc::new(points);
    let clients: Vec<_> = (0..64)
        .map(|c| {
            let (app, reference, points) = (app.clone(), reference.clone(), points.clone());
            tokio::spawn(async move {
                // 64 clients sharing 1000 requests.
                let count = 1000 / 64 + usize::from(c < 1000 % 64);
                for k in 0..count {
                    let i = (c * 7 + k * 3) % points.len();
                    let (status, body) = post(&app, "/solve", json!({"parameters": kernel_point(points[i])})).await;
                    assert_eq!(status, StatusCode::OK);
                    assert_eq!(untimed(body), reference[i]);
                }
                count
            })
        })
        .collect();
    let mut served = 0;
    for c in clients {
        served += c.await.unwrap();
    }
    assert_eq!(served, 1000);
}

#[tokio::test]
async fn handlers_never_assemble() {
    let f = kernel();
    let app = app(f, false);
    post(&app, "/solve", json!({"parameters": kernel_point(6.0)})).await;
    post(&app, "/sweep", json!({"base": kernel_point(6.0), "axis": "mu1", "lo": 1.0, "hi": 5.0, "count": 9})).await;
    post(
        &app,
        "/uq",
        json!({"distributions": {"mu0": {"kind": "uniform"}, "mu1": {"kind": "uniform"},
               "mu2": {"kind": "uniform"}, "mu3": {"kind": "uniform"}}, "n_samples": 50, "seed": 1}),
    )
    .await;
    call(&app, "GET", "/model/info", None).await;
    assert_eq!(f.provider.total_calls(), 0);
}

#[tokio::test]
async fn internal_failures_do_not_leak_details() {
    let f = toy();
    let mut broken = (*f.model).clone();
    let n = broken.n_hat();
    let zeros = vec![ComplexMatrix::zeros(n, n); broken.a_hat.len()];
    broken.online = OnlineOperators::new(&zeros, &broken.c_hat);
    let app = router(AppState {
        model: Arc::new(broken),
        name: "broken".into(),
        allow_extrapolation: false,
    });
    let (status, body) = call(&app, "POST", "/solve", Some(json!({"parameters": {"mu": 0.5}}).to_string())).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v, json!({"error": "internal error"}));
}
