//! HTTP front for the online stage.
//!
//! The router holds one immutable reduced model behind an `Arc`. Handlers
//! never touch an assembler: everything served is `n`-independent.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nirb_core::rbm::{uq_histogram, Distribution, Histogram, OnlineSolution, ReducedBasisModel};
use nirb_core::{Error, ParameterPoint, C64};

/// Largest sample count accepted by `/uq`.
pub const MAX_UQ_SAMPLES: usize = 200_000;
/// Largest number of points accepted by `/sweep`.
pub const MAX_SWEEP_POINTS: usize = 100_000;

#[derive(Clone)]
pub struct AppState {
    pub model: Arc<ReducedBasisModel>,
    pub name: Arc<str>,
    pub allow_extrapolation: bool,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/model/info", get(info))
        .route("/solve", post(solve))
        .route("/sweep", post(sweep))
        .route("/uq", post(uq))
        .with_state(state)
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    OutOfBox(String),
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::OutOfBox(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Internal(m) => {
                log::error!("internal error: {m}");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal error".to_string())
            }
        };
        (status, Json(ErrorBody { error: msg })).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e.root() {
            Error::UnknownParameter(_) | Error::InvalidInput(_) | Error::NonFinite(_) | Error::LengthMismatch { .. } => {
                ApiError::BadRequest(e.root().to_string())
            }
            Error::OutOfDomain { .. } => ApiError::OutOfBox(e.root().to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

/// Parses a JSON body, mapping every syntax or shape problem to 400.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed request body: {e}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl From<C64> for Complex {
    fn from(c: C64) -> Self {
        Self { re: c.re, im: c.im }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub parameters: Vec<ParameterInfo>,
    pub n_hat: usize,
    pub d_z: usize,
    pub d_z_rhs: usize,
    pub beta_lb: f64,
    pub allow_extrapolation: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParameterInfo {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

async fn info(State(st): State<AppState>) -> Json<ModelInfo> {
    let d = &st.model.domain;
    Json(ModelInfo {
        name: st.name.to_string(),
        parameters: (0..d.dim())
            .map(|i| ParameterInfo {
                name: d.names()[i].clone(),
                lo: d.lo()[i],
                hi: d.hi()[i],
            })
            .collect(),
        n_hat: st.model.n_hat(),
        d_z: st.model.d_z(),
        d_z_rhs: st.model.d_z_rhs(),
        beta_lb: st.model.beta_lb,
        allow_extrapolation: st.allow_extrapolation,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveRequest {
    pub parameters: BTreeMap<String, f64>,
    #[serde(default)]
    pub include_gamma: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResponse {
    pub qoi: Complex,
    pub error_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_hat: Option<Vec<Complex>>,
    pub extrapolated: bool,
    pub rho_clamped: bool,
    pub wall_time_us: f64,
}

impl SolveResponse {
    fn new(s: OnlineSolution, include_gamma: bool) -> Self {
        Self {
            qoi: s.qoi.into(),
            error_bound: s.error_bound,
            gamma_hat: include_gamma.then(|| s.gamma_hat.iter().map(|&g| g.into()).collect()),
            extrapolated: s.extrapolated,
            rho_clamped: s.rho_clamped,
            wall_time_us: s.wall_time.as_secs_f64() * 1e6,
        }
    }
}

impl AppState {
    fn point(&self, values: &BTreeMap<String, f64>) -> Result<ParameterPoint, ApiError> {
        let mu = self
            .model
            .domain
            .from_named(values.iter().map(|(k, v)| (k.as_str(), *v)))?;
        self.check_box(&mu)?;
        Ok(mu)
    }

    fn check_box(&self, mu: &ParameterPoint) -> Result<(), ApiError> {
        if !self.allow_extrapolation {
            self.model.domain.check(mu)?;
        }
        Ok(())
    }
}

async fn solve(State(st): State<AppState>, body: Bytes) -> Result<Json<SolveResponse>, ApiError> {
    let req: SolveRequest = parse(&body)?;
    let mu = st.point(&req.parameters)?;
    let s = st.model.online_solve(&mu)?;
    Ok(Json(SolveResponse::new(s, req.include_gamma)))
}

/// Values along one axis, either listed or evenly spaced.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValues {
    List { values: Vec<f64> },
    Range { lo: f64, hi: f64, count: usize },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepRequest {
    /// Values of every parameter; the swept one is overridden.
    pub base: BTreeMap<String, f64>,
    pub axis: String,
    #[serde(flatten)]
    pub values: AxisValues,
    #[serde(default)]
    pub include_gamma: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<SolveResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepResponse {
    pub axis: String,
    pub entries: Vec<SweepEntry>,
}

async fn sweep(State(st): State<AppState>, body: Bytes) -> Result<Json<SweepResponse>, ApiError> {
    let req: SweepRequest = parse(&body)?;
    let base = st.point(&req.base)?;
    let domain = &st.model.domain;
    let axis = domain
        .names()
        .iter()
        .position(|n| *n == req.axis)
        .ok_or_else(|| ApiError::BadRequest(format!("unknown parameter name {:?}", req.axis)))?;
    let values = match req.values {
        AxisValues::List { values } => values,
        AxisValues::Range { lo, hi, count } => {
            if count > MAX_SWEEP_POINTS {
                return Err(ApiError::BadRequest(format!("count exceeds {MAX_SWEEP_POINTS}")));
            }
            nirb_core::problems::linspace(lo, hi, count)
        }
    };
    if values.len() > MAX_SWEEP_POINTS {
        return Err(ApiError::BadRequest(format!("more than {MAX_SWEEP_POINTS} sweep values")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::BadRequest("non-finite sweep value".into()));
    }
    let mus: Vec<ParameterPoint> = values.iter().map(|&v| base.with_coord(axis, v)).collect();
    for mu in &mus {
        st.check_box(mu)?;
    }
    let model = st.model.clone();
    let include = req.include_gamma;
    let entries = tokio::task::spawn_blocking(move || {
        model
            .sweep(&mus)
            .into_iter()
            .zip(values)
            .map(|(r, value)| match r {
                Ok(s) => SweepEntry {
                    value,
                    solution: Some(SolveResponse::new(s, include)),
                    error: None,
                },
                Err(e) => SweepEntry {
                    value,
                    solution: None,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(SweepResponse { axis: req.axis, entries }))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqRequest {
    pub distributions: BTreeMap<String, Distribution>,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_bins() -> usize {
    30
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UqResponse {
    pub re: Histogram,
    pub im: Histogram,
    pub mean: Complex,
    pub samples: usize,
    pub failures: usize,
}

async fn uq(State(st): State<AppState>, body: Bytes) -> Result<Json<UqResponse>, ApiError> {
    let req: UqRequest = parse(&body)?;
    let domain = &st.model.domain;
    if let Some(k) = req.distributions.keys().find(|k| !domain.names().contains(k)) {
        return Err(ApiError::BadRequest(format!("unknown parameter name {k:?}")));
    }
    let dists = domain
        .names()
        .iter()
        .map(|n| {
            req.distributions
                .get(n)
                .copied()
                .ok_or_else(|| ApiError::BadRequest(format!("missing distribution for {n:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if req.n_samples == 0 || req.n_samples > MAX_UQ_SAMPLES {
        return Err(ApiError::BadRequest(format!("n_samples must be in 1..={MAX_UQ_SAMPLES}")));
    }
    if req.bins == 0 || req.bins > 10_000 {
        return Err(ApiError::BadRequest("bins must be in 1..=10000".into()));
    }
    let model = st.model.clone();
    let r = tokio::task::spawn_blocking(move || uq_histogram(&model, &dists, req.n_samples, req.seed, req.bins))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(UqResponse {
        re: r.re,
        im: r.im,
        mean: Complex {
            re: r.mean_re,
            im: r.mean_im,
        },
        samples: r.samples,
        failures: r.failures,
    }))
}
