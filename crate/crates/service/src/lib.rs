//! HTTP JSON API over a fitted model bundle.
//!
//! The server holds one read-only [`ModelBundle`] and answers forecast
//! requests statelessly; every request carries its own seed.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use oufield_core::forecast::{population_exposure, Forecaster, Interval, Scenario};
use oufield_core::grid::{EmissionsInventory, PopulationGrid};
use oufield_core::io::{GridSpec, ModelBundle};
use oufield_core::Error;

/// Upper limit on `n_draws` for one request.
pub const MAX_DRAWS: usize = 100_000;

/// Scrubber fraction used for ranking when a request gives none.
pub const DEFAULT_RANK_FRACTION: f64 = 0.8;

/// A bundle with the derived objects every request needs.
pub struct LoadedModel {
    pub bundle: ModelBundle,
    forecaster: Forecaster,
    inventory: EmissionsInventory,
    population: PopulationGrid,
}

impl LoadedModel {
    pub fn new(bundle: ModelBundle) -> oufield_core::Result<Self> {
        bundle.validate()?;
        Ok(LoadedModel {
            forecaster: bundle.forecaster()?,
            inventory: bundle.inventory()?,
            population: bundle.population_grid()?,
            bundle,
        })
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    model: Option<Arc<LoadedModel>>,
}

impl AppState {
    pub fn empty() -> Self {
        AppState { model: None }
    }

    pub fn with_bundle(bundle: ModelBundle) -> oufield_core::Result<Self> {
        Ok(AppState {
            model: Some(Arc::new(LoadedModel::new(bundle)?)),
        })
    }
}

// ---------------------------------------------------------------- wire types

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Preview,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastRequest {
    #[serde(default)]
    pub reductions: BTreeMap<String, f64>,
    #[serde(default)]
    pub fraction_default: Option<f64>,
    pub n_draws: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub rank: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub id: String,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResponse {
    pub mean_field: Vec<f64>,
    pub exposure: Interval,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ranking: Option<Vec<RankEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityInfo {
    pub id: String,
    pub name: String,
    pub lon: f64,
    pub lat: f64,
    pub so2_tons: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub theta_posterior_mean: BTreeMap<String, f64>,
    pub ci95: BTreeMap<String, [f64; 2]>,
    pub grid: GridSpec,
    pub delta: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub n_trace: usize,
}

// ---------------------------------------------------------------- errors

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
        }
    }

    fn no_model() -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            code: "no_model",
            message: "no model bundle is loaded".into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::UnknownFacility(_) => (StatusCode::BAD_REQUEST, "unknown_facility"),
            Error::Domain(_) | Error::Config { .. } => (StatusCode::BAD_REQUEST, "bad_request"),
            e if e.is_numerical() => (StatusCode::INTERNAL_SERVER_ERROR, "numerical"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError {
            status,
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code,
                message: &self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

// ---------------------------------------------------------------- forecasting

fn check_finite(values: &[f64], what: &str) -> Result<(), ApiError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} has nonfinite entries")).into())
    }
}

/// Answers one forecast request against a loaded model.
pub fn handle_forecast(m: &LoadedModel, req: &ForecastRequest) -> Result<ForecastResponse, ApiError> {
    if req.n_draws == 0 || req.n_draws > MAX_DRAWS {
        return Err(ApiError::bad_request(format!("n_draws must lie in 1..={MAX_DRAWS}, got {}", req.n_draws)));
    }
    let fraction = req.fraction_default.unwrap_or(DEFAULT_RANK_FRACTION);
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ApiError::bad_request(format!("fraction_default must lie in [0, 1], got {fraction}")));
    }
    let sc = Scenario::new("request", req.reductions.clone(), &m.inventory)?;
    let candidates = req.rank.clone();
    if let Some(ids) = &candidates {
        for id in ids {
            if m.inventory.facility_index(id).is_none() {
                return Err(Error::UnknownFacility(id.clone()).into());
            }
        }
    }
    let resp = match req.mode {
        Mode::Preview => preview(m, &sc, candidates.as_deref(), fraction)?,
        Mode::Full => full(m, &sc, candidates.as_deref(), fraction, req.n_draws, req.seed)?,
    };
    check_finite(&resp.mean_field, "mean field")?;
    check_finite(&[resp.exposure.mean, resp.exposure.lo, resp.exposure.hi], "exposure")?;
    if let Some(r) = &resp.ranking {
        check_finite(&r.iter().flat_map(|e| [e.mean, e.lo, e.hi]).collect::<Vec<_>>(), "ranking")?;
    }
    Ok(resp)
}

/// Linear combination of the unit-response fields at the posterior mean.
fn preview(
    m: &LoadedModel,
    sc: &Scenario,
    candidates: Option<&[String]>,
    fraction: f64,
) -> Result<ForecastResponse, ApiError> {
    let b = &m.bundle;
    let mut field = vec![0.0; b.baseline_mean.len()];
    for (id, frac) in &sc.reductions {
        let k = m.inventory.facility_index(id).ok_or_else(|| Error::UnknownFacility(id.clone()))?;
        let tons = frac * b.facilities[k].so2_tons;
        for (f, u) in field.iter_mut().zip(&b.unit_responses[k]) {
            *f += tons * u;
        }
    }
    let e = population_exposure(&field, &m.population)?;
    let ranking = match candidates {
        None => None,
        Some(ids) => {
            let mut out = Vec::with_capacity(ids.len());
            for id in ids {
                let k = m.inventory.facility_index(id).ok_or_else(|| Error::UnknownFacility(id.clone()))?;
                let remaining = b.facilities[k].so2_tons * (1.0 - sc.reductions.get(id).copied().unwrap_or(0.0));
                let v = fraction * remaining * population_exposure(&b.unit_responses[k], &m.population)?;
                out.push(RankEntry {
                    id: id.clone(),
                    mean: v,
                    lo: v,
                    hi: v,
                });
            }
            Some(sort_ranking(out))
        }
    };
    Ok(ForecastResponse {
        mean_field: field,
        exposure: Interval { mean: e, lo: e, hi: e },
        ranking,
    })
}

fn sort_ranking(mut v: Vec<RankEntry>) -> Vec<RankEntry> {
    v.sort_by(|a, b| b.mean.total_cmp(&a.mean).then_with(|| a.id.cmp(&b.id)));
    v
}

/// Posterior-predictive sampling over the pooled trace.
fn full(
    m: &LoadedModel,
    sc: &Scenario,
    candidates: Option<&[String]>,
    fraction: f64,
    n_draws: usize,
    seed: u64,
) -> Result<ForecastResponse, ApiError> {
    let fc = &m.forecaster;
    let f = fc.forecast(sc, n_draws, seed, &m.population)?;
    let mean_field = fc.expected_reduction(sc, n_draws, seed)?;
    let ranking = match candidates {
        None => None,
        Some([]) => Some(Vec::new()),
        Some(ids) => {
            let ranked = fc.rank_facilities_after(sc, ids, fraction, n_draws, &m.population, seed)?;
            Some(sort_ranking(
                ranked
                    .into_iter()
                    .map(|r| RankEntry {
                        id: r.id,
                        mean: r.summary.mean,
                        lo: r.summary.lo,
                        hi: r.summary.hi,
                    })
                    .collect(),
            ))
        }
    };
    Ok(ForecastResponse {
        mean_field,
        exposure: Interval {
            mean: f.exposure.mean,
            lo: f.exposure.lo,
            hi: f.exposure.hi,
        },
        ranking,
    })
}

pub fn model_info(b: &ModelBundle) -> ModelInfo {
    ModelInfo {
        theta_posterior_mean: b.theta_mean.clone(),
        ci95: b.ci95.clone(),
        grid: b.grid,
        delta: b.delta,
        t: b.t,
        n_trace: b.trace.len(),
    }
}

// ---------------------------------------------------------------- routes

fn loaded(state: &AppState) -> Result<Arc<LoadedModel>, ApiError> {
    state.model.clone().ok_or_else(ApiError::no_model)
}

async fn facilities(State(state): State<AppState>) -> Result<Json<Vec<FacilityInfo>>, ApiError> {
    let m = loaded(&state)?;
    Ok(Json(
        m.bundle
            .facilities
            .iter()
            .map(|f| FacilityInfo {
                id: f.facility_id.clone(),
                name: f.name.clone(),
                lon: f.lon,
                lat: f.lat,
                so2_tons: f.so2_tons,
            })
            .collect(),
    ))
}

async fn model(State(state): State<AppState>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(model_info(&loaded(&state)?.bundle)))
}

async fn field_mean(State(state): State<AppState>) -> Result<Json<Vec<f64>>, ApiError> {
    Ok(Json(loaded(&state)?.bundle.baseline_mean.clone()))
}

async fn forecast(State(state): State<AppState>, body: Bytes) -> Result<Json<ForecastResponse>, ApiError> {
    let m = loaded(&state)?;
    let req: ForecastRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))?;
    let resp = tokio::task::spawn_blocking(move || handle_forecast(&m, &req))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        })??;
    Ok(Json(resp))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/facilities", get(facilities))
        .route("/api/model", get(model))
        .route("/api/field/mean", get(field_mean))
        .route("/api/forecast", post(forecast))
        .with_state(state)
}

/// Serves the API on `addr` until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
