//! HTTP service behind the cluster labeling UI.
//!
//! Point data is loaded once and shared read-only. The mapping is the only
//! mutable state; every write goes through one mutex and lands on disk via an
//! atomic replace before the response is sent.

use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dc3dcd_core::evalmap::{ClassMapping, MetricsReport};
use dc3dcd_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::commands::{load_clouds, score_and_write, write_predictions};
use crate::config::PipelineConfig;
use crate::workdir::{self as wd, read_labels, write_atomic, Workdir};

/// Upper bound on points returned per cluster request.
pub const MAX_POINTS: usize = 20_000;
/// Margin around a cluster's bounding box when collecting pc1 context.
pub const CONTEXT_MARGIN: f64 = 5.0;
const SAMPLE_SEED: u64 = 0x5a3b_1e00;

const PALETTE: [&str; 7] = ["#9e9e9e", "#d32f2f", "#7b1fa2", "#388e3c", "#afb42b", "#f57c00", "#1976d2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: u32,
    pub count: usize,
    /// Mean position; zeros for an empty cluster.
    pub centroid: [f64; 3],
    pub z_min: f64,
    pub z_max: f64,
    pub z_std: f64,
    /// RMS horizontal distance to the centroid.
    pub xy_spread: f64,
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPoints {
    pub id: u32,
    pub total: usize,
    /// Sampled members of pc2 as `[x, y, z, x, y, z, ...]`.
    pub points: Vec<f64>,
    /// pc1 points inside the members' bounding box grown by the margin.
    pub context: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub labeled: usize,
    pub total: usize,
    pub missing: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResult {
    pub n_points: usize,
    /// Present when the second epoch carries reference labels.
    pub metrics: Option<MetricsReport>,
}

pub struct AppState {
    pub workdir: Workdir,
    pub config: PipelineConfig,
    pub k: usize,
    pub pseudo: Vec<u32>,
    pub members: Vec<Vec<usize>>,
    pub pos1: Vec<[f64; 3]>,
    pub pos2: Vec<[f64; 3]>,
    pub has_truth: bool,
    summaries: Vec<ClusterSummary>,
    mapping: Mutex<ClassMapping>,
    ui_dir: Option<PathBuf>,
}

impl AppState {
    /// Loads the inference artifacts; an existing `mapping.json` resumes a session.
    pub fn load(workdir: Workdir, config: PipelineConfig, ui_dir: Option<PathBuf>) -> anyhow::Result<Self> {
        let pseudo = read_labels(&workdir.require(wd::PSEUDO_LABELS, "infer")?)?;
        let k = workdir.run_info()?.k;
        let (pc1, pc2) = load_clouds(&workdir)?;
        if pseudo.len() != pc2.len() {
            return Err(Error::Format(format!("{} labels for {} points", pseudo.len(), pc2.len())).into());
        }
        let mut members = vec![Vec::new(); k];
        for (i, &c) in pseudo.iter().enumerate() {
            members
                .get_mut(c as usize)
                .ok_or_else(|| Error::Format(format!("label {c} outside [0, {k})")))?
                .push(i);
        }
        let mapping_path = workdir.path(wd::MAPPING);
        let mapping = if mapping_path.exists() {
            let m = crate::commands::read_mapping(&mapping_path)?;
            if m.n_classes != config.n_classes() {
                return Err(Error::Format("stored mapping does not match the class taxonomy".into()).into());
            }
            m
        } else {
            ClassMapping::new(config.n_classes())
        };
        let pos1 = pc1.positions();
        let pos2 = pc2.positions();
        let summaries = members
            .iter()
            .enumerate()
            .map(|(id, m)| summarize(id as u32, m, &pos2))
            .collect();
        Ok(Self {
            workdir,
            config,
            k,
            pseudo,
            members,
            pos1,
            pos2,
            has_truth: pc2.labels.is_some(),
            summaries,
            mapping: Mutex::new(mapping),
            ui_dir,
        })
    }

    pub fn mapping(&self) -> ClassMapping {
        self.mapping.lock().expect("mapping lock poisoned").clone()
    }
}

fn summarize(id: u32, members: &[usize], pos: &[[f64; 3]]) -> ClusterSummary {
    let n = members.len();
    if n == 0 {
        return ClusterSummary {
            id,
            count: 0,
            centroid: [0.0; 3],
            z_min: 0.0,
            z_max: 0.0,
            z_std: 0.0,
            xy_spread: 0.0,
            label: None,
        };
    }
    let mut c = [0.0; 3];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in members {
        for d in 0..3 {
            c[d] += pos[i][d];
        }
        lo = lo.min(pos[i][2]);
        hi = hi.max(pos[i][2]);
    }
    c.iter_mut().for_each(|v| *v /= n as f64);
    let (mut vz, mut vxy) = (0.0, 0.0);
    for &i in members {
        let p = pos[i];
        vz += (p[2] - c[2]).powi(2);
        vxy += (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
    }
    ClusterSummary {
        id,
        count: n,
        centroid: c,
        z_min: lo,
        z_max: hi,
        z_std: (vz / n as f64).sqrt(),
        xy_spread: (vxy / n as f64).sqrt(),
        label: None,
    }
}

pub struct ApiError(StatusCode, serde_json::Value);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, serde_json::json!({ "error": msg.into() }))
    }

    fn internal(e: anyhow::Error) -> Self {
        Self(StatusCode::INTERNAL_SERVER_ERROR, serde_json::json!({ "error": format!("{e:#}") }))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/ui/{*file}", get(ui_asset))
        .route("/api/clusters", get(clusters))
        .route("/api/clusters/{id}/points", get(cluster_points))
        .route("/api/mapping", get(get_mapping).post(post_mapping))
        .route("/api/classes", get(classes))
        .route("/api/progress", get(progress))
        .route("/api/submit", post(submit))
        .with_state(state)
}

/// Blocks serving on `127.0.0.1:port`.
pub fn serve(state: AppState, port: u16) -> anyhow::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        log::info!("serving on http://{}", listener.local_addr()?);
        axum::serve(listener, router(Arc::new(state))).await?;
        Ok(())
    })
}

const FALLBACK_INDEX: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>dc3dcd labeling</title></head>\n<body><h1>dc3dcd labeling service</h1>\n<p>No UI bundle configured; start with <code>--ui-dir</code>. JSON API:</p>\n<ul><li>GET /api/clusters</li><li>GET /api/clusters/{id}/points?limit=N</li><li>GET|POST /api/mapping</li><li>GET /api/classes</li><li>GET /api/progress</li><li>POST /api/submit</li></ul>\n</body></html>\n";

async fn index(State(s): State<Arc<AppState>>) -> Response {
    if let Some(dir) = &s.ui_dir {
        if let Ok(text) = std::fs::read_to_string(dir.join("index.html")) {
            return Html(text).into_response();
        }
    }
    Html(FALLBACK_INDEX).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn ui_asset(State(s): State<Arc<AppState>>, UrlPath(file): UrlPath<String>) -> Response {
    let rel = Path::new(&file);
    let safe = rel.components().all(|c| matches!(c, Component::Normal(_)));
    let (Some(dir), true) = (&s.ui_dir, safe) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    match std::fs::read(dir.join(rel)) {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(rel))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn clusters(State(s): State<Arc<AppState>>) -> Json<Vec<ClusterSummary>> {
    let mapping = s.mapping();
    Json(
        s.summaries
            .iter()
            .map(|c| ClusterSummary {
                label: mapping.class_of(c.id),
                ..c.clone()
            })
            .collect(),
    )
}

#[derive(Debug, Deserialize)]
struct PointsQuery {
    limit: Option<usize>,
}

/// At most `limit` ids of `ids`, chosen with a fixed seed and kept in order.
fn sample(ids: &[usize], limit: usize, seed: u64) -> Vec<usize> {
    if ids.len() <= limit {
        return ids.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = rand::seq::index::sample(&mut rng, ids.len(), limit).into_vec();
    pick.sort_unstable();
    pick.into_iter().map(|j| ids[j]).collect()
}

fn flatten(ids: &[usize], pos: &[[f64; 3]]) -> Vec<f64> {
    ids.iter().flat_map(|&i| pos[i]).collect()
}

async fn cluster_points(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u32>,
    Query(q): Query<PointsQuery>,
) -> ApiResult<ClusterPoints> {
    let members = s
        .members
        .get(id as usize)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, serde_json::json!({ "error": format!("unknown cluster {id}") })))?;
    let limit = q.limit.unwrap_or(MAX_POINTS).min(MAX_POINTS);
    let chosen = sample(members, limit, SAMPLE_SEED ^ id as u64);
    let context = if members.is_empty() {
        Vec::new()
    } else {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in members {
            for d in 0..3 {
                lo[d] = lo[d].min(s.pos2[i][d]);
                hi[d] = hi[d].max(s.pos2[i][d]);
            }
        }
        let inside: Vec<usize> = (0..s.pos1.len())
            .filter(|&j| (0..3).all(|d| s.pos1[j][d] >= lo[d] - CONTEXT_MARGIN && s.pos1[j][d] <= hi[d] + CONTEXT_MARGIN))
            .collect();
        sample(&inside, limit, SAMPLE_SEED ^ ((id as u64) << 32))
    };
    Ok(Json(ClusterPoints {
        id,
        total: members.len(),
        points: flatten(&chosen, &s.pos2),
        context: flatten(&context, &s.pos1),
    }))
}

async fn get_mapping(State(s): State<Arc<AppState>>) -> Json<ClassMapping> {
    Json(s.mapping())
}

/// Merges a partial mapping into the stored one and persists the result.
async fn post_mapping(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<ClassMapping> {
    let incoming: ClassMapping =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid mapping JSON: {e}")))?;
    incoming.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    if incoming.n_classes != s.config.n_classes() {
        return Err(ApiError::bad_request(format!(
            "mapping has {} classes, the taxonomy has {}",
            incoming.n_classes,
            s.config.n_classes()
        )));
    }
    let unknown: Vec<u32> = incoming.entries.iter().map(|e| e.cluster).filter(|&c| c as usize >= s.k).collect();
    if !unknown.is_empty() {
        return Err(ApiError::bad_request(format!("unknown cluster ids {unknown:?}; valid ids are 0..{}", s.k)));
    }
    let mut guard = s.mapping.lock().expect("mapping lock poisoned");
    let mut next = guard.clone();
    next.merge(incoming.entries);
    let json = next.to_json().map_err(|e| ApiError::internal(e.into()))?;
    write_atomic(&s.workdir.path(wd::MAPPING), json.as_bytes()).map_err(ApiError::internal)?;
    *guard = next.clone();
    Ok(Json(next))
}

async fn classes(State(s): State<Arc<AppState>>) -> Json<Vec<ClassInfo>> {
    Json(
        s.config
            .classes
            .iter()
            .enumerate()
            .map(|(i, name)| ClassInfo {
                id: i as u32,
                name: name.clone(),
                color: PALETTE[i % PALETTE.len()].to_string(),
            })
            .collect(),
    )
}

async fn progress(State(s): State<Arc<AppState>>) -> Json<Progress> {
    let missing = s.mapping().unmapped(s.k);
    Json(Progress {
        labeled: s.k - missing.len(),
        total: s.k,
        missing,
    })
}

/// Applies the complete mapping exactly as `map --mapping` followed by `eval` would.
async fn submit(State(s): State<Arc<AppState>>) -> Result<Json<SubmitResult>, ApiError> {
    let mapping = s.mapping.lock().expect("mapping lock poisoned");
    let missing = mapping.unmapped(s.k);
    if !missing.is_empty() {
        return Err(ApiError(
            StatusCode::CONFLICT,
            serde_json::json!({ "error": "mapping is incomplete", "missing": missing }),
        ));
    }
    let pred = write_predictions(&s.workdir, &s.config, &s.pseudo, &mapping, s.k).map_err(ApiError::internal)?;
    let metrics = if s.has_truth {
        Some(score_and_write(&s.workdir, &s.config, &pred).map_err(ApiError::internal)?)
    } else {
        None
    };
    Ok(Json(SubmitResult {
        n_points: pred.len(),
        metrics,
    }))
}
