//! HTTP front end for material retrieval.
//!
//! Endpoints:
//!
//! - `GET /healthz`
//! - `GET /materials?page=&per_page=`
//! - `GET /materials/{id}/swatch.bmp`
//! - `POST /query` (multipart: `image`, optional `mask`, optional `k`)
//! - `GET /version`
//!
//! Every JSON body except `/healthz` carries `"v": 1`; errors are
//! `{"error": "..."}` with a 4xx or 5xx status.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use matret_core::dataset::load_gallery;
use matret_core::encoder::{checkpoint_checksum, load_checkpoint, EncoderParams};
use matret_core::index::{load_index, query_topk, QueryResult, RetrievalIndex};
use matret_core::material::{Category, MaterialSpec};
use matret_core::renderer::{render_sphere_swatch, Mask, Raster};
use matret_core::{par, Error};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const API_VERSION: u32 = 1;
pub const MAX_K: usize = 50;
pub const DEFAULT_K: usize = 5;
pub const SWATCH_RESOLUTION: usize = 64;
const MAX_UPLOAD_BYTES: usize = 16 << 20;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    /// Dataset directory holding the gallery the index was built from.
    pub data_dir: PathBuf,
    /// Material encoder checkpoint; when given, its checksum must match the
    /// one recorded in the index.
    pub material_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MaterialInfo {
    pub id: String,
    pub category: Category,
    pub swatch_url: String,
}

/// Everything the handlers read. Immutable once built.
#[derive(Debug)]
pub struct ServiceState {
    pub image_encoder: EncoderParams,
    pub index: RetrievalIndex,
    pub materials: Vec<MaterialInfo>,
    swatches: BTreeMap<String, Vec<u8>>,
}

pub fn swatch_url(id: &str) -> String {
    format!("/materials/{id}/swatch.bmp")
}

impl ServiceState {
    /// Checks that encoder, index and gallery agree and renders one BMP
    /// swatch per gallery material.
    pub fn new(image_encoder: EncoderParams, index: RetrievalIndex, gallery: &[MaterialSpec]) -> Result<Self, Error> {
        if image_encoder.config.output_dim != index.dim {
            return Err(Error::Config(format!(
                "image encoder outputs dimension {} but the index has dimension {}",
                image_encoder.config.output_dim, index.dim
            )));
        }
        if index.is_empty() {
            return Err(Error::Empty("retrieval index has no entries".into()));
        }
        let by_id: BTreeMap<&str, &MaterialSpec> = gallery.iter().map(|m| (m.id.as_str(), m)).collect();
        let mut specs = Vec::with_capacity(index.len());
        for e in &index.entries {
            match by_id.get(e.material_id.as_str()) {
                Some(m) if m.category == e.category => specs.push((*m).clone()),
                Some(m) => {
                    return Err(Error::Config(format!(
                        "index lists `{}` as {}, the gallery as {}",
                        e.material_id, e.category, m.category
                    )))
                }
                None => return Err(Error::Config(format!("index material `{}` is not in the gallery", e.material_id))),
            }
        }
        let bmps = par::map(&specs, |m| render_sphere_swatch(m, SWATCH_RESOLUTION)?.encode_bmp());
        let mut swatches = BTreeMap::new();
        for (m, bmp) in specs.iter().zip(bmps) {
            swatches.insert(m.id.clone(), bmp?);
        }
        let materials = index
            .entries
            .iter()
            .map(|e| MaterialInfo { id: e.material_id.clone(), category: e.category, swatch_url: swatch_url(&e.material_id) })
            .collect();
        Ok(ServiceState { image_encoder, index, materials, swatches })
    }

    pub fn load(config: &ServeConfig) -> Result<Self, Error> {
        let image_encoder = load_checkpoint(&config.checkpoint)?;
        let index = load_index(&config.index)?;
        if let Some(p) = &config.material_checkpoint {
            let material = load_checkpoint(p)?;
            if checkpoint_checksum(&material) != index.encoder_checksum {
                return Err(Error::Config(format!(
                    "{} does not match the material encoder the index was built from ({})",
                    p.display(),
                    index.checksum_hex()
                )));
            }
        }
        let gallery = load_gallery(&config.data_dir)?;
        ServiceState::new(image_encoder, index, &gallery)
    }

    pub fn swatch(&self, id: &str) -> Option<&[u8]> {
        self.swatches.get(id).map(Vec::as_slice)
    }

    /// The same query path the CLI uses.
    pub fn query(&self, image: &Raster, mask: Option<&Mask>, k: usize) -> Result<QueryResult, Error> {
        let full;
        let mask = match mask {
            Some(m) => m,
            None => {
                full = Mask::full(image.width(), image.height());
                &full
            }
        };
        let res = self.image_encoder.config.resolution;
        if image.width() != res || image.height() != res {
            return Err(Error::Shape(format!(
                "image is {}x{}, the encoder expects {res}x{res}",
                image.width(),
                image.height()
            )));
        }
        query_topk(&self.index, &self.image_encoder, image, mask, k)
    }
}

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Shape(_) | Error::Image(_) | Error::Config(_) | Error::Format { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type Shared = Arc<ServiceState>;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct QueryHit {
    pub material_id: String,
    pub category: Category,
    pub score: f64,
    pub swatch_url: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct QueryResponse {
    pub v: u32,
    pub k: usize,
    pub results: Vec<QueryHit>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MaterialsPage {
    pub v: u32,
    pub page: usize,
    pub per_page: usize,
    pub total: usize,
    pub materials: Vec<MaterialInfo>,
}

#[derive(Debug, Deserialize)]
pub struct PageParams {
    page: Option<usize>,
    per_page: Option<usize>,
}

async fn healthz(State(s): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "gallery_size": s.index.len() }))
}

async fn version(State(s): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({
        "v": API_VERSION,
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "dim": s.index.dim,
        "mode": s.index.mode.name(),
        "gallery_size": s.index.len(),
        "material_encoder_checksum": s.index.checksum_hex(),
    }))
}

async fn materials(State(s): State<Shared>, Query(p): Query<PageParams>) -> Result<Json<MaterialsPage>, ApiError> {
    let page = p.page.unwrap_or(0);
    let per_page = p.per_page.unwrap_or(50);
    if !(1..=500).contains(&per_page) {
        return Err(ApiError::bad_request(format!("per_page must be in [1, 500], got {per_page}")));
    }
    let materials = s.materials.iter().skip(page.saturating_mul(per_page)).take(per_page).cloned().collect();
    Ok(Json(MaterialsPage { v: API_VERSION, page, per_page, total: s.materials.len(), materials }))
}

async fn swatch(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let bytes = s.swatch(&id).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown material `{id}`")))?;
    Ok(([(header::CONTENT_TYPE, "image/bmp")], bytes.to_vec()).into_response())
}

async fn query(State(s): State<Shared>, mut form: Multipart) -> Result<Json<QueryResponse>, ApiError> {
    let mut image = None;
    let mut mask = None;
    let mut k = DEFAULT_K;
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        match name.as_str() {
            "image" => image = Some(bytes),
            "mask" => mask = Some(bytes),
            "k" => {
                let text = std::str::from_utf8(&bytes).unwrap_or("").trim();
                k = text.parse().map_err(|_| ApiError::bad_request(format!("k must be an integer, got `{text}`")))?;
            }
            other => return Err(ApiError::bad_request(format!("unexpected form field `{other}`"))),
        }
    }
    if !(1..=MAX_K).contains(&k) {
        return Err(ApiError::bad_request(format!("k must be in [1, {MAX_K}], got {k}")));
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing form field `image`"))?;
    let image = Raster::decode_image(&image).map_err(|e| ApiError::bad_request(format!("cannot decode image: {e}")))?;
    let mask = match mask {
        Some(b) => Some(Mask::decode(&b).map_err(|e| ApiError::bad_request(format!("cannot decode mask: {e}")))?),
        None => None,
    };
    if let Some(m) = &mask {
        if m.width() != image.width() || m.height() != image.height() {
            return Err(ApiError::bad_request(format!(
                "mask is {}x{} but image is {}x{}",
                m.width(),
                m.height(),
                image.width(),
                image.height()
            )));
        }
    }
    let state = Arc::clone(&s);
    let result = tokio::task::spawn_blocking(move || state.query(&image, mask.as_ref(), k))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let results = result
        .results
        .into_iter()
        .map(|r| QueryHit { swatch_url: swatch_url(&r.material_id), material_id: r.material_id, category: r.category, score: r.score })
        .collect();
    Ok(Json(QueryResponse { v: API_VERSION, k, results }))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/version", get(version))
        .route("/materials", get(materials))
        .route("/materials/{id}/swatch.bmp", get(swatch))
        .route("/query", post(query))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

/// Load artifacts, bind and serve until Ctrl-C.
pub async fn serve(config: ServeConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let state = Arc::new(ServiceState::load(&config)?);
    let addr: SocketAddr = format!("{}:{}", config.host, config.port).parse()?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, gallery = state.index.len(), "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
