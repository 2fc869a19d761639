//! `/v1` HTTP API over one immutable loaded checkpoint.
//!
//! Images travel as base64 PNG: 8-bit gray for infrared, masks and outputs,
//! 8-bit RGB for visible.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ctrlfuse_core::image_io;
use ctrlfuse_core::metrics::{MetricReport, Plane};
use ctrlfuse_core::model::{luma, CtrlFuse, ModelConfig, PromptMask};
use ctrlfuse_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Largest accepted image side.
pub const MAX_SIDE: usize = 1024;

fn default_alpha() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseRequest {
    pub ir: String,
    pub vis: String,
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Must name the loaded checkpoint when present.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseResponse {
    pub fused: String,
    pub m_ir: String,
    pub m_vis: String,
    pub seg: String,
    /// Fused image against the infrared image and visible luminance.
    pub metrics: MetricReport,
    pub timing_ms: f64,
    pub checkpoint: String,
    /// Intensity actually applied; 0 on the prompt-free path.
    pub alpha: f64,
    pub prompted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub checkpoint: String,
    pub num_queries: usize,
    pub channels: usize,
    pub seed: u64,
    pub trainable_parameters: usize,
    pub config: ModelConfig,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

pub struct Loaded {
    pub id: String,
    pub model: CtrlFuse,
}

/// Shared state: empty while the checkpoint loads, then fixed for the life
/// of the process.
#[derive(Default)]
pub struct ServiceState {
    loaded: OnceLock<Loaded>,
}

impl ServiceState {
    pub fn loading() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn ready(id: impl Into<String>, model: CtrlFuse) -> Arc<Self> {
        let s = Self::loading();
        s.install(id, model);
        s
    }

    /// Returns false if a model was already installed.
    pub fn install(&self, id: impl Into<String>, model: CtrlFuse) -> bool {
        self.loaded
            .set(Loaded {
                id: id.into(),
                model,
            })
            .is_ok()
    }

    pub fn get(&self) -> Option<&Loaded> {
        self.loaded.get()
    }

    fn require(&self) -> Result<&Loaded, ApiError> {
        self.get().ok_or_else(|| ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            code: "model_loading",
            message: "the checkpoint is still loading".into(),
        })
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/fuse", post(fuse))
        .route("/v1/health", get(health))
        .route("/v1/model", get(model_info))
        .fallback(not_found)
        .with_state(state)
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found",
        message: "no such route".into(),
    }
}

async fn health(State(st): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    Json(match st.get() {
        Some(l) => json!({ "status": "ready", "checkpoint": l.id }),
        None => json!({ "status": "loading" }),
    })
}

async fn model_info(State(st): State<Arc<ServiceState>>) -> Result<Json<ModelInfo>, ApiError> {
    let l = st.require()?;
    let c = &l.model.config;
    Ok(Json(ModelInfo {
        checkpoint: l.id.clone(),
        num_queries: c.num_queries,
        channels: c.channels(),
        seed: c.seed(),
        trainable_parameters: l.model.store.trainable_count(),
        config: c.clone(),
    }))
}

async fn fuse(State(st): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<FuseResponse>, ApiError> {
    st.require()?;
    let req: FuseRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad("invalid_json", e.to_string()))?;
    let worker = Arc::clone(&st);
    let out = tokio::task::spawn_blocking(move || {
        let loaded = worker.require()?;
        fuse_request(loaded, &req)
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        code: "internal",
        message: e.to_string(),
    })??;
    Ok(Json(out))
}

fn decode_field(field: &'static str, b64: &str) -> Result<Vec<u8>, ApiError> {
    let payload = match b64.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => b64,
    };
    STANDARD
        .decode(payload.trim())
        .map_err(|e| ApiError::bad("invalid_base64", format!("{field}: {e}")))
}

fn decode_image(field: &'static str, b64: &str, channels: usize) -> Result<Tensor, ApiError> {
    let bytes = decode_field(field, b64)?;
    let t = image_io::decode_png_channels(&bytes, channels)
        .map_err(|e| ApiError::bad("invalid_png", format!("{field}: {e}")))?;
    let (_, h, w) = t.chw();
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 || h > MAX_SIDE || w > MAX_SIDE {
        return Err(ApiError::bad(
            "invalid_size",
            format!("{field}: {h}x{w}; sides must be positive multiples of 4 up to {MAX_SIDE}"),
        ));
    }
    Ok(t)
}

fn invalid(e: ctrlfuse_core::Error) -> ApiError {
    ApiError::bad("invalid_input", e.to_string())
}

fn encode(t: &Tensor) -> Result<String, ApiError> {
    image_io::encode_png(t)
        .map(|b| STANDARD.encode(b))
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        })
}

/// The full request pipeline without the HTTP layer. A pure function of the
/// loaded weights and the request, apart from `timing_ms`.
pub fn fuse_request(loaded: &Loaded, req: &FuseRequest) -> Result<FuseResponse, ApiError> {
    let start = Instant::now();
    if let Some(id) = &req.checkpoint {
        if *id != loaded.id {
            return Err(ApiError {
                status: StatusCode::NOT_FOUND,
                code: "unknown_checkpoint",
                message: format!("checkpoint {id:?} is not loaded; this server holds {:?}", loaded.id),
            });
        }
    }
    if !req.alpha.is_finite() || req.alpha < 0.0 {
        return Err(ApiError::bad("invalid_alpha", format!("alpha {} must be ≥ 0", req.alpha)));
    }
    let ir = decode_image("ir", &req.ir, 1)?;
    let vis = decode_image("vis", &req.vis, 3)?;
    let mask = req
        .mask
        .as_deref()
        .map(|m| decode_image("mask", m, 1).and_then(|t| {
            PromptMask::new(&t).map_err(invalid)
        }))
        .transpose()?;
    let size = |t: &Tensor| (t.shape()[1], t.shape()[2]);
    if size(&vis) != size(&ir) || mask.as_ref().is_some_and(|m| size(m.tensor()) != size(&ir)) {
        return Err(ApiError::bad("size_mismatch", "ir, vis and mask must share one size"));
    }
    let out = loaded
        .model
        .infer(&ir, &vis, mask.as_ref(), req.alpha)
        .map_err(invalid)?;
    let vis_y = luma(&vis);
    let metrics = (|| {
        MetricReport::evaluate(&Plane::of(&out.fused)?, &Plane::of(&ir)?, &Plane::of(&vis_y)?)
    })()
    .map_err(invalid)?;
    Ok(FuseResponse {
        fused: encode(&out.fused)?,
        m_ir: encode(&out.m_ir)?,
        m_vis: encode(&out.m_vis)?,
        seg: encode(&out.seg)?,
        metrics,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
        checkpoint: loaded.id.clone(),
        alpha: if mask.is_some() { req.alpha } else { 0.0 },
        prompted: mask.is_some(),
    })
}
