//! HTTP front end: diagnosis, point-cloud reconstruction, model metadata.
//!
//! Weights load once, off the request path, into a write-once cell. Until
//! that finishes every API route answers 503.

mod config;
mod error;
mod multipart;

use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cellscope_core::data::image::preprocess_png;
use cellscope_core::model::format::digest_version;
use cellscope_core::model::{Classifier, Diagnosis, ModelSpec};
use cellscope_core::nn::WeightStore;
use cellscope_core::pointcloud::{generate, write_obj, write_pcd, GeneratorSpec};
use cellscope_core::training::sparsity;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use config::{ServiceConfig, DEFAULT_MAX_UPLOAD, DEFAULT_PORT};
pub use error::{ApiError, ErrorBody, Result, ServiceError};
pub use multipart::{boundary_of, first_file_part};

/// Loaded generator weights with their architecture.
#[derive(Clone, Debug)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub weights: WeightStore<f32>,
}

/// Everything the request handlers read. Immutable once built.
#[derive(Debug)]
pub struct LoadedModels {
    pub classifier: Classifier,
    pub generator: Option<Generator>,
    /// Zero fraction of the prunable classifier tensors.
    pub sparsity: f64,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
}

impl LoadedModels {
    pub fn new(classifier: Classifier, generator: Option<Generator>) -> Result<Self> {
        if let Some(g) = &generator {
            g.spec.validate()?;
            g.spec.combined().check_weights(&g.weights)?;
        }
        let sparsity = sparsity(classifier.weights());
        Ok(Self {
            classifier,
            generator,
            sparsity,
        })
    }

    /// Reads and validates every configured file.
    pub fn load(cfg: &ServiceConfig) -> Result<Self> {
        let spec = ModelSpec::load(cfg.classifier_spec_path())?;
        let bytes = read_file(&cfg.classifier_weights)?;
        let weights = cellscope_core::model::format::decode(&bytes)
            .map_err(cellscope_core::Error::from)?;
        let version = cfg
            .model_version
            .clone()
            .unwrap_or_else(|| digest_version(&bytes));
        let classifier = Classifier::new(spec, weights, version)?;
        let generator = match (&cfg.generator_weights, cfg.generator_spec_path()) {
            (Some(w), Some(s)) => Some(Generator {
                spec: GeneratorSpec::load(s)?,
                weights: cellscope_core::model::load_weights(w)?,
            }),
            _ => None,
        };
        Self::new(classifier, generator)
    }

    pub fn info(&self) -> ModelInfo {
        let spec = self.classifier.spec();
        ModelInfo {
            model_version: self.classifier.version().to_string(),
            input_size: spec.input_shape().to_vec(),
            classes: spec.classes.clone(),
            sparsity: self.sparsity,
            generator: self.generator.as_ref().map(|g| GeneratorInfo {
                views: g.spec.views,
                input_size: g.spec.input_shape().to_vec(),
                depth_size: [g.spec.size().0, g.spec.size().1],
            }),
        }
    }
}

/// `GET /api/model` body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_version: String,
    /// C, H, W.
    pub input_size: Vec<usize>,
    pub classes: Vec<String>,
    pub sparsity: f64,
    pub generator: Option<GeneratorInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub views: usize,
    pub input_size: Vec<usize>,
    pub depth_size: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct AppState {
    models: Arc<OnceLock<LoadedModels>>,
    max_upload: usize,
    mask_threshold: f64,
}

impl AppState {
    /// State whose models have not been set yet.
    pub fn pending(max_upload: usize, mask_threshold: f64) -> Self {
        Self {
            models: Arc::new(OnceLock::new()),
            max_upload,
            mask_threshold,
        }
    }

    pub fn ready(models: LoadedModels, max_upload: usize, mask_threshold: f64) -> Self {
        let state = Self::pending(max_upload, mask_threshold);
        state.install(models);
        state
    }

    /// Publishes the models. Later calls are ignored.
    pub fn install(&self, models: LoadedModels) {
        if self.models.set(models).is_err() {
            log::warn!("models already installed; ignoring reload");
        }
    }

    pub fn models(&self) -> Option<&LoadedModels> {
        self.models.get()
    }

    fn loaded(&self) -> Result<&LoadedModels, ApiError> {
        self.models().ok_or_else(ApiError::not_loaded)
    }
}

fn cors_layer(origins: &[String]) -> Result<Option<CorsLayer>> {
    if origins.is_empty() {
        return Ok(None);
    }
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        let list = origins
            .iter()
            .map(|o| {
                HeaderValue::from_str(o)
                    .map_err(|_| ServiceError::Config(format!("bad CORS origin {o:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        AllowOrigin::list(list)
    };
    Ok(Some(
        CorsLayer::new()
            .allow_origin(allow)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::CONTENT_TYPE]),
    ))
}

pub fn router(state: AppState, cors_origins: &[String]) -> Result<Router> {
    let app = Router::new()
        .route("/healthz", get(healthz))
        .route("/api/model", get(model_info))
        .route("/api/diagnose", post(diagnose))
        .route("/api/reconstruct", post(reconstruct))
        // limits are enforced in `read_upload` so the 413 carries a JSON code
        .layer(DefaultBodyLimit::disable())
        .with_state(state);
    Ok(match cors_layer(cors_origins)? {
        Some(cors) => app.layer(cors),
        None => app,
    })
}

async fn healthz(State(state): State<AppState>) -> Response {
    match state.models() {
        Some(_) => (StatusCode::OK, "ok").into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, "loading").into_response(),
    }
}

async fn model_info(State(state): State<AppState>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(state.loaded()?.info()))
}

/// Reads the body within the upload limit and unwraps multipart forms.
async fn read_upload(state: &AppState, headers: &HeaderMap, body: Body) -> Result<Bytes, ApiError> {
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    if declared.is_some_and(|n| n > state.max_upload as u64) {
        return Err(ApiError::too_large(state.max_upload));
    }
    let bytes = axum::body::to_bytes(body, state.max_upload)
        .await
        .map_err(|_| ApiError::too_large(state.max_upload))?;
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    match boundary_of(content_type) {
        Some(boundary) => first_file_part(&bytes, &boundary)
            .map(|r| bytes.slice(r))
            .ok_or_else(|| ApiError::bad_image("multipart body has no file part")),
        None => Ok(bytes),
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

/// The exact offline path: preprocess then classify.
pub fn diagnose_bytes(classifier: &Classifier, png: &[u8]) -> cellscope_core::Result<Diagnosis> {
    let shape = classifier.spec().input_shape();
    let image = preprocess_png(png, (shape[1], shape[2]))?;
    classifier.predict(&image)
}

async fn diagnose(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Body,
) -> Result<Json<Diagnosis>, ApiError> {
    state.loaded()?;
    let png = read_upload(&state, &headers, body).await?;
    let d = blocking(move || {
        let models = state.loaded()?;
        Ok(diagnose_bytes(&models.classifier, &png)?)
    })
    .await?;
    Ok(Json(d))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudFormat {
    #[default]
    Obj,
    Pcd,
}

impl CloudFormat {
    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::Obj => "obj",
            CloudFormat::Pcd => "pcd",
        }
    }
}

#[derive(Debug, Deserialize)]
struct ReconstructQuery {
    format: Option<String>,
}

/// Image bytes to OBJ or PCD bytes.
pub fn reconstruct_bytes(
    generator: &Generator,
    png: &[u8],
    format: CloudFormat,
    threshold: f64,
) -> cellscope_core::Result<Vec<u8>> {
    let shape = generator.spec.input_shape();
    let image = preprocess_png(png, (shape[1], shape[2]))?;
    let cloud = generate(&generator.spec, &generator.weights, &image, threshold)?;
    Ok(match format {
        CloudFormat::Obj => write_obj(&cloud),
        CloudFormat::Pcd => write_pcd(&cloud),
    })
}

async fn reconstruct(
    State(state): State<AppState>,
    Query(query): Query<ReconstructQuery>,
    headers: HeaderMap,
    body: Body,
) -> Result<Response, ApiError> {
    let format = match query.format.as_deref() {
        None | Some("obj") => CloudFormat::Obj,
        Some("pcd") => CloudFormat::Pcd,
        Some(other) => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_format",
                format!("unknown format {other:?}; expected obj or pcd"),
            ))
        }
    };
    if state.loaded()?.generator.is_none() {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "generator_not_loaded",
            "no generator weights configured",
        ));
    }
    let png = read_upload(&state, &headers, body).await?;
    let threshold = state.mask_threshold;
    let bytes = blocking(move || {
        let generator = state.loaded()?.generator.as_ref().expect("checked above");
        Ok(reconstruct_bytes(generator, &png, format, threshold)?)
    })
    .await?;
    Ok((
        [
            (header::CONTENT_TYPE, "text/plain; charset=utf-8".to_string()),
            (
                header::CONTENT_DISPOSITION,
                format!("attachment; filename=\"cell.{}\"", format.extension()),
            ),
        ],
        bytes,
    )
        .into_response())
}

/// Serves on `listener`, loading models in the background. Returns an
/// error if loading fails.
pub async fn run(listener: TcpListener, cfg: ServiceConfig) -> Result<()> {
    cfg.validate()?;
    let state = AppState::pending(cfg.max_upload_bytes, cfg.mask_threshold);
    let app = router(state.clone(), &cfg.cors_origins)?;
    log::info!("listening on {}", listener.local_addr()?);
    let server = tokio::spawn(async move { axum::serve(listener, app).await });

    let load_cfg = cfg.clone();
    let loaded = tokio::task::spawn_blocking(move || LoadedModels::load(&load_cfg))
        .await
        .map_err(|e| ServiceError::Config(format!("model loader panicked: {e}")));
    match loaded {
        Ok(Ok(models)) => {
            log::info!(
                "models loaded: version {}, sparsity {:.4}, generator {}",
                models.classifier.version(),
                models.sparsity,
                if models.generator.is_some() { "yes" } else { "no" }
            );
            state.install(models);
        }
        Ok(Err(e)) | Err(e) => {
            server.abort();
            return Err(e);
        }
    }
    server
        .await
        .map_err(|e| ServiceError::Config(format!("server task failed: {e}")))??;
    Ok(())
}

/// Binds the configured address and runs.
pub async fn serve(cfg: ServiceConfig) -> Result<()> {
    let listener = TcpListener::bind(cfg.addr()?).await?;
    run(listener, cfg).await
}
