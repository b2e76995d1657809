//! HTTP interface over a loaded checkpoint: model description, test-set
//! embeddings, decoding at a latent point, transfer and topology grids.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::checkpoint::ModelCheckpoint;
use crate::conditioning::{ConditionLabel, OCTAVES, PITCH_CLASSES};
use crate::corpus::DatasetSplit;
use crate::error::Error;
use crate::evaluation::{latent_topology, DescriptorFrame, Linearizer};
use crate::spectral::{AudioBuffer, Frontend, LogMagSpectrogram};
use crate::transfer::{transfer_melody, TransferRequest, DEFAULT_OVERLAP};
use crate::wav;

pub const MAX_AUDIO_S: f64 = 30.0;
pub const DEFAULT_MAX_GRID: usize = 21;
pub const TOPOLOGY_CACHE: usize = 32;
const MIN_RENDER_S: f64 = 0.25;
const DEFAULT_GL_ITERS: usize = 32;
const MAX_GL_ITERS: usize = 500;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub max_grid: usize,
    pub max_audio_s: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            max_grid: DEFAULT_MAX_GRID,
            max_audio_s: MAX_AUDIO_S,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EmbeddedPoint {
    pub z: Vec<f64>,
    pub label: ConditionLabel,
    pub note_id: usize,
}

/// Everything a request may read; replaced as a whole.
pub struct Snapshot {
    pub ckpt: ModelCheckpoint,
    pub fingerprint: String,
    lin: Linearizer,
    frontend: Frontend,
    embeddings: Vec<EmbeddedPoint>,
    notes: Vec<(usize, ConditionLabel, AudioBuffer)>,
}

impl Snapshot {
    /// Prepares a checkpoint for serving; `data` supplies the test set.
    pub fn new(ckpt: ModelCheckpoint, data: Option<&DatasetSplit>) -> crate::Result<Self> {
        let lin = Linearizer::new(ckpt.stats.clone(), &ckpt.spectral);
        let frontend = Frontend::new(ckpt.spectral.clone())?;
        let mut embeddings = Vec::new();
        let mut notes = Vec::new();
        if let Some(data) = data {
            for n in &data.test {
                let chunks: Vec<Vec<f64>> = n
                    .chunks
                    .iter()
                    .map(|c| {
                        let mut v = c.data.clone();
                        if data.stats != ckpt.stats {
                            data.stats.denormalize(&mut v);
                            ckpt.stats.normalize(&mut v);
                        }
                        v
                    })
                    .collect();
                let refs: Vec<&[f64]> = chunks.iter().map(|c| c.as_slice()).collect();
                let codes = ckpt.model.encode(&refs, &vec![n.label; refs.len()])?;
                embeddings.extend(codes.into_iter().map(|c| EmbeddedPoint {
                    z: c.mu,
                    label: n.label,
                    note_id: n.id,
                }));
                notes.push((n.id, n.label, n.audio.clone()));
            }
        }
        Ok(Snapshot {
            fingerprint: ckpt.fingerprint(),
            ckpt,
            lin,
            frontend,
            embeddings,
            notes,
        })
    }
}

type CacheKey = (String, ConditionLabel, usize, u64, u64);

/// Small least-recently-used map of serialized topology responses.
struct Lru {
    cap: usize,
    entries: VecDeque<(CacheKey, Arc<String>)>,
}

impl Lru {
    fn get(&mut self, key: &CacheKey) -> Option<Arc<String>> {
        let i = self.entries.iter().position(|(k, _)| k == key)?;
        let e = self.entries.remove(i)?;
        let v = e.1.clone();
        self.entries.push_back(e);
        Some(v)
    }

    fn put(&mut self, key: CacheKey, value: Arc<String>) {
        self.entries.retain(|(k, _)| *k != key);
        if self.entries.len() == self.cap {
            self.entries.pop_front();
        }
        self.entries.push_back((key, value));
    }
}

pub struct AppState {
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    config: ServerConfig,
    cache: Mutex<Lru>,
}

impl AppState {
    pub fn new(snapshot: Option<Snapshot>, config: ServerConfig) -> Arc<Self> {
        Arc::new(AppState {
            snapshot: RwLock::new(snapshot.map(Arc::new)),
            config,
            cache: Mutex::new(Lru {
                cap: TOPOLOGY_CACHE,
                entries: VecDeque::new(),
            }),
        })
    }

    /// Atomically replaces the served checkpoint.
    pub fn swap(&self, snapshot: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Some(Arc::new(snapshot));
    }

    fn current(&self) -> Result<Arc<Snapshot>, ApiError> {
        self.snapshot
            .read()
            .expect("snapshot lock")
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_checkpoint", "no checkpoint loaded"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Range(_) => "out_of_range",
            Error::Variant(_) => "bad_condition",
            Error::Shape(_) => "bad_shape",
            Error::TooShort { .. } => "audio_too_short",
            _ => return ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        };
        ApiError::bad(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn check_condition(s: &Snapshot, label: &ConditionLabel) -> ApiResult<()> {
    if let Some(i) = label.instrument {
        if i >= s.ckpt.instruments.len() {
            return Err(ApiError::bad("unknown_instrument", format!("instrument {i} unknown")));
        }
    }
    s.ckpt.model.domain_of(label)?;
    Ok(())
}

async fn model_info(State(app): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let s = app.current()?;
    let c = s.ckpt.model.config();
    Ok(Json(json!({
        "variant": c.variant.name(),
        "latent_dim": c.latent_dim,
        "instruments": s.ckpt.instruments,
        "pitch_classes": PITCH_CLASSES,
        "octaves": OCTAVES,
        "B": c.bins,
        "T_c": c.frames,
        "sample_rate": s.ckpt.spectral.sample_rate,
        "fingerprint": s.fingerprint,
        "max_grid": app.config.max_grid,
    })))
}

#[derive(Debug, Default, Deserialize)]
pub struct EmbedRequest {
    pub instrument: Option<usize>,
}

async fn embed_testset(
    State(app): State<Arc<AppState>>,
    body: Option<Json<EmbedRequest>>,
) -> ApiResult<Json<Vec<EmbeddedPoint>>> {
    let s = app.current()?;
    let filter = body.and_then(|b| b.0.instrument);
    if let Some(i) = filter {
        if i >= s.ckpt.instruments.len() {
            return Err(ApiError::bad("unknown_instrument", format!("instrument {i} unknown")));
        }
    }
    Ok(Json(
        s.embeddings
            .iter()
            .filter(|p| filter.is_none_or(|i| p.label.instrument == Some(i)))
            .cloned()
            .collect(),
    ))
}

#[derive(Debug, Deserialize)]
pub struct DecodeRequest {
    pub z: Vec<f64>,
    pub pitch_class: usize,
    pub octave: usize,
    pub instrument: usize,
    #[serde(default)]
    pub render_audio: bool,
    pub gl_iters: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Descriptors {
    frames: Vec<DescriptorFrame>,
    mean: DescriptorFrame,
}

fn describe(lin: &Linearizer, log_mag: &[f64]) -> Descriptors {
    let frames: Vec<DescriptorFrame> = log_mag
        .chunks(lin.bins)
        .map(|f| {
            let m: Vec<f64> = f.iter().map(|v| v.exp().max(lin.floor)).collect();
            crate::evaluation::descriptors(&m, &lin.centers)
        })
        .collect();
    let mean = DescriptorFrame::mean(&frames);
    Descriptors { frames, mean }
}

fn gl_iters(req: Option<usize>) -> ApiResult<usize> {
    let n = req.unwrap_or(DEFAULT_GL_ITERS);
    if n > MAX_GL_ITERS {
        return Err(ApiError::bad("out_of_range", format!("gl_iters above {MAX_GL_ITERS}")));
    }
    Ok(n)
}

async fn decode(State(app): State<Arc<AppState>>, Json(req): Json<DecodeRequest>) -> ApiResult<Json<serde_json::Value>> {
    let s = app.current()?;
    let dim = s.ckpt.model.config().latent_dim;
    if req.z.len() != dim || req.z.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::bad("bad_latent", format!("z must hold {dim} finite numbers")));
    }
    let label = ConditionLabel::new(req.pitch_class, req.octave, Some(req.instrument));
    check_condition(&s, &label)?;
    let iters = gl_iters(req.gl_iters)?;
    blocking(move || {
        let out = s.ckpt.model.decode(&[&req.z], &[label])?;
        let log_mag = s.lin.log_magnitudes(&out[0].generated());
        let frames = s.ckpt.model.config().frames;
        let bins = s.lin.bins;
        let mut body = json!({
            "spectrogram": log_mag.chunks(bins).collect::<Vec<_>>(),
            "descriptors": describe(&s.lin, &log_mag),
        });
        if req.render_audio {
            let cfg = &s.ckpt.spectral;
            let need = ((MIN_RENDER_S * cfg.sample_rate as f64 - cfg.window as f64) / cfg.hop as f64).ceil() as usize + 1;
            let reps = need.div_ceil(frames).max(1);
            let spec = LogMagSpectrogram {
                frames: frames * reps,
                bins,
                data: log_mag.repeat(reps),
                bin_centers: s.frontend.bin_centers().to_vec(),
                hop: cfg.hop,
                floor_value: cfg.floor,
            };
            let audio = s.frontend.invert(&spec, iters)?;
            body["wav_base64"] = json!(B64.encode(wav::encode_wav(&audio)));
        }
        Ok(Json(body))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct TransferBody {
    pub wav_base64: Option<String>,
    pub note_id: Option<usize>,
    pub source_instrument: usize,
    pub target_instrument: usize,
    pub pitch_class: Option<usize>,
    pub octave: Option<usize>,
    pub gl_iters: Option<usize>,
}

async fn transfer(State(app): State<Arc<AppState>>, Json(req): Json<TransferBody>) -> ApiResult<Json<serde_json::Value>> {
    let s = app.current()?;
    let k = s.ckpt.instruments.len();
    for i in [req.source_instrument, req.target_instrument] {
        if i >= k {
            return Err(ApiError::bad("unknown_instrument", format!("instrument {i} unknown")));
        }
    }
    if req.pitch_class.is_some_and(|p| p >= PITCH_CLASSES) || req.octave.is_some_and(|o| o >= OCTAVES) {
        return Err(ApiError::bad("out_of_range", "pitch override out of range"));
    }
    let iters = gl_iters(req.gl_iters)?;
    let sr = s.ckpt.spectral.sample_rate;
    let audio = match (&req.wav_base64, req.note_id) {
        (Some(b), None) => {
            let bytes = B64
                .decode(b.as_bytes())
                .map_err(|e| ApiError::bad("bad_audio", format!("base64: {e}")))?;
            let audio = wav::decode_wav(&bytes).map_err(|e| ApiError::bad("bad_audio", e))?;
            if audio.duration_s() > app.config.max_audio_s {
                return Err(ApiError::new(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    "audio_too_long",
                    format!("{:.1} s exceeds the {:.0} s limit", audio.duration_s(), app.config.max_audio_s),
                ));
            }
            wav::resample_linear(&audio, sr)
        }
        (None, Some(id)) => s
            .notes
            .iter()
            .find(|(n, _, _)| *n == id)
            .map(|(_, _, a)| a.clone())
            .ok_or_else(|| ApiError::bad("unknown_note", format!("no test note {id}")))?,
        _ => return Err(ApiError::bad("bad_request", "give exactly one of wav_base64 and note_id")),
    };
    let treq = TransferRequest {
        source_instrument: req.source_instrument,
        target_instrument: req.target_instrument,
        pitch_class: req.pitch_class,
        octave: req.octave,
    };
    blocking(move || {
        let input = s.frontend.analyze(&audio)?;
        let out = transfer_melody(&s.ckpt, &audio, &treq, DEFAULT_OVERLAP, iters)?;
        Ok(Json(json!({
            "wav_base64": B64.encode(wav::encode_wav(&out.audio)),
            "descriptor_summary": {
                "input": describe(&s.lin, &input.data).mean,
                "output": describe(&s.lin, &out.spectrogram.data).mean,
            },
            "notes": out.notes,
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct TopologyQuery {
    pub instrument: usize,
    pub pitch: usize,
    pub octave: usize,
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
}

async fn topology(State(app): State<Arc<AppState>>, Query(q): Query<TopologyQuery>) -> ApiResult<Response> {
    let s = app.current()?;
    if q.n > app.config.max_grid || q.n < 2 {
        return Err(ApiError::bad(
            "grid_size",
            format!("n must lie in 2..={}", app.config.max_grid),
        ));
    }
    if !(q.lo < q.hi) || !q.lo.is_finite() || !q.hi.is_finite() {
        return Err(ApiError::bad("bad_box", "need finite lo < hi"));
    }
    let label = ConditionLabel::new(q.pitch, q.octave, Some(q.instrument));
    check_condition(&s, &label)?;
    let key: CacheKey = (s.fingerprint.clone(), label, q.n, q.lo.to_bits(), q.hi.to_bits());
    let cached = app.cache.lock().expect("cache lock").get(&key);
    let body = match cached {
        Some(b) => b,
        None => {
            let snap = s.clone();
            let body = blocking(move || {
                let grid = latent_topology(&snap.ckpt.model, &snap.lin, label, q.n, q.lo, q.hi)?;
                serde_json::to_string(&grid)
                    .map(Arc::new)
                    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
            })
            .await?;
            app.cache.lock().expect("cache lock").put(key, body.clone());
            body
        }
    };
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], body.as_str().to_owned()).into_response())
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/model/info", get(model_info))
        .route("/embed-testset", post(embed_testset))
        .route("/decode", post(decode))
        .route("/transfer", post(transfer))
        .route("/topology", get(topology))
        .layer(CorsLayer::permissive())
        .with_state(app)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, app: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
