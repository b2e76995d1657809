use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use move_core::checkpoint::{ModelCheckpoint, Seeds};
use move_core::corpus::{build_corpus, CorpusPlan, DatasetSplit};
use move_core::model::{Model, ModelConfig, Variant};
use move_core::service::{router, AppState, ServerConfig, Snapshot};
use move_core::spectral::{AudioBuffer, SpectralConfig};
use move_core::wav;

fn fixture() -> &'static (ModelCheckpoint, DatasetSplit) {
    static CELL: OnceLock<(ModelCheckpoint, DatasetSplit)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ModelConfig::desk(Variant::MoveFpod, 2);
        let plan = CorpusPlan {
            pitch_classes: vec![0, 4, 7, 9],
            octaves: vec![4],
            ..CorpusPlan::desk(2, 3).unwrap()
        };
        let data = build_corpus(&plan, SpectralConfig::desk(), cfg.frames, 3).unwrap();
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let ckpt = ModelCheckpoint {
            model,
            stats: data.stats.clone(),
            spectral: data.spectral.clone(),
            instruments: data.instruments.clone(),
            epoch: 0,
            seeds: Seeds::default(),
        };
        (ckpt, data)
    })
}

fn app() -> Arc<AppState> {
    let (ckpt, data) = fixture();
    AppState::new(Some(Snapshot::new(ckpt.clone(), Some(data)).unwrap()), ServerConfig::default())
}

async fn call(app: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri).header("origin", "http://localhost:5173");
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(app.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn assert_error(v: &Value, code: &str) {
    assert_eq!(v["code"], code, "{v}");
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
}

#[tokio::test]
async fn info_requires_a_checkpoint() {
    let empty = AppState::new(None, ServerConfig::default());
    let (s, v) = call_json(&empty, "GET", "/model/info", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_error(&v, "no_checkpoint");

    let (s, v) = call_json(&app(), "GET", "/model/info", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["latent_dim"], 3);
    assert_eq!(v["instruments"].as_array().unwrap().len(), 2);
    assert_eq!(v["variant"], "move-fpod");
    assert_eq!(v["B"], 128);
    assert_eq!(v["T_c"], 16);
}

#[tokio::test]
async fn embeddings_cover_the_test_set() {
    let app = app();
    let (_, data) = fixture();
    let chunks: usize = data.test.iter().map(|n| n.chunks.len()).sum();
    let (s, all) = call_json(&app, "POST", "/embed-testset", Some(json!({}))).await;
    assert_eq!(s, StatusCode::OK);
    let all = all.as_array().unwrap();
    assert_eq!(all.len(), chunks);
    assert!(all.iter().all(|p| p["z"].as_array().unwrap().len() == 3));

    let (_, one) = call_json(&app, "POST", "/embed-testset", Some(json!({"instrument": 1}))).await;
    let one = one.as_array().unwrap();
    assert!(!one.is_empty() && one.len() < all.len());
    assert!(one.iter().all(|p| p["label"]["instrument"] == 1));

    let (s, v) = call_json(&app, "POST", "/embed-testset", Some(json!({"instrument": 7}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "unknown_instrument");
}

#[tokio::test]
async fn decode_is_deterministic_and_renders_on_request() {
    let app = app();
    let req = json!({"z": [0.0, 0.0, 0.0], "pitch_class": 9, "octave": 4, "instrument": 0, "render_audio": false});
    let (s, a) = call(&app, "POST", "/decode", Some(req.clone())).await;
    assert_eq!(s, StatusCode::OK);
    let (_, b) = call(&app, "POST", "/decode", Some(req)).await;
    assert_eq!(a, b);
    let v: Value = serde_json::from_slice(&a).unwrap();
    let rows = v["spectrogram"].as_array().unwrap();
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r.as_array().unwrap().iter().all(|x| x.as_f64().unwrap().is_finite())));
    assert!(v.get("wav_base64").is_none());
    assert_eq!(v["descriptors"]["frames"].as_array().unwrap().len(), 16);

    let req = json!({"z": [0.5, -0.5, 1.0], "pitch_class": 0, "octave": 4, "instrument": 1, "render_audio": true, "gl_iters": 4});
    let (s, v) = call_json(&app, "POST", "/decode", Some(req)).await;
    assert_eq!(s, StatusCode::OK);
    let audio = wav::decode_wav(&B64.decode(v["wav_base64"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(audio.sample_rate, 22050);
    assert!(audio.duration_s() >= 0.25);

    for bad in [json!([0.0, 1.0]), json!([0.0, 1.0, 2.0, 3.0])] {
        let req = json!({"z": bad, "pitch_class": 0, "octave": 4, "instrument": 0});
        let (s, v) = call_json(&app, "POST", "/decode", Some(req)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        assert_error(&v, "bad_latent");
    }
    let req = json!({"z": [0.0, 0.0, 0.0], "pitch_class": 12, "octave": 4, "instrument": 0});
    let (s, _) = call_json(&app, "POST", "/decode", Some(req)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn transfer_by_note_and_by_upload() {
    let app = app();
    let (_, data) = fixture();
    let note = &data.test[0];
    let req = json!({"note_id": note.id, "source_instrument": note.instrument(), "target_instrument": 1 - note.instrument(), "gl_iters": 4});
    let (s, v) = call_json(&app, "POST", "/transfer", Some(req)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let audio = wav::decode_wav(&B64.decode(v["wav_base64"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(audio.sample_rate, 22050);
    assert!(v["descriptor_summary"]["output"]["centroid"].as_f64().unwrap().is_finite());

    let upload = B64.encode(wav::encode_wav(&note.audio));
    let req = json!({"wav_base64": upload, "source_instrument": 0, "target_instrument": 1, "gl_iters": 2});
    let (s, _) = call_json(&app, "POST", "/transfer", Some(req)).await;
    assert_eq!(s, StatusCode::OK);

    let long = AudioBuffer::new(vec![0.0; 22050 * 31], 22050);
    let req = json!({"wav_base64": B64.encode(wav::encode_wav(&long)), "source_instrument": 0, "target_instrument": 1});
    let (s, v) = call_json(&app, "POST", "/transfer", Some(req)).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_error(&v, "audio_too_long");

    let req = json!({"wav_base64": "not base64!", "source_instrument": 0, "target_instrument": 1});
    let (s, v) = call_json(&app, "POST", "/transfer", Some(req)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "bad_audio");

    let req = json!({"source_instrument": 0, "target_instrument": 1});
    let (s, _) = call_json(&app, "POST", "/transfer", Some(req)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn topology_is_cached_and_bounded() {
    let app = app();
    let uri = "/topology?instrument=0&pitch=9&octave=4&n=3&lo=-2&hi=2";
    let (s, a) = call(&app, "GET", uri, None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, b) = call(&app, "GET", uri, None).await;
    assert_eq!(a, b);
    let v: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 27);

    let (s, v) = call_json(&app, "GET", "/topology?instrument=0&pitch=9&octave=4&n=50&lo=-2&hi=2", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "grid_size");
    let (s, _) = call_json(&app, "GET", "/topology?instrument=5&pitch=9&octave=4&n=3&lo=-2&hi=2", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn swap_replaces_the_snapshot_atomically() {
    let app = app();
    let (_, before) = call_json(&app, "GET", "/model/info", None).await;
    let (ckpt, data) = fixture();
    let mut other = ckpt.clone();
    other.model = Model::new(ckpt.model.config().clone(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    app.swap(Snapshot::new(other, Some(data)).unwrap());
    let (_, after) = call_json(&app, "GET", "/model/info", None).await;
    assert_ne!(before["fingerprint"], after["fingerprint"]);
}
