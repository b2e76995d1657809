//! C ABI over `move-core`: load a checkpoint, encode and decode chunks, and
//! transfer recordings. Every call returns a [`MoveStatus`]; the message of
//! the last failure on the calling thread is available from
//! [`move_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use move_core::checkpoint::ModelCheckpoint;
use move_core::conditioning::ConditionLabel;
use move_core::evaluation::Linearizer;
use move_core::spectral::AudioBuffer;
use move_core::transfer::{transfer_melody, TransferRequest, DEFAULT_OVERLAP};
use move_core::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoveStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    OutOfRange = 6,
    AudioTooShort = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Opaque loaded checkpoint.
pub struct MoveModel {
    ckpt: ModelCheckpoint,
    lin: Linearizer,
}

/// Opaque mono audio buffer owned by the library.
pub struct MoveAudio {
    samples: Vec<f32>,
    sample_rate: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MoveStatus {
    match e {
        Error::Io(_) | Error::Wav { .. } => MoveStatus::Io,
        Error::Checkpoint(_) | Error::UnsupportedVersion { .. } => MoveStatus::Checkpoint,
        Error::Shape(_) => MoveStatus::Shape,
        Error::Range(_) | Error::Variant(_) => MoveStatus::OutOfRange,
        Error::TooShort { .. } => MoveStatus::AudioTooShort,
        Error::Config(_) => MoveStatus::InvalidArgument,
        _ => MoveStatus::Internal,
    }
}

/// Runs `f`, recording its error message and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (MoveStatus, String)>) -> MoveStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MoveStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MoveStatus::Internal
        }
    }
}

fn core<T>(r: move_core::Result<T>) -> Result<T, (MoveStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MoveStatus, String) {
    (MoveStatus::NullPointer, format!("{what} is null"))
}

fn model_ref<'a>(model: *const MoveModel) -> Result<&'a MoveModel, (MoveStatus, String)> {
    // SAFETY: callers pass either null or a handle from `move_model_load`.
    unsafe { model.as_ref() }.ok_or_else(|| null("model"))
}

fn label(m: &MoveModel, pitch_class: u32, octave: u32, instrument: u32) -> Result<ConditionLabel, (MoveStatus, String)> {
    let l = ConditionLabel::new(pitch_class as usize, octave as usize, Some(instrument as usize));
    if instrument as usize >= m.ckpt.instruments.len() {
        return Err((MoveStatus::OutOfRange, format!("instrument {instrument} unknown")));
    }
    core(m.ckpt.model.domain_of(&l))?;
    Ok(l)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn move_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads the checkpoint directory `path` into `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn move_model_load(path: *const c_char, out: *mut *mut MoveModel) -> MoveStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (MoveStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ckpt = core(ModelCheckpoint::load(Path::new(path)))?;
        let lin = Linearizer::new(ckpt.stats.clone(), &ckpt.spectral);
        unsafe { *out = Box::into_raw(Box::new(MoveModel { ckpt, lin })) };
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from `move_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn move_model_free(model: *mut MoveModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Shape facts of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MoveModelInfo {
    pub latent_dim: u32,
    pub num_instruments: u32,
    pub bins: u32,
    pub frames: u32,
    pub sample_rate: u32,
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn move_model_info(model: *const MoveModel, out: *mut MoveModelInfo) -> MoveStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let c = m.ckpt.model.config();
        unsafe {
            *out = MoveModelInfo {
                latent_dim: c.latent_dim as u32,
                num_instruments: m.ckpt.instruments.len() as u32,
                bins: c.bins as u32,
                frames: c.frames as u32,
                sample_rate: m.ckpt.spectral.sample_rate,
            }
        };
        Ok(())
    })
}

/// Posterior mean of one log-magnitude chunk (`frames × bins`, row-major)
/// written to `z_out` (`latent_dim` entries).
///
/// # Safety
/// `chunk` must hold `chunk_len` floats and `z_out` `z_len` floats.
#[no_mangle]
pub unsafe extern "C" fn move_model_encode(
    model: *const MoveModel,
    chunk: *const f32,
    chunk_len: usize,
    pitch_class: u32,
    octave: u32,
    instrument: u32,
    z_out: *mut f32,
    z_len: usize,
) -> MoveStatus {
    guard(|| {
        let m = model_ref(model)?;
        if chunk.is_null() || z_out.is_null() {
            return Err(null("buffer"));
        }
        let cfg = m.ckpt.model.config();
        if chunk_len != cfg.chunk_len() {
            return Err((MoveStatus::Shape, format!("chunk has {chunk_len} values, expected {}", cfg.chunk_len())));
        }
        if z_len < cfg.latent_dim {
            return Err((MoveStatus::BufferTooSmall, format!("need {} latent slots", cfg.latent_dim)));
        }
        let l = label(m, pitch_class, octave, instrument)?;
        let mut x: Vec<f64> = unsafe { std::slice::from_raw_parts(chunk, chunk_len) }.iter().map(|v| *v as f64).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err((MoveStatus::InvalidArgument, "chunk holds non-finite values".into()));
        }
        m.ckpt.stats.normalize(&mut x);
        let code = core(m.ckpt.model.encode(&[&x], &[l]))?.remove(0);
        let out = unsafe { std::slice::from_raw_parts_mut(z_out, z_len) };
        for (o, v) in out.iter_mut().zip(&code.mu) {
            *o = *v as f32;
        }
        Ok(())
    })
}

/// Decodes latent point `z` into a log-magnitude chunk (`frames × bins`).
///
/// # Safety
/// `z` must hold `z_len` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn move_model_decode(
    model: *const MoveModel,
    z: *const f32,
    z_len: usize,
    pitch_class: u32,
    octave: u32,
    instrument: u32,
    out: *mut f32,
    out_len: usize,
) -> MoveStatus {
    guard(|| {
        let m = model_ref(model)?;
        if z.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let cfg = m.ckpt.model.config();
        if z_len != cfg.latent_dim {
            return Err((MoveStatus::Shape, format!("z has {z_len} values, expected {}", cfg.latent_dim)));
        }
        if out_len < cfg.chunk_len() {
            return Err((MoveStatus::BufferTooSmall, format!("need {} output slots", cfg.chunk_len())));
        }
        let l = label(m, pitch_class, octave, instrument)?;
        let z: Vec<f64> = unsafe { std::slice::from_raw_parts(z, z_len) }.iter().map(|v| *v as f64).collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err((MoveStatus::InvalidArgument, "z holds non-finite values".into()));
        }
        let gen = core(m.ckpt.model.decode(&[&z], &[l]))?.remove(0).generated();
        let log_mag = m.lin.log_magnitudes(&gen);
        let out = unsafe { std::slice::from_raw_parts_mut(out, out_len) };
        for (o, v) in out.iter_mut().zip(&log_mag) {
            *o = *v as f32;
        }
        Ok(())
    })
}

/// Transfers mono audio from instrument `source` to `target`, resampling
/// the input if needed. Pitch is tracked from the audio.
///
/// # Safety
/// `samples` must hold `len` floats and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn move_transfer(
    model: *const MoveModel,
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    source: u32,
    target: u32,
    gl_iterations: u32,
    out: *mut *mut MoveAudio,
) -> MoveStatus {
    guard(|| {
        let m = model_ref(model)?;
        if samples.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        if sample_rate == 0 {
            return Err((MoveStatus::InvalidArgument, "sample rate is zero".into()));
        }
        let k = m.ckpt.instruments.len() as u32;
        if source >= k || target >= k {
            return Err((MoveStatus::OutOfRange, format!("instruments must be below {k}")));
        }
        let input: Vec<f64> = unsafe { std::slice::from_raw_parts(samples, len) }.iter().map(|v| *v as f64).collect();
        if input.iter().any(|v| !v.is_finite()) {
            return Err((MoveStatus::InvalidArgument, "audio holds non-finite samples".into()));
        }
        let audio = move_core::wav::resample_linear(&AudioBuffer::new(input, sample_rate), m.ckpt.spectral.sample_rate);
        let req = TransferRequest::new(source as usize, target as usize);
        let res = core(transfer_melody(&m.ckpt, &audio, &req, DEFAULT_OVERLAP, gl_iterations as usize))?;
        let buf = MoveAudio {
            samples: res.audio.samples.iter().map(|v| *v as f32).collect(),
            sample_rate: res.audio.sample_rate,
        };
        unsafe { *out = Box::into_raw(Box::new(buf)) };
        Ok(())
    })
}

/// Number of samples in `audio`, 0 for null.
///
/// # Safety
/// `audio` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn move_audio_len(audio: *const MoveAudio) -> usize {
    unsafe { audio.as_ref() }.map_or(0, |a| a.samples.len())
}

/// Sample rate of `audio`, 0 for null.
///
/// # Safety
/// `audio` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn move_audio_sample_rate(audio: *const MoveAudio) -> u32 {
    unsafe { audio.as_ref() }.map_or(0, |a| a.sample_rate)
}

/// Borrowed view of the samples, valid until `move_audio_free`.
///
/// # Safety
/// `audio` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn move_audio_data(audio: *const MoveAudio) -> *const f32 {
    unsafe { audio.as_ref() }.map_or(ptr::null(), |a| a.samples.as_ptr())
}

/// # Safety
/// `audio` must be null or a handle from `move_transfer` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn move_audio_free(audio: *mut MoveAudio) {
    if !audio.is_null() {
        drop(unsafe { Box::from_raw(audio) });
    }
}
