//! Timbre transfer of single chunks and of whole recordings.

use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::conditioning::{ConditionLabel, OCTAVES};
use crate::error::{Error, Result};
use crate::spectral::{chunk, AudioBuffer, Frontend, LogMagSpectrogram, SpectroChunk};

pub const DEFAULT_OVERLAP: usize = 4;
const MIN_F0: f64 = 40.0;
const MAX_F0: f64 = 2000.0;
const YIN_THRESHOLD: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub source_instrument: usize,
    pub target_instrument: usize,
    /// Decode with this pitch class instead of the source's.
    pub pitch_class: Option<usize>,
    pub octave: Option<usize>,
}

impl TransferRequest {
    pub fn new(source_instrument: usize, target_instrument: usize) -> Self {
        TransferRequest {
            source_instrument,
            target_instrument,
            pitch_class: None,
            octave: None,
        }
    }

    fn labels(&self, pitch_class: usize, octave: usize) -> (ConditionLabel, ConditionLabel) {
        let source = ConditionLabel::new(pitch_class, octave, Some(self.source_instrument));
        let target = ConditionLabel::new(
            self.pitch_class.unwrap_or(pitch_class),
            self.octave.unwrap_or(octave),
            Some(self.target_instrument),
        );
        (source, target)
    }
}

/// Encodes with the source condition and decodes with the target one.
/// Input and output are normalized chunks.
pub fn transfer_chunk(
    ckpt: &ModelCheckpoint,
    x: &SpectroChunk,
    pitch_class: usize,
    octave: usize,
    req: &TransferRequest,
) -> Result<SpectroChunk> {
    let (s, t) = req.labels(pitch_class, octave);
    let out = ckpt.model.transfer(&[&x.data], &[s], &[t])?;
    Ok(SpectroChunk {
        data: out.into_iter().next().expect("one chunk in, one out"),
        ..x.clone()
    })
}

/// Fundamental frequency by the YIN difference function, or `None` for
/// silence and unpitched input.
pub fn estimate_f0(samples: &[f64], sample_rate: u32) -> Option<f64> {
    let sr = sample_rate as f64;
    let min_lag = (sr / MAX_F0).floor().max(2.0) as usize;
    let max_lag = (sr / MIN_F0).ceil() as usize;
    let w = samples.len().checked_sub(max_lag + 1)?.min(2048);
    if w < min_lag || samples[..w + max_lag].iter().all(|s| s.abs() < 1e-6) {
        return None;
    }
    let mut d = vec![0.0; max_lag + 1];
    for (lag, slot) in d.iter_mut().enumerate().skip(1) {
        *slot = (0..w).map(|i| (samples[i] - samples[i + lag]).powi(2)).sum();
    }
    let mut cmnd = vec![1.0; max_lag + 1];
    let mut run = 0.0;
    for lag in 1..=max_lag {
        run += d[lag];
        cmnd[lag] = if run > 0.0 { d[lag] * lag as f64 / run } else { 1.0 };
    }
    let mut best = None;
    let mut lag = min_lag;
    while lag < max_lag {
        if cmnd[lag] < YIN_THRESHOLD {
            while lag + 1 < max_lag && cmnd[lag + 1] < cmnd[lag] {
                lag += 1;
            }
            best = Some(lag);
            break;
        }
        lag += 1;
    }
    let lag = best.or_else(|| {
        (min_lag..max_lag)
            .min_by(|a, b| cmnd[*a].total_cmp(&cmnd[*b]))
            .filter(|l| cmnd[*l] < 0.5)
    })?;
    let (a, b, c) = (cmnd[lag - 1], cmnd[lag], cmnd[lag + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
    Some(sr / (lag as f64 + shift.clamp(-0.5, 0.5)))
}

/// Nearest equal-tempered `(pitch class, octave)` of a frequency.
pub fn nearest_note(f0: f64) -> Option<(usize, usize)> {
    if !(f0 > 0.0) {
        return None;
    }
    let m = (69.0 + 12.0 * (f0 / 440.0).log2()).round();
    if m < 12.0 {
        return None;
    }
    let m = m as usize;
    let octave = m / 12 - 1;
    (octave < OCTAVES).then_some((m % 12, octave))
}

/// Per-chunk pitch estimates of `audio` for chunks starting at `starts`
/// (frame indices). Unpitched chunks inherit the previous estimate.
pub fn track_pitch(audio: &AudioBuffer, starts: &[usize], frames: usize, hop: usize, window: usize) -> Vec<(usize, usize)> {
    let mut last = (9, 4);
    starts
        .iter()
        .map(|s| {
            let a = s * hop;
            let b = (a + (frames - 1) * hop + window).min(audio.samples.len());
            if let Some(note) = estimate_f0(&audio.samples[a..b], audio.sample_rate).and_then(nearest_note) {
                last = note;
            }
            last
        })
        .collect()
}

/// Chunk start frames with hop `len − overlap`, plus a final chunk flush
/// with the end so every frame is covered.
fn chunk_starts(frames: usize, len: usize, overlap: usize) -> Vec<usize> {
    let hop = len - overlap;
    let mut starts: Vec<usize> = (0..=(frames - len) / hop).map(|i| i * hop).collect();
    if starts.last().is_some_and(|s| s + len < frames) {
        starts.push(frames - len);
    }
    starts
}

/// Crossfaded overlap-add of `[len × bins]` chunks placed at `starts`.
/// Every output value is a convex combination of the chunk values there.
pub fn overlap_add(chunks: &[Vec<f64>], starts: &[usize], len: usize, bins: usize, overlap: usize) -> Vec<f64> {
    let frames = starts.iter().map(|s| s + len).max().unwrap_or(0);
    let mut acc = vec![0.0; frames * bins];
    let mut wsum = vec![0.0; frames];
    let ramp = (overlap + 1) as f64;
    for (c, (data, start)) in chunks.iter().zip(starts).enumerate() {
        for f in 0..len {
            let mut w: f64 = 1.0;
            if c > 0 {
                w = w.min((f + 1) as f64 / ramp);
            }
            if c + 1 < chunks.len() {
                w = w.min((len - f) as f64 / ramp);
            }
            let row = start + f;
            wsum[row] += w;
            for b in 0..bins {
                acc[row * bins + b] += w * data[f * bins + b];
            }
        }
    }
    for (row, w) in wsum.iter().enumerate() {
        for v in &mut acc[row * bins..(row + 1) * bins] {
            *v /= w;
        }
    }
    acc
}

#[derive(Clone, Debug)]
pub struct MelodyTransfer {
    pub audio: AudioBuffer,
    pub spectrogram: LogMagSpectrogram,
    /// Pitch used for each chunk.
    pub notes: Vec<(usize, usize)>,
}

/// Analyze, transfer chunk by chunk with a crossfade over `overlap` frames,
/// then invert with `gl_iterations` of Griffin–Lim.
pub fn transfer_melody(
    ckpt: &ModelCheckpoint,
    audio: &AudioBuffer,
    req: &TransferRequest,
    overlap: usize,
    gl_iterations: usize,
) -> Result<MelodyTransfer> {
    let cfg = ckpt.model.config();
    let len = cfg.frames;
    if overlap >= len {
        return Err(Error::config(format!("overlap {overlap} must be below the chunk length {len}")));
    }
    let frontend = Frontend::new(ckpt.spectral.clone())?;
    let spec = frontend.analyze(audio)?;
    if spec.frames < len {
        return Err(Error::TooShort {
            len: audio.samples.len(),
            needed: ckpt.spectral.window + (len - 1) * ckpt.spectral.hop,
        });
    }
    let starts = chunk_starts(spec.frames, len, overlap);
    let notes = track_pitch(audio, &starts, len, ckpt.spectral.hop, ckpt.spectral.window);
    let mut chunks: Vec<Vec<f64>> = starts
        .iter()
        .map(|s| {
            let mut v = spec.data[s * spec.bins..(s + len) * spec.bins].to_vec();
            ckpt.stats.normalize(&mut v);
            v
        })
        .collect();
    let (src, dst): (Vec<ConditionLabel>, Vec<ConditionLabel>) =
        notes.iter().map(|(pc, oct)| req.labels(*pc, *oct)).unzip();
    let refs: Vec<&[f64]> = chunks.iter().map(|c| c.as_slice()).collect();
    chunks = ckpt.model.transfer(&refs, &src, &dst)?;
    for c in &mut chunks {
        ckpt.stats.denormalize(c);
    }
    let data = overlap_add(&chunks, &starts, len, spec.bins, overlap);
    let out = LogMagSpectrogram {
        frames: data.len() / spec.bins,
        data,
        ..spec
    };
    let audio = frontend.invert(&out, gl_iterations)?;
    Ok(MelodyTransfer {
        audio,
        spectrogram: out,
        notes,
    })
}

/// Chunks of a spectrogram at the melody hop, for callers that want the
/// pieces rather than the stitched result.
pub fn melody_chunks(spec: &LogMagSpectrogram, len: usize, overlap: usize) -> Vec<SpectroChunk> {
    chunk(spec, len, len - overlap, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{fundamental_hz, synthesize_tone, InstrumentSpec};

    #[test]
    fn nearest_note_of_a4() {
        assert_eq!(nearest_note(440.0), Some((9, 4)));
        assert_eq!(nearest_note(261.63), Some((0, 4)));
        assert_eq!(nearest_note(0.0), None);
    }

    #[test]
    fn yin_finds_synthetic_pitches() {
        for spec in InstrumentSpec::presets() {
            for (pc, oct) in [(0, 3), (7, 3), (4, 4), (11, 4)] {
                let tone = synthesize_tone(&spec, pc, oct, 1, 0.3, 22050, 3).unwrap();
                let f0 = estimate_f0(&tone.samples[2000..], 22050).unwrap();
                let want = fundamental_hz(pc, oct);
                assert!((f0 / want - 1.0).abs() < 0.02, "{} {pc} {oct}: {f0} vs {want}", spec.name);
            }
        }
        assert_eq!(estimate_f0(&[0.0; 4000], 22050), None);
    }

    #[test]
    fn starts_cover_every_frame() {
        assert_eq!(chunk_starts(16, 16, 4), vec![0]);
        assert_eq!(chunk_starts(40, 16, 4), vec![0, 12, 24]);
        assert_eq!(chunk_starts(41, 16, 4), vec![0, 12, 24, 25]);
    }

    #[test]
    fn crossfade_is_convex() {
        let a = vec![1.0; 8];
        let b = vec![3.0; 8];
        let out = overlap_add(&[a, b], &[0, 2], 4, 2, 2);
        assert_eq!(out.len(), 12);
        assert!(out.iter().all(|v| (1.0..=3.0).contains(v)));
        assert_eq!(out[0], 1.0);
        assert_eq!(out[11], 3.0);
        assert!(out[4] > 1.0 && out[4] < 3.0);
    }
}
