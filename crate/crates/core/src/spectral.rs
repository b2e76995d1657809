//! Invertible log-frequency magnitude representation of audio.
//!
//! Analysis is a Hann-windowed STFT followed by a triangular mel filterbank
//! on linear magnitudes, flooring and a natural log. Inversion maps mel
//! magnitudes back to linear STFT bins through the filterbank pseudo-inverse
//! and recovers phase with Griffin–Lim iterations.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 22050;
/// Minimum linear magnitude before the log transform.
pub const MAGNITUDE_FLOOR: f64 = 6e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioBuffer {
            samples,
            sample_rate,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Scales down so that every `|sample| ≤ 1`.
    pub fn normalize_peak(&mut self) {
        let peak = self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if peak > 1.0 {
            self.samples.iter_mut().for_each(|s| *s /= peak);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub bins: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub floor: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SpectralConfig {
    /// 128 mel bins; a hop of 165 samples makes 16 frames span ≈120 ms.
    pub fn desk() -> Self {
        SpectralConfig {
            sample_rate: DEFAULT_SAMPLE_RATE,
            window: 1024,
            hop: 165,
            bins: 128,
            f_min: 10.0,
            f_max: 11000.0,
            floor: MAGNITUDE_FLOOR,
        }
    }

    /// Full-size 500-bin representation.
    pub fn paper() -> Self {
        SpectralConfig {
            bins: 500,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if self.bins < 8 {
            return Err(Error::config(format!("need at least 8 bins, got {}", self.bins)));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::config(format!(
                "frequency range {}..{} Hz invalid at {} Hz",
                self.f_min, self.f_max, self.sample_rate
            )));
        }
        if self.window < 16 || self.hop == 0 || self.hop > self.window {
            return Err(Error::config("window must be ≥ 16 and 0 < hop ≤ window"));
        }
        if !(self.floor > 0.0) {
            return Err(Error::config("magnitude floor must be positive"));
        }
        Ok(())
    }

    /// Duration covered by `frames` hops, in seconds.
    pub fn context_s(&self, frames: usize) -> f64 {
        (frames * self.hop) as f64 / self.sample_rate as f64
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            (samples - self.window) / self.hop + 1
        }
    }
}

/// `[frames × bins]` natural-log mel magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMagSpectrogram {
    pub frames: usize,
    pub bins: usize,
    /// Row-major, one row per frame.
    pub data: Vec<f64>,
    pub bin_centers: Vec<f64>,
    pub hop: usize,
    pub floor_value: f64,
}

impl LogMagSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    /// Linear magnitudes of one frame.
    pub fn linear_frame(&self, t: usize) -> Vec<f64> {
        self.frame(t).iter().map(|v| v.exp()).collect()
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Mel band centers, strictly increasing inside `[f_min, f_max]`.
pub fn mel_centers(bins: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    (1..=bins)
        .map(|b| mel_to_hz(lo + (hi - lo) * b as f64 / (bins + 1) as f64))
        .collect()
}

/// Analysis/synthesis engine for one [`SpectralConfig`].
#[derive(Clone)]
pub struct Frontend {
    cfg: SpectralConfig,
    window: Vec<f64>,
    /// `2 / Σw`: scales |FFT| so a unit sine reads 1.
    mag_scale: f64,
    /// `[bins × n_freq]`
    filterbank: Vec<f64>,
    /// `[n_freq × bins]`
    pinv: Vec<f64>,
    bin_centers: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend").field("cfg", &self.cfg).finish()
    }
}

impl Frontend {
    pub fn new(cfg: SpectralConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window;
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let mag_scale = 2.0 / window.iter().sum::<f64>();
        let n_freq = n / 2 + 1;
        let filterbank = mel_filterbank(&cfg, n_freq);
        let pinv = pseudo_inverse(&filterbank, cfg.bins, n_freq);
        let bin_centers = mel_centers(cfg.bins, cfg.f_min, cfg.f_max);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        Ok(Frontend {
            cfg,
            window,
            mag_scale,
            filterbank,
            pinv,
            bin_centers,
            fft,
            ifft,
        })
    }

    pub fn config(&self) -> &SpectralConfig {
        &self.cfg
    }

    pub fn bin_centers(&self) -> &[f64] {
        &self.bin_centers
    }

    pub fn n_freq(&self) -> usize {
        self.cfg.window / 2 + 1
    }

    /// Filterbank weights, `[bins × n_freq]` row-major.
    pub fn filterbank(&self) -> &[f64] {
        &self.filterbank
    }

    fn stft(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let frames = self.cfg.frame_count(samples.len());
        let n = self.cfg.window;
        (0..frames)
            .map(|t| {
                let start = t * self.cfg.hop;
                let mut buf: Vec<Complex<f64>> = samples[start..start + n]
                    .iter()
                    .zip(&self.window)
                    .map(|(s, w)| Complex::new(s * w, 0.0))
                    .collect();
                self.fft.process(&mut buf);
                buf.truncate(n / 2 + 1);
                buf
            })
            .collect()
    }

    /// Least-squares inverse STFT for the same window.
    fn istft(&self, spec: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let (n, hop) = (self.cfg.window, self.cfg.hop);
        if spec.is_empty() {
            return Vec::new();
        }
        let len = (spec.len() - 1) * hop + n;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (t, half) in spec.iter().enumerate() {
            buf[..half.len()].copy_from_slice(half);
            for k in 1..n - half.len() + 1 {
                buf[n - k] = half[k].conj();
            }
            self.ifft.process(&mut buf);
            let start = t * hop;
            for i in 0..n {
                let w = self.window[i];
                out[start + i] += w * buf[i].re / n as f64;
                norm[start + i] += w * w;
            }
        }
        for (o, z) in out.iter_mut().zip(&norm) {
            *o = if *z > 1e-10 { *o / z } else { 0.0 };
        }
        out
    }

    /// Scaled linear STFT magnitudes, `[frames × n_freq]`.
    pub fn stft_magnitude(&self, samples: &[f64]) -> (usize, Vec<f64>) {
        let spec = self.stft(samples);
        let frames = spec.len();
        let data = spec
            .iter()
            .flat_map(|row| row.iter().map(|c| c.norm() * self.mag_scale))
            .collect();
        (frames, data)
    }

    /// Floored, log-transformed mel magnitudes of `audio`.
    pub fn analyze(&self, audio: &AudioBuffer) -> Result<LogMagSpectrogram> {
        if audio.sample_rate != self.cfg.sample_rate {
            return Err(Error::config(format!(
                "audio at {} Hz, frontend expects {} Hz",
                audio.sample_rate, self.cfg.sample_rate
            )));
        }
        if audio.samples.len() < self.cfg.window {
            return Err(Error::TooShort {
                len: audio.samples.len(),
                needed: self.cfg.window,
            });
        }
        let (frames, mags) = self.stft_magnitude(&audio.samples);
        let nf = self.n_freq();
        let bins = self.cfg.bins;
        let floor = self.cfg.floor;
        let mut data = Vec::with_capacity(frames * bins);
        for row in mags.chunks(nf) {
            for b in 0..bins {
                let fb = &self.filterbank[b * nf..(b + 1) * nf];
                let m: f64 = fb.iter().zip(row).map(|(w, a)| w * a).sum();
                data.push(m.max(floor).ln());
            }
        }
        Ok(LogMagSpectrogram {
            frames,
            bins,
            data,
            bin_centers: self.bin_centers.clone(),
            hop: self.cfg.hop,
            floor_value: floor,
        })
    }

    /// Mel magnitudes → non-negative linear STFT magnitudes (unscaled FFT units).
    fn linear_magnitudes(&self, spec: &LogMagSpectrogram) -> Vec<Vec<f64>> {
        let nf = self.n_freq();
        let bins = spec.bins;
        (0..spec.frames)
            .map(|t| {
                let mel: Vec<f64> = spec.frame(t).iter().map(|v| v.exp()).collect();
                (0..nf)
                    .map(|k| {
                        let row = &self.pinv[k * bins..(k + 1) * bins];
                        let s: f64 = row.iter().zip(&mel).map(|(p, m)| p * m).sum();
                        s.max(0.0) / self.mag_scale
                    })
                    .collect()
            })
            .collect()
    }

    pub fn invert(&self, spec: &LogMagSpectrogram, iterations: usize) -> Result<AudioBuffer> {
        Ok(self.invert_traced(spec, iterations)?.0)
    }

    /// Inverts `spec` and also returns the STFT consistency error
    /// `‖|STFT(x_k)| − S‖` after the initial estimate and after every iteration.
    pub fn invert_traced(
        &self,
        spec: &LogMagSpectrogram,
        iterations: usize,
    ) -> Result<(AudioBuffer, Vec<f64>)> {
        if spec.bins != self.cfg.bins {
            return Err(Error::shape(format!(
                "spectrogram has {} bins, frontend {}",
                spec.bins, self.cfg.bins
            )));
        }
        let target = self.linear_magnitudes(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(0x6a09_e667);
        let mut current: Vec<Vec<Complex<f64>>> = target
            .iter()
            .map(|row| {
                row.iter()
                    .map(|m| Complex::from_polar(*m, rng.random::<f64>() * std::f64::consts::TAU))
                    .collect()
            })
            .collect();
        let mut x = self.istft(&current);
        let mut errors = Vec::with_capacity(iterations + 1);
        for it in 0..=iterations {
            let reanalyzed = self.stft(&x);
            let mut err = 0.0;
            for (row, tgt) in reanalyzed.iter().zip(&target) {
                for (c, m) in row.iter().zip(tgt) {
                    let d = c.norm() - m;
                    err += d * d;
                }
            }
            errors.push(err.sqrt());
            if it == iterations {
                break;
            }
            for ((cur, re), tgt) in current.iter_mut().zip(&reanalyzed).zip(&target) {
                for ((c, r), m) in cur.iter_mut().zip(re).zip(tgt) {
                    let norm = r.norm();
                    *c = if norm > 0.0 { r * (m / norm) } else { Complex::new(*m, 0.0) };
                }
            }
            x = self.istft(&current);
        }
        let mut audio = AudioBuffer::new(x, self.cfg.sample_rate);
        audio.samples.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
        Ok((audio, errors))
    }
}

/// Triangular mel filters with unit peak on linear-frequency FFT bins.
/// A filter too narrow to cover any FFT bin takes the nearest bin instead.
fn mel_filterbank(cfg: &SpectralConfig, n_freq: usize) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.bins + 1) as f64))
        .collect();
    let df = cfg.sample_rate as f64 / cfg.window as f64;
    let mut fb = vec![0.0; cfg.bins * n_freq];
    for b in 0..cfg.bins {
        let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
        let row = &mut fb[b * n_freq..(b + 1) * n_freq];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * df;
            *w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
        }
        if row.iter().all(|w| *w == 0.0) {
            let k = ((c / df).round() as usize).min(n_freq - 1);
            row[k] = 1.0;
        }
    }
    fb
}

/// Moore–Penrose pseudo-inverse of a `[rows × cols]` matrix, `[cols × rows]`.
fn pseudo_inverse(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mat = nalgebra::DMatrix::from_row_slice(rows, cols, m);
    let pinv = mat
        .pseudo_inverse(1e-10)
        .expect("pseudo-inverse with non-negative epsilon");
    let mut out = vec![0.0; cols * rows];
    for i in 0..cols {
        for j in 0..rows {
            out[i * rows + j] = pinv[(i, j)];
        }
    }
    out
}

/// Log-domain spectral SNR in dB: `10·log10(Σ a² / Σ (a − b)²)`.
pub fn log_spectral_snr_db(reference: &LogMagSpectrogram, estimate: &LogMagSpectrogram) -> f64 {
    let frames = reference.frames.min(estimate.frames);
    let n = frames * reference.bins;
    let (sig, noise) = reference.data[..n]
        .iter()
        .zip(&estimate.data[..n])
        .fold((0.0, 0.0), |(s, e), (a, b)| (s + a * a, e + (a - b) * (a - b)));
    10.0 * (sig / noise.max(f64::MIN_POSITIVE)).log10()
}

/// Where a chunk came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkSource {
    pub note_id: usize,
    pub frame_offset: usize,
}

/// Fixed-size `[frames × bins]` tile, the model's input and output unit.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroChunk {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
    pub source: ChunkSource,
}

/// Slices `spec` into `[len × bins]` chunks starting every `hop` frames.
/// With `hop == len` this yields `⌊T / len⌋` non-overlapping chunks.
pub fn chunk(spec: &LogMagSpectrogram, len: usize, hop: usize, note_id: usize) -> Vec<SpectroChunk> {
    if len == 0 || hop == 0 || spec.frames < len {
        return Vec::new();
    }
    (0..=(spec.frames - len) / hop)
        .map(|i| {
            let start = i * hop;
            SpectroChunk {
                frames: len,
                bins: spec.bins,
                data: spec.data[start * spec.bins..(start + len) * spec.bins].to_vec(),
                source: ChunkSource {
                    note_id,
                    frame_offset: start,
                },
            }
        })
        .collect()
}

/// Zero-mean, unit-range affine normalization.
///
/// `x' = (x − mean) / scale` with `scale = max(max − mean, mean − min)`, so
/// the fitted data has mean 0 and lies in `[-1, 1]` with at least one
/// extreme at exactly ±1. Statistics are global (length 1) or per bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub range_min: Vec<f64>,
    pub range_max: Vec<f64>,
}

impl NormStats {
    /// Fits on `[· × bins]` row-major blocks.
    pub fn fit<'a>(blocks: impl IntoIterator<Item = &'a [f64]>, bins: usize, per_bin: bool) -> Result<Self> {
        let groups = if per_bin { bins } else { 1 };
        let mut sum = vec![0.0; groups];
        let mut count = vec![0usize; groups];
        let mut lo = vec![f64::INFINITY; groups];
        let mut hi = vec![f64::NEG_INFINITY; groups];
        for block in blocks {
            for (i, v) in block.iter().enumerate() {
                let g = if per_bin { i % bins } else { 0 };
                sum[g] += v;
                count[g] += 1;
                lo[g] = lo[g].min(*v);
                hi[g] = hi[g].max(*v);
            }
        }
        if count.iter().any(|c| *c == 0) {
            return Err(Error::Insufficient("no values to fit normalization on".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(h > l)) {
            return Err(Error::DegenerateStats);
        }
        let mean = sum.iter().zip(&count).map(|(s, c)| s / *c as f64).collect();
        Ok(NormStats {
            mean,
            range_min: lo,
            range_max: hi,
        })
    }

    pub fn per_bin(&self) -> bool {
        self.mean.len() > 1
    }

    fn params(&self, i: usize) -> (f64, f64) {
        let g = if self.per_bin() { i % self.mean.len() } else { 0 };
        let m = self.mean[g];
        (m, (self.range_max[g] - m).max(m - self.range_min[g]))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if n == 0 || self.range_min.len() != n || self.range_max.len() != n {
            return Err(Error::config("normalization statistics have inconsistent lengths"));
        }
        if self.range_min.iter().zip(&self.range_max).any(|(l, h)| !(h > l)) {
            return Err(Error::DegenerateStats);
        }
        Ok(())
    }

    /// In-place map of row-major `[· × bins]` data (bins only matter per-bin).
    pub fn normalize(&self, data: &mut [f64]) {
        for (i, v) in data.iter_mut().enumerate() {
            let (m, s) = self.params(i);
            *v = (*v - m) / s;
        }
    }

    pub fn denormalize(&self, data: &mut [f64]) {
        for (i, v) in data.iter_mut().enumerate() {
            let (m, s) = self.params(i);
            *v = *v * s + m;
        }
    }
}

const SPEC_MAGIC: &[u8; 8] = b"MOVESPEC";
const SPEC_VERSION: u32 = 1;

/// Writes the binary spectrogram dump (little-endian, `f32` entries).
pub fn write_spectrogram(w: &mut impl Write, spec: &LogMagSpectrogram) -> Result<()> {
    w.write_all(SPEC_MAGIC)?;
    w.write_all(&SPEC_VERSION.to_le_bytes())?;
    w.write_all(&(spec.frames as u32).to_le_bytes())?;
    w.write_all(&(spec.bins as u32).to_le_bytes())?;
    w.write_all(&(spec.hop as u32).to_le_bytes())?;
    w.write_all(&spec.floor_value.to_le_bytes())?;
    let mut buf = Vec::with_capacity(spec.data.len() * 4);
    for v in &spec.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a dump written by [`write_spectrogram`]. Bin centers are not stored
/// and come back empty.
pub fn read_spectrogram(r: &mut impl Read) -> Result<LogMagSpectrogram> {
    let mut head = [0u8; 32];
    r.read_exact(&mut head)
        .map_err(|_| Error::shape("spectrogram dump header truncated"))?;
    if &head[..8] != SPEC_MAGIC {
        return Err(Error::shape("bad spectrogram magic"));
    }
    let u = |at: usize| u32::from_le_bytes(head[at..at + 4].try_into().unwrap());
    if u(8) != SPEC_VERSION {
        return Err(Error::shape(format!("unsupported spectrogram version {}", u(8))));
    }
    let (frames, bins, hop) = (u(12) as usize, u(16) as usize, u(20) as usize);
    let floor_value = f64::from_le_bytes(head[24..32].try_into().unwrap());
    let mut payload = vec![0u8; frames * bins * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::shape("spectrogram dump payload truncated"))?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(LogMagSpectrogram {
        frames,
        bins,
        data,
        bin_centers: Vec::new(),
        hop,
        floor_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, amp: f64) -> AudioBuffer {
        let sr = DEFAULT_SAMPLE_RATE as f64;
        let n = (secs * sr) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
                .collect(),
            DEFAULT_SAMPLE_RATE,
        )
    }

    #[test]
    fn paper_config_has_500_bins_over_range() {
        let fe = Frontend::new(SpectralConfig::paper()).unwrap();
        let c = fe.bin_centers();
        assert_eq!(c.len(), 500);
        assert!(c[0] > 10.0 && *c.last().unwrap() < 11000.0);
        assert!(c.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn sixteen_frames_span_about_120ms() {
        let ms = SpectralConfig::desk().context_s(16) * 1000.0;
        assert!((ms - 120.0).abs() < 2.0, "{ms}");
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let fe = Frontend::new(SpectralConfig::desk()).unwrap();
        let spec = fe.analyze(&AudioBuffer::new(vec![0.0; 4096], 22050)).unwrap();
        assert!(spec.data.iter().all(|v| *v == MAGNITUDE_FLOOR.ln()));
        assert_eq!(spec.frames, (4096 - 1024) / 165 + 1);
    }

    #[test]
    fn too_short_is_an_error() {
        let fe = Frontend::new(SpectralConfig::desk()).unwrap();
        let r = fe.analyze(&AudioBuffer::new(vec![0.0; 1000], 22050));
        assert!(matches!(r, Err(Error::TooShort { len: 1000, needed: 1024 })));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = SpectralConfig::desk();
        c.bins = 4;
        assert!(Frontend::new(c).is_err());
        let mut c = SpectralConfig::desk();
        c.f_max = 12000.0;
        assert!(Frontend::new(c).is_err());
    }

    #[test]
    fn magnitudes_scale_linearly_above_floor() {
        let fe = Frontend::new(SpectralConfig::desk()).unwrap();
        let a = fe.analyze(&sine(440.0, 0.5, 0.8)).unwrap();
        let b = fe.analyze(&sine(440.0, 0.5, 0.4)).unwrap();
        let floor = MAGNITUDE_FLOOR.ln();
        let mut checked = 0;
        for (x, y) in a.data.iter().zip(&b.data) {
            if *y > floor + 1.0 {
                assert!((x - y - 2f64.ln()).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn chunks_count_and_exactness() {
        let spec = LogMagSpectrogram {
            frames: 160,
            bins: 8,
            data: (0..160 * 8).map(|i| i as f64).collect(),
            bin_centers: mel_centers(8, 10.0, 11000.0),
            hop: 165,
            floor_value: MAGNITUDE_FLOOR,
        };
        let chunks = chunk(&spec, 16, 16, 3);
        assert_eq!(chunks.len(), 10);
        let joined: Vec<f64> = chunks.iter().flat_map(|c| c.data.clone()).collect();
        assert_eq!(joined, spec.data);
        assert_eq!(chunks[2].source, ChunkSource { note_id: 3, frame_offset: 32 });
        let short = LogMagSpectrogram { frames: 15, data: spec.data[..15 * 8].to_vec(), ..spec };
        assert!(chunk(&short, 16, 16, 0).is_empty());
    }

    #[test]
    fn normalization_round_trip_and_degenerate() {
        let data: Vec<f64> = (0..64).map(|i| ((i * 13 % 17) as f64).ln_1p() - 3.0).collect();
        let stats = NormStats::fit([data.as_slice()], 8, false).unwrap();
        let mut n = data.clone();
        stats.normalize(&mut n);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!(n.iter().all(|v| (-1.0..=1.0).contains(v)));
        let peak = n.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
        stats.denormalize(&mut n);
        for (a, b) in n.iter().zip(&data) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12));
        }
        let flat = vec![2.5; 16];
        assert!(matches!(NormStats::fit([flat.as_slice()], 8, false), Err(Error::DegenerateStats)));
    }

    #[test]
    fn spectrogram_dump_round_trip() {
        let fe = Frontend::new(SpectralConfig::desk()).unwrap();
        let spec = fe.analyze(&sine(330.0, 0.2, 0.5)).unwrap();
        let mut buf = Vec::new();
        write_spectrogram(&mut buf, &spec).unwrap();
        assert_eq!(&buf[..8], b"MOVESPEC");
        assert_eq!(buf.len(), 32 + spec.frames * spec.bins * 4);
        let back = read_spectrogram(&mut buf.as_slice()).unwrap();
        assert_eq!((back.frames, back.bins, back.hop), (spec.frames, spec.bins, spec.hop));
        for (a, b) in back.data.iter().zip(&spec.data) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(read_spectrogram(&mut &buf[..40]).is_err());
    }
}
