//! Labeled instrument-note data: a deterministic additive-synthesis tone
//! generator, WAV directory ingestion, and the note-level train/test split.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionLabel, OCTAVES, PITCH_CLASSES};
use crate::error::{Error, Result};
use crate::spectral::{chunk, AudioBuffer, Frontend, NormStats, SpectralConfig, SpectroChunk};
use crate::wav;

pub const TEST_FRACTION: f64 = 0.1;
pub const MANIFEST_FILE: &str = "manifest.tsv";
const MAX_HARMONICS: usize = 60;
const SUSTAIN_LEVEL: f64 = 0.8;
const VIBRATO_HZ: f64 = 5.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSpec {
    pub id: usize,
    pub name: String,
    /// Harmonic `h` has amplitude `h^(-harmonic_decay)` before balancing.
    pub harmonic_decay: f64,
    /// Weight of odd harmonics; even harmonics get `1 - odd_even_balance`.
    pub odd_even_balance: f64,
    pub attack_ms: f64,
    pub release_ms: f64,
    /// Peak vibrato excursion in cents.
    pub vibrato_depth: f64,
    /// Breath/bow noise level relative to the tone.
    pub noise_floor: f64,
}

impl InstrumentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.harmonic_decay > 0.0) {
            return Err(Error::config(format!("{}: harmonic_decay must be positive", self.name)));
        }
        if !(self.attack_ms >= 0.0 && self.release_ms >= 0.0) {
            return Err(Error::config(format!("{}: envelope times must be non-negative", self.name)));
        }
        if !(0.0..=1.0).contains(&self.odd_even_balance) {
            return Err(Error::config(format!("{}: odd_even_balance outside [0, 1]", self.name)));
        }
        if !(self.noise_floor >= 0.0 && self.vibrato_depth >= 0.0) {
            return Err(Error::config(format!("{}: negative noise or vibrato", self.name)));
        }
        Ok(())
    }

    /// Built-in synthetic instruments, chosen to differ in brightness,
    /// odd/even balance and noisiness.
    pub fn presets() -> Vec<InstrumentSpec> {
        let spec = |id: usize, name: &str, decay: f64, bal: f64, att: f64, rel: f64, vib: f64, noise: f64| {
            InstrumentSpec {
                id,
                name: name.into(),
                harmonic_decay: decay,
                odd_even_balance: bal,
                attack_ms: att,
                release_ms: rel,
                vibrato_depth: vib,
                noise_floor: noise,
            }
        };
        vec![
            spec(0, "flute", 2.4, 0.5, 70.0, 90.0, 18.0, 0.008),
            spec(1, "brass", 0.7, 0.5, 35.0, 60.0, 4.0, 0.001),
            spec(2, "clarinet", 1.2, 0.92, 40.0, 70.0, 0.0, 0.006),
            spec(3, "oboe", 0.9, 0.3, 25.0, 50.0, 8.0, 0.012),
        ]
    }

    /// The first `n` presets, renumbered.
    pub fn first_presets(n: usize) -> Result<Vec<InstrumentSpec>> {
        let all = Self::presets();
        if n == 0 || n > all.len() {
            return Err(Error::config(format!("between 1 and {} synthetic instruments available", all.len())));
        }
        Ok(all.into_iter().take(n).collect())
    }
}

/// Equal-tempered fundamental: MIDI note `12·(octave+1) + pitch_class`.
pub fn fundamental_hz(pitch_class: usize, octave: usize) -> f64 {
    let m = 12 * (octave + 1) + pitch_class;
    440.0 * 2f64.powf((m as f64 - 69.0) / 12.0)
}

pub fn velocity_gain(velocity: usize) -> f64 {
    [0.3, 0.55, 0.85][velocity.min(2)]
}

/// Additive harmonic tone with an attack/decay/sustain/release envelope.
pub fn synthesize_tone(
    spec: &InstrumentSpec,
    pitch_class: usize,
    octave: usize,
    velocity: usize,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<AudioBuffer> {
    spec.validate()?;
    if pitch_class >= PITCH_CLASSES || octave >= OCTAVES || velocity > 2 {
        return Err(Error::range(format!(
            "note (pc {pitch_class}, octave {octave}, velocity {velocity}) out of range"
        )));
    }
    let sr = sample_rate as f64;
    let f0 = fundamental_hz(pitch_class, octave);
    if f0 >= sr / 2.0 {
        return Err(Error::range(format!("fundamental {f0:.1} Hz at or above Nyquist")));
    }
    let n = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decay = (spec.harmonic_decay - 0.15 * velocity as f64).max(0.1);
    // Leave headroom for vibrato so no partial crosses Nyquist.
    let bend = 2f64.powf(spec.vibrato_depth / 1200.0);
    let count = ((sr / 2.0 / (f0 * bend)).floor() as usize).clamp(1, MAX_HARMONICS);
    let partials: Vec<(f64, f64, f64)> = (1..=count)
        .map(|h| {
            let weight = if h % 2 == 1 {
                spec.odd_even_balance
            } else {
                1.0 - spec.odd_even_balance
            };
            let amp = (h as f64).powf(-decay) * 2.0 * weight;
            (h as f64, amp, rng.random::<f64>() * std::f64::consts::TAU)
        })
        .collect();
    let vib_phase = rng.random::<f64>() * std::f64::consts::TAU;
    let attack = spec.attack_ms / 1000.0 * sr;
    let release = spec.release_ms / 1000.0 * sr;
    let decay_len = attack.max(1.0);
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let cents = spec.vibrato_depth * (std::f64::consts::TAU * VIBRATO_HZ * t + vib_phase).sin();
        let f = f0 * 2f64.powf(cents / 1200.0);
        let mut s = 0.0;
        for (h, amp, ph) in &partials {
            s += amp * (h * phase + ph).sin();
        }
        phase += std::f64::consts::TAU * f / sr;
        let noise: f64 = rng.sample(StandardNormal);
        s += spec.noise_floor * 4.0 * noise;
        let x = i as f64;
        let mut env = if x < attack {
            x / attack
        } else if x < attack + decay_len {
            1.0 - (1.0 - SUSTAIN_LEVEL) * (x - attack) / decay_len
        } else {
            SUSTAIN_LEVEL
        };
        let left = (n - i) as f64;
        if left < release {
            env *= left / release;
        }
        out.push(s * env);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = velocity_gain(velocity) / peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    Ok(AudioBuffer::new(out, sample_rate))
}

/// Concatenated notes of one instrument (velocity 1).
pub fn synthesize_melody(
    spec: &InstrumentSpec,
    notes: &[(usize, usize)],
    note_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<AudioBuffer> {
    let mut samples = Vec::new();
    for (i, (pc, oct)) in notes.iter().enumerate() {
        let tone = synthesize_tone(spec, *pc, *oct, 1, note_s, sample_rate, seed.wrapping_add(i as u64))?;
        samples.extend(tone.samples);
    }
    Ok(AudioBuffer::new(samples, sample_rate))
}

/// One labeled note before analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct RawNote {
    pub label: ConditionLabel,
    pub velocity: usize,
    pub audio: AudioBuffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoteRecord {
    pub id: usize,
    pub label: ConditionLabel,
    pub velocity: usize,
    pub audio: AudioBuffer,
    /// Normalized chunks.
    pub chunks: Vec<SpectroChunk>,
}

impl NoteRecord {
    pub fn instrument(&self) -> usize {
        self.label.instrument.unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<NoteRecord>,
    pub test: Vec<NoteRecord>,
    pub stats: NormStats,
    pub seed: u64,
    pub instruments: Vec<String>,
    pub spectral: SpectralConfig,
    pub chunk_frames: usize,
    /// Notes dropped because they produced no complete chunk.
    pub skipped: usize,
}

impl DatasetSplit {
    pub fn num_instruments(&self) -> usize {
        self.instruments.len()
    }

    /// `(chunk, label, note id)` for every training chunk of `instrument`
    /// (all instruments when `None`).
    pub fn train_chunks(&self, instrument: Option<usize>) -> Vec<(&SpectroChunk, ConditionLabel)> {
        collect_chunks(&self.train, instrument)
    }

    pub fn test_chunks(&self, instrument: Option<usize>) -> Vec<(&SpectroChunk, ConditionLabel)> {
        collect_chunks(&self.test, instrument)
    }

    /// Note counts per instrument: `(train, test)`.
    pub fn counts(&self) -> Vec<(usize, usize)> {
        (0..self.num_instruments())
            .map(|i| {
                (
                    self.train.iter().filter(|n| n.instrument() == i).count(),
                    self.test.iter().filter(|n| n.instrument() == i).count(),
                )
            })
            .collect()
    }
}

fn collect_chunks(notes: &[NoteRecord], instrument: Option<usize>) -> Vec<(&SpectroChunk, ConditionLabel)> {
    notes
        .iter()
        .filter(|n| instrument.is_none_or(|i| n.instrument() == i))
        .flat_map(|n| n.chunks.iter().map(move |c| (c, n.label)))
        .collect()
}

/// Analyzes, chunks and splits `notes` (90/10 per instrument, by note), then
/// normalizes every chunk with statistics fitted on the training chunks.
pub fn assemble(
    notes: Vec<RawNote>,
    instruments: Vec<String>,
    spectral: SpectralConfig,
    chunk_frames: usize,
    split_seed: u64,
    per_bin: bool,
) -> Result<DatasetSplit> {
    if instruments.is_empty() || notes.is_empty() {
        return Err(Error::Insufficient("no instruments or notes".into()));
    }
    let frontend = Frontend::new(spectral.clone())?;
    let analyzed: Vec<Result<Vec<SpectroChunk>>> = notes
        .par_iter()
        .enumerate()
        .map(|(id, note)| {
            let spec = match frontend.analyze(&note.audio) {
                Ok(s) => s,
                Err(Error::TooShort { .. }) => return Ok(Vec::new()),
                Err(e) => return Err(e),
            };
            Ok(chunk(&spec, chunk_frames, chunk_frames, id))
        })
        .collect();
    let mut records = Vec::with_capacity(notes.len());
    let mut skipped = 0;
    for (id, (note, chunks)) in notes.into_iter().zip(analyzed).enumerate() {
        let chunks = chunks?;
        if chunks.is_empty() {
            skipped += 1;
            continue;
        }
        records.push(NoteRecord {
            id,
            label: note.label,
            velocity: note.velocity,
            audio: note.audio,
            chunks,
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} notes shorter than one chunk were skipped");
    }
    let mut by_instrument: BTreeMap<usize, Vec<NoteRecord>> = BTreeMap::new();
    for r in records {
        by_instrument.entry(r.instrument()).or_default().push(r);
    }
    // Hold out the same (pitch class, octave, velocity) keys for every
    // instrument so transfers can be compared note for note.
    let key = |n: &NoteRecord| (n.label.pitch_class, n.label.octave, n.velocity);
    let mut keys: Vec<_> = by_instrument.values().flatten().map(key).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let held: Vec<_> = keys[..(keys.len() as f64 * TEST_FRACTION).round() as usize].to_vec();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (inst, notes) in by_instrument {
        let (mut t, mut rest): (Vec<_>, Vec<_>) = notes.into_iter().partition(|n| held.contains(&key(n)));
        if t.is_empty() || rest.is_empty() {
            // Irregular note sets: fall back to an independent draw.
            let mut all: Vec<_> = t.into_iter().chain(rest).collect();
            all.sort_by_key(|n| n.id);
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed ^ (inst as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            all.shuffle(&mut rng);
            let n_test = ((all.len() as f64 * TEST_FRACTION).round() as usize)
                .max(1)
                .min(all.len().saturating_sub(1));
            rest = all.split_off(n_test);
            t = all;
        }
        test.extend(t);
        train.extend(rest);
    }
    train.sort_by_key(|n| n.id);
    test.sort_by_key(|n| n.id);
    let bins = spectral.bins;
    let stats = NormStats::fit(
        train.iter().flat_map(|n| n.chunks.iter().map(|c| c.data.as_slice())),
        bins,
        per_bin,
    )?;
    for n in train.iter_mut().chain(test.iter_mut()) {
        for c in &mut n.chunks {
            stats.normalize(&mut c.data);
        }
    }
    for (i, name) in instruments.iter().enumerate() {
        log::info!(
            "instrument {i} ({name}): {} train / {} test notes",
            train.iter().filter(|n| n.instrument() == i).count(),
            test.iter().filter(|n| n.instrument() == i).count()
        );
    }
    Ok(DatasetSplit {
        train,
        test,
        stats,
        seed: split_seed,
        instruments,
        spectral,
        chunk_frames,
        skipped,
    })
}

/// What to synthesize for a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPlan {
    pub instruments: Vec<InstrumentSpec>,
    pub pitch_classes: Vec<usize>,
    pub octaves: Vec<usize>,
    pub velocities: usize,
    pub duration_s: f64,
    pub seed: u64,
}

impl CorpusPlan {
    /// 12 pitch classes × octaves 3–4 × 3 velocities per instrument.
    pub fn desk(instruments: usize, seed: u64) -> Result<Self> {
        Ok(CorpusPlan {
            instruments: InstrumentSpec::first_presets(instruments)?,
            pitch_classes: (0..12).collect(),
            octaves: vec![3, 4],
            velocities: 3,
            duration_s: 0.7,
            seed,
        })
    }
}

fn note_seed(seed: u64, inst: usize, pc: usize, oct: usize, vel: usize) -> u64 {
    let key = (((inst * 16 + pc) * 16 + oct) * 4 + vel) as u64;
    seed.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(key.wrapping_mul(1_442_695_040_888_963_407))
}

/// Synthesizes every planned note. Notes whose fundamental reaches Nyquist
/// are skipped; their count is returned alongside.
pub fn synthesize_notes(plan: &CorpusPlan, sample_rate: u32) -> Result<(Vec<RawNote>, usize)> {
    if plan.instruments.is_empty() {
        return Err(Error::Insufficient("empty instrument list".into()));
    }
    let mut jobs = Vec::new();
    for spec in &plan.instruments {
        for &oct in &plan.octaves {
            for &pc in &plan.pitch_classes {
                for vel in 0..plan.velocities.min(3) {
                    jobs.push((spec, pc, oct, vel));
                }
            }
        }
    }
    let results: Vec<Result<RawNote>> = jobs
        .par_iter()
        .map(|(spec, pc, oct, vel)| {
            let audio = synthesize_tone(
                spec,
                *pc,
                *oct,
                *vel,
                plan.duration_s,
                sample_rate,
                note_seed(plan.seed, spec.id, *pc, *oct, *vel),
            )?;
            Ok(RawNote {
                label: ConditionLabel::new(*pc, *oct, Some(spec.id)),
                velocity: *vel,
                audio,
            })
        })
        .collect();
    let mut notes = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for r in results {
        match r {
            Ok(n) => notes.push(n),
            Err(Error::Range(msg)) => {
                log::warn!("skipping note: {msg}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((notes, skipped))
}

/// Synthesizes, analyzes and splits a corpus.
pub fn build_corpus(
    plan: &CorpusPlan,
    spectral: SpectralConfig,
    chunk_frames: usize,
    split_seed: u64,
) -> Result<DatasetSplit> {
    let (notes, skipped) = synthesize_notes(plan, spectral.sample_rate)?;
    let names = plan.instruments.iter().map(|s| s.name.clone()).collect();
    let mut split = assemble(notes, names, spectral, chunk_frames, split_seed, false)?;
    split.skipped += skipped;
    Ok(split)
}

pub fn note_filename(instrument: &str, pitch_class: usize, octave: usize, velocity: usize) -> String {
    format!("{instrument}_{pitch_class:02}_{octave}_{velocity}.wav")
}

/// Parses `<instrument>_<pitchclass>_<octave>_<velocity>.wav`.
pub fn parse_note_filename(name: &str) -> Option<(String, usize, usize, usize)> {
    let stem = name.strip_suffix(".wav")?;
    let mut parts = stem.rsplitn(4, '_');
    let vel = parts.next()?.parse().ok()?;
    let oct = parts.next()?.parse().ok()?;
    let pc = parts.next()?.parse().ok()?;
    let inst = parts.next()?;
    if inst.is_empty() || pc >= PITCH_CLASSES || oct >= OCTAVES || vel > 2 {
        return None;
    }
    Some((inst.to_string(), pc, oct, vel))
}

/// Writes each note as a WAV plus a tab-separated manifest
/// (`path, instrument, pitch class, octave, velocity`).
pub fn write_notes(dir: &Path, notes: &[RawNote], instruments: &[String]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut out = std::io::BufWriter::new(fs::File::create(&manifest)?);
    for n in notes {
        let inst = &instruments[n.label.instrument.unwrap_or(0)];
        let name = note_filename(inst, n.label.pitch_class, n.label.octave, n.velocity);
        wav::write_wav(&dir.join(&name), &n.audio)?;
        writeln!(out, "{name}\t{inst}\t{}\t{}\t{}", n.label.pitch_class, n.label.octave, n.velocity)?;
    }
    out.flush()?;
    Ok(manifest)
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub notes: Vec<RawNote>,
    pub instruments: Vec<String>,
    /// Files that could not be used, with the reason.
    pub errors: Vec<(PathBuf, String)>,
}

/// Reads every `.wav` in `dir`. Instrument ids follow the order of first
/// appearance in the manifest when one exists, otherwise name order.
pub fn ingest_wav_dir(dir: &Path, sample_rate: u32) -> Result<Ingested> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    let mut out = Ingested::default();
    let mut parsed = Vec::new();
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        match parse_note_filename(&name) {
            Some(p) => parsed.push((path, p)),
            None => out.errors.push((path, format!("file name {name} does not match <instrument>_<pc>_<octave>_<velocity>.wav"))),
        }
    }
    let mut names: Vec<String> = Vec::new();
    if let Ok(text) = fs::read_to_string(dir.join(MANIFEST_FILE)) {
        for line in text.lines() {
            if let Some(inst) = line.split('\t').nth(1) {
                if !names.iter().any(|n| n == inst) {
                    names.push(inst.to_string());
                }
            }
        }
    }
    let mut extra: Vec<String> = parsed
        .iter()
        .map(|(_, p)| p.0.clone())
        .filter(|n| !names.contains(n))
        .collect();
    extra.sort();
    extra.dedup();
    names.extend(extra);
    let loaded: Vec<(PathBuf, Result<RawNote>)> = parsed
        .into_par_iter()
        .map(|(path, (inst, pc, oct, vel))| {
            let id = names.iter().position(|n| *n == inst).expect("name registered");
            let note = wav::read_wav(&path).map(|audio| {
                let mut audio = wav::resample_linear(&audio, sample_rate);
                audio.normalize_peak();
                RawNote {
                    label: ConditionLabel::new(pc, oct, Some(id)),
                    velocity: vel,
                    audio,
                }
            });
            (path, note)
        })
        .collect();
    for (path, note) in loaded {
        match note {
            Ok(n) => out.notes.push(n),
            Err(e) => out.errors.push((path, e.to_string())),
        }
    }
    for (p, e) in &out.errors {
        log::warn!("skipping {}: {e}", p.display());
    }
    out.instruments = names;
    Ok(out)
}

/// Loads a note directory and assembles a dataset from it.
pub fn load_dataset(
    dir: &Path,
    spectral: SpectralConfig,
    chunk_frames: usize,
    split_seed: u64,
) -> Result<DatasetSplit> {
    let ing = ingest_wav_dir(dir, spectral.sample_rate)?;
    if ing.notes.is_empty() {
        return Err(Error::Insufficient(format!("no usable notes in {}", dir.display())));
    }
    assemble(ing.notes, ing.instruments, spectral, chunk_frames, split_seed, false)
}
