use std::fs;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use move_core::checkpoint::{ModelCheckpoint, Seeds, MANIFEST_NAME};
use move_core::corpus::{
    build_corpus, ingest_wav_dir, load_dataset, synthesize_melody, synthesize_notes, write_notes,
    CorpusPlan, DatasetSplit, InstrumentSpec,
};
use move_core::evaluation::{evaluate, knn_two_sample, KNN_K};
use move_core::model::{Model, ModelConfig, Variant};
use move_core::objectives::PointSet;
use move_core::spectral::SpectralConfig;
use move_core::trainer::{train, EpochRecord, TrainConfig, TrainOutputs};
use move_core::transfer::{track_pitch, transfer_melody, TransferRequest, DEFAULT_OVERLAP};
use move_core::{wav, Error};

fn small_plan() -> CorpusPlan {
    CorpusPlan {
        pitch_classes: (0..12).collect(),
        octaves: vec![4],
        velocities: 2,
        ..CorpusPlan::desk(2, 11).unwrap()
    }
}

fn small_data() -> &'static DatasetSplit {
    static CELL: OnceLock<DatasetSplit> = OnceLock::new();
    CELL.get_or_init(|| {
        let frames = ModelConfig::desk(Variant::MoveFpod, 2).frames;
        build_corpus(&small_plan(), SpectralConfig::desk(), frames, 11).unwrap()
    })
}

fn short_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        total_epochs: epochs,
        warmup_start_epoch: 0,
        mmd_gate_fraction: 0.34,
        cc_gate_fraction: 0.67,
        ..TrainConfig::desk(7)
    }
}

fn fresh(data: &DatasetSplit) -> Model {
    Model::new(ModelConfig::desk(Variant::MoveFpod, data.num_instruments()), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn weights(m: &Model) -> Vec<u64> {
    m.params().iter().flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn paired_split_holds_out_the_same_notes_for_every_instrument() {
    let data = small_data();
    for (train, test) in data.counts() {
        assert!(train > 0 && test > 0);
    }
    let keys = |i: usize| {
        let mut k: Vec<_> = data
            .test
            .iter()
            .filter(|n| n.instrument() == i)
            .map(|n| (n.label.pitch_class, n.label.octave, n.velocity))
            .collect();
        k.sort();
        k
    };
    assert_eq!(keys(0), keys(1));
    let train_chunks: Vec<f64> = data.train_chunks(None).iter().flat_map(|(c, _)| c.data.clone()).collect();
    let mean = train_chunks.iter().sum::<f64>() / train_chunks.len() as f64;
    assert!(mean.abs() < 1e-9);
    assert!(train_chunks.iter().all(|v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(v)));
}

#[test]
fn instruments_are_distinguishable() {
    let data = small_data();
    let rows = |i| -> Vec<f64> { data.train_chunks(Some(i)).iter().flat_map(|(c, _)| c.data.clone()).collect() };
    let (a, b) = (rows(0), rows(1));
    let dim = data.chunk_frames * data.spectral.bins;
    let r = knn_two_sample(PointSet::new(&a, dim).unwrap(), PointSet::new(&b, dim).unwrap(), KNN_K).unwrap();
    assert!(r.accuracy > 0.7, "{}", r.accuracy);
}

#[test]
fn wav_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan();
    let (notes, _) = synthesize_notes(&plan, 22050).unwrap();
    let names: Vec<String> = plan.instruments.iter().map(|s| s.name.clone()).collect();
    let manifest = write_notes(dir.path(), &notes, &names).unwrap();
    assert_eq!(fs::read_to_string(manifest).unwrap().lines().count(), notes.len());
    fs::write(dir.path().join("stray.wav"), b"junk").unwrap();
    fs::write(dir.path().join("flute_00_4_0x.wav"), b"junk").unwrap();
    fs::write(dir.path().join("oboe_03_4_1.wav"), b"RIFF\0\0\0\0WAVE").unwrap();

    let ing = ingest_wav_dir(dir.path(), 22050).unwrap();
    assert_eq!(ing.notes.len(), notes.len());
    assert_eq!(&ing.instruments[..2], &names[..]);
    assert_eq!(ing.errors.len(), 3);

    fs::remove_file(dir.path().join("oboe_03_4_1.wav")).unwrap();
    let frames = ModelConfig::desk(Variant::MoveFpod, 2).frames;
    let loaded = load_dataset(dir.path(), SpectralConfig::desk(), frames, 11).unwrap();
    assert_eq!(loaded.counts(), small_data().counts());
}

#[test]
fn seeded_training_is_bit_reproducible() {
    let data = small_data();
    let run = || train(fresh(data), data, &short_cfg(3), TrainOutputs::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.checkpoint.fingerprint(), b.checkpoint.fingerprint());
    assert_eq!(weights(&a.checkpoint.model), weights(&b.checkpoint.model));
    assert_eq!(a.history.len(), 3);
    assert!(a.history[0].mmd_transfer.is_empty());
    assert_eq!(a.history[1].mmd_transfer.len(), 2);
    assert!(a.history[1].cc_nll.is_empty());
    assert_eq!(a.history[2].cc_nll.len(), 2);
}

#[test]
fn gated_terms_are_inert_before_their_epoch() {
    let data = small_data();
    let trajectory = |cfg: &TrainConfig| {
        let mut seen = Vec::new();
        let mut hook = |_: &EpochRecord, m: &Model| seen.push(weights(m));
        train(fresh(data), data, cfg, TrainOutputs { on_epoch: Some(&mut hook), ..Default::default() }).unwrap();
        seen
    };
    let gated = trajectory(&short_cfg(3));
    let never = trajectory(&TrainConfig { mmd_gate_fraction: 1.0, cc_gate_fraction: 1.0, ..short_cfg(3) });
    assert_eq!(gated[0], never[0]);
    assert_ne!(gated[1], never[1]);
}

#[test]
fn checkpoint_reload_reproduces_the_report() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    let mut metrics = Vec::new();
    let result = train(
        fresh(data),
        data,
        &TrainConfig { checkpoint_every: 1, ..short_cfg(2) },
        TrainOutputs {
            checkpoint_dir: Some(path.clone()),
            metrics: Some(&mut metrics),
            seeds: Seeds { dataset: 11, init: 3, train: 7 },
            on_epoch: None,
        },
    )
    .unwrap();
    assert_eq!(String::from_utf8(metrics).unwrap().lines().count(), 2);
    let loaded = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(loaded, result.checkpoint);
    assert_eq!(loaded.epoch, 2);
    assert_eq!(loaded.seeds.dataset, 11);
    let a = evaluate(&result.checkpoint, data).unwrap();
    let b = evaluate(&loaded, data).unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite());
    assert_eq!(a.reconstruction.len(), 2);
    assert_eq!(a.transfer.len(), 2);
    assert!(!dir.path().read_dir().unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with('.')));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let data = small_data();
    let ckpt = ModelCheckpoint {
        model: fresh(data),
        stats: data.stats.clone(),
        spectral: data.spectral.clone(),
        instruments: data.instruments.clone(),
        epoch: 0,
        seeds: Seeds::default(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    ckpt.save(&path).unwrap();
    let files = ModelCheckpoint::files(&path).unwrap();

    let manifest = path.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen("\"version\": 1", "\"version\": 0", 1)).unwrap();
    assert!(matches!(ModelCheckpoint::load(&path), Err(Error::UnsupportedVersion { found: 0, .. })));
    fs::write(&manifest, &text).unwrap();

    let tensor = &files[1];
    let bytes = fs::read(tensor).unwrap();
    fs::write(tensor, &bytes[..bytes.len() - 3]).unwrap();
    match ModelCheckpoint::load(&path) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated"), "{msg}"),
        other => panic!("expected a truncation error, got {other:?}"),
    }
}

#[test]
fn pitch_tracker_follows_melodies() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hits = 0;
    let mut total = 0;
    let cfg = SpectralConfig::desk();
    for spec in InstrumentSpec::presets() {
        let notes: Vec<(usize, usize)> = (0..8).map(|_| (rng.random_range(0..12), rng.random_range(3..5))).collect();
        let note_s = 0.4;
        let audio = synthesize_melody(&spec, &notes, note_s, cfg.sample_rate, 9).unwrap();
        let per_note = (note_s * cfg.sample_rate as f64) as usize;
        // One analysis window in the middle of each note.
        let starts: Vec<usize> = (0..notes.len()).map(|i| (i * per_note + per_note / 4) / cfg.hop).collect();
        let tracked = track_pitch(&audio, &starts, 16, cfg.hop, cfg.window);
        for (want, got) in notes.iter().zip(&tracked) {
            hits += (want.0 == got.0) as usize;
            total += 1;
        }
    }
    assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");
}

#[test]
fn melody_transfer_keeps_length_and_format() {
    let data = small_data();
    let ckpt = ModelCheckpoint {
        model: fresh(data),
        stats: data.stats.clone(),
        spectral: data.spectral.clone(),
        instruments: data.instruments.clone(),
        epoch: 0,
        seeds: Seeds::default(),
    };
    let spec = &InstrumentSpec::presets()[0];
    let audio = synthesize_melody(spec, &[(0, 4), (4, 4), (7, 4), (0, 5)], 0.5, 22050, 1).unwrap();
    let out = transfer_melody(&ckpt, &audio, &TransferRequest::new(0, 1), DEFAULT_OVERLAP, 4).unwrap();
    assert!(out.spectrogram.data.iter().all(|v| v.is_finite()));
    assert!((out.audio.samples.len() as f64 - audio.samples.len() as f64).abs() < 2.0 * ckpt.spectral.window as f64);
    let back = wav::decode_wav(&wav::encode_wav(&out.audio)).unwrap();
    assert_eq!(back.sample_rate, 22050);
    assert!(out.notes.iter().any(|n| *n == (7, 4)));

    let short = move_core::spectral::AudioBuffer::new(vec![0.1; 1000], 22050);
    assert!(matches!(
        transfer_melody(&ckpt, &short, &TransferRequest::new(0, 1), DEFAULT_OVERLAP, 4),
        Err(Error::TooShort { .. })
    ));
}
