use proptest::prelude::*;

use move_core::conditioning::{decode_onehot, encode_onehot, ConditionLabel, OCTAVES, PITCH_CLASSES};
use move_core::corpus::{fundamental_hz, note_filename, parse_note_filename};
use move_core::evaluation::{histogram, wasserstein_1d};
use move_core::objectives::{gaussian_nll, kld_to_standard_normal, mmd, KernelBank, PointSet};
use move_core::spectral::{AudioBuffer, NormStats};
use move_core::transfer::{nearest_note, overlap_add};
use move_core::wav;

fn points(dim: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, dim), 1..max).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_is_symmetric_and_non_negative((dim, x, y) in (1usize..6).prop_flat_map(|d| (Just(d), points(d, 20), points(d, 20)))) {
        let bank = KernelBank::default();
        let px = PointSet::new(&x, dim).unwrap();
        let py = PointSet::new(&y, dim).unwrap();
        let a = mmd(px, py, &bank).unwrap();
        prop_assert!(a >= -1e-12);
        prop_assert_eq!(a.to_bits(), mmd(py, px, &bank).unwrap().to_bits());
        prop_assert!(mmd(px, px, &bank).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn kld_is_non_negative(mu in prop::collection::vec(-5.0..5.0f64, 1..8), s in 0.01..10.0f64) {
        let sigma = vec![s; mu.len()];
        prop_assert!(kld_to_standard_normal(&mu, &sigma, 1).unwrap() >= -1e-12);
    }

    #[test]
    fn nll_is_minimized_at_the_mean(x in -2.0..2.0f64, d in 0.01..2.0f64, s in 0.1..3.0f64) {
        let at = gaussian_nll(&[x], &[x], &[s], 1).unwrap();
        prop_assert!(gaussian_nll(&[x], &[x + d], &[s], 1).unwrap() > at);
    }

    #[test]
    fn normalization_round_trips(data in prop::collection::vec(-20.0..5.0f64, 16..64), per_bin in any::<bool>()) {
        let bins = 4;
        let n = data.len() / bins * bins;
        let data = &data[..n];
        prop_assume!(data.iter().any(|v| (v - data[0]).abs() > 1e-3));
        let Ok(stats) = NormStats::fit([data], bins, per_bin) else { return Ok(()) };
        let mut v = data.to_vec();
        stats.normalize(&mut v);
        prop_assert!(v.iter().all(|x| (-1.0 - 1e-9..=1.0 + 1e-9).contains(x)));
        stats.denormalize(&mut v);
        for (a, b) in v.iter().zip(data) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn onehot_round_trips(pc in 0..PITCH_CLASSES, oct in 0..OCTAVES, inst in prop::option::of(0usize..4)) {
        let k = inst.map(|_| 4);
        let label = ConditionLabel::new(pc, oct, inst);
        let v = encode_onehot(&label, k).unwrap();
        prop_assert_eq!(v.iter().filter(|x| **x == 1.0).count(), 2 + inst.is_some() as usize);
        prop_assert_eq!(decode_onehot(&v, k).unwrap(), label);
    }

    #[test]
    fn crossfade_stays_between_chunk_values(vals in prop::collection::vec(-5.0..5.0f64, 2..6), overlap in 1usize..4) {
        let len = 6;
        let bins = 2;
        let hop = len - overlap;
        let chunks: Vec<Vec<f64>> = vals.iter().map(|v| vec![*v; len * bins]).collect();
        let starts: Vec<usize> = (0..chunks.len()).map(|i| i * hop).collect();
        let out = overlap_add(&chunks, &starts, len, bins, overlap);
        for (row, frame) in out.chunks(bins).enumerate() {
            let covering: Vec<f64> = starts.iter().zip(&vals).filter(|(s, _)| (**s..**s + len).contains(&row)).map(|(_, v)| *v).collect();
            let lo = covering.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = covering.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in frame {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn wav_round_trip_within_one_lsb(samples in prop::collection::vec(-1.0..1.0f64, 1..512)) {
        let audio = AudioBuffer::new(samples.clone(), 22050);
        let back = wav::decode_wav(&wav::encode_wav(&audio)).unwrap();
        prop_assert_eq!(back.sample_rate, 22050);
        prop_assert_eq!(back.samples.len(), samples.len());
        for (a, b) in back.samples.iter().zip(&samples) {
            prop_assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }

    #[test]
    fn equal_tempered_pitches_map_back(pc in 0usize..12, oct in 1usize..8, cents in -40.0..40.0f64) {
        let f = fundamental_hz(pc, oct) * 2f64.powf(cents / 1200.0);
        prop_assert_eq!(nearest_note(f), Some((pc, oct)));
    }

    #[test]
    fn note_filenames_round_trip(name in "[a-z][a-z_]{0,8}", pc in 0usize..12, oct in 0usize..9, vel in 0usize..3) {
        let file = note_filename(&name, pc, oct, vel);
        prop_assert_eq!(parse_note_filename(&file), Some((name, pc, oct, vel)));
    }

    #[test]
    fn wasserstein_shift_and_histogram_mass(a in prop::collection::vec(-10.0..10.0f64, 1..50), shift in -5.0..5.0f64) {
        let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
        prop_assert!((wasserstein_1d(&a, &b).unwrap() - shift.abs()).abs() < 1e-9);
        let h = histogram(&a, -16.0, 16.0, 12);
        let width = 32.0 / 12.0;
        let mass: f64 = h.density.iter().map(|d| d * width).sum();
        prop_assert!((mass - 1.0).abs() < 1e-9);
    }
}
