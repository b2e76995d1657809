use move_core::conditioning::ConditionLabel;
use move_core::gradcheck::check_gradients;
use move_core::model::{DomainBatch, Model, ModelConfig, TargetSet, Variant};
use move_core::objectives::{Gates, KernelBank, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(variant: Variant, seed: u64) -> (Model, Vec<DomainBatch>, Vec<TargetSet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(ModelConfig::mini(variant, 2), &mut rng).unwrap();
    // Move FiLM heads off zero so the generators receive gradient too.
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        if model.params().name(id).contains(".head.") {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let len = model.config().chunk_len();
    let batch = (0..2)
        .map(|d| DomainBatch {
            domain: d,
            data: (0..2 * len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            labels: vec![ConditionLabel::new(3 + d, 4, Some(d)), ConditionLabel::new(7, 2 + d, Some(d))],
        })
        .collect();
    let targets = (0..2)
        .map(|_| TargetSet {
            data: (0..3 * len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            self_term: None,
        })
        .collect();
    (model, batch, targets)
}

#[test]
fn full_loss_matches_finite_differences() {
    let gates = Gates { mmd_on: true, cc_on: true };
    let unit = LossWeights { beta: 1.0, lambda_mmd: 1.0, lambda_cc: 1.0 };
    for variant in Variant::ALL {
        for w in [LossWeights::default(), unit] {
            let (model, batch, targets) = setup(variant, 4);
            let r = check_gradients(&model, &batch, &targets, w, gates, &KernelBank::default(), 99, 1e-4).unwrap();
            assert_eq!(r.checked, model.params().num_scalars());
            assert!(r.passed(), "{variant} {w:?}: {:?}", r.failures);
        }
    }
}

#[test]
fn cycle_loss_reaches_source_decoder_and_target_encoder() {
    let (model, batch, targets) = setup(Variant::UnitMmdCpo, 6);
    let w = LossWeights { beta: 0.0, lambda_mmd: 0.0, lambda_cc: 1.0 };
    let only_cc = |b: &[DomainBatch]| {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let with = model
            .forward_loss_pass(b, &targets, w, Gates { mmd_on: false, cc_on: true }, &KernelBank::default(), true, &mut r)
            .unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let without = model
            .forward_loss_pass(b, &targets, w, Gates::default(), &KernelBank::default(), true, &mut r)
            .unwrap();
        (with.grads.unwrap(), without.grads.unwrap())
    };
    // Domain 0 chunks only: the cycle runs E0 → D1 → E1 → D0.
    let (with, without) = only_cc(&batch[..1]);
    let p = model.params();
    let delta = |name: &str| {
        let id = p.id(name).unwrap();
        let a = with.get_or_zeros(id, p);
        let b = without.get_or_zeros(id, p);
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>()
    };
    assert!(delta("x_mu.d0.w") > 0.0, "source decoder untouched by the cycle term");
    assert!(delta("enc0.d1.w") > 0.0, "target encoder untouched by the cycle term");
}
