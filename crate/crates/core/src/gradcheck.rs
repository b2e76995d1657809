//! Central finite-difference verification of model gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{DomainBatch, Model, TargetSet};
use crate::objectives::{Gates, KernelBank, LossWeights};

/// Steps tried in order; the smallest error wins. Strongly curved regions
/// (near-constant instance-norm groups) need the smaller steps, large losses
/// the larger ones.
const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-4];

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_error: f64,
    pub worst_entry: String,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares every parameter entry's analytic gradient of the total loss with
/// a central difference. Relative error is `|a − n| / max(|a|, |n|, f)`, where
/// `f` is a millionth of the largest gradient entry: below that scale the
/// difference quotient is dominated by rounding of the loss itself.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    model: &Model,
    batch: &[DomainBatch],
    targets: &[TargetSet],
    weights: LossWeights,
    gates: Gates,
    bank: &KernelBank,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheck> {
    let loss = |m: &Model| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(m.forward_loss_pass(batch, targets, weights, gates, bank, false, &mut rng)?
            .breakdown
            .total)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = model
        .forward_loss_pass(batch, targets, weights, gates, bank, true, &mut rng)?
        .grads
        .expect("gradients requested");
    let ids: Vec<_> = model.params().ids().collect();
    let grads: Vec<_> = ids.iter().map(|id| grads.get_or_zeros(*id, model.params())).collect();
    let gmax = grads
        .iter()
        .flat_map(|g| g.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * gmax).max(f64::MIN_POSITIVE);
    let mut probe = model.clone();
    let mut report = GradCheck {
        checked: 0,
        failures: Vec::new(),
        worst_error: 0.0,
        worst_entry: String::new(),
        tolerance,
    };
    for (id, g) in ids.iter().zip(&grads) {
        let name = model.params().name(*id).to_string();
        for (i, a) in g.data().iter().enumerate() {
            let orig = model.params().get(*id).data()[i];
            let mut best = (f64::INFINITY, 0.0);
            for h in STEPS {
                probe.params_mut().get_mut(*id).data_mut()[i] = orig + h;
                let up = loss(&probe)?;
                probe.params_mut().get_mut(*id).data_mut()[i] = orig - h;
                let down = loss(&probe)?;
                let num = (up - down) / (2.0 * h);
                let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
                if err < best.0 {
                    best = (err, num);
                }
                if best.0 < tolerance {
                    break;
                }
            }
            probe.params_mut().get_mut(*id).data_mut()[i] = orig;
            report.checked += 1;
            let entry = format!("{name}[{i}] analytic {a:e} numeric {:e}", best.1);
            if best.0 >= tolerance {
                report.failures.push(entry.clone());
            }
            if best.0 > report.worst_error {
                report.worst_error = best.0;
                report.worst_entry = entry;
            }
        }
    }
    Ok(report)
}
