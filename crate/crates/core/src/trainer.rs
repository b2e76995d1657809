//! Optimization loop: β-warmup and objective gating schedules, batch
//! assembly, MMD target sampling, Adam, checkpoints and metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelCheckpoint, Seeds};
use crate::corpus::DatasetSplit;
use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::model::{DomainBatch, Model, TargetSet};
use crate::objectives::{mmd_self_term, Gates, KernelBank, LossBreakdown, LossWeights, PointSet};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warmup_start_epoch: usize,
    pub mmd_gate_fraction: f64,
    pub cc_gate_fraction: f64,
    pub batch_size: usize,
    pub mmd_target_batch: usize,
    pub lr: f64,
    pub lambda_mmd: f64,
    pub lambda_cc: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Hyperparameters of the original large-corpus setup.
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            total_epochs: 100,
            warmup_start_epoch: 5,
            mmd_gate_fraction: 0.4,
            cc_gate_fraction: 0.6,
            batch_size: 128,
            mmd_target_batch: 2048,
            lr: 1e-4,
            lambda_mmd: 1e5,
            lambda_cc: 1.0,
            seed,
            checkpoint_every: 10,
        }
    }

    /// Small synthetic corpora: a few hundred chunks per instrument only give
    /// a handful of 128-chunk steps per epoch, so batches are smaller and the
    /// step size larger.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            total_epochs: 60,
            mmd_gate_fraction: 0.27,
            cc_gate_fraction: 0.40,
            batch_size: 8,
            lr: 2e-3,
            lambda_mmd: 1e2,
            checkpoint_every: 20,
            ..Self::paper(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.warmup_start_epoch >= self.total_epochs {
            return Err(Error::config("need 0 ≤ warmup_start_epoch < total_epochs"));
        }
        for f in [self.mmd_gate_fraction, self.cc_gate_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config("gate fractions must lie in [0, 1]"));
            }
        }
        if self.batch_size == 0 || self.mmd_target_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.lambda_mmd >= 0.0 && self.lambda_cc >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }

    pub fn mmd_gate_epoch(&self) -> usize {
        gate_epoch(self.mmd_gate_fraction, self.total_epochs)
    }

    pub fn cc_gate_epoch(&self) -> usize {
        gate_epoch(self.cc_gate_fraction, self.total_epochs)
    }
}

fn gate_epoch(fraction: f64, total: usize) -> usize {
    (fraction * total as f64).round() as usize
}

/// 0 before `warmup_start_epoch`, then linear up to 1 at half the epochs.
pub fn beta_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let start = cfg.warmup_start_epoch as f64;
    let end = cfg.total_epochs as f64 / 2.0;
    let e = epoch as f64;
    if e < start {
        0.0
    } else if e >= end || end <= start {
        1.0
    } else {
        (e - start) / (end - start)
    }
}

pub fn objective_gates(epoch: usize, cfg: &TrainConfig) -> Gates {
    Gates {
        mmd_on: epoch >= cfg.mmd_gate_epoch(),
        cc_on: epoch >= cfg.cc_gate_epoch(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update. Parameters without a gradient are treated as
/// having a zero gradient. All gradients are checked before anything changes.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape("optimizer state does not match parameters"));
    }
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape(format!("gradient of {} has wrong shape", params.name(id))));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads.get(id);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g.map_or(0.0, |g| g.data()[j]);
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// One line of the metrics log: component means over the epoch's batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub gates: Gates,
    pub weights: LossWeights,
    pub batches: usize,
    pub nll_recon: BTreeMap<usize, f64>,
    pub kld: BTreeMap<usize, f64>,
    /// Keyed `"s->t"`.
    pub mmd_transfer: BTreeMap<String, f64>,
    pub cc_nll: BTreeMap<usize, f64>,
    pub total: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn mean_nll(&self) -> f64 {
        self.nll_recon.values().sum::<f64>() / self.nll_recon.len().max(1) as f64
    }
}

#[derive(Default)]
struct Accumulator {
    batches: usize,
    nll: BTreeMap<usize, (f64, usize)>,
    kld: BTreeMap<usize, (f64, usize)>,
    mmd: BTreeMap<String, (f64, usize)>,
    cc: BTreeMap<usize, (f64, usize)>,
    total: f64,
}

impl Accumulator {
    fn add(&mut self, b: &LossBreakdown) {
        fn put<K: Ord + Clone>(map: &mut BTreeMap<K, (f64, usize)>, k: &K, v: f64) {
            let e = map.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        self.batches += 1;
        self.total += b.total;
        b.nll_recon.iter().for_each(|(k, v)| put(&mut self.nll, k, *v));
        b.kld.iter().for_each(|(k, v)| put(&mut self.kld, k, *v));
        b.mmd_transfer.iter().for_each(|((s, t), v)| put(&mut self.mmd, &format!("{s}->{t}"), *v));
        b.cc_nll.iter().for_each(|(k, v)| put(&mut self.cc, k, *v));
    }

    fn finish(self, epoch: usize, beta: f64, gates: Gates, weights: LossWeights, seconds: f64) -> EpochRecord {
        fn mean<K: Ord>(map: BTreeMap<K, (f64, usize)>) -> BTreeMap<K, f64> {
            map.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
        }
        EpochRecord {
            epoch,
            beta,
            gates,
            weights,
            batches: self.batches,
            nll_recon: mean(self.nll),
            kld: mean(self.kld),
            mmd_transfer: mean(self.mmd),
            cc_nll: mean(self.cc),
            total: self.total / self.batches.max(1) as f64,
            seconds,
        }
    }
}

/// Where and how often a run is persisted.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics: Option<&'a mut dyn Write>,
    pub seeds: Seeds,
    /// Called after every epoch with its record and the updated model.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord, &Model)>,
}

pub struct TrainResult {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochRecord>,
}

struct DomainData {
    /// Flattened normalized chunks.
    rows: Vec<Vec<f64>>,
    labels: Vec<crate::conditioning::ConditionLabel>,
    notes: Vec<usize>,
}

/// Trains `model` in place on `data` and returns the final checkpoint. The
/// update sequence depends only on the seeds, not on thread scheduling.
pub fn train(model: Model, data: &DatasetSplit, cfg: &TrainConfig, mut out: TrainOutputs<'_>) -> Result<TrainResult> {
    cfg.validate()?;
    let k = model.config().num_instruments;
    if k != data.num_instruments() {
        return Err(Error::config(format!(
            "model expects {k} instruments, dataset has {}",
            data.num_instruments()
        )));
    }
    if k < 2 {
        return Err(Error::Insufficient("transfer training needs at least two instruments".into()));
    }
    let len = model.config().chunk_len();
    let domains: Vec<DomainData> = (0..k)
        .map(|d| {
            let chunks = data.train_chunks(Some(d));
            DomainData {
                rows: chunks.iter().map(|(c, _)| c.data.clone()).collect(),
                labels: chunks.iter().map(|(_, l)| *l).collect(),
                notes: chunks.iter().map(|(c, _)| c.source.note_id).collect(),
            }
        })
        .collect();
    for (d, dom) in domains.iter().enumerate() {
        if dom.rows.is_empty() {
            return Err(Error::Insufficient(format!("no training chunks for instrument {d}")));
        }
        if dom.rows[0].len() != len {
            return Err(Error::shape(format!(
                "chunks hold {} values, model expects {len}",
                dom.rows[0].len()
            )));
        }
    }
    let bank = KernelBank::default();
    // When the cap keeps the whole domain, the target set is fixed and its
    // kernel self-term is computed once.
    let full_targets: Vec<Option<TargetSet>> = domains
        .iter()
        .enumerate()
        .map(|(d, dom)| {
            (cfg.mmd_target_batch >= dom.rows.len()).then(|| {
                if cfg.mmd_target_batch > dom.rows.len() {
                    log::info!(
                        "MMD target batch {} capped at {} chunks for instrument {d}",
                        cfg.mmd_target_batch,
                        dom.rows.len()
                    );
                }
                let flat: Vec<f64> = dom.rows.concat();
                let self_term = PointSet::new(&flat, len).map(|p| mmd_self_term(p, &bank)).ok();
                TargetSet {
                    data: flat,
                    self_term,
                }
            })
        })
        .collect();
    let mut model = model;
    let mut opt = OptimizerState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut target_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a26_e7ba_7c11);
    let mut history = Vec::with_capacity(cfg.total_epochs);
    let total_rows: usize = domains.iter().map(|d| d.rows.len()).sum();
    for epoch in 0..cfg.total_epochs {
        let started = Instant::now();
        let beta = beta_schedule(epoch, cfg);
        let gates = objective_gates(epoch, cfg);
        let weights = LossWeights {
            beta,
            lambda_mmd: cfg.lambda_mmd,
            lambda_cc: cfg.lambda_cc,
        };
        let mut order: Vec<(usize, usize)> = domains
            .iter()
            .enumerate()
            .flat_map(|(d, dom)| (0..dom.rows.len()).map(move |i| (d, i)))
            .collect();
        order.shuffle(&mut rng);
        let mut acc = Accumulator::default();
        for (step, members) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch: Vec<DomainBatch> = (0..k)
                .map(|d| DomainBatch {
                    domain: d,
                    data: Vec::new(),
                    labels: Vec::new(),
                })
                .collect();
            for &(d, i) in members {
                batch[d].data.extend_from_slice(&domains[d].rows[i]);
                batch[d].labels.push(domains[d].labels[i]);
            }
            batch.retain(|b| !b.labels.is_empty());
            let targets: Vec<TargetSet> = if gates.mmd_on {
                domains
                    .iter()
                    .zip(&full_targets)
                    .map(|(dom, full)| match full {
                        Some(t) => t.clone(),
                        None => {
                            let pick = index::sample(&mut target_rng, dom.rows.len(), cfg.mmd_target_batch);
                            let mut flat = Vec::with_capacity(cfg.mmd_target_batch * len);
                            for i in pick.iter() {
                                flat.extend_from_slice(&dom.rows[i]);
                            }
                            TargetSet {
                                data: flat,
                                self_term: None,
                            }
                        }
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let pass = model
                .forward_loss_pass(&batch, &targets, weights, gates, &bank, true, &mut rng)
                .map_err(|e| provenance(e, epoch, step, members, &domains))?;
            let grads = pass.grads.expect("gradients requested");
            adam_step(model.params_mut(), &grads, &mut opt, cfg.lr)
                .map_err(|e| provenance(e, epoch, step, members, &domains))?;
            acc.add(&pass.breakdown);
        }
        let record = acc.finish(epoch, beta, gates, weights, started.elapsed().as_secs_f64());
        log::info!(
            "epoch {epoch}: total {:.4} nll {:.4} β {:.3} mmd {} cc {} ({:.1}s, {total_rows} chunks)",
            record.total,
            record.mean_nll(),
            beta,
            gates.mmd_on,
            gates.cc_on,
            record.seconds
        );
        if let Some(w) = out.metrics.as_deref_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::config(e.to_string()))?;
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        if let Some(f) = out.on_epoch.as_deref_mut() {
            f(&record, &model);
        }
        history.push(record);
        let last = epoch + 1 == cfg.total_epochs;
        if let Some(dir) = &out.checkpoint_dir {
            if !last && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                snapshot(&model, data, epoch + 1, out.seeds).save(dir)?;
            }
        }
    }
    let mut checkpoint = snapshot(&model, data, cfg.total_epochs, out.seeds);
    checkpoint.quantize();
    if let Some(dir) = &out.checkpoint_dir {
        checkpoint.save(dir)?;
    }
    Ok(TrainResult { checkpoint, history })
}

fn snapshot(model: &Model, data: &DatasetSplit, epoch: usize, seeds: Seeds) -> ModelCheckpoint {
    ModelCheckpoint {
        model: model.clone(),
        stats: data.stats.clone(),
        spectral: data.spectral.clone(),
        instruments: data.instruments.clone(),
        epoch,
        seeds,
    }
}

fn provenance(e: Error, epoch: usize, step: usize, members: &[(usize, usize)], domains: &[DomainData]) -> Error {
    match e {
        Error::NonFinite(what) => {
            let mut notes: Vec<usize> = members.iter().map(|(d, i)| domains[*d].notes[*i]).collect();
            notes.sort_unstable();
            notes.dedup();
            Error::NonFinite(format!("{what} at epoch {epoch}, batch {step} (notes {notes:?})"))
        }
        other => other,
    }
}
