//! Reconstruction and transfer metrics, audio descriptors, descriptor
//! distributions and latent-space topology grids.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::conditioning::ConditionLabel;
use crate::corpus::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{mmd, KernelBank, PointSet};
use crate::spectral::{mel_centers, NormStats, SpectralConfig};

pub const KNN_K: usize = 10;
pub const ROLLOFF_FRACTION: f64 = 0.95;
const LOUDNESS_EPS: f64 = 1e-12;
pub const HISTOGRAM_BINS: usize = 24;

/// `√Σ(x − y)²`.
pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("rmse of {} vs {} values", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `√Σ(10·log10(x²/y²))²` on linear magnitudes, both floored first.
pub fn lsd(x: &[f64], y: &[f64], floor: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("lsd of {} vs {} values", x.len(), y.len())));
    }
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| {
            let r = 20.0 * (a.max(floor) / b.max(floor)).log10();
            r * r
        })
        .sum::<f64>()
        .sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    /// Mean fraction of same-set neighbours; 0.5 means indistinguishable.
    pub accuracy: f64,
    /// Total same-set neighbour count.
    pub raw_score: usize,
}

/// Friedman–Schilling nearest-neighbour two-sample statistic.
pub fn knn_two_sample(x: PointSet<'_>, y: PointSet<'_>, k: usize) -> Result<KnnResult> {
    if x.dim != y.dim {
        return Err(Error::shape("point sets differ in dimension"));
    }
    let n = x.rows + y.rows;
    if k == 0 || n <= k {
        return Err(Error::Insufficient(format!("{n} points for a {k}-NN test")));
    }
    let point = |i: usize| if i < x.rows { x.row(i) } else { y.row(i - x.rows) };
    let same: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = point(i);
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|j| *j != i)
                .map(|j| {
                    let q = point(j);
                    (p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j)
                })
                .collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d[..k].iter().filter(|(_, j)| (*j < x.rows) == (i < x.rows)).count()
        })
        .collect();
    let raw_score: usize = same.iter().sum();
    Ok(KnnResult {
        accuracy: raw_score as f64 / (n * k) as f64,
        raw_score,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DescriptorFrame {
    pub flatness: f64,
    pub centroid: f64,
    pub rolloff: f64,
    pub loudness: f64,
}

impl DescriptorFrame {
    pub const NAMES: [&'static str; 4] = ["flatness", "centroid", "rolloff", "loudness"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "flatness" => Some(self.flatness),
            "centroid" => Some(self.centroid),
            "rolloff" => Some(self.rolloff),
            "loudness" => Some(self.loudness),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.flatness, self.centroid, self.rolloff, self.loudness]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn mean(frames: &[DescriptorFrame]) -> DescriptorFrame {
        let n = frames.len().max(1) as f64;
        let sum = |f: fn(&DescriptorFrame) -> f64| frames.iter().map(f).sum::<f64>() / n;
        DescriptorFrame {
            flatness: sum(|d| d.flatness),
            centroid: sum(|d| d.centroid),
            rolloff: sum(|d| d.rolloff),
            loudness: sum(|d| d.loudness),
        }
    }
}

/// Descriptors of one linear-magnitude frame.
pub fn descriptors(mag: &[f64], centers: &[f64]) -> DescriptorFrame {
    let sum: f64 = mag.iter().sum();
    let energy: f64 = mag.iter().map(|a| a * a).sum();
    let loudness = 10.0 * (energy + LOUDNESS_EPS).log10();
    if !(sum > 0.0) {
        return DescriptorFrame {
            loudness,
            ..Default::default()
        };
    }
    let n = mag.len() as f64;
    let geo = if mag.iter().any(|a| *a <= 0.0) {
        0.0
    } else {
        (mag.iter().map(|a| a.ln()).sum::<f64>() / n).exp()
    };
    let flatness = (geo / (sum / n)).clamp(0.0, 1.0);
    let centroid = centers.iter().zip(mag).map(|(f, a)| f * a).sum::<f64>() / sum;
    let mut acc = 0.0;
    let mut rolloff = *centers.last().unwrap_or(&0.0);
    for (f, a) in centers.iter().zip(mag) {
        acc += a * a;
        if acc >= ROLLOFF_FRACTION * energy {
            rolloff = *f;
            break;
        }
    }
    DescriptorFrame {
        flatness,
        centroid,
        rolloff,
        loudness,
    }
}

/// Maps normalized chunks back to floored linear magnitudes.
#[derive(Clone, Debug)]
pub struct Linearizer {
    pub stats: NormStats,
    pub centers: Vec<f64>,
    pub floor: f64,
    pub bins: usize,
}

impl Linearizer {
    pub fn new(stats: NormStats, spectral: &SpectralConfig) -> Self {
        Linearizer {
            stats,
            centers: mel_centers(spectral.bins, spectral.f_min, spectral.f_max),
            floor: spectral.floor,
            bins: spectral.bins,
        }
    }

    pub fn log_magnitudes(&self, chunk: &[f64]) -> Vec<f64> {
        let mut v = chunk.to_vec();
        self.stats.denormalize(&mut v);
        v
    }

    pub fn linear(&self, chunk: &[f64]) -> Vec<f64> {
        let mut v = self.log_magnitudes(chunk);
        v.iter_mut().for_each(|x| *x = x.exp().max(self.floor));
        v
    }

    pub fn frame_descriptors(&self, chunk: &[f64]) -> Vec<DescriptorFrame> {
        self.linear(chunk)
            .chunks(self.bins)
            .map(|f| descriptors(f, &self.centers))
            .collect()
    }

    pub fn chunk_descriptors(&self, chunk: &[f64]) -> DescriptorFrame {
        DescriptorFrame::mean(&self.frame_descriptors(chunk))
    }
}

/// First Wasserstein distance between two empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Insufficient("empty sample for Wasserstein distance".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = a.iter().chain(&b).copied().collect();
    all.sort_by(f64::total_cmp);
    let cdf = |s: &[f64], x: f64| s.partition_point(|v| *v <= x) as f64 / s.len() as f64;
    Ok(all
        .windows(2)
        .map(|w| (cdf(&a, w[0]) - cdf(&b, w[0])).abs() * (w[1] - w[0]))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// Normalized so that `Σ density·width = 1`.
    pub density: Vec<f64>,
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let i = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = values.len().max(1) as f64;
    Histogram {
        edges: (0..=bins).map(|i| lo + i as f64 * width).collect(),
        density: counts.iter().map(|c| *c as f64 / (n * width)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorComparison {
    pub descriptor: String,
    pub source_recon: Histogram,
    pub transferred: Histogram,
    pub target_recon: Histogram,
    /// `W(transferred, target reconstructions)`.
    pub w_transfer: f64,
    /// `W(source reconstructions, target reconstructions)`.
    pub w_source: f64,
}

/// Per-chunk descriptor distributions of source reconstructions,
/// source→target transfers and target reconstructions.
pub fn descriptor_distributions(
    model: &Model,
    lin: &Linearizer,
    source: &[(&[f64], ConditionLabel)],
    target: &[(&[f64], ConditionLabel)],
    target_instrument: usize,
) -> Result<Vec<DescriptorComparison>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Insufficient("empty domain for descriptor comparison".into()));
    }
    let recon = |set: &[(&[f64], ConditionLabel)]| -> Result<Vec<Vec<f64>>> {
        let (c, l): (Vec<&[f64]>, Vec<ConditionLabel>) = set.iter().copied().unzip();
        model.reconstruct(&c, &l)
    };
    let (c, l): (Vec<&[f64]>, Vec<ConditionLabel>) = source.iter().copied().unzip();
    let tl: Vec<ConditionLabel> = l.iter().map(|x| x.with_instrument(Some(target_instrument))).collect();
    let sets = [recon(source)?, model.transfer(&c, &l, &tl)?, recon(target)?];
    let desc: Vec<Vec<DescriptorFrame>> = sets
        .iter()
        .map(|s| s.par_iter().map(|x| lin.chunk_descriptors(x)).collect())
        .collect();
    DescriptorFrame::NAMES
        .iter()
        .map(|name| {
            let vals: Vec<Vec<f64>> = desc
                .iter()
                .map(|d| d.iter().map(|f| f.get(name).unwrap_or(0.0)).collect())
                .collect();
            let lo = vals.iter().flatten().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let h = |v: &[f64]| histogram(v, lo, hi, HISTOGRAM_BINS);
            Ok(DescriptorComparison {
                descriptor: name.to_string(),
                source_recon: h(&vals[0]),
                transferred: h(&vals[1]),
                target_recon: h(&vals[2]),
                w_transfer: wasserstein_1d(&vals[1], &vals[2])?,
                w_source: wasserstein_1d(&vals[0], &vals[2])?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyPoint {
    pub z: Vec<f64>,
    pub descriptors: DescriptorFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyGrid {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub condition: ConditionLabel,
    /// Lattice points, last axis fastest.
    pub points: Vec<TopologyPoint>,
}

impl TopologyGrid {
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    /// Mean absolute centroid difference between axis-neighbouring points.
    pub fn centroid_roughness(&self) -> f64 {
        let n = self.n;
        let c = |i: usize, j: usize, k: usize| self.points[(i * n + j) * n + k].descriptors.centroid;
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for (a, b, d) in [(i + 1, j, k), (i, j + 1, k), (i, j, k + 1)] {
                        if a < n && b < n && d < n {
                            sum += (c(i, j, k) - c(a, b, d)).abs();
                            count += 1;
                        }
                    }
                }
            }
        }
        sum / count.max(1) as f64
    }

    pub fn centroid_range(&self) -> f64 {
        let vals = self.points.iter().map(|p| p.descriptors.centroid);
        let lo = vals.clone().fold(f64::INFINITY, f64::min);
        let hi = vals.fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }
}

/// Decodes every point of an `n³` lattice over `[lo, hi]³`.
pub fn latent_topology(
    model: &Model,
    lin: &Linearizer,
    condition: ConditionLabel,
    n: usize,
    lo: f64,
    hi: f64,
) -> Result<TopologyGrid> {
    if model.config().latent_dim != 3 {
        return Err(Error::config("topology grids need a 3-dimensional latent space"));
    }
    if n < 2 {
        return Err(Error::range("grid needs at least 2 points per axis"));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::range(format!("degenerate latent box [{lo}, {hi}]")));
    }
    model.domain_of(&condition)?;
    let step = (hi - lo) / (n - 1) as f64;
    let zs: Vec<Vec<f64>> = (0..n * n * n)
        .map(|p| {
            let (i, j, k) = (p / (n * n), (p / n) % n, p % n);
            vec![lo + i as f64 * step, lo + j as f64 * step, lo + k as f64 * step]
        })
        .collect();
    // Fixed-size blocks keep results independent of the thread count.
    let decoded: Vec<Vec<Vec<f64>>> = zs
        .par_chunks(256)
        .map(|block| {
            let refs: Vec<&[f64]> = block.iter().map(|z| z.as_slice()).collect();
            let labels = vec![condition; block.len()];
            Ok(model
                .decode(&refs, &labels)?
                .iter()
                .map(|o| o.generated())
                .collect())
        })
        .collect::<Result<_>>()?;
    let points = zs
        .into_iter()
        .zip(decoded.into_iter().flatten())
        .map(|(z, x)| TopologyPoint {
            z,
            descriptors: lin.chunk_descriptors(&x),
        })
        .collect();
    Ok(TopologyGrid {
        n,
        lo,
        hi,
        condition,
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub instrument: usize,
    pub name: String,
    pub chunks: usize,
    /// Per-chunk means.
    pub rmse: f64,
    pub lsd: f64,
    pub mmd: f64,
    pub knn: KnnResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub source: usize,
    pub target: usize,
    /// Transferred source chunks vs target test chunks.
    pub mmd: f64,
    pub knn: KnnResult,
    /// Untransferred source test chunks vs target test chunks.
    pub baseline_mmd: f64,
    pub baseline_knn: KnnResult,
    pub descriptors: Vec<DescriptorComparison>,
}

impl TransferRow {
    pub fn comparison(&self, name: &str) -> Option<&DescriptorComparison> {
        self.descriptors.iter().find(|d| d.descriptor == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSummary {
    pub instrument: usize,
    pub test: DescriptorFrame,
    pub reconstruction: DescriptorFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub reconstruction: Vec<ReconRow>,
    pub transfer: Vec<TransferRow>,
    pub descriptors: Vec<DescriptorSummary>,
}

impl EvalReport {
    pub fn mean_rmse(&self) -> f64 {
        self.reconstruction.iter().map(|r| r.rmse).sum::<f64>() / self.reconstruction.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        let recon = self
            .reconstruction
            .iter()
            .all(|r| [r.rmse, r.lsd, r.mmd, r.knn.accuracy].iter().all(|v| v.is_finite()));
        let transfer = self.transfer.iter().all(|t| {
            [t.mmd, t.baseline_mmd, t.knn.accuracy].iter().all(|v| v.is_finite())
                && t.descriptors.iter().all(|d| d.w_transfer.is_finite() && d.w_source.is_finite())
        });
        recon && transfer
    }

    /// Plain-text tables: reconstruction per instrument, transfer per pair.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model {}", self.variant);
        let _ = writeln!(s, "\nreconstruction");
        let _ = writeln!(
            s,
            "{:<14}{:>8}{:>12}{:>12}{:>12}{:>10}{:>8}",
            "instrument", "chunks", "rmse", "lsd", "mmd", "knn", "raw"
        );
        for r in &self.reconstruction {
            let _ = writeln!(
                s,
                "{:<14}{:>8}{:>12.4}{:>12.3}{:>12.5}{:>10.3}{:>8}",
                r.name, r.chunks, r.rmse, r.lsd, r.mmd, r.knn.accuracy, r.knn.raw_score
            );
        }
        let _ = writeln!(s, "\ntransfer");
        let _ = writeln!(
            s,
            "{:<8}{:>12}{:>12}{:>10}{:>10}{:>12}{:>12}",
            "pair", "mmd", "mmd src", "knn", "knn src", "W centroid", "W src"
        );
        for t in &self.transfer {
            let c = t.comparison("centroid");
            let _ = writeln!(
                s,
                "{:<8}{:>12.5}{:>12.5}{:>10.3}{:>10.3}{:>12.2}{:>12.2}",
                format!("{}->{}", t.source, t.target),
                t.mmd,
                t.baseline_mmd,
                t.knn.accuracy,
                t.baseline_knn.accuracy,
                c.map_or(f64::NAN, |c| c.w_transfer),
                c.map_or(f64::NAN, |c| c.w_source)
            );
        }
        s
    }
}

/// Full test-set evaluation with posterior-mean encodings.
pub fn evaluate(ckpt: &ModelCheckpoint, data: &DatasetSplit) -> Result<EvalReport> {
    let model = &ckpt.model;
    let k = model.config().num_instruments;
    if data.num_instruments() != k {
        return Err(Error::Variant(format!(
            "model has {k} instruments, dataset {}",
            data.num_instruments()
        )));
    }
    let len = model.config().chunk_len();
    // Bring the test chunks into the checkpoint's normalization.
    let test: Vec<Vec<(Vec<f64>, ConditionLabel)>> = (0..k)
        .map(|d| {
            data.test_chunks(Some(d))
                .into_iter()
                .map(|(c, l)| {
                    let mut v = c.data.clone();
                    if data.stats != ckpt.stats {
                        data.stats.denormalize(&mut v);
                        ckpt.stats.normalize(&mut v);
                    }
                    (v, l)
                })
                .collect()
        })
        .collect();
    if let Some(d) = test.iter().position(|t| t.is_empty()) {
        return Err(Error::Insufficient(format!("no test chunks for instrument {d}")));
    }
    if test[0][0].0.len() != len {
        return Err(Error::shape("test chunks do not match the model's chunk shape"));
    }
    let lin = Linearizer::new(ckpt.stats.clone(), &ckpt.spectral);
    let bank = KernelBank::evaluation();
    let views: Vec<Vec<(&[f64], ConditionLabel)>> = test
        .iter()
        .map(|t| t.iter().map(|(v, l)| (v.as_slice(), *l)).collect())
        .collect();
    let flat: Vec<Vec<f64>> = test.iter().map(|t| t.iter().flat_map(|(v, _)| v.iter().copied()).collect()).collect();
    let mut reconstruction = Vec::new();
    let mut descriptors = Vec::new();
    for d in 0..k {
        let (c, l): (Vec<&[f64]>, Vec<ConditionLabel>) = views[d].iter().copied().unzip();
        let rec = model.reconstruct(&c, &l)?;
        let n = rec.len();
        let mut rmse_sum = 0.0;
        let mut lsd_sum = 0.0;
        for (x, y) in c.iter().zip(&rec) {
            rmse_sum += rmse(x, y)?;
            lsd_sum += lsd(&lin.linear(x), &lin.linear(y), lin.floor)?;
        }
        let rflat: Vec<f64> = rec.concat();
        let xs = PointSet::new(&flat[d], len)?;
        let rs = PointSet::new(&rflat, len)?;
        let test_desc: Vec<DescriptorFrame> = c.par_iter().map(|x| lin.chunk_descriptors(x)).collect();
        let rec_desc: Vec<DescriptorFrame> = rec.par_iter().map(|x| lin.chunk_descriptors(x)).collect();
        descriptors.push(DescriptorSummary {
            instrument: d,
            test: DescriptorFrame::mean(&test_desc),
            reconstruction: DescriptorFrame::mean(&rec_desc),
        });
        reconstruction.push(ReconRow {
            instrument: d,
            name: data.instruments[d].clone(),
            chunks: n,
            rmse: rmse_sum / n as f64,
            lsd: lsd_sum / n as f64,
            mmd: mmd(rs, xs, &bank)?,
            knn: knn_two_sample(rs, xs, KNN_K)?,
        });
    }
    let mut transfer = Vec::new();
    for s in 0..k {
        for t in (0..k).filter(|t| *t != s) {
            let (c, l): (Vec<&[f64]>, Vec<ConditionLabel>) = views[s].iter().copied().unzip();
            let tl: Vec<ConditionLabel> = l.iter().map(|x| x.with_instrument(Some(t))).collect();
            let moved: Vec<f64> = model.transfer(&c, &l, &tl)?.concat();
            let ms = PointSet::new(&moved, len)?;
            let ss = PointSet::new(&flat[s], len)?;
            let ts = PointSet::new(&flat[t], len)?;
            transfer.push(TransferRow {
                source: s,
                target: t,
                mmd: mmd(ms, ts, &bank)?,
                knn: knn_two_sample(ms, ts, KNN_K)?,
                baseline_mmd: mmd(ss, ts, &bank)?,
                baseline_knn: knn_two_sample(ss, ts, KNN_K)?,
                descriptors: descriptor_distributions(model, &lin, &views[s], &views[t], t)?,
            });
        }
    }
    Ok(EvalReport {
        variant: model.config().variant.name().to_string(),
        reconstruction,
        transfer,
        descriptors,
    })
}
