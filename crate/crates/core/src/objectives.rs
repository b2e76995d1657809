//! Loss terms: Gaussian negative log-likelihood, closed-form KL divergence to
//! the standard normal prior, the multi-kernel RBF maximum mean discrepancy,
//! cycle-consistency and the weighted composite objective.
//!
//! Batched inputs are flat row-major buffers. NLL and KLD are summed over
//! elements (resp. latent dimensions) and averaged over the batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::gemm;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Default λ_MMD: MMD gradients are orders of magnitude smaller than the ELBO's.
pub const DEFAULT_LAMBDA_MMD: f64 = 1e5;
pub const DEFAULT_LAMBDA_CC: f64 = 1.0;

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn check_batch(len: usize, batch: usize) -> Result<()> {
    if batch == 0 || len % batch != 0 {
        return Err(Error::shape(format!(
            "{len} elements do not split into a batch of {batch}"
        )));
    }
    Ok(())
}

/// `Σ ½ln(2πσ²) + (x−μ)²/(2σ²)`, averaged over `batch`.
pub fn gaussian_nll(x: &[f64], mu: &[f64], sigma: &[f64], batch: usize) -> Result<f64> {
    if x.len() != mu.len() || x.len() != sigma.len() {
        return Err(Error::shape(format!(
            "nll operands have lengths {}, {}, {}",
            x.len(),
            mu.len(),
            sigma.len()
        )));
    }
    check_batch(x.len(), batch)?;
    check_finite("nll target", x)?;
    check_finite("nll mean", mu)?;
    check_finite("nll scale", sigma)?;
    if sigma.iter().any(|s| *s <= 0.0) {
        return Err(Error::range("nll scale must be positive"));
    }
    Ok(gaussian_nll_unchecked(x, mu, sigma) / batch as f64)
}

pub(crate) fn gaussian_nll_unchecked(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((x, m), s)| {
            let d = x - m;
            HALF_LN_2PI + s.ln() + d * d / (2.0 * s * s)
        })
        .sum()
}

/// Gradients of [`gaussian_nll`] with respect to `(x, μ, σ)`.
pub fn gaussian_nll_grad(
    x: &[f64],
    mu: &[f64],
    sigma: &[f64],
    batch: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_b = 1.0 / batch as f64;
    let mut dx = Vec::with_capacity(x.len());
    let mut dmu = Vec::with_capacity(x.len());
    let mut dsigma = Vec::with_capacity(x.len());
    for ((x, m), s) in x.iter().zip(mu).zip(sigma) {
        let d = x - m;
        let s2 = s * s;
        dx.push(d / s2 * inv_b);
        dmu.push(-d / s2 * inv_b);
        dsigma.push((1.0 / s - d * d / (s2 * s)) * inv_b);
    }
    (dx, dmu, dsigma)
}

/// `Σ_d ½(μ² + σ² − 1 − 2 ln σ)`, averaged over `batch`.
pub fn kld_to_standard_normal(mu: &[f64], sigma: &[f64], batch: usize) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::shape("kld operands differ in length"));
    }
    check_batch(mu.len(), batch)?;
    check_finite("kld mean", mu)?;
    check_finite("kld scale", sigma)?;
    if sigma.iter().any(|s| *s <= 0.0) {
        return Err(Error::range("kld scale must be positive"));
    }
    Ok(kld_unchecked(mu, sigma) / batch as f64)
}

pub(crate) fn kld_unchecked(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
        .sum()
}

pub fn kld_grad(mu: &[f64], sigma: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
    let inv_b = 1.0 / batch as f64;
    let dmu = mu.iter().map(|m| m * inv_b).collect();
    let dsigma = sigma.iter().map(|s| (s - 1.0 / s) * inv_b).collect();
    (dmu, dsigma)
}

/// RBF kernel widths `α_i` of `k(a, b) = Σ_i exp(−α_i ‖a − b‖²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub alphas: Vec<f64>,
}

impl Default for KernelBank {
    fn default() -> Self {
        KernelBank {
            alphas: vec![0.05, 0.1, 1.0],
        }
    }
}

impl KernelBank {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::config("kernel widths must be positive and finite"));
        }
        Ok(KernelBank { alphas })
    }

    /// The single-width bank used for evaluation scores.
    pub fn evaluation() -> Self {
        KernelBank { alphas: vec![0.05] }
    }

    pub fn eval(&self, sq_dist: f64) -> f64 {
        self.alphas.iter().map(|a| (-a * sq_dist).exp()).sum()
    }

    /// `Σ_i α_i exp(−α_i d²)`, the radial derivative factor.
    fn slope(&self, sq_dist: f64) -> f64 {
        self.alphas.iter().map(|a| a * (-a * sq_dist).exp()).sum()
    }
}

/// A set of `rows` vectors of length `dim`, stored contiguously.
#[derive(Clone, Copy, Debug)]
pub struct PointSet<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub dim: usize,
}

impl<'a> PointSet<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::shape(format!(
                "{} values are not a whole number of {dim}-vectors",
                data.len()
            )));
        }
        Ok(PointSet {
            data,
            rows: data.len() / dim,
            dim,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Pairwise squared Euclidean distances `[a.rows × b.rows]`.
pub(crate) fn sq_distances(a: PointSet<'_>, b: PointSet<'_>) -> Vec<f64> {
    let na: Vec<f64> = (0..a.rows).map(|i| a.row(i).iter().map(|v| v * v).sum()).collect();
    let nb: Vec<f64> = (0..b.rows).map(|j| b.row(j).iter().map(|v| v * v).sum()).collect();
    let mut g = vec![0.0; a.rows * b.rows];
    gemm(a.rows, a.dim, b.rows, a.data, false, b.data, true, &mut g, false);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let v = &mut g[i * b.rows + j];
            *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
        }
    }
    g
}

fn mean_kernel(a: PointSet<'_>, b: PointSet<'_>, bank: &KernelBank) -> f64 {
    let d = sq_distances(a, b);
    d.iter().map(|v| bank.eval(*v)).sum::<f64>() / (a.rows * b.rows) as f64
}

/// The three expectation terms of the (biased) MMD estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdTerms {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl MmdTerms {
    pub fn value(&self) -> f64 {
        (self.xx + self.yy) - 2.0 * self.xy
    }
}

pub fn mmd_self_term(y: PointSet<'_>, bank: &KernelBank) -> f64 {
    mean_kernel(y, y, bank)
}

fn check_sets(x: PointSet<'_>, y: PointSet<'_>) -> Result<()> {
    if x.dim != y.dim {
        return Err(Error::shape(format!(
            "mmd sets have dimensions {} and {}",
            x.dim, y.dim
        )));
    }
    if x.rows == 0 || y.rows == 0 {
        return Err(Error::Insufficient("mmd needs at least one point per set".into()));
    }
    Ok(())
}

/// Biased V-statistic estimate of MMD² between two point sets.
///
/// The result is exactly symmetric in its arguments: the sets are put in a
/// canonical order before any arithmetic happens.
pub fn mmd(x: PointSet<'_>, y: PointSet<'_>, bank: &KernelBank) -> Result<f64> {
    check_sets(x, y)?;
    use std::cmp::Ordering;
    let swap = match y.rows.cmp(&x.rows) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => cmp_slices(y.data, x.data) == Ordering::Less,
    };
    let (a, b) = if swap { (y, x) } else { (x, y) };
    Ok(mmd_terms(a, b, bank).value())
}

fn cmp_slices(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (u, v) in a.iter().zip(b) {
        match u.total_cmp(v) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

pub fn mmd_terms(x: PointSet<'_>, y: PointSet<'_>, bank: &KernelBank) -> MmdTerms {
    MmdTerms {
        xx: mean_kernel(x, x, bank),
        xy: mean_kernel(x, y, bank),
        yy: mean_kernel(y, y, bank),
    }
}

/// MMD value with a precomputed `E[k(y, y')]`, plus its gradient with respect
/// to `x` (and to `y` when requested).
pub fn mmd_with_grad(
    x: PointSet<'_>,
    y: PointSet<'_>,
    bank: &KernelBank,
    yy: Option<f64>,
    need_dy: bool,
) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
    check_sets(x, y)?;
    let (n, m, dim) = (x.rows, y.rows, x.dim);
    let dxx = sq_distances(x, x);
    let dxy = sq_distances(x, y);
    let kxx = dxx.iter().map(|d| bank.eval(*d)).sum::<f64>() / (n * n) as f64;
    let kxy = dxy.iter().map(|d| bank.eval(*d)).sum::<f64>() / (n * m) as f64;
    let kyy = match yy {
        Some(v) => v,
        None => mean_kernel(y, y, bank),
    };
    let value = (kxx + kyy) - 2.0 * kxy;

    // Σ_j P[i,j] (x_i − x_j) = x_i·rowsum(P)_i − (P·X)_i
    let pxx: Vec<f64> = dxx.iter().map(|d| bank.slope(*d)).collect();
    let pxy: Vec<f64> = dxy.iter().map(|d| bank.slope(*d)).collect();
    let mut px = vec![0.0; n * dim];
    gemm(n, n, dim, &pxx, false, x.data, false, &mut px, false);
    let mut py = vec![0.0; n * dim];
    gemm(n, m, dim, &pxy, false, y.data, false, &mut py, false);
    let cxx = -4.0 / (n * n) as f64;
    let cxy = 4.0 / (n * m) as f64;
    let mut dx = vec![0.0; n * dim];
    for i in 0..n {
        let rs_xx: f64 = pxx[i * n..(i + 1) * n].iter().sum();
        let rs_xy: f64 = pxy[i * m..(i + 1) * m].iter().sum();
        let xi = x.row(i);
        for k in 0..dim {
            dx[i * dim + k] = cxx * (xi[k] * rs_xx - px[i * dim + k])
                + cxy * (xi[k] * rs_xy - py[i * dim + k]);
        }
    }

    let dy = need_dy.then(|| {
        let dyy = sq_distances(y, y);
        let pyy: Vec<f64> = dyy.iter().map(|d| bank.slope(*d)).collect();
        let mut qy = vec![0.0; m * dim];
        gemm(m, m, dim, &pyy, false, y.data, false, &mut qy, false);
        // (Pxyᵀ·X)_j
        let mut qx = vec![0.0; m * dim];
        gemm(m, n, dim, &pxy, true, x.data, false, &mut qx, false);
        let cyy = -4.0 / (m * m) as f64;
        let mut dy = vec![0.0; m * dim];
        for j in 0..m {
            let rs_yy: f64 = pyy[j * m..(j + 1) * m].iter().sum();
            let cs_xy: f64 = (0..n).map(|i| pxy[i * m + j]).sum();
            let yj = y.row(j);
            for k in 0..dim {
                dy[j * dim + k] = cyy * (yj[k] * rs_yy - qy[j * dim + k])
                    + cxy * (yj[k] * cs_xy - qx[j * dim + k]);
            }
        }
        dy
    });
    Ok((value, dx, dy))
}

/// Cycle-consistency loss: the Gaussian NLL of the original chunk under the
/// reconstruction obtained after a round trip through another domain.
pub fn cycle_consistency_nll(
    x_original: &[f64],
    cycled_mu: &[f64],
    cycled_sigma: &[f64],
    batch: usize,
) -> Result<f64> {
    gaussian_nll(x_original, cycled_mu, cycled_sigma, batch)
}

/// Which optional objectives are active in the current schedule phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gates {
    pub mmd_on: bool,
    pub cc_on: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda_mmd: f64,
    pub lambda_cc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            lambda_mmd: DEFAULT_LAMBDA_MMD,
            lambda_cc: DEFAULT_LAMBDA_CC,
        }
    }
}

/// Raw (unweighted) loss components of one pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Reconstruction NLL per domain.
    pub nll_recon: BTreeMap<usize, f64>,
    pub kld: BTreeMap<usize, f64>,
    /// Transfer MMD per ordered `(source, target)` domain pair.
    pub mmd_transfer: BTreeMap<(usize, usize), f64>,
    /// Cycle-consistency NLL per source domain.
    pub cc_nll: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll_recon: BTreeMap<usize, f64>,
    pub kld: BTreeMap<usize, f64>,
    #[serde(with = "pair_map")]
    pub mmd_transfer: BTreeMap<(usize, usize), f64>,
    pub cc_nll: BTreeMap<usize, f64>,
    pub total: f64,
    pub weights: LossWeights,
    pub gates: Gates,
}

/// Weighted sum of the components; gated-off terms contribute exactly 0.
pub fn composite_loss(parts: &LossParts, weights: LossWeights, gates: Gates) -> LossBreakdown {
    let mut total = 0.0;
    for (d, nll) in &parts.nll_recon {
        total += nll + weights.beta * parts.kld.get(d).copied().unwrap_or(0.0);
    }
    if gates.mmd_on {
        total += weights.lambda_mmd * parts.mmd_transfer.values().sum::<f64>();
    }
    if gates.cc_on {
        total += weights.lambda_cc * parts.cc_nll.values().sum::<f64>();
    }
    LossBreakdown {
        nll_recon: parts.nll_recon.clone(),
        kld: parts.kld.clone(),
        mmd_transfer: if gates.mmd_on {
            parts.mmd_transfer.clone()
        } else {
            BTreeMap::new()
        },
        cc_nll: if gates.cc_on {
            parts.cc_nll.clone()
        } else {
            BTreeMap::new()
        },
        total,
        weights,
        gates,
    }
}

/// Ordered domain pairs `(s, t)`, `s ≠ t`, over `k` domains.
pub fn ordered_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|s| (0..k).filter(move |t| *t != s).map(move |t| (s, t)))
        .collect()
}

/// Serializes tuple-keyed maps as `"s->t"` string keys.
pub(crate) mod pair_map {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(usize, usize), f64>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|((a, b), v)| (format!("{a}->{b}"), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<(usize, usize), f64>, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                let (a, b) = k
                    .split_once("->")
                    .ok_or_else(|| D::Error::custom(format!("bad pair key {k}")))?;
                let a = a.parse().map_err(D::Error::custom)?;
                let b = b.parse().map_err(D::Error::custom)?;
                Ok(((a, b), v))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_closed_forms() {
        let v = gaussian_nll(&[0.0], &[0.0], &[1.0], 1).unwrap();
        assert!((v - 0.918_939).abs() < 1e-6);
        let v = gaussian_nll(&[1.0], &[0.0], &[1.0], 1).unwrap();
        assert!((v - 1.418_939).abs() < 1e-6);
        let (_, dmu, _) = gaussian_nll_grad(&[0.0], &[1.0], &[1.0], 1);
        assert_eq!(dmu[0], 1.0);
    }

    #[test]
    fn nll_rejects_bad_input() {
        assert!(gaussian_nll(&[f64::NAN], &[0.0], &[1.0], 1).is_err());
        assert!(gaussian_nll(&[0.0, 1.0], &[0.0], &[1.0], 1).is_err());
        assert!(gaussian_nll(&[0.0], &[0.0], &[0.0], 1).is_err());
    }

    #[test]
    fn kld_closed_forms() {
        assert_eq!(kld_to_standard_normal(&[0.0], &[1.0], 1).unwrap(), 0.0);
        assert!((kld_to_standard_normal(&[1.0], &[1.0], 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mmd_single_points() {
        let bank = KernelBank::new(vec![0.05]).unwrap();
        let x = [0.0, 0.0];
        let y = [4.0, 2.0]; // ‖x − y‖² = 20
        let v = mmd(
            PointSet::new(&x, 2).unwrap(),
            PointSet::new(&y, 2).unwrap(),
            &bank,
        )
        .unwrap();
        assert!((v - (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-12);
        assert!((v - 1.264_241).abs() < 1e-6);
    }

    #[test]
    fn mmd_dimension_mismatch() {
        let bank = KernelBank::default();
        let x = [0.0; 4];
        let y = [0.0; 6];
        let r = mmd(
            PointSet::new(&x, 2).unwrap(),
            PointSet::new(&y, 3).unwrap(),
            &bank,
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn composite_gating_and_pairs() {
        let mut parts = LossParts::default();
        parts.nll_recon.insert(0, 10.0);
        parts.nll_recon.insert(1, 20.0);
        parts.kld.insert(0, 1.0);
        parts.kld.insert(1, 2.0);
        parts.mmd_transfer.insert((0, 1), 1e-3);
        parts.mmd_transfer.insert((1, 0), 2e-3);
        parts.cc_nll.insert(0, 5.0);
        let w = LossWeights {
            beta: 0.5,
            ..Default::default()
        };
        let off = composite_loss(&parts, w, Gates::default());
        assert_eq!(off.total, 10.0 + 0.5 + 20.0 + 1.0);
        let on = composite_loss(
            &parts,
            w,
            Gates {
                mmd_on: true,
                cc_on: true,
            },
        );
        assert!((on.total - (31.5 + 1e5 * 3e-3 + 5.0)).abs() < 1e-9);
        assert_eq!(ordered_pairs(4).len(), 12);
        assert_eq!(DEFAULT_LAMBDA_MMD, 1e5);
    }

    #[test]
    fn loss_breakdown_serializes_pair_keys() {
        let mut parts = LossParts::default();
        parts.nll_recon.insert(0, 1.0);
        parts.mmd_transfer.insert((0, 1), 0.25);
        let b = composite_loss(
            &parts,
            LossWeights::default(),
            Gates {
                mmd_on: true,
                cc_on: false,
            },
        );
        let s = serde_json::to_string(&b).unwrap();
        assert!(s.contains("\"0->1\":0.25"));
        let back: LossBreakdown = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
    }
}
