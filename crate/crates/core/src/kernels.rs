//! Numeric kernels behind the autodiff graph: dense products, strided
//! (transpose) convolutions and instance normalization, each with its exact
//! backward pass.
//!
//! Layouts are row-major. Convolution tensors are `[N, C, H, W]`; weights are
//! `[C_out, C_in, kh, kw]` for convolutions and `[C_in, C_out, kh, kw]` for
//! transpose convolutions.

use rayon::prelude::*;

/// `C = A·B` (or `C += A·B` when `accumulate`), with `A` logically `m×k`
/// and `B` logically `k×n`. `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the bounds above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = x·wᵀ + b` for `x: [n, d_in]`, `w: [d_out, d_in]`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, d_in: usize) -> Vec<f64> {
    let d_out = b.len();
    let mut y = vec![0.0; n * d_out];
    for row in y.chunks_mut(d_out) {
        row.copy_from_slice(b);
    }
    gemm(n, d_in, d_out, x, false, w, true, &mut y, true);
    y
}

pub struct LinearGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    d_in: usize,
    d_out: usize,
    need_dx: bool,
) -> LinearGrads {
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; n * d_in];
        gemm(n, d_out, d_in, dy, false, w, false, &mut dx, false);
        dx
    });
    let mut dw = vec![0.0; d_out * d_in];
    gemm(d_out, n, d_in, dy, true, x, false, &mut dw, false);
    let mut db = vec![0.0; d_out];
    for row in dy.chunks(d_out) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    LinearGrads { dx, dw, db }
}

/// Geometry of a strided 2-D convolution from `[c_in, h_in, w_in]` to
/// `[c_out, h_out, w_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h_in: usize,
        w_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Option<Self> {
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return None;
        }
        if h_in + 2 * ph < kh || w_in + 2 * pw < kw {
            return None;
        }
        Some(ConvGeom {
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            h_out: (h_in + 2 * ph - kh) / sh + 1,
            w_out: (w_in + 2 * pw - kw) / sw + 1,
        })
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.patch_len()
    }

    /// Unfolds one input sample into `[c_in·kh·kw, h_out·w_out]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    for oy in 0..self.h_out {
                        let iy = (oy * self.sh + i) as isize - self.ph as isize;
                        let dst = &mut cols[row + oy * self.w_out..row + (oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h_in as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &x[(c * self.h_in + iy as usize) * self.w_in..];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.sw + j) as isize - self.pw as isize;
                            *d = if ix < 0 || ix >= self.w_in as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto an input
    /// sample, accumulating overlaps.
    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = 0.0);
        let p = self.positions();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    for oy in 0..self.h_out {
                        let iy = (oy * self.sh + i) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h_in as isize {
                            continue;
                        }
                        let base = (c * self.h_in + iy as usize) * self.w_in;
                        let src = &cols[row + oy * self.w_out..row + (oy + 1) * self.w_out];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.sw + j) as isize - self.pw as isize;
                            if ix >= 0 && (ix as usize) < self.w_in {
                                x[base + ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sum_partials(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(&p) {
            *a += v;
        }
    }
    acc
}

pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let (il, ol, kl, p) = (g.in_len(), g.out_len(), g.patch_len(), g.positions());
    let mut y = vec![0.0; n * ol];
    y.par_chunks_mut(ol).enumerate().for_each(|(s, ys)| {
        let mut cols = vec![0.0; kl * p];
        g.im2col(&x[s * il..(s + 1) * il], &mut cols);
        for (c, row) in ys.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = b[c]);
        }
        gemm(g.c_out, kl, p, w, false, &cols, false, ys, true);
    });
    y
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads {
    let (il, ol, kl, p) = (g.in_len(), g.out_len(), g.patch_len(), g.positions());
    let per_sample: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let dys = &dy[s * ol..(s + 1) * ol];
            let mut cols = vec![0.0; kl * p];
            g.im2col(&x[s * il..(s + 1) * il], &mut cols);
            let mut dw = vec![0.0; g.weight_len()];
            gemm(g.c_out, p, kl, dys, false, &cols, true, &mut dw, false);
            let dx = need_dx.then(|| {
                gemm(kl, g.c_out, p, w, true, dys, false, &mut cols, false);
                let mut dx = vec![0.0; il];
                g.col2im(&cols, &mut dx);
                dx
            });
            (dw, dx)
        })
        .collect();
    let mut db = vec![0.0; g.c_out];
    for dys in dy.chunks(ol) {
        for (c, row) in dys.chunks(p).enumerate() {
            db[c] += row.iter().sum::<f64>();
        }
    }
    let mut dws = Vec::with_capacity(n);
    let mut dx = need_dx.then(|| Vec::with_capacity(n * il));
    for (dw_s, dx_s) in per_sample {
        dws.push(dw_s);
        if let (Some(acc), Some(d)) = (dx.as_mut(), dx_s) {
            acc.extend_from_slice(&d);
        }
    }
    ConvGrads {
        dx,
        dw: sum_partials(dws, g.weight_len()),
        db,
    }
}

/// Transpose convolution. `g` is the geometry of the *adjoint* convolution,
/// i.e. the one mapping this layer's output shape back to its input shape;
/// the weight layout `[C_in, C_out, kh, kw]` coincides with that
/// convolution's `[c_out, c_in, kh, kw]`.
pub fn conv_transpose2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    // Input of the transpose layer has g.out_len() elements per sample.
    let (il, ol, kl, p) = (g.out_len(), g.in_len(), g.patch_len(), g.positions());
    let hw = g.h_in * g.w_in;
    let mut y = vec![0.0; n * ol];
    y.par_chunks_mut(ol).enumerate().for_each(|(s, ys)| {
        let mut cols = vec![0.0; kl * p];
        gemm(kl, g.c_out, p, w, true, &x[s * il..(s + 1) * il], false, &mut cols, false);
        g.col2im(&cols, ys);
        for (c, plane) in ys.chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[c]);
        }
    });
    y
}

pub fn conv_transpose2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads {
    let (il, ol, kl, p) = (g.out_len(), g.in_len(), g.patch_len(), g.positions());
    let hw = g.h_in * g.w_in;
    let per_sample: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut cols = vec![0.0; kl * p];
            g.im2col(&dy[s * ol..(s + 1) * ol], &mut cols);
            let xs = &x[s * il..(s + 1) * il];
            let mut dw = vec![0.0; g.weight_len()];
            gemm(g.c_out, p, kl, xs, false, &cols, true, &mut dw, false);
            let dx = need_dx.then(|| {
                let mut dx = vec![0.0; il];
                gemm(g.c_out, kl, p, w, false, &cols, false, &mut dx, false);
                dx
            });
            (dw, dx)
        })
        .collect();
    let mut db = vec![0.0; g.c_in];
    for dys in dy.chunks(ol) {
        for (c, plane) in dys.chunks(hw).enumerate() {
            db[c] += plane.iter().sum::<f64>();
        }
    }
    let mut dws = Vec::with_capacity(n);
    let mut dx = need_dx.then(|| Vec::with_capacity(n * il));
    for (dw_s, dx_s) in per_sample {
        dws.push(dw_s);
        if let (Some(acc), Some(d)) = (dx.as_mut(), dx_s) {
            acc.extend_from_slice(&d);
        }
    }
    ConvGrads {
        dx,
        dw: sum_partials(dws, g.weight_len()),
        db,
    }
}

/// Normalizes each contiguous group of `group_len` values to zero mean and
/// unit variance. Returns the normalized values and per-group `1/σ`.
pub fn instance_norm_forward(x: &[f64], group_len: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let groups = x.len() / group_len;
    let mut y = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; groups];
    for ((xs, ys), is) in x
        .chunks(group_len)
        .zip(y.chunks_mut(group_len))
        .zip(inv_std.iter_mut())
    {
        let len = group_len as f64;
        let mean = xs.iter().sum::<f64>() / len;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, v) in ys.iter_mut().zip(xs) {
            *o = (v - mean) * inv;
        }
        *is = inv;
    }
    (y, inv_std)
}

pub fn instance_norm_backward(y: &[f64], inv_std: &[f64], dy: &[f64], group_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    let len = group_len as f64;
    for (((ys, dys), dxs), inv) in y
        .chunks(group_len)
        .zip(dy.chunks(group_len))
        .zip(dx.chunks_mut(group_len))
        .zip(inv_std)
    {
        let sum_dy: f64 = dys.iter().sum();
        let sum_dy_y: f64 = dys.iter().zip(ys).map(|(d, v)| d * v).sum();
        for ((o, d), v) in dxs.iter_mut().zip(dys).zip(ys) {
            *o = inv / len * (len * d - sum_dy - v * sum_dy_y);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.out_len()];
        for co in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = b[co];
                    for ci in 0..g.c_in {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let iy = (oy * g.sh + i) as isize - g.ph as isize;
                                let ix = (ox * g.sw + j) as isize - g.pw as isize;
                                if iy < 0 || ix < 0 || iy >= g.h_in as isize || ix >= g.w_in as isize {
                                    continue;
                                }
                                acc += w[((co * g.c_in + ci) * g.kh + i) * g.kw + j]
                                    * x[(ci * g.h_in + iy as usize) * g.w_in + ix as usize];
                            }
                        }
                    }
                    y[(co * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
        y
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let g = ConvGeom::new(2, 7, 9, 3, (3, 4), (2, 3), (1, 2)).unwrap();
        let x = seq(g.in_len(), 0.1);
        let w = seq(g.weight_len(), 0.05);
        let b = vec![0.1, -0.2, 0.3];
        let y = conv2d_forward(&x, &w, &b, 1, &g);
        let expected = naive_conv(&x, &w, &b, &g);
        for (a, e) in y.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        // <conv(x), u> == <x, convT(u)> with zero bias.
        let g = ConvGeom::new(2, 8, 10, 3, (3, 3), (2, 2), (1, 1)).unwrap();
        let x = seq(g.in_len(), 0.1);
        let u = seq(g.out_len(), 0.07);
        let w = seq(g.weight_len(), 0.03);
        let cx = conv2d_forward(&x, &w, &[0.0; 3], 1, &g);
        let tu = conv_transpose2d_forward(&u, &w, &[0.0; 2], 1, &g);
        let lhs: f64 = cx.iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&tu).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn instance_norm_two_values() {
        let (y, _) = instance_norm_forward(&[1.0, 3.0], 2, 1e-5);
        assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);
        let (y, _) = instance_norm_forward(&[4.0; 6], 6, 1e-5);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gemm_transposed_operands() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, true, &mut c, false);
        // Aᵀ·Bᵀ = (B·A)ᵀ
        assert_eq!(c, [23.0, 31.0, 34.0, 46.0]);
    }
}
