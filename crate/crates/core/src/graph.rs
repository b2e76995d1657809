//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] and appear once on the tape no matter how
//! many times they are used, so shared weights accumulate gradient from every
//! use. [`Graph::backward`] returns exact analytic gradients for all
//! parameters reachable from a scalar root.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::objectives::{self, KernelBank, PointSet};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Var, geom: ConvGeom },
    InstanceNorm { x: Var, group: usize, inv_std: Vec<f64> },
    LeakyRelu { x: Var, slope: f64 },
    Film { x: Var, scale: Var, bias: Var },
    Affine { x: Var, mul: f64 },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Softplus { x: Var },
    Tanh { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    Reshape { x: Var },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Embedding { table: Var, indices: Vec<usize> },
    Nll { x: Var, mu: Var, sigma: Var, batch: usize },
    Kld { mu: Var, sigma: Var, batch: usize },
    Mmd { x: Var, y: Var, dx: Vec<f64>, dy: Option<Vec<f64>> },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node {
    value: Option<Tensor>,
    param: Option<ParamId>,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.index()].as_ref()
    }

    /// Gradient for `id`, zeros when the parameter did not influence the root.
    pub fn get_or_zeros(&self, id: ParamId, params: &ParamStore) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.param {
            Some(id) => self.params.get(id),
            None => node.value.as_ref().expect("non-parameter node without value"),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, d_in) = (xv.rows(), xv.row_len());
        if wv.shape().len() != 2 || wv.shape()[1] != d_in || bv.len() != wv.shape()[0] {
            return Err(Error::shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let d_out = bv.len();
        let y = kernels::linear_forward(xv.data(), wv.data(), bv.data(), n, d_in);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, d_out], y), Op::Linear { x, w, b }, ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        if xv.row_len() != geom.in_len()
            || self.value(w).len() != geom.weight_len()
            || self.value(b).len() != geom.c_out
        {
            return Err(Error::shape(format!(
                "conv2d: input {:?} does not fit {:?}",
                xv.shape(),
                geom
            )));
        }
        let y = kernels::conv2d_forward(xv.data(), self.value(w).data(), self.value(b).data(), n, &geom);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![n, geom.c_out, geom.h_out, geom.w_out], y),
            Op::Conv { x, w, b, geom },
            ng,
        ))
    }

    /// Transpose convolution; `geom` is the adjoint convolution's geometry.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        if xv.row_len() != geom.out_len()
            || self.value(w).len() != geom.weight_len()
            || self.value(b).len() != geom.c_in
        {
            return Err(Error::shape(format!(
                "conv_transpose2d: input {:?} does not fit {:?}",
                xv.shape(),
                geom
            )));
        }
        let y = kernels::conv_transpose2d_forward(
            xv.data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            &geom,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![n, geom.c_in, geom.h_in, geom.w_in], y),
            Op::ConvT { x, w, b, geom },
            ng,
        ))
    }

    /// Per-sample normalization over contiguous groups of `group` values
    /// (features of a vector, or the spatial plane of one channel).
    pub fn instance_norm(&mut self, x: Var, group: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if group < 2 || xv.len() % group != 0 || xv.row_len() % group != 0 {
            return Err(Error::shape(format!(
                "instance norm over groups of {group} on {:?}",
                xv.shape()
            )));
        }
        let shape = xv.shape().to_vec();
        let (y, inv_std) = kernels::instance_norm_forward(xv.data(), group, eps);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, y), Op::InstanceNorm { x, group, inv_std }, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| if *v > 0.0 { *v } else { slope * v }).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(t, Op::LeakyRelu { x, slope }, ng)
    }

    /// `x·scale + bias`, with `scale`/`bias` of shape `[N, C]` broadcast over
    /// everything after the channel axis of `x`.
    pub fn film(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let (xv, sv, bv) = (self.value(x), self.value(scale), self.value(bias));
        let n = xv.rows();
        let c = sv.row_len();
        if sv.rows() != n || bv.rows() != n || bv.row_len() != c || c == 0 || xv.row_len() % c != 0 {
            return Err(Error::shape(format!(
                "film: activation {:?}, scale {:?}, bias {:?}",
                xv.shape(),
                sv.shape(),
                bv.shape()
            )));
        }
        let l = xv.row_len() / c;
        let mut y = xv.data().to_vec();
        for (i, chunk) in y.chunks_mut(l).enumerate() {
            let (s, b) = (sv.data()[i], bv.data()[i]);
            chunk.iter_mut().for_each(|v| *v = *v * s + b);
        }
        let t = Tensor::new(xv.shape().to_vec(), y);
        let ng = self.ng(x) || self.ng(scale) || self.ng(bias);
        Ok(self.push(t, Op::Film { x, scale, bias }, ng))
    }

    /// `mul·x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| mul * v + add).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(t, Op::Affine { x, mul }, ng)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| softplus(*v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(t, Op::Softplus { x }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(t, Op::Tanh { x }, ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(t, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(Error::shape(format!("reshape {:?} to {shape:?}", xv.shape())));
        }
        let t = xv.clone().reshaped(shape);
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    /// Concatenates `[N, k_i]` operands along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != n) {
            return Err(Error::shape("concat operands differ in batch size"));
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).row_len()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor::new(vec![n, total], data),
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Feature columns `[start, start+len)` of an `[N, k]` operand.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, k) = (xv.rows(), xv.row_len());
        if start + len > k {
            return Err(Error::shape(format!("slice {start}+{len} of width {k}")));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, len], data), Op::Slice { x, start }, ng))
    }

    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, e) = (tv.rows(), tv.row_len());
        if let Some(bad) = indices.iter().find(|i| **i >= v) {
            return Err(Error::range(format!("embedding index {bad} >= vocabulary {v}")));
        }
        let mut data = Vec::with_capacity(indices.len() * e);
        for i in indices {
            data.extend_from_slice(tv.row(*i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), e], data),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Batch-averaged Gaussian NLL of `x` under `N(mu, sigma²)`.
    pub fn gaussian_nll(&mut self, x: Var, mu: Var, sigma: Var) -> Result<Var> {
        let batch = self.value(x).rows();
        let v = objectives::gaussian_nll(
            self.value(x).data(),
            self.value(mu).data(),
            self.value(sigma).data(),
            batch,
        )?;
        let ng = self.ng(x) || self.ng(mu) || self.ng(sigma);
        Ok(self.push(Tensor::scalar(v), Op::Nll { x, mu, sigma, batch }, ng))
    }

    pub fn kld(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        let batch = self.value(mu).rows();
        let v = objectives::kld_to_standard_normal(self.value(mu).data(), self.value(sigma).data(), batch)?;
        let ng = self.ng(mu) || self.ng(sigma);
        Ok(self.push(Tensor::scalar(v), Op::Kld { mu, sigma, batch }, ng))
    }

    /// MMD between the rows of `x` and `y`; `yy` optionally supplies a
    /// precomputed `E[k(y, y')]`.
    pub fn mmd(&mut self, x: Var, y: Var, bank: &KernelBank, yy: Option<f64>) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let xs = PointSet::new(xv.data(), xv.row_len())?;
        let ys = PointSet::new(yv.data(), yv.row_len())?;
        let need_dy = self.ng(y);
        let (v, dx, dy) = objectives::mmd_with_grad(xs, ys, bank, yy, need_dy)?;
        let ng = self.ng(x) || need_dy;
        Ok(self.push(Tensor::scalar(v), Op::Mmd { x, y, dx, dy }, ng))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|(t, w)| w * self.value(*t).item()).sum();
        let ng = terms.iter().any(|(t, _)| self.ng(*t));
        self.push(
            Tensor::scalar(v),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if node.param.is_some() {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let mut out = vec![None; self.params.len()];
        for (id, var) in &self.param_vars {
            if let Some(g) = grads[var.0].take() {
                out[id.index()] = Some(Tensor::new(self.params.get(*id).shape().to_vec(), g));
            }
        }
        Gradients { grads: out }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.as_ref().expect("op node has a value");
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let (n, d_in) = (xv.rows(), xv.row_len());
                let d_out = self.value(*b).len();
                let r = kernels::linear_backward(xv.data(), self.value(*w).data(), g, n, d_in, d_out, self.ng(*x));
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, r.dw);
                self.accumulate(grads, *b, r.db);
            }
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x);
                let r = kernels::conv2d_backward(xv.data(), self.value(*w).data(), g, xv.rows(), geom, self.ng(*x));
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, r.dw);
                self.accumulate(grads, *b, r.db);
            }
            Op::ConvT { x, w, b, geom } => {
                let xv = self.value(*x);
                let r = kernels::conv_transpose2d_backward(
                    xv.data(),
                    self.value(*w).data(),
                    g,
                    xv.rows(),
                    geom,
                    self.ng(*x),
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, r.dw);
                self.accumulate(grads, *b, r.db);
            }
            Op::InstanceNorm { x, group, inv_std } => {
                let dx = kernels::instance_norm_backward(out.data(), inv_std, g, *group);
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(v, d)| if *v > 0.0 { *d } else { slope * d })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Film { x, scale, bias } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                let c = sv.row_len();
                let l = xv.row_len() / c;
                if self.ng(*x) {
                    let mut dx = g.to_vec();
                    for (i, chunk) in dx.chunks_mut(l).enumerate() {
                        let s = sv.data()[i];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *x, dx);
                }
                let ds = g
                    .chunks(l)
                    .zip(xv.data().chunks(l))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                    .collect();
                let db = g.chunks(l).map(|gc| gc.iter().sum()).collect();
                self.accumulate(grads, *scale, ds);
                self.accumulate(grads, *bias, db);
            }
            Op::Affine { x, mul } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * mul).collect());
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv.data()).map(|(d, v)| d * v).collect());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av.data()).map(|(d, v)| d * v).collect());
                }
            }
            Op::Softplus { x } => {
                let xv = self.value(*x);
                let dx = xv.data().iter().zip(g).map(|(v, d)| d * sigmoid(*v)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let dx = out.data().iter().zip(g).map(|(t, d)| d * (1.0 - t * t)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(v, d)| if *v < *lo || *v > *hi { 0.0 } else { *d })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Concat { parts } => {
                let n = out.rows();
                let total = out.row_len();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).row_len();
                    if self.ng(*p) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, *p, d);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let (n, k) = (xv.rows(), xv.row_len());
                let len = out.row_len();
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    dx[i * k + start..i * k + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Embedding { table, indices } => {
                let tv = self.value(*table);
                let e = tv.row_len();
                let mut dt = vec![0.0; tv.len()];
                for (row, idx) in indices.iter().enumerate() {
                    for k in 0..e {
                        dt[idx * e + k] += g[row * e + k];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Nll { x, mu, sigma, batch } => {
                let (dx, dmu, dsigma) = objectives::gaussian_nll_grad(
                    self.value(*x).data(),
                    self.value(*mu).data(),
                    self.value(*sigma).data(),
                    *batch,
                );
                let s = g[0];
                self.accumulate(grads, *x, dx.into_iter().map(|v| v * s).collect());
                self.accumulate(grads, *mu, dmu.into_iter().map(|v| v * s).collect());
                self.accumulate(grads, *sigma, dsigma.into_iter().map(|v| v * s).collect());
            }
            Op::Kld { mu, sigma, batch } => {
                let (dmu, dsigma) =
                    objectives::kld_grad(self.value(*mu).data(), self.value(*sigma).data(), *batch);
                let s = g[0];
                self.accumulate(grads, *mu, dmu.into_iter().map(|v| v * s).collect());
                self.accumulate(grads, *sigma, dsigma.into_iter().map(|v| v * s).collect());
            }
            Op::Mmd { x, y, dx, dy } => {
                let s = g[0];
                self.accumulate(grads, *x, dx.iter().map(|v| v * s).collect());
                if let Some(dy) = dy {
                    self.accumulate(grads, *y, dy.iter().map(|v| v * s).collect());
                }
            }
            Op::WeightedSum { terms } => {
                for (t, w) in terms {
                    self.accumulate(grads, *t, vec![g[0] * w]);
                }
            }
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` around every scalar of every parameter.
    fn check_grads(store: &ParamStore, f: impl Fn(&mut Graph<'_>) -> Var) {
        let g = {
            let mut graph = Graph::new(store);
            let root = f(&mut graph);
            graph.backward(root)
        };
        for id in store.ids() {
            let analytic = g.get_or_zeros(id, store);
            for k in 0..store.get(id).len() {
                let h = 1e-6;
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[k] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[k] -= h;
                let eval = |s: &ParamStore| {
                    let mut graph = Graph::new(s);
                    let r = f(&mut graph);
                    graph.value(r).item()
                };
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(err < 1e-5, "{} [{k}]: analytic {a} numeric {numeric}", store.name(id));
            }
        }
    }

    fn ramp(shape: &[usize], scale: f64, shift: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i as f64 * 0.7 + shift).sin()) * scale).collect(),
        )
    }

    #[test]
    fn conv_stack_gradients() {
        let g1 = ConvGeom::new(1, 5, 6, 2, (3, 3), (2, 2), (1, 1)).unwrap();
        let g2 = ConvGeom::new(2, g1.h_out, g1.w_out, 2, (3, 2), (1, 2), (1, 0)).unwrap();
        let mut store = ParamStore::new();
        let w1 = store.insert("w1", ramp(&[2, 1, 3, 3], 0.4, 0.1));
        let b1 = store.insert("b1", ramp(&[2], 0.1, 0.2));
        let wt = store.insert("wt", ramp(&[2, 2, 3, 2], 0.3, 0.5));
        let bt = store.insert("bt", ramp(&[2], 0.1, 0.9));
        let x = ramp(&[2, 1, 5, 6], 1.0, 0.3);
        check_grads(&store, |g| {
            let xv = g.constant(x.clone());
            let (w, b) = (g.param(w1), g.param(b1));
            let h = g.conv2d(xv, w, b, g1).unwrap();
            let h = g.instance_norm(h, g1.h_out * g1.w_out, 1e-5).unwrap();
            let h = g.leaky_relu(h, 0.2);
            let (w, b) = (g.param(wt), g.param(bt));
            let h = g.reshape(h, &[2, 2, g1.h_out, g1.w_out]).unwrap();
            let h = g.conv2d(h, w, b, g2).unwrap();
            let t = g.tanh(h);
            let target = g.constant(Tensor::zeros(g.value(t).shape()));
            let ones = g.constant(Tensor::full(g.value(t).shape(), 1.0));
            g.gaussian_nll(target, t, ones).unwrap()
        });
    }

    #[test]
    fn transpose_conv_film_gradients() {
        let geom = ConvGeom::new(2, 7, 8, 3, (3, 3), (2, 2), (1, 1)).unwrap();
        let mut store = ParamStore::new();
        let w = store.insert("w", ramp(&[3, 2, 3, 3], 0.3, 0.0));
        let b = store.insert("b", ramp(&[2], 0.2, 1.0));
        let s = store.insert("scale", ramp(&[2, 2], 0.5, 2.0));
        let c = store.insert("shift", ramp(&[2, 2], 0.5, 3.0));
        let x = ramp(&[2, 3, geom.h_out, geom.w_out], 1.0, 0.7);
        check_grads(&store, |g| {
            let xv = g.constant(x.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let y = g.conv_transpose2d(xv, wv, bv, geom).unwrap();
            let (sv, cv) = (g.param(s), g.param(c));
            let sv = g.affine(sv, 1.0, 1.0);
            let y = g.film(y, sv, cv).unwrap();
            let sp = g.softplus(y);
            let y2 = g.mul(sp, y).unwrap();
            let target = g.constant(Tensor::full(g.value(y2).shape(), 0.3));
            let sig = g.constant(Tensor::full(g.value(y2).shape(), 0.7));
            g.gaussian_nll(target, y2, sig).unwrap()
        });
    }

    #[test]
    fn dense_embedding_mmd_gradients() {
        let mut store = ParamStore::new();
        let table = store.insert("table", ramp(&[4, 3], 0.8, 0.4));
        let w = store.insert("w", ramp(&[5, 6], 0.5, 0.9));
        let b = store.insert("b", ramp(&[5], 0.1, 0.0));
        let other = store.insert("other", ramp(&[2, 3], 0.6, 1.7));
        let bank = KernelBank::default();
        check_grads(&store, |g| {
            let t = g.param(table);
            let e = g.embedding(t, &[0, 3, 3]).unwrap();
            let o = g.param(other);
            let o2 = g.slice(o, 1, 2).unwrap();
            let o3 = g.concat(&[o2, o2]).unwrap();
            let o3 = g.slice(o3, 0, 3).unwrap();
            let o3 = g.reshape(o3, &[3, 2]).unwrap();
            let o3 = g.reshape(o3, &[2, 3]).unwrap();
            let o3 = g.concat(&[o3, o3]).unwrap();
            let o3 = g.reshape(o3, &[3, 4]).unwrap();
            let o3 = g.slice(o3, 0, 3).unwrap();
            let x = g.concat(&[e, o3]).unwrap();
            let (wv, bv) = (g.param(w), g.param(b));
            let h = g.linear(x, wv, bv).unwrap();
            let h = g.instance_norm(h, 5, 1e-5).unwrap();
            let h = g.clamp(h, -10.0, 10.0);
            let y = g.param(other);
            let y = g.concat(&[y, y]).unwrap();
            let y = g.slice(y, 1, 5).unwrap();
            let m = g.mmd(h, y, &bank, None).unwrap();
            let mu = g.slice(h, 0, 2).unwrap();
            let sg = g.slice(h, 2, 2).unwrap();
            let sg = g.softplus(sg);
            let k = g.kld(mu, sg).unwrap();
            g.weighted_sum(&[(m, 3.0), (k, 0.5)])
        });
    }
}
