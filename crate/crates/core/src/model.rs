//! Gaussian encoder/decoder networks in three variants.
//!
//! * `UnitMmdCpo`: two domain-specific input/output stacks around weight-shared
//!   dense layers; pitch and octave are concatenated as one-hot vectors.
//! * `MoveStarFpo`: the same paired layout, with FiLM on the shared dense layers.
//! * `MoveFpod`: one network for every domain; FiLM conditions on pitch,
//!   octave and instrument and modulates both conv and dense layers.
//!
//! Paired variants read the domain from the label's instrument field to pick
//! their domain-specific stacks and never condition on it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    encode_onehot, ConditionLabel, FilmGenerator, FilmSlot, LEAKY_SLOPE, NORM_EPS,
};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::kernels::ConvGeom;
use crate::objectives::{composite_loss, Gates, KernelBank, LossBreakdown, LossParts, LossWeights};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const Z_SIGMA_RANGE: (f64, f64) = (1e-4, 1e2);
pub const X_SIGMA_RANGE: (f64, f64) = (1e-3, 1e1);
const SIGMA_OFFSET: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    UnitMmdCpo,
    MoveStarFpo,
    MoveFpod,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::UnitMmdCpo, Variant::MoveStarFpo, Variant::MoveFpod];

    /// Separate input/output stacks per domain.
    pub fn paired(self) -> bool {
        self != Variant::MoveFpod
    }

    pub fn uses_film(self) -> bool {
        self != Variant::UnitMmdCpo
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::UnitMmdCpo => "unit-mmd-cpo",
            Variant::MoveStarFpo => "move-star-fpo",
            Variant::MoveFpod => "move-fpod",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown variant {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub bins: usize,
    pub frames: usize,
    pub latent_dim: usize,
    pub num_instruments: usize,
    /// Encoder convolutions; the decoder mirrors them with their adjoints.
    pub conv: [ConvSpec; 2],
    /// Stride-1 output head preserving `frames × bins`.
    pub out_kernel: (usize, usize),
    pub out_padding: (usize, usize),
    /// Encoder dense widths after flattening (E2, E3, E4).
    pub enc_fc: [usize; 3],
    /// Decoder dense widths before the unflattening layer (D0, D1, D2).
    pub dec_fc: [usize; 3],
    pub film_embed_dim: usize,
    pub film_trunk: [usize; 3],
    /// Width ratio to the full-size architecture.
    pub scale_factor: f64,
}

impl ModelConfig {
    /// Full-size architecture on 16 × 500 chunks.
    pub fn paper(variant: Variant, num_instruments: usize) -> Self {
        ModelConfig {
            variant,
            bins: 500,
            frames: 16,
            latent_dim: 3,
            num_instruments,
            conv: [
                ConvSpec { channels: 32, kernel: (9, 21), stride: (3, 3), padding: (4, 10) },
                ConvSpec { channels: 64, kernel: (6, 15), stride: (1, 3), padding: (0, 7) },
            ],
            out_kernel: (5, 15),
            out_padding: (2, 7),
            enc_fc: [4096, 2048, 1024],
            dec_fc: [1024, 2048, 4096],
            film_embed_dim: 8,
            film_trunk: [128, 512, 2048],
            scale_factor: 1.0,
        }
    }

    /// Width-scaled architecture on 16 × 128 chunks for CPU training.
    pub fn desk(variant: Variant, num_instruments: usize) -> Self {
        ModelConfig {
            variant,
            bins: 128,
            frames: 16,
            latent_dim: 3,
            num_instruments,
            conv: [
                ConvSpec { channels: 8, kernel: (4, 9), stride: (3, 3), padding: (1, 4) },
                ConvSpec { channels: 16, kernel: (5, 7), stride: (1, 3), padding: (0, 3) },
            ],
            out_kernel: (3, 7),
            out_padding: (1, 3),
            enc_fc: [512, 256, 128],
            dec_fc: [128, 256, 512],
            film_embed_dim: 8,
            film_trunk: [32, 64, 128],
            scale_factor: 0.125,
        }
    }

    /// Miniature 4 × 8 network for derivative checks.
    pub fn mini(variant: Variant, num_instruments: usize) -> Self {
        ModelConfig {
            variant,
            bins: 8,
            frames: 4,
            latent_dim: 3,
            num_instruments,
            conv: [
                ConvSpec { channels: 3, kernel: (3, 3), stride: (2, 2), padding: (1, 1) },
                ConvSpec { channels: 4, kernel: (2, 3), stride: (1, 2), padding: (0, 1) },
            ],
            out_kernel: (3, 3),
            out_padding: (1, 1),
            enc_fc: [8, 6, 5],
            dec_fc: [5, 6, 8],
            film_embed_dim: 3,
            film_trunk: [4, 6, 8],
            scale_factor: 1.0 / 256.0,
        }
    }

    pub fn chunk_len(&self) -> usize {
        self.frames * self.bins
    }

    /// Whether labels given to the FiLM generators carry the instrument.
    pub fn conditions_on_instrument(&self) -> bool {
        self.variant == Variant::MoveFpod
    }

    pub fn geometry(&self) -> Result<Geometry> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be at least 1"));
        }
        if self.variant.paired() && self.num_instruments != 2 {
            return Err(Error::config(format!(
                "{} pairs exactly 2 domains, got {}",
                self.variant, self.num_instruments
            )));
        }
        if self.num_instruments < 2 {
            return Err(Error::config("at least 2 instruments are required"));
        }
        let [c0, c1] = self.conv;
        let bad = |what: &str| Error::config(format!("{what} does not fit a {}x{} chunk", self.frames, self.bins));
        let e0 = ConvGeom::new(1, self.frames, self.bins, c0.channels, c0.kernel, c0.stride, c0.padding)
            .ok_or_else(|| bad("first convolution"))?;
        let e1 = ConvGeom::new(c0.channels, e0.h_out, e0.w_out, c1.channels, c1.kernel, c1.stride, c1.padding)
            .ok_or_else(|| bad("second convolution"))?;
        // Adjoint geometries: the decoder's transpose convolutions undo e1 then e0.
        let d4 = ConvGeom::new(c1.channels, e0.h_out, e0.w_out, c1.channels, c1.kernel, c1.stride, c1.padding)
            .ok_or_else(|| bad("second convolution"))?;
        let d5 = ConvGeom::new(c0.channels, self.frames, self.bins, c1.channels, c0.kernel, c0.stride, c0.padding)
            .ok_or_else(|| bad("first convolution"))?;
        let head = ConvGeom::new(1, self.frames, self.bins, c0.channels, self.out_kernel, (1, 1), self.out_padding)
            .ok_or_else(|| bad("output kernel"))?;
        if head.h_out != self.frames || head.w_out != self.bins {
            return Err(Error::config("output head must preserve the chunk shape"));
        }
        if e0.h_out * e0.w_out < 2 || e1.h_out * e1.w_out < 2 {
            return Err(Error::config("convolution maps must keep at least 2 positions for instance norm"));
        }
        if self.enc_fc.iter().chain(&self.dec_fc).chain(&self.film_trunk).any(|w| *w < 2) {
            return Err(Error::config("dense widths must be at least 2"));
        }
        Ok(Geometry {
            flat: e1.out_len(),
            e0,
            e1,
            d4,
            d5,
            head,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub e0: ConvGeom,
    pub e1: ConvGeom,
    pub flat: usize,
    pub d4: ConvGeom,
    pub d5: ConvGeom,
    pub head: ConvGeom,
}

/// Posterior parameters `q(z|x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Option<Vec<f64>>,
}

/// Decoder Gaussian over one chunk, `[frames × bins]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOutput {
    pub mu_x: Vec<f64>,
    pub sigma_x: Vec<f64>,
}

impl GaussianOutput {
    /// Generation-path output, `tanh(mu_x)` in `[-1, 1]`.
    pub fn generated(&self) -> Vec<f64> {
        self.mu_x.iter().map(|v| v.tanh()).collect()
    }
}

/// `z = μ + σ ⊙ ε`, `ε ~ N(0, I)`.
pub fn reparameterize(code: &LatentCode, rng: &mut impl Rng) -> Vec<f64> {
    code.mu
        .iter()
        .zip(&code.sigma)
        .map(|(m, s)| {
            let e: f64 = rng.sample(StandardNormal);
            m + s * e
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    e0: Vec<Conv>,
    e1: Vec<Conv>,
    e2: Vec<Dense>,
    e3: Dense,
    e4: Dense,
    z_mu: Dense,
    z_sigma: Dense,
    d0: Dense,
    d1: Dense,
    d2: Dense,
    d3: Vec<Dense>,
    d4: Vec<Conv>,
    d5: Vec<Conv>,
    x_mu: Vec<Conv>,
    x_sigma: Vec<Conv>,
    film_enc: Option<FilmGenerator>,
    film_dec: Option<FilmGenerator>,
}

/// One domain's share of a training batch.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub domain: usize,
    /// `[N × frames × bins]` normalized chunks.
    pub data: Vec<f64>,
    pub labels: Vec<ConditionLabel>,
}

/// MMD reference samples for one target domain.
#[derive(Clone, Debug)]
pub struct TargetSet {
    /// `[M × frames·bins]`
    pub data: Vec<f64>,
    /// Cached `E[k(y, y')]`, if known.
    pub self_term: Option<f64>,
}

pub struct LossPass {
    pub breakdown: LossBreakdown,
    pub grads: Option<Gradients>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    geometry: Geometry,
    params: ParamStore,
    layers: Layers,
    film_enabled: bool,
}

impl Model {
    /// Builds a model with Xavier-uniform weights, zero biases and
    /// zero-initialized FiLM heads.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let geometry = config.geometry()?;
        let mut store = ParamStore::new();
        let slots = if config.variant.paired() { 2 } else { 1 };
        let cat = if config.variant == Variant::UnitMmdCpo {
            encode_onehot_len(&config)
        } else {
            0
        };
        let g = geometry;
        let [c0, c1] = config.conv;
        let dense = |store: &mut ParamStore, name: String, d_in: usize, d_out: usize, rng: &mut dyn rand::RngCore| Dense {
            w: store.insert(format!("{name}.w"), xavier_uniform(&[d_out, d_in], d_in, d_out, rng)),
            b: store.insert(format!("{name}.b"), Tensor::zeros(&[d_out])),
        };
        let conv = |store: &mut ParamStore, name: String, geom: ConvGeom, transpose: bool, rng: &mut dyn rand::RngCore| {
            let k = geom.kh * geom.kw;
            let shape = [geom.c_out, geom.c_in, geom.kh, geom.kw];
            let bias = if transpose { geom.c_in } else { geom.c_out };
            Conv {
                w: store.insert(format!("{name}.w"), xavier_uniform(&shape, geom.c_in * k, geom.c_out * k, rng)),
                b: store.insert(format!("{name}.b"), Tensor::zeros(&[bias])),
                geom,
            }
        };
        let tag = |layer: &str, d: usize| {
            if slots == 1 {
                layer.to_string()
            } else {
                format!("{layer}.d{d}")
            }
        };
        let per_domain = |f: &mut dyn FnMut(usize) -> Conv| (0..slots).map(f).collect::<Vec<_>>();
        let e0 = per_domain(&mut |d| conv(&mut store, tag("enc0", d), g.e0, false, rng));
        let e1 = per_domain(&mut |d| conv(&mut store, tag("enc1", d), g.e1, false, rng));
        let e2 = (0..slots)
            .map(|d| dense(&mut store, tag("enc2", d), g.flat, config.enc_fc[0], rng))
            .collect();
        let e3 = dense(&mut store, "enc3".into(), config.enc_fc[0] + cat, config.enc_fc[1], rng);
        let e4 = dense(&mut store, "enc4".into(), config.enc_fc[1], config.enc_fc[2], rng);
        let z_mu = dense(&mut store, "z_mu".into(), config.enc_fc[2], config.latent_dim, rng);
        let z_sigma = dense(&mut store, "z_sigma".into(), config.enc_fc[2], config.latent_dim, rng);
        let d0 = dense(&mut store, "dec0".into(), config.latent_dim + cat, config.dec_fc[0], rng);
        let d1 = dense(&mut store, "dec1".into(), config.dec_fc[0], config.dec_fc[1], rng);
        let d2 = dense(&mut store, "dec2".into(), config.dec_fc[1], config.dec_fc[2], rng);
        let d3 = (0..slots)
            .map(|d| dense(&mut store, tag("dec3", d), config.dec_fc[2], g.flat, rng))
            .collect();
        let d4 = per_domain(&mut |d| conv(&mut store, tag("dec4", d), g.d4, true, rng));
        let d5 = per_domain(&mut |d| conv(&mut store, tag("dec5", d), g.d5, true, rng));
        let x_mu = per_domain(&mut |d| conv(&mut store, tag("x_mu", d), g.head, true, rng));
        let x_sigma = per_domain(&mut |d| conv(&mut store, tag("x_sigma", d), g.head, true, rng));
        let slot = |layer: &str, size: usize| FilmSlot {
            layer: layer.into(),
            size,
        };
        let (enc_slots, dec_slots) = match config.variant {
            Variant::UnitMmdCpo => (vec![], vec![]),
            Variant::MoveStarFpo => (
                vec![slot("enc3", config.enc_fc[1]), slot("enc4", config.enc_fc[2])],
                vec![slot("dec0", config.dec_fc[0]), slot("dec1", config.dec_fc[1])],
            ),
            Variant::MoveFpod => (
                vec![
                    slot("enc0", c0.channels),
                    slot("enc1", c1.channels),
                    slot("enc3", config.enc_fc[1]),
                    slot("enc4", config.enc_fc[2]),
                ],
                vec![
                    slot("dec0", config.dec_fc[0]),
                    slot("dec1", config.dec_fc[1]),
                    slot("dec4", c1.channels),
                    slot("dec5", c0.channels),
                ],
            ),
        };
        let instruments = config.conditions_on_instrument().then_some(config.num_instruments);
        let mut generator = |prefix: &str, slots: Vec<FilmSlot>, rng: &mut dyn rand::RngCore| {
            (!slots.is_empty()).then(|| {
                FilmGenerator::new(
                    &mut store,
                    prefix,
                    instruments,
                    config.film_embed_dim,
                    &config.film_trunk,
                    slots,
                    rng,
                )
            })
        };
        let film_enc = generator("film_enc", enc_slots, rng);
        let film_dec = generator("film_dec", dec_slots, rng);
        Ok(Model {
            geometry,
            params: store,
            layers: Layers {
                e0,
                e1,
                e2,
                e3,
                e4,
                z_mu,
                z_sigma,
                d0,
                d1,
                d2,
                d3,
                d4,
                d5,
                x_mu,
                x_sigma,
                film_enc,
                film_dec,
            },
            config,
            film_enabled: true,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The same network with every FiLM layer removed.
    pub fn without_film(&self) -> Model {
        Model {
            film_enabled: false,
            ..self.clone()
        }
    }

    pub fn film_enabled(&self) -> bool {
        self.film_enabled
    }

    pub fn film_generators(&self) -> (Option<&FilmGenerator>, Option<&FilmGenerator>) {
        (self.layers.film_enc.as_ref(), self.layers.film_dec.as_ref())
    }

    /// Domain-specific stack index for `domain`.
    fn slot(&self, domain: usize) -> usize {
        if self.config.variant.paired() {
            domain
        } else {
            0
        }
    }

    /// Validates a label and returns its domain.
    pub fn domain_of(&self, label: &ConditionLabel) -> Result<usize> {
        let d = label
            .instrument
            .ok_or_else(|| Error::Variant("label has no instrument/domain".into()))?;
        if d >= self.config.num_instruments {
            return Err(Error::Variant(format!(
                "domain {d} but the model has {} domains",
                self.config.num_instruments
            )));
        }
        self.condition(label).validate(self.instruments())?;
        Ok(d)
    }

    fn instruments(&self) -> Option<usize> {
        self.config
            .conditions_on_instrument()
            .then_some(self.config.num_instruments)
    }

    /// The label as seen by the conditioning layers.
    fn condition(&self, label: &ConditionLabel) -> ConditionLabel {
        if self.config.conditions_on_instrument() {
            *label
        } else {
            label.with_instrument(None)
        }
    }

    fn onehots(&self, g: &mut Graph<'_>, labels: &[ConditionLabel]) -> Result<Var> {
        let k = self.instruments();
        let mut data = Vec::with_capacity(labels.len() * encode_onehot_len(&self.config));
        for l in labels {
            data.extend(encode_onehot(&self.condition(l), k)?);
        }
        let w = data.len() / labels.len().max(1);
        Ok(g.constant(Tensor::new(vec![labels.len(), w], data)))
    }

    fn film_pairs(
        &self,
        g: &mut Graph<'_>,
        gen: &Option<FilmGenerator>,
        labels: &[ConditionLabel],
    ) -> Result<Vec<(String, (Var, Var))>> {
        match gen {
            Some(gen) if self.film_enabled => {
                let conds: Vec<ConditionLabel> = labels.iter().map(|l| self.condition(l)).collect();
                let pairs = gen.generate(g, &conds)?;
                Ok(gen.slots().iter().map(|s| s.layer.clone()).zip(pairs).collect())
            }
            _ => Ok(Vec::new()),
        }
    }

    /// Instance norm, leaky ReLU, then FiLM when `layer` is modulated.
    fn norm_act(
        &self,
        g: &mut Graph<'_>,
        h: Var,
        group: usize,
        layer: &str,
        film: &[(String, (Var, Var))],
    ) -> Result<Var> {
        let h = g.instance_norm(h, group, NORM_EPS)?;
        let mut h = g.leaky_relu(h, LEAKY_SLOPE);
        if let Some((_, (s, b))) = film.iter().find(|(l, _)| l == layer) {
            h = g.film(h, *s, *b)?;
        }
        check(g, h, layer)
    }

    fn dense(&self, g: &mut Graph<'_>, x: Var, l: Dense) -> Result<Var> {
        let (w, b) = (g.param(l.w), g.param(l.b));
        g.linear(x, w, b)
    }

    fn conv(&self, g: &mut Graph<'_>, x: Var, l: Conv, transpose: bool) -> Result<Var> {
        let (w, b) = (g.param(l.w), g.param(l.b));
        if transpose {
            g.conv_transpose2d(x, w, b, l.geom)
        } else {
            g.conv2d(x, w, b, l.geom)
        }
    }

    /// Encoder on `x: [N, 1, frames, bins]`; every label must belong to `domain`.
    pub fn encode_graph(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        labels: &[ConditionLabel],
        domain: usize,
    ) -> Result<(Var, Var)> {
        let s = self.slot(domain);
        let l = &self.layers;
        let film = self.film_pairs(g, &l.film_enc, labels)?;
        let geo = self.geometry;
        let h = self.conv(g, x, l.e0[s], false)?;
        let h = self.norm_act(g, h, geo.e0.h_out * geo.e0.w_out, "enc0", &film)?;
        let h = self.conv(g, h, l.e1[s], false)?;
        let h = self.norm_act(g, h, geo.e1.h_out * geo.e1.w_out, "enc1", &film)?;
        let n = labels.len();
        let h = g.reshape(h, &[n, geo.flat])?;
        let h = self.dense(g, h, l.e2[s])?;
        let mut h = self.norm_act(g, h, self.config.enc_fc[0], "enc2", &film)?;
        if self.config.variant == Variant::UnitMmdCpo {
            let c = self.onehots(g, labels)?;
            h = g.concat(&[h, c])?;
        }
        let h = self.dense(g, h, l.e3)?;
        let h = self.norm_act(g, h, self.config.enc_fc[1], "enc3", &film)?;
        let h = self.dense(g, h, l.e4)?;
        let h = self.norm_act(g, h, self.config.enc_fc[2], "enc4", &film)?;
        let mu = self.dense(g, h, l.z_mu)?;
        let raw = self.dense(g, h, l.z_sigma)?;
        let sigma = sigma_head(g, raw, Z_SIGMA_RANGE);
        Ok((check(g, mu, "z_mu")?, check(g, sigma, "z_sigma")?))
    }

    /// Decoder on `z: [N, latent]`; returns `(mu_x, sigma_x)` as `[N, 1, frames, bins]`.
    pub fn decode_graph(
        &self,
        g: &mut Graph<'_>,
        z: Var,
        labels: &[ConditionLabel],
        domain: usize,
    ) -> Result<(Var, Var)> {
        let s = self.slot(domain);
        let l = &self.layers;
        let film = self.film_pairs(g, &l.film_dec, labels)?;
        let geo = self.geometry;
        let n = labels.len();
        let mut h = z;
        if self.config.variant == Variant::UnitMmdCpo {
            let c = self.onehots(g, labels)?;
            h = g.concat(&[h, c])?;
        }
        let h = self.dense(g, h, l.d0)?;
        let h = self.norm_act(g, h, self.config.dec_fc[0], "dec0", &film)?;
        let h = self.dense(g, h, l.d1)?;
        let h = self.norm_act(g, h, self.config.dec_fc[1], "dec1", &film)?;
        let h = self.dense(g, h, l.d2)?;
        let h = self.norm_act(g, h, self.config.dec_fc[2], "dec2", &film)?;
        let h = self.dense(g, h, l.d3[s])?;
        let h = self.norm_act(g, h, geo.flat, "dec3", &film)?;
        let h = g.reshape(h, &[n, geo.e1.c_out, geo.e1.h_out, geo.e1.w_out])?;
        let h = self.conv(g, h, l.d4[s], true)?;
        let h = self.norm_act(g, h, geo.e0.h_out * geo.e0.w_out, "dec4", &film)?;
        let h = self.conv(g, h, l.d5[s], true)?;
        let h = self.norm_act(g, h, self.config.chunk_len(), "dec5", &film)?;
        let mu = self.conv(g, h, l.x_mu[s], true)?;
        let raw = self.conv(g, h, l.x_sigma[s], true)?;
        let sigma = sigma_head(g, raw, X_SIGMA_RANGE);
        Ok((check(g, mu, "x_mu")?, check(g, sigma, "x_sigma")?))
    }

    fn chunk_var(&self, g: &mut Graph<'_>, data: Vec<f64>) -> Result<Var> {
        let len = self.config.chunk_len();
        if data.is_empty() || data.len() % len != 0 {
            return Err(Error::shape(format!(
                "{} values are not a whole number of {}x{} chunks",
                data.len(),
                self.config.frames,
                self.config.bins
            )));
        }
        let n = data.len() / len;
        Ok(g.constant(Tensor::new(vec![n, 1, self.config.frames, self.config.bins], data)))
    }

    /// Groups row indices by domain, preserving order within each group.
    fn by_domain(&self, labels: &[ConditionLabel]) -> Result<Vec<(usize, Vec<usize>)>> {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            let d = self.domain_of(l)?;
            match groups.iter_mut().find(|(gd, _)| *gd == d) {
                Some((_, v)) => v.push(i),
                None => groups.push((d, vec![i])),
            }
        }
        Ok(groups)
    }

    /// Posterior parameters for each chunk (`chunks[i]` of length frames·bins).
    pub fn encode(&self, chunks: &[&[f64]], labels: &[ConditionLabel]) -> Result<Vec<LatentCode>> {
        if chunks.len() != labels.len() {
            return Err(Error::shape("one label per chunk required"));
        }
        let len = self.config.chunk_len();
        if let Some(c) = chunks.iter().find(|c| c.len() != len) {
            return Err(Error::shape(format!("chunk of {} values, model expects {len}", c.len())));
        }
        let mut out = vec![None; chunks.len()];
        for (d, rows) in self.by_domain(labels)? {
            let mut g = Graph::new(&self.params);
            let data = rows.iter().flat_map(|i| chunks[*i].iter().copied()).collect();
            let x = self.chunk_var(&mut g, data)?;
            let sub: Vec<ConditionLabel> = rows.iter().map(|i| labels[*i]).collect();
            let (mu, sigma) = self.encode_graph(&mut g, x, &sub, d)?;
            for (r, i) in rows.iter().enumerate() {
                out[*i] = Some(LatentCode {
                    mu: g.value(mu).row(r).to_vec(),
                    sigma: g.value(sigma).row(r).to_vec(),
                    z: None,
                });
            }
        }
        Ok(out.into_iter().map(|c| c.expect("every row encoded")).collect())
    }

    pub fn decode(&self, zs: &[&[f64]], labels: &[ConditionLabel]) -> Result<Vec<GaussianOutput>> {
        if zs.len() != labels.len() {
            return Err(Error::shape("one label per latent point required"));
        }
        if let Some(z) = zs.iter().find(|z| z.len() != self.config.latent_dim) {
            return Err(Error::shape(format!(
                "latent point of dimension {}, model uses {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let mut out = vec![None; zs.len()];
        for (d, rows) in self.by_domain(labels)? {
            let mut g = Graph::new(&self.params);
            let data = rows.iter().flat_map(|i| zs[*i].iter().copied()).collect();
            let z = g.constant(Tensor::new(vec![rows.len(), self.config.latent_dim], data));
            let sub: Vec<ConditionLabel> = rows.iter().map(|i| labels[*i]).collect();
            let (mu, sigma) = self.decode_graph(&mut g, z, &sub, d)?;
            for (r, i) in rows.iter().enumerate() {
                out[*i] = Some(GaussianOutput {
                    mu_x: g.value(mu).row(r).to_vec(),
                    sigma_x: g.value(sigma).row(r).to_vec(),
                });
            }
        }
        Ok(out.into_iter().map(|c| c.expect("every row decoded")).collect())
    }

    /// Encodes with the source labels, decodes the posterior means with the
    /// target labels and returns `tanh(mu_x)` per chunk.
    pub fn transfer(
        &self,
        chunks: &[&[f64]],
        source: &[ConditionLabel],
        target: &[ConditionLabel],
    ) -> Result<Vec<Vec<f64>>> {
        if source.len() != target.len() {
            return Err(Error::shape("one target label per source label required"));
        }
        let codes = self.encode(chunks, source)?;
        let zs: Vec<&[f64]> = codes.iter().map(|c| c.mu.as_slice()).collect();
        Ok(self.decode(&zs, target)?.iter().map(GaussianOutput::generated).collect())
    }

    /// Reconstruction through the posterior mean.
    pub fn reconstruct(&self, chunks: &[&[f64]], labels: &[ConditionLabel]) -> Result<Vec<Vec<f64>>> {
        self.transfer(chunks, labels, labels)
    }

    /// Differentiable pass over one batch computing every loss component.
    ///
    /// `targets[t]` holds the MMD reference set of domain `t`; it may be empty
    /// when the MMD gate is off.
    pub fn forward_loss_pass(
        &self,
        batch: &[DomainBatch],
        targets: &[TargetSet],
        weights: LossWeights,
        gates: Gates,
        bank: &KernelBank,
        with_grads: bool,
        rng: &mut impl Rng,
    ) -> Result<LossPass> {
        let k = self.config.num_instruments;
        let latent = self.config.latent_dim;
        let len = self.config.chunk_len();
        let mut g = Graph::new(&self.params);
        let mut parts = LossParts::default();
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let normal = |n: usize, rng: &mut dyn rand::RngCore| {
            Tensor::new(vec![n, latent], (0..n * latent).map(|_| rng.sample(StandardNormal)).collect())
        };
        for b in batch {
            let d = b.domain;
            let n = b.labels.len();
            if n == 0 {
                continue;
            }
            if b.data.len() != n * len {
                return Err(Error::shape(format!("domain {d} batch has {} values for {n} chunks", b.data.len())));
            }
            for l in &b.labels {
                if self.domain_of(l)? != d {
                    return Err(Error::Variant(format!("label {l:?} filed under domain {d}")));
                }
            }
            let x = self.chunk_var(&mut g, b.data.clone())?;
            let (mu_z, sigma_z) = self.encode_graph(&mut g, x, &b.labels, d)?;
            let eps = g.constant(normal(n, rng));
            let noise = g.mul(sigma_z, eps)?;
            let z = g.add(mu_z, noise)?;
            let (mu_x, sigma_x) = self.decode_graph(&mut g, z, &b.labels, d)?;
            let mean = g.tanh(mu_x);
            let nll = g.gaussian_nll(x, mean, sigma_x)?;
            let kld = g.kld(mu_z, sigma_z)?;
            parts.nll_recon.insert(d, g.value(nll).item());
            parts.kld.insert(d, g.value(kld).item());
            terms.push((nll, 1.0));
            terms.push((kld, weights.beta));
            if !gates.mmd_on && !gates.cc_on {
                continue;
            }
            let mut cc_terms = Vec::new();
            for t in (0..k).filter(|t| *t != d) {
                let tl: Vec<ConditionLabel> = b.labels.iter().map(|l| l.with_instrument(Some(t))).collect();
                let (mu_t, _) = self.decode_graph(&mut g, z, &tl, t)?;
                let moved = g.tanh(mu_t);
                if gates.mmd_on {
                    let target = targets
                        .get(t)
                        .filter(|s| !s.data.is_empty())
                        .ok_or_else(|| Error::Insufficient(format!("no MMD targets for domain {t}")))?;
                    let flat = g.reshape(moved, &[n, len])?;
                    let y = g.constant(Tensor::new(vec![target.data.len() / len, len], target.data.clone()));
                    let m = g.mmd(flat, y, bank, target.self_term)?;
                    parts.mmd_transfer.insert((d, t), g.value(m).item());
                    terms.push((m, weights.lambda_mmd));
                }
                if gates.cc_on {
                    let (mu_c, sigma_c) = self.encode_graph(&mut g, moved, &tl, t)?;
                    let eps = g.constant(normal(n, rng));
                    let noise = g.mul(sigma_c, eps)?;
                    let zc = g.add(mu_c, noise)?;
                    let (mu_r, sigma_r) = self.decode_graph(&mut g, zc, &b.labels, d)?;
                    let back = g.tanh(mu_r);
                    cc_terms.push(g.gaussian_nll(x, back, sigma_r)?);
                }
            }
            if !cc_terms.is_empty() {
                let w = 1.0 / cc_terms.len() as f64;
                let avg: Vec<(Var, f64)> = cc_terms.iter().map(|v| (*v, w)).collect();
                let cc = g.weighted_sum(&avg);
                parts.cc_nll.insert(d, g.value(cc).item());
                terms.push((cc, weights.lambda_cc));
            }
        }
        if terms.is_empty() {
            return Err(Error::Insufficient("empty batch".into()));
        }
        let total = g.weighted_sum(&terms);
        let breakdown = composite_loss(&parts, weights, gates);
        let value = g.value(total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("total loss".into()));
        }
        let grads = with_grads.then(|| g.backward(total));
        Ok(LossPass { breakdown, grads })
    }
}

fn encode_onehot_len(config: &ModelConfig) -> usize {
    crate::conditioning::onehot_len(config.conditions_on_instrument().then_some(config.num_instruments))
}

/// `clamp(softplus(raw) + 1e-3, lo, hi)`.
fn sigma_head(g: &mut Graph<'_>, raw: Var, (lo, hi): (f64, f64)) -> Var {
    let sp = g.softplus(raw);
    let s = g.affine(sp, 1.0, SIGMA_OFFSET);
    g.clamp(s, lo, hi)
}

fn check(g: &Graph<'_>, v: Var, layer: &str) -> Result<Var> {
    if g.value(v).is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("activations of layer {layer}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(model: &Model, n: usize, rng: &mut ChaCha8Rng) -> Vec<DomainBatch> {
        let len = model.config().chunk_len();
        (0..model.config().num_instruments)
            .map(|d| DomainBatch {
                domain: d,
                data: (0..n * len).map(|_| rng.random_range(-1.0..1.0)).collect(),
                labels: (0..n).map(|i| ConditionLabel::new((i * 5 + d) % 12, (i + 2) % 9, Some(d))).collect(),
            })
            .collect()
    }

    fn targets(model: &Model, m: usize, rng: &mut ChaCha8Rng) -> Vec<TargetSet> {
        let len = model.config().chunk_len();
        (0..model.config().num_instruments)
            .map(|_| TargetSet {
                data: (0..m * len).map(|_| rng.random_range(-1.0..1.0)).collect(),
                self_term: None,
            })
            .collect()
    }

    #[test]
    fn presets_have_consistent_geometry() {
        for v in Variant::ALL {
            let g = ModelConfig::desk(v, 2).geometry().unwrap();
            assert_eq!((g.e0.h_out, g.e0.w_out, g.e1.h_out, g.e1.w_out), (5, 43, 1, 15));
            let g = ModelConfig::paper(v, 2).geometry().unwrap();
            assert_eq!(g.flat, 64 * 56);
            ModelConfig::mini(v, 2).geometry().unwrap();
        }
        assert!(ModelConfig::desk(Variant::UnitMmdCpo, 3).geometry().is_err());
        assert!(ModelConfig::desk(Variant::MoveFpod, 1).geometry().is_err());
        ModelConfig::desk(Variant::MoveFpod, 4).geometry().unwrap();
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("gan".parse::<Variant>().is_err());
    }

    #[test]
    fn shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new(ModelConfig::mini(Variant::MoveFpod, 2), &mut rng).unwrap();
        let chunk: Vec<f64> = (0..32).map(|i| (i as f64 / 16.0) - 1.0).collect();
        let label = ConditionLabel::new(2, 3, Some(1));
        let codes = model.encode(&[&chunk, &chunk], &[label, label]).unwrap();
        assert_eq!(codes[0].mu.len(), 3);
        assert_eq!(codes[0], codes[1]);
        assert!(codes[0].sigma.iter().all(|s| *s >= 1e-4 && *s <= 1e2));
        let out = model.decode(&[&codes[0].mu], &[label]).unwrap();
        assert_eq!(out[0].mu_x.len(), 32);
        assert!(out[0].generated().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(model.decode(&[&[0.0, 0.0]], &[label]).is_err());
        assert!(model.encode(&[&chunk], &[label.with_instrument(None)]).is_err());
    }

    #[test]
    fn reparameterize_zero_sigma_is_mean() {
        let code = LatentCode {
            mu: vec![0.5, -1.0, 2.0],
            sigma: vec![0.0; 3],
            z: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(reparameterize(&code, &mut rng), code.mu);
    }

    #[test]
    fn film_is_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Model::new(ModelConfig::mini(Variant::MoveFpod, 2), &mut rng).unwrap();
        let b = batch(&model, 3, &mut rng);
        let t = targets(&model, 5, &mut rng);
        let gates = Gates { mmd_on: true, cc_on: true };
        let run = |m: &Model| {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            m.forward_loss_pass(&b, &t, LossWeights::default(), gates, &KernelBank::default(), false, &mut r)
                .unwrap()
                .breakdown
                .total
        };
        assert_eq!(run(&model), run(&model.without_film()));
    }

    #[test]
    fn beta_scales_only_kld() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = Model::new(ModelConfig::mini(Variant::MoveStarFpo, 2), &mut rng).unwrap();
        let b = batch(&model, 2, &mut rng);
        let run = |beta: f64| {
            let mut r = ChaCha8Rng::seed_from_u64(1);
            let w = LossWeights { beta, ..LossWeights::default() };
            model
                .forward_loss_pass(&b, &[], w, Gates::default(), &KernelBank::default(), false, &mut r)
                .unwrap()
                .breakdown
        };
        let (a, c) = (run(0.5), run(1.0));
        assert_eq!(a.nll_recon, c.nll_recon);
        let kld: f64 = a.kld.values().sum();
        assert!(((c.total - a.total) - 0.5 * kld).abs() < 1e-12 * c.total.abs().max(1.0));
    }

    #[test]
    fn smoke_gradients_are_finite_for_all_variants() {
        for v in Variant::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let model = Model::new(ModelConfig::mini(v, 2), &mut rng).unwrap();
            let b = batch(&model, 1, &mut rng);
            let t = targets(&model, 4, &mut rng);
            let gates = Gates { mmd_on: true, cc_on: true };
            let pass = model
                .forward_loss_pass(&b, &t, LossWeights::default(), gates, &KernelBank::default(), true, &mut rng)
                .unwrap();
            assert!(pass.breakdown.total.is_finite());
            assert_eq!(pass.breakdown.mmd_transfer.len(), 2);
            let grads = pass.grads.unwrap();
            for id in model.params().ids() {
                assert!(grads.get_or_zeros(id, model.params()).is_finite(), "{}", model.params().name(id));
            }
        }
    }

    #[test]
    fn paired_variants_share_dense_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::new(ModelConfig::mini(Variant::UnitMmdCpo, 2), &mut rng).unwrap();
        let names: Vec<&str> = model.params().iter().map(|(_, n, _)| n).collect();
        assert!(names.contains(&"enc0.d0.w") && names.contains(&"enc0.d1.w"));
        assert!(names.contains(&"enc3.w") && !names.contains(&"enc3.d0.w"));
        // Updating a shared layer moves both domains' outputs.
        let chunk = vec![0.3; 32];
        let l0 = ConditionLabel::new(1, 1, Some(0));
        let l1 = ConditionLabel::new(1, 1, Some(1));
        let before = model.encode(&[&chunk, &chunk], &[l0, l1]).unwrap();
        let mut moved = model.clone();
        let id = moved.params().id("z_mu.b").unwrap();
        moved.params_mut().get_mut(id).data_mut()[0] += 0.25;
        let after = moved.encode(&[&chunk, &chunk], &[l0, l1]).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!((a.mu[0] - b.mu[0] - 0.25).abs() < 1e-12);
        }
    }
}
