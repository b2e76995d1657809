//! Categorical conditions: labels, one-hot vectors and FiLM generators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PITCH_CLASSES: usize = 12;
pub const OCTAVES: usize = 9;
/// Instance-norm epsilon shared by every normalized layer.
pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionLabel {
    pub pitch_class: usize,
    pub octave: usize,
    pub instrument: Option<usize>,
}

impl ConditionLabel {
    pub fn new(pitch_class: usize, octave: usize, instrument: Option<usize>) -> Self {
        ConditionLabel {
            pitch_class,
            octave,
            instrument,
        }
    }

    pub fn with_instrument(self, instrument: Option<usize>) -> Self {
        ConditionLabel { instrument, ..self }
    }

    /// Checks ranges; `instruments` is `Some(K)` for domain-conditioned models.
    pub fn validate(&self, instruments: Option<usize>) -> Result<()> {
        if self.pitch_class >= PITCH_CLASSES {
            return Err(Error::range(format!("pitch class {} not in 0..12", self.pitch_class)));
        }
        if self.octave >= OCTAVES {
            return Err(Error::range(format!("octave {} not in 0..9", self.octave)));
        }
        match (self.instrument, instruments) {
            (Some(i), Some(k)) if i >= k => Err(Error::range(format!("instrument {i} not in 0..{k}"))),
            (Some(_), Some(_)) | (None, None) => Ok(()),
            (Some(_), None) => Err(Error::Variant(
                "instrument given to a pitch/octave-only condition".into(),
            )),
            (None, Some(_)) => Err(Error::Variant("condition lacks the instrument".into())),
        }
    }
}

pub fn onehot_len(instruments: Option<usize>) -> usize {
    PITCH_CLASSES + OCTAVES + instruments.unwrap_or(0)
}

pub fn encode_onehot(label: &ConditionLabel, instruments: Option<usize>) -> Result<Vec<f64>> {
    label.validate(instruments)?;
    let mut v = vec![0.0; onehot_len(instruments)];
    v[label.pitch_class] = 1.0;
    v[PITCH_CLASSES + label.octave] = 1.0;
    if let Some(i) = label.instrument {
        v[PITCH_CLASSES + OCTAVES + i] = 1.0;
    }
    Ok(v)
}

pub fn decode_onehot(v: &[f64], instruments: Option<usize>) -> Result<ConditionLabel> {
    if v.len() != onehot_len(instruments) {
        return Err(Error::shape(format!(
            "one-hot of length {} for {} classes",
            v.len(),
            onehot_len(instruments)
        )));
    }
    let hot = |group: &[f64]| -> Result<usize> {
        let ones: Vec<usize> = (0..group.len()).filter(|i| group[*i] == 1.0).collect();
        if ones.len() != 1 || group.iter().any(|x| *x != 0.0 && *x != 1.0) {
            return Err(Error::range("group is not one-hot"));
        }
        Ok(ones[0])
    };
    let pc = hot(&v[..PITCH_CLASSES])?;
    let oct = hot(&v[PITCH_CLASSES..PITCH_CLASSES + OCTAVES])?;
    let instrument = match instruments {
        Some(_) => Some(hot(&v[PITCH_CLASSES + OCTAVES..])?),
        None => None,
    };
    Ok(ConditionLabel::new(pc, oct, instrument))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilmAxis {
    /// Last axis of a `[.., F]` tensor.
    Feature,
    /// First axis of a `[C, ..]` map.
    Channel,
}

/// `h' = scale ⊙ h + bias` broadcast along `axis`.
pub fn film_modulate(h: &Tensor, scale: &[f64], bias: &[f64], axis: FilmAxis) -> Result<Tensor> {
    let shape = h.shape();
    let n = match axis {
        FilmAxis::Feature => *shape.last().unwrap_or(&1),
        FilmAxis::Channel => *shape.first().unwrap_or(&1),
    };
    if shape.is_empty() || scale.len() != n || bias.len() != n {
        return Err(Error::shape(format!(
            "film over {:?} with {} scales, {} biases",
            shape,
            scale.len(),
            bias.len()
        )));
    }
    let plane = h.len() / n;
    let data = h
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = match axis {
                FilmAxis::Feature => i % n,
                FilmAxis::Channel => i / plane,
            };
            scale[c] * v + bias[c]
        })
        .collect();
    Ok(Tensor::new(shape.to_vec(), data))
}

/// One modulated layer: its name and the width of its normalization axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilmSlot {
    pub layer: String,
    pub size: usize,
}

/// Per-layer scale and bias for one label.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams {
    pub layers: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// Embeddings, a three-layer trunk and one zero-initialized head emitting
/// `(δ, bias)` for every slot. The applied scale is `1 + δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmGenerator {
    pitch_table: ParamId,
    octave_table: ParamId,
    instrument_table: Option<ParamId>,
    instruments: Option<usize>,
    trunk: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
    slots: Vec<FilmSlot>,
}

impl FilmGenerator {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        instruments: Option<usize>,
        embed_dim: usize,
        trunk_widths: &[usize],
        slots: Vec<FilmSlot>,
        rng: &mut R,
    ) -> Self {
        let mut table = |name: &str, vocab: usize, rng: &mut R| {
            store.insert(
                format!("{prefix}.embed.{name}"),
                xavier_uniform(&[vocab, embed_dim], vocab, embed_dim, rng),
            )
        };
        let pitch_table = table("pitch", PITCH_CLASSES, rng);
        let octave_table = table("octave", OCTAVES, rng);
        let instrument_table = instruments.map(|k| table("instrument", k, rng));
        let mut width = embed_dim * if instruments.is_some() { 3 } else { 2 };
        let mut trunk = Vec::new();
        for (i, w) in trunk_widths.iter().enumerate() {
            let wid = store.insert(format!("{prefix}.trunk{i}.w"), xavier_uniform(&[*w, width], width, *w, rng));
            let bid = store.insert(format!("{prefix}.trunk{i}.b"), Tensor::zeros(&[*w]));
            trunk.push((wid, bid));
            width = *w;
        }
        let out: usize = slots.iter().map(|s| 2 * s.size).sum();
        let head = (
            store.insert(format!("{prefix}.head.w"), Tensor::zeros(&[out, width])),
            store.insert(format!("{prefix}.head.b"), Tensor::zeros(&[out])),
        );
        FilmGenerator {
            pitch_table,
            octave_table,
            instrument_table,
            instruments,
            trunk,
            head,
            slots,
        }
    }

    pub fn slots(&self) -> &[FilmSlot] {
        &self.slots
    }

    /// Records the generator on `g`; returns `(scale, bias)` vars of shape
    /// `[N, size]` for each slot, in slot order.
    pub fn generate(&self, g: &mut Graph<'_>, labels: &[ConditionLabel]) -> Result<Vec<(Var, Var)>> {
        for l in labels {
            l.validate(self.instruments)?;
        }
        let pcs: Vec<usize> = labels.iter().map(|l| l.pitch_class).collect();
        let octs: Vec<usize> = labels.iter().map(|l| l.octave).collect();
        let pt = g.param(self.pitch_table);
        let ot = g.param(self.octave_table);
        let mut parts = vec![g.embedding(pt, &pcs)?, g.embedding(ot, &octs)?];
        if let Some(it) = self.instrument_table {
            let ids: Vec<usize> = labels.iter().map(|l| l.instrument.unwrap_or(0)).collect();
            let t = g.param(it);
            parts.push(g.embedding(t, &ids)?);
        }
        let mut h = g.concat(&parts)?;
        for (w, b) in &self.trunk {
            let (w, b) = (g.param(*w), g.param(*b));
            h = g.linear(h, w, b)?;
            let width = g.value(h).row_len();
            h = g.instance_norm(h, width, NORM_EPS)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let (w, b) = (g.param(self.head.0), g.param(self.head.1));
        let out = g.linear(h, w, b)?;
        let mut at = 0;
        let mut pairs = Vec::with_capacity(self.slots.len());
        for s in &self.slots {
            let delta = g.slice(out, at, s.size)?;
            let scale = g.affine(delta, 1.0, 1.0);
            let bias = g.slice(out, at + s.size, s.size)?;
            at += 2 * s.size;
            pairs.push((scale, bias));
        }
        Ok(pairs)
    }

    /// Evaluates the generator for one label outside of training.
    pub fn film_generate(&self, params: &ParamStore, label: &ConditionLabel) -> Result<FilmParams> {
        let mut g = Graph::new(params);
        let pairs = self.generate(&mut g, std::slice::from_ref(label))?;
        Ok(FilmParams {
            layers: self
                .slots
                .iter()
                .zip(pairs)
                .map(|(s, (sc, b))| (s.layer.clone(), g.value(sc).data().to_vec(), g.value(b).data().to_vec()))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn onehot_positions() {
        let v = encode_onehot(&ConditionLabel::new(0, 0, None), None).unwrap();
        assert_eq!(v.len(), 21);
        assert_eq!((v[0], v[12], v.iter().sum::<f64>()), (1.0, 1.0, 2.0));
        let v = encode_onehot(&ConditionLabel::new(9, 4, Some(1)), Some(4)).unwrap();
        assert_eq!(v.len(), 25);
        assert_eq!((v[9], v[16], v[22], v.iter().sum::<f64>()), (1.0, 1.0, 1.0, 3.0));
        assert!(matches!(
            encode_onehot(&ConditionLabel::new(12, 0, None), None),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            encode_onehot(&ConditionLabel::new(1, 1, Some(0)), None),
            Err(Error::Variant(_))
        ));
    }

    #[test]
    fn onehot_round_trip_all_labels() {
        for pc in 0..PITCH_CLASSES {
            for oct in 0..OCTAVES {
                for inst in [None, Some(0), Some(2)] {
                    let k = inst.map(|_| 3);
                    let l = ConditionLabel::new(pc, oct, inst);
                    assert_eq!(decode_onehot(&encode_onehot(&l, k).unwrap(), k).unwrap(), l);
                }
            }
        }
    }

    #[test]
    fn modulate_examples() {
        let h = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = film_modulate(&h, &[2.0, 0.0], &[0.0, 1.0], FilmAxis::Feature).unwrap();
        assert_eq!(out.data(), &[2.0, 1.0, 6.0, 1.0]);
        assert_eq!(film_modulate(&h, &[1.0; 2], &[0.0; 2], FilmAxis::Feature).unwrap(), h);
        let m = Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f64).collect());
        let out = film_modulate(&m, &[1.0, -1.0], &[10.0, 0.0], FilmAxis::Channel).unwrap();
        assert_eq!(&out.data()[..6], &[10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
        assert_eq!(&out.data()[6..], &[-6.0, -7.0, -8.0, -9.0, -10.0, -11.0]);
        assert!(film_modulate(&m, &[1.0; 3], &[0.0; 3], FilmAxis::Channel).is_err());
    }

    #[test]
    fn fresh_generator_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let slots = vec![
            FilmSlot { layer: "e0".into(), size: 4 },
            FilmSlot { layer: "e3".into(), size: 6 },
        ];
        let gen = FilmGenerator::new(&mut store, "film", Some(2), 8, &[8, 8, 8], slots, &mut rng);
        let p = gen.film_generate(&store, &ConditionLabel::new(3, 4, Some(1))).unwrap();
        assert_eq!(p.layers.len(), 2);
        for (_, s, b) in &p.layers {
            assert!(s.iter().all(|v| *v == 1.0) && b.iter().all(|v| *v == 0.0));
        }
        assert_eq!(p.layers[1].1.len(), 6);
        assert!(gen.film_generate(&store, &ConditionLabel::new(3, 4, None)).is_err());
    }
}
