//! On-disk model snapshots: a JSON manifest plus one binary file per tensor.
//!
//! Tensor file layout (little endian): `u32` name length, name bytes, `u32`
//! rank, `rank × u32` dims, then `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::spectral::{NormStats, SpectralConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: u64,
    pub init: u64,
    pub train: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub stats: NormStats,
    pub spectral: SpectralConfig,
    pub instruments: Vec<String>,
    pub epoch: usize,
    pub seeds: Seeds,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    variant: String,
    config: ModelConfig,
    spectral: SpectralConfig,
    norm_stats: NormStats,
    instruments: Vec<String>,
    epoch: usize,
    seeds: Seeds,
    tensors: Vec<TensorEntry>,
}

impl ModelCheckpoint {
    /// Rounds the weights to their stored precision so that a saved and
    /// reloaded checkpoint behaves identically to this one.
    pub fn quantize(&mut self) {
        self.model.params_mut().quantize_f32();
    }

    /// SHA-256 over the configuration and stored weights.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self.model.config()).unwrap_or_default());
        h.update(serde_json::to_vec(&self.stats).unwrap_or_default());
        for (_, name, t) in self.model.params().iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes into a sibling temporary directory and renames it over `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let base = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
        let tmp = parent.join(format!(".{base}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let mut tensors = Vec::new();
        for (i, (_, name, t)) in self.model.params().iter().enumerate() {
            let file = format!("t{i:04}.bin");
            let mut out = std::io::BufWriter::new(fs::File::create(tmp.join(&file))?);
            write_tensor(&mut out, name, t)?;
            out.flush()?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            variant: self.model.config().variant.name().to_string(),
            config: self.model.config().clone(),
            spectral: self.spectral.clone(),
            norm_stats: self.stats.clone(),
            instruments: self.instruments.clone(),
            epoch: self.epoch,
            seeds: self.seeds,
            tensors,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(tmp.join(MANIFEST_NAME), text)?;
        if dir.exists() {
            let old = parent.join(format!(".{base}.old-{}", std::process::id()));
            fs::rename(dir, &old)?;
            fs::rename(&tmp, dir)?;
            fs::remove_dir_all(&old)?;
        } else {
            fs::rename(&tmp, dir)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_NAME))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST_NAME).display())))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        manifest.norm_stats.validate()?;
        manifest.spectral.validate()?;
        // Weights are overwritten below; the seed only fixes the throwaway init.
        let mut model = Model::new(manifest.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        if manifest.tensors.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model has {}",
                manifest.tensors.len(),
                model.params().len()
            )));
        }
        for entry in &manifest.tensors {
            let id = model
                .params()
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
            let (name, t) = read_tensor(&mut bytes.as_slice(), &entry.name)?;
            if name != entry.name {
                return Err(Error::Checkpoint(format!("tensor {}: file holds {name}", entry.name)));
            }
            if t.shape() != model.params().get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: shape {:?}, expected {:?}",
                    entry.name,
                    t.shape(),
                    model.params().get(id).shape()
                )));
            }
            *model.params_mut().get_mut(id) = t;
        }
        Ok(ModelCheckpoint {
            model,
            stats: manifest.norm_stats,
            spectral: manifest.spectral,
            instruments: manifest.instruments,
            epoch: manifest.epoch,
            seeds: manifest.seeds,
        })
    }

    /// Files belonging to the checkpoint in `dir`, manifest first.
    pub fn files(dir: &Path) -> Result<Vec<PathBuf>> {
        let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = vec![dir.join(MANIFEST_NAME)];
        out.extend(manifest.tensors.iter().map(|t| dir.join(&t.file)));
        Ok(out)
    }
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for d in t.shape() {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, expected: &str) -> Result<(String, Tensor)> {
    let bad = |what: &str| Error::Checkpoint(format!("tensor {expected}: {what}"));
    let mut word = [0u8; 4];
    let mut u32_le = |r: &mut dyn Read, what: &str| -> Result<usize> {
        r.read_exact(&mut word).map_err(|_| bad(what))?;
        Ok(u32::from_le_bytes(word) as usize)
    };
    let len = u32_le(r, "truncated header")?;
    if len > 4096 {
        return Err(bad("corrupt header"));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(|_| bad("truncated header"))?;
    let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
    let rank = u32_le(r, "truncated header")?;
    if rank > 8 {
        return Err(bad("corrupt header"));
    }
    let shape = (0..rank).map(|_| u32_le(r, "truncated header")).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * 4 {
        return Err(bad(&format!(
            "truncated payload ({} bytes, expected {})",
            payload.len(),
            n * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((name, Tensor::new(shape, data)))
}
