//! On-disk layout of datasets, checkpoints, residual records and
//! reconstructions.
//!
//! Every binary file uses the named-tensor container of
//! [`petmr_core::checkpoint`]. Images are stored as `[height, width]` tensors
//! and a `meta` tensor carries `[id, spacing_mm]`.

use std::fs;
use std::path::{Path, PathBuf};

use petmr_core::checkpoint;
use petmr_core::params::ParamSet;
use petmr_core::phantom::Sample;
use petmr_core::tensor::Tensor;
use petmr_core::{Image2D, Modality};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Largest id that survives the `f32` round trip of the `meta` tensor.
pub const MAX_ID: u64 = 1 << 24;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

/// Tree hash of `(name, content hash)` pairs, in the given order.
pub fn tree_hash<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut h = Sha256::new();
    for (name, hash) in entries {
        h.update(name.as_bytes());
        h.update(b"\0");
        h.update(hash.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    checkpoint::decode(&read(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `params` and returns the content hash of the written bytes.
pub fn write_params(path: &Path, params: &ParamSet) -> Result<String> {
    let bytes = checkpoint::encode(params);
    write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// A named group of equally sized images plus an id.
#[derive(Clone, Debug, Default)]
pub struct ImageBundle {
    pub id: u64,
    pub images: Vec<(String, Image2D)>,
}

impl ImageBundle {
    pub fn new(id: u64) -> Self {
        Self {
            id,
            images: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, image: Image2D) {
        self.images.push((name.into(), image));
    }

    pub fn get(&self, name: &str) -> Option<&Image2D> {
        self.images.iter().find(|(n, _)| n == name).map(|(_, i)| i)
    }

    pub fn require(&self, name: &str, path: &Path) -> Result<&Image2D> {
        self.get(name)
            .ok_or_else(|| Error::format(path, format!("missing image `{name}`")))
    }

    pub fn to_params(&self) -> Result<ParamSet> {
        if self.id >= MAX_ID {
            return Err(Error::usage(format!("sample id {} is too large", self.id)));
        }
        let spacing = self.images.first().map_or(0.0, |(_, i)| i.spacing_mm());
        let mut p = ParamSet::new();
        p.insert(
            "meta",
            Tensor::new(vec![2], vec![self.id as f32, spacing as f32])?,
        );
        for (name, img) in &self.images {
            p.insert(
                &format!("{}.{}", name, img.modality().tag()),
                Tensor::new(vec![img.height(), img.width()], img.data().to_vec())?,
            );
        }
        Ok(p)
    }

    pub fn from_params(params: &ParamSet, path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let meta = params.get("meta").ok_or_else(|| bad("missing `meta` tensor"))?;
        if meta.data().len() != 2 {
            return Err(bad("`meta` must hold [id, spacing_mm]"));
        }
        let (id, spacing) = (meta.data()[0], meta.data()[1] as f64);
        let mut out = Self::new(id as u64);
        for (name, t) in params.iter() {
            if name == "meta" {
                continue;
            }
            let (base, tag) = name
                .rsplit_once('.')
                .ok_or_else(|| bad(&format!("tensor `{name}` has no modality suffix")))?;
            let modality = Modality::from_tag(tag)
                .ok_or_else(|| bad(&format!("tensor `{name}` has unknown modality `{tag}`")))?;
            let &[h, w] = t.shape() else {
                return Err(bad(&format!("tensor `{name}` is not two-dimensional")));
            };
            let img = Image2D::new(w, h, spacing, modality, t.data().to_vec())
                .map_err(|e| bad(&format!("tensor `{name}`: {e}")))?;
            out.push(base, img);
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        write_params(path, &self.to_params()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_params(&read_params(path)?, path)
    }
}

pub fn sample_bundle(s: &Sample) -> ImageBundle {
    let mut b = ImageBundle::new(s.id);
    b.push("mr", s.mr.clone());
    b.push("ct", s.ct.clone());
    b.push("pet", s.pet.clone());
    b.push("head_mask", s.head_mask.clone());
    b.push("brain_mask", s.brain_mask.clone());
    b
}

pub fn bundle_sample(b: &ImageBundle, path: &Path) -> Result<Sample> {
    let s = Sample {
        id: b.id,
        mr: b.require("mr", path)?.clone(),
        ct: b.require("ct", path)?.clone(),
        pet: b.require("pet", path)?.clone(),
        head_mask: b.require("head_mask", path)?.clone(),
        brain_mask: b.require("brain_mask", path)?.clone(),
    };
    s.check_invariants()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(s)
}

pub fn sample_file_name(id: u64) -> String {
    format!("{id:05}.pmr")
}

pub fn samples_dir(data: &Path) -> PathBuf {
    data.join("samples")
}

pub fn dataset_manifest_path(data: &Path) -> PathBuf {
    data.join("dataset.toml")
}

/// Checkpoint file names inside a checkpoint directory.
pub mod names {
    pub fn stage1(variant: &str) -> String {
        format!("stage1_{variant}.ckpt")
    }
    pub const STAGE2: &str = "stage2.ckpt";
    pub const STAGE3: &str = "stage3.ckpt";
    pub const RESIDUALS: &str = "residuals";

    /// `stage1_mh.ckpt` becomes `stage1_mh.manifest.toml` and
    /// `stage1_mh_log.csv`.
    pub fn manifest(ckpt: &str) -> String {
        format!("{}.manifest.toml", ckpt.trim_end_matches(".ckpt"))
    }

    pub fn log(ckpt: &str) -> String {
        format!("{}_log.csv", ckpt.trim_end_matches(".ckpt"))
    }
}

pub fn write_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::format(path, e.to_string()))?;
    write(path, text.as_bytes())
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
