//! Run configuration: one TOML document with a section per pipeline part.
//!
//! Every key is optional and falls back to the default shown by
//! `petmr config --defaults`. Unknown keys are rejected.
//!
//! ```toml
//! [data]
//! n = 400
//! split = { train = 0.7, val = 0.1, test = 0.2 }
//!
//! [phantom]            # full phantom description, see PhantomSpec
//! seed = 20190801
//! bone_hu = { lo = 700.0, hi = 1400.0 }
//!
//! [physics]
//! n_angles = 96
//! ray_step_pixels = 0.5
//! mlem = { iterations = 100 }
//! noise = { kind = "none" }   # or { kind = "poisson", mean_counts = 200.0, seed = 1 }
//!
//! [model]
//! channels = 16
//! kernel = 3
//! dilations = [1, 1, 2, 2, 4, 4]
//! heads = 3
//! mc_dropout = 0.2
//! mc_samples = 3
//!
//! [train.stage1]       # stage2 and stage3 take the same keys
//! iterations = 2000
//! batch_size = 8
//! adam = { lr = 0.001 }
//!
//! [run]
//! workers = 1
//! ```

use std::path::Path;

use petmr_core::models::Architecture;
use petmr_core::phantom::{PhantomSpec, SplitFractions};
use petmr_core::physics::{
    EmissionNoise, MlemConfig, MuConfig, PhysicsConfig, ProjectorGeometry, RayModel,
};
use petmr_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub split: SplitFractions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 400,
            split: SplitFractions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsSection {
    pub n_angles: usize,
    pub ray_step_pixels: f64,
    pub mu: MuConfig,
    pub mlem: MlemConfig,
    pub noise: EmissionNoise,
}

impl Default for PhysicsSection {
    fn default() -> Self {
        Self {
            n_angles: 96,
            ray_step_pixels: 0.5,
            mu: MuConfig::default(),
            mlem: MlemConfig::default(),
            noise: EmissionNoise::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    /// Heads of the multi-hypothesis network.
    pub heads: usize,
    /// Dropout rate of the MC-dropout network.
    pub mc_dropout: f64,
    /// Stochastic passes drawn from the MC-dropout network per sample.
    pub mc_samples: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::synthesis(3);
        Self {
            channels: a.channels,
            kernel: a.kernel,
            dilations: a.dilations,
            heads: a.heads,
            mc_dropout: 0.2,
            mc_samples: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Threads for per-sample work; outputs do not depend on it.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub stage3: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            stage1: TrainConfig::stage_defaults(1),
            stage2: TrainConfig::stage_defaults(2),
            stage3: TrainConfig::stage_defaults(3),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub phantom: PhantomSpec,
    pub physics: PhysicsSection,
    pub model: ModelSection,
    #[serde(skip_deserializing)]
    pub train: TrainSection,
    pub run: RunSection,
}

/// Which synthesis network a stage-1 run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Single head, no dropout.
    Baseline,
    /// `heads` heads trained with winner-takes-all.
    MultiHypothesis,
    /// Single head with dropout, sampled at test time.
    McDropout,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::MultiHypothesis, Variant::McDropout];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MultiHypothesis => "mh",
            Variant::McDropout => "mc_dropout",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }
}

impl RunConfig {
    /// Parses a TOML document. Stage tables of `[train]` are overlaid on
    /// their own stage defaults, so a partial `[train.stage2]` keeps the
    /// stage-2 iteration count.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let train = doc.remove("train");
        let mut cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(train) = train {
            let toml::Value::Table(mut t) = train else {
                return Err(Error::Config("`train` must be a table".into()));
            };
            for (stage, slot) in [
                (1u8, &mut cfg.train.stage1),
                (2, &mut cfg.train.stage2),
                (3, &mut cfg.train.stage3),
            ] {
                if let Some(v) = t.remove(&format!("stage{stage}")) {
                    *slot = overlay(TrainConfig::stage_defaults(stage), v, &format!("train.stage{stage}"))?;
                }
            }
            if let Some(k) = t.keys().next() {
                return Err(Error::Config(format!("unknown key `train.{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML rendering, used as the config echo in manifests.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, e: petmr_core::Error| Error::Config(format!("`{k}`: {e}"));
        self.phantom.validate().map_err(|e| key("phantom", e))?;
        self.data.split.counts(self.data.n).map_err(|e| key("data.split", e))?;
        if self.data.n == 0 {
            return Err(Error::Config("`data.n` must be positive".into()));
        }
        if self.physics.n_angles == 0 {
            return Err(Error::Config("`physics.n_angles` must be positive".into()));
        }
        if !(self.physics.ray_step_pixels > 0.0) {
            return Err(Error::Config("`physics.ray_step_pixels` must be positive".into()));
        }
        for v in Variant::ALL {
            self.architecture(v).validate().map_err(|e| key("model", e))?;
        }
        if self.model.mc_samples < 2 {
            return Err(Error::Config("`model.mc_samples` must be at least 2".into()));
        }
        if !(self.model.mc_dropout > 0.0) {
            return Err(Error::Config("`model.mc_dropout` must be positive".into()));
        }
        for (stage, t) in [(1, &self.train.stage1), (2, &self.train.stage2), (3, &self.train.stage3)] {
            t.validate(stage).map_err(|e| key(&format!("train.stage{stage}"), e))?;
        }
        if self.run.workers == 0 {
            return Err(Error::Config("`run.workers` must be at least 1".into()));
        }
        Ok(())
    }

    pub fn physics(&self) -> PhysicsConfig {
        let mut geometry = ProjectorGeometry::for_image(
            self.phantom.size,
            self.phantom.spacing_mm,
            self.physics.n_angles,
        );
        geometry.ray_model = RayModel::Interpolated {
            step_pixels: self.physics.ray_step_pixels,
        };
        PhysicsConfig {
            geometry,
            mu: self.physics.mu,
            mlem: self.physics.mlem,
            noise: self.physics.noise,
        }
    }

    pub fn architecture(&self, variant: Variant) -> Architecture {
        let base = Architecture {
            channels: self.model.channels,
            kernel: self.model.kernel,
            dilations: self.model.dilations.clone(),
            ..Architecture::synthesis(1)
        };
        match variant {
            Variant::Baseline => base,
            Variant::MultiHypothesis => Architecture {
                heads: self.model.heads,
                ..base
            },
            Variant::McDropout => Architecture {
                dropout: self.model.mc_dropout,
                ..base
            },
        }
    }

    pub fn imitation_architecture(&self) -> Architecture {
        Architecture {
            channels: self.model.channels,
            kernel: self.model.kernel,
            dilations: self.model.dilations.clone(),
            ..Architecture::imitation()
        }
    }
}

fn overlay(defaults: TrainConfig, user: toml::Value, section: &str) -> Result<TrainConfig> {
    let toml::Value::Table(user) = user else {
        return Err(Error::Config(format!("`{section}` must be a table")));
    };
    let mut base = toml::Table::try_from(defaults).expect("train config serializes");
    merge(&mut base, user);
    base.try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{section}: {e}")))
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
