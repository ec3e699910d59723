//! The workflow behind each subcommand, operating on directories.
//!
//! ```text
//! <data>/dataset.toml             manifest: config echo, split, file hashes
//! <data>/samples/00000.pmr        one Sample per file
//! <ckpt>/stage1_<variant>.ckpt    + .manifest.toml and _log.csv
//! <ckpt>/residuals/               stage-2 training records
//! <ckpt>/stage2.ckpt, stage3.ckpt
//! <recon>/<method>/recon.toml     + one bundle per test sample
//! ```

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use petmr_core::eval::{
    compare_sampling, mae_masked, perturbation_study, sampling_study, zscore_map, MetricsReport,
    MetricsRow, Patch, PerturbationResult, SamplingStudy, SIGMA_FLOOR,
};
use petmr_core::models::{AnyModel, ImitationModel, SynthesisModel};
use petmr_core::phantom::{generate_sample, split_indices, Sample};
use petmr_core::physics::PetSimulator;
use petmr_core::tensor::DropoutMode;
use petmr_core::training::{
    dominant_head, mean_squared_residual, residual_records_for, train_stage1, train_stage2, train_stage3,
    IterationLog, MetricTerm, Observer, ResidualExample, ResidualRecord, StageOutcome,
};
use petmr_core::image::HU_AIR;
use petmr_core::{Image2D, Modality, Rng};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::report;
use crate::store::{self, names, ImageBundle};

/// Runs `f` over `items` on up to `workers` threads. Results keep the input
/// order; the error of the lowest failing index wins.
pub fn par_map<T, R, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub id: u64,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub seed: u64,
    pub split: SplitEntry,
    /// Tree hash over `files` in order.
    pub dataset_hash: String,
    pub config: toml::Table,
    pub files: Vec<FileEntry>,
}

/// Config echo for manifests. `run` is left out: it only tunes execution.
fn config_table(cfg: &RunConfig) -> toml::Table {
    let mut t: toml::Table = cfg.to_toml().parse().expect("config echo parses");
    t.remove("run");
    t
}

/// Generates `cfg.data.n` samples into `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let counts = cfg.data.split.counts(cfg.data.n)?;
    let dir = store::samples_dir(out);
    store::create_dir(&dir)?;
    let ids: Vec<u64> = (0..cfg.data.n as u64).collect();
    let files = par_map(cfg.run.workers, &ids, |&id| {
        let s = generate_sample(&cfg.phantom, id)?;
        let file = store::sample_file_name(id);
        let sha256 = store::sample_bundle(&s).write(&dir.join(&file))?;
        Ok(FileEntry { id, file, sha256 })
    })?;
    let manifest = DatasetManifest {
        n: cfg.data.n,
        seed: cfg.phantom.seed,
        split: SplitEntry {
            train: counts.train,
            val: counts.val,
            test: counts.test,
        },
        dataset_hash: store::tree_hash(files.iter().map(|f| (f.file.as_str(), f.sha256.as_str()))),
        config: config_table(cfg),
        files,
    };
    store::write_toml(&store::dataset_manifest_path(out), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads every sample and checks it against the manifest hashes.
    pub fn load(data: &Path, workers: usize) -> Result<Self> {
        let mpath = store::dataset_manifest_path(data);
        if !mpath.exists() {
            return Err(Error::usage(format!(
                "no dataset at {} (run gen-data first)",
                data.display()
            )));
        }
        let manifest: DatasetManifest = store::read_toml(&mpath)?;
        let dir = store::samples_dir(data);
        let samples = par_map(workers, &manifest.files, |f| {
            let path = dir.join(&f.file);
            let bytes = store::read(&path)?;
            if store::sha256_hex(&bytes) != f.sha256 {
                return Err(Error::format(&path, "content hash differs from the dataset manifest"));
            }
            let params = petmr_core::checkpoint::decode(&bytes)
                .map_err(|e| Error::format(&path, e.to_string()))?;
            let s = store::bundle_sample(&ImageBundle::from_params(&params, &path)?, &path)?;
            if s.id != f.id {
                return Err(Error::format(&path, format!("holds sample {} instead of {}", s.id, f.id)));
            }
            Ok(s)
        })?;
        Ok(Self { manifest, samples })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        let c = &self.manifest.split;
        let [tr, va, te] = split_indices(petmr_core::phantom::SplitCounts {
            train: c.train,
            val: c.val,
            test: c.test,
        });
        let r = match split {
            Split::Train => tr,
            Split::Val => va,
            Split::Test => te,
        };
        &self.samples[r.start as usize..r.end as usize]
    }

    pub fn refs(&self, split: Split) -> Vec<&Sample> {
        self.split(split).iter().collect()
    }

    pub fn by_id(&self, id: u64) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Takes the `data` and `phantom` sections from the dataset manifest, so
/// later stages see the phantom the data were generated with.
pub fn adopt_dataset_config(cfg: &mut RunConfig, data: &Dataset) -> Result<()> {
    let echo = toml::to_string(&data.manifest.config).map_err(|e| Error::usage(e.to_string()))?;
    let generated = RunConfig::from_toml(&echo)?;
    cfg.data = generated.data;
    cfg.phantom = generated.phantom;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageInputs {
    pub dataset_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residuals_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutputs {
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub log: String,
    pub best_iteration: usize,
    pub best_validation: f64,
    pub win_totals: Vec<usize>,
    /// Stage 2: mean squared residual of the training records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_pet: Option<f64>,
    /// Stage 3: normalization of the CT term.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_ct: Option<f64>,
    /// Stage 3: head kept in the checkpoint (most training wins).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_head: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub stage: u8,
    pub variant: String,
    pub inputs: StageInputs,
    pub outputs: StageOutputs,
    pub config: toml::Table,
}

/// Prints validation points to stderr.
pub struct Progress {
    pub label: String,
    pub quiet: bool,
}

impl Observer for Progress {
    fn iteration(&mut self, _stage: u8, _log: &IterationLog) {}
    fn validation(&mut self, stage: u8, iteration: usize, loss: f64) {
        if !self.quiet {
            eprintln!("stage {stage} [{}] iteration {iteration}: validation loss {loss:.6}", self.label);
        }
    }
}

fn read_manifest(ckpt_dir: &Path, ckpt: &str, stage_hint: &str) -> Result<(TrainManifest, PathBuf)> {
    let path = ckpt_dir.join(ckpt);
    let mpath = ckpt_dir.join(names::manifest(ckpt));
    if !path.exists() || !mpath.exists() {
        return Err(Error::usage(format!(
            "missing {} in {} (run {stage_hint} first)",
            ckpt,
            ckpt_dir.display()
        )));
    }
    let m: TrainManifest = store::read_toml(&mpath)?;
    if store::file_hash(&path)? != m.outputs.checkpoint_sha256 {
        return Err(Error::format(&path, "checkpoint hash differs from its manifest"));
    }
    Ok((m, path))
}

fn finish_stage<M>(
    ckpt_dir: &Path,
    ckpt: &str,
    params: &petmr_core::params::ParamSet,
    outcome: &StageOutcome<M>,
    heads: usize,
    manifest: impl FnOnce(StageOutputs) -> TrainManifest,
    extra: impl FnOnce(&mut StageOutputs),
) -> Result<TrainManifest> {
    let sha = store::write_params(&ckpt_dir.join(ckpt), params)?;
    let log = names::log(ckpt);
    store::write(
        &ckpt_dir.join(&log),
        &report::training_log_csv(&outcome.log, &outcome.validation, heads),
    )?;
    let mut outputs = StageOutputs {
        checkpoint: ckpt.to_string(),
        checkpoint_sha256: sha,
        log,
        best_iteration: outcome.best_iteration,
        best_validation: outcome.best_validation,
        win_totals: outcome.win_totals.clone(),
        c_pet: None,
        c_ct: None,
        selected_head: None,
    };
    extra(&mut outputs);
    let m = manifest(outputs);
    store::write_toml(&ckpt_dir.join(names::manifest(ckpt)), &m)?;
    Ok(m)
}

/// Stage 1 for one variant.
pub fn run_stage1(
    cfg: &RunConfig,
    data: &Dataset,
    ckpt_dir: &Path,
    variant: Variant,
    quiet: bool,
) -> Result<TrainManifest> {
    let arch = cfg.architecture(variant);
    let heads = arch.heads;
    let outcome = train_stage1(
        arch,
        cfg.phantom.size,
        &cfg.train.stage1,
        &data.refs(Split::Train),
        &data.refs(Split::Val),
        &mut Progress {
            label: variant.tag().into(),
            quiet,
        },
    )?;
    let ckpt = names::stage1(variant.tag());
    finish_stage(
        ckpt_dir,
        &ckpt,
        &outcome.model.to_checkpoint(),
        &outcome,
        heads,
        |outputs| TrainManifest {
            stage: 1,
            variant: variant.tag().into(),
            inputs: StageInputs {
                dataset_hash: data.manifest.dataset_hash.clone(),
                ..Default::default()
            },
            outputs,
            config: config_table(cfg),
        },
        |_| {},
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub id: u64,
    pub head: usize,
    pub split: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualManifest {
    pub stage1_sha256: String,
    pub dataset_hash: String,
    pub records_hash: String,
    pub records: Vec<ResidualEntry>,
}

pub fn residuals_dir(ckpt_dir: &Path) -> PathBuf {
    ckpt_dir.join(names::RESIDUALS)
}

/// Builds (or reuses) the residual records of the stage-1 multi-hypothesis
/// model over the training and validation splits.
pub fn ensure_residuals(
    cfg: &RunConfig,
    data: &Dataset,
    ckpt_dir: &Path,
) -> Result<(ResidualManifest, Vec<ResidualRecord>)> {
    let (_, stage1_path) = read_manifest(ckpt_dir, &names::stage1(Variant::MultiHypothesis.tag()), "train --stage 1")?;
    let stage1_sha = store::file_hash(&stage1_path)?;
    let dir = residuals_dir(ckpt_dir);
    let mpath = dir.join("residuals.toml");
    if mpath.exists() {
        let m: ResidualManifest = store::read_toml(&mpath)?;
        if m.stage1_sha256 == stage1_sha && m.dataset_hash == data.manifest.dataset_hash {
            let records = par_map(cfg.run.workers, &m.records, |e| {
                let path = dir.join(&e.file);
                let bytes = store::read(&path)?;
                if store::sha256_hex(&bytes) != e.sha256 {
                    return Err(Error::format(&path, "content hash differs from the residual manifest"));
                }
                let params = petmr_core::checkpoint::decode(&bytes)
                    .map_err(|err| Error::format(&path, err.to_string()))?;
                let b = ImageBundle::from_params(&params, &path)?;
                Ok(ResidualRecord {
                    sample_id: e.id,
                    head: e.head,
                    pct: b.require("pct", &path)?.clone(),
                    z: b.require("z", &path)?.clone(),
                })
            })?;
            return Ok((m, records));
        }
    }
    let model = SynthesisModel::from_checkpoint(store::read_params(&stage1_path)?)?;
    let sim = PetSimulator::new(cfg.physics())?;
    let mut todo: Vec<(&Sample, Split)> = Vec::new();
    for split in [Split::Train, Split::Val] {
        todo.extend(data.split(split).iter().map(|s| (s, split)));
    }
    let per_sample = par_map(cfg.run.workers, &todo, |(s, split)| {
        let recs = residual_records_for(&model, &sim, s)?;
        let mut entries = Vec::with_capacity(recs.len());
        for r in &recs {
            let mut b = ImageBundle::new(r.sample_id);
            b.push("pct", r.pct.clone());
            b.push("z", r.z.clone());
            let file = format!("{:05}_h{}.pmr", r.sample_id, r.head);
            let sha256 = b.write(&dir.join(&file))?;
            entries.push(ResidualEntry {
                id: r.sample_id,
                head: r.head,
                split: split.tag().into(),
                file,
                sha256,
            });
        }
        Ok((recs, entries))
    })?;
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for (r, e) in per_sample {
        records.extend(r);
        entries.extend(e);
    }
    let m = ResidualManifest {
        stage1_sha256: stage1_sha,
        dataset_hash: data.manifest.dataset_hash.clone(),
        records_hash: store::tree_hash(entries.iter().map(|e| (e.file.as_str(), e.sha256.as_str()))),
        records: entries,
    };
    store::write_toml(&mpath, &m)?;
    Ok((m, records))
}

fn residual_examples<'a>(
    data: &'a Dataset,
    manifest: &ResidualManifest,
    records: &'a [ResidualRecord],
    split: Split,
) -> Result<Vec<ResidualExample<'a>>> {
    records
        .iter()
        .zip(&manifest.records)
        .filter(|(_, e)| e.split == split.tag())
        .map(|(r, _)| {
            let sample = data.by_id(r.sample_id).ok_or_else(|| {
                Error::usage(format!("residual record for unknown sample {}", r.sample_id))
            })?;
            Ok(ResidualExample { record: r, sample })
        })
        .collect()
}

pub fn run_stage2(cfg: &RunConfig, data: &Dataset, ckpt_dir: &Path, quiet: bool) -> Result<TrainManifest> {
    let (stage1, _) = read_manifest(ckpt_dir, &names::stage1(Variant::MultiHypothesis.tag()), "train --stage 1")?;
    let (rm, records) = ensure_residuals(cfg, data, ckpt_dir)?;
    let train = residual_examples(data, &rm, &records, Split::Train)?;
    let val = residual_examples(data, &rm, &records, Split::Val)?;
    let c_pet = mean_squared_residual(&train)?;
    let outcome = train_stage2(
        cfg.imitation_architecture(),
        &cfg.train.stage2,
        &train,
        &val,
        &mut Progress {
            label: "imitation".into(),
            quiet,
        },
    )?;
    finish_stage(
        ckpt_dir,
        names::STAGE2,
        &outcome.model.to_checkpoint(),
        &outcome,
        1,
        |outputs| TrainManifest {
            stage: 2,
            variant: "imitation".into(),
            inputs: StageInputs {
                dataset_hash: data.manifest.dataset_hash.clone(),
                stage1_sha256: Some(stage1.outputs.checkpoint_sha256.clone()),
                residuals_hash: Some(rm.records_hash.clone()),
                ..Default::default()
            },
            outputs,
            config: config_table(cfg),
        },
        |o| o.c_pet = Some(c_pet),
    )
}

pub fn run_stage3(cfg: &RunConfig, data: &Dataset, ckpt_dir: &Path, quiet: bool) -> Result<TrainManifest> {
    let (stage1, p1) = read_manifest(ckpt_dir, &names::stage1(Variant::MultiHypothesis.tag()), "train --stage 1")?;
    let (stage2, p2) = read_manifest(ckpt_dir, names::STAGE2, "train --stage 2")?;
    if stage2.inputs.stage1_sha256.as_deref() != Some(stage1.outputs.checkpoint_sha256.as_str()) {
        return Err(Error::usage(
            "stage-2 checkpoint was trained on a different stage-1 checkpoint (rerun train --stage 2)",
        ));
    }
    let synthesis = SynthesisModel::from_checkpoint(store::read_params(&p1)?)?;
    let imitation = ImitationModel::from_checkpoint(store::read_params(&p2)?)?;
    let c_pet = stage2
        .outputs
        .c_pet
        .ok_or_else(|| Error::format(&p2, "stage-2 manifest lacks c_pet"))?;
    let c_ct = stage1.outputs.best_validation;
    let t = &cfg.train.stage3;
    let term = MetricTerm {
        model: &imitation,
        c_ct,
        c_pet,
        ct_weight: t.ct_weight,
        metric_weight: t.metric_weight,
    };
    let outcome = train_stage3(
        &synthesis,
        &term,
        t,
        &data.refs(Split::Train),
        &data.refs(Split::Val),
        &mut Progress {
            label: "imitation".into(),
            quiet,
        },
    )?;
    let selected = dominant_head(&outcome.win_totals);
    finish_stage(
        ckpt_dir,
        names::STAGE3,
        &outcome.model.select_head(selected)?.to_checkpoint(),
        &outcome,
        synthesis.heads(),
        |outputs| TrainManifest {
            stage: 3,
            variant: "imitation".into(),
            inputs: StageInputs {
                dataset_hash: data.manifest.dataset_hash.clone(),
                stage1_sha256: Some(stage1.outputs.checkpoint_sha256.clone()),
                stage2_sha256: Some(stage2.outputs.checkpoint_sha256.clone()),
                ..Default::default()
            },
            outputs,
            config: config_table(cfg),
        },
        |o| {
            o.c_pet = Some(c_pet);
            o.c_ct = Some(c_ct);
            o.selected_head = Some(selected);
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconManifest {
    pub method: String,
    /// Checkpoint file name, or `identity` for the true-CT control.
    pub source: String,
    pub source_sha256: String,
    pub dataset_hash: String,
    pub split: String,
    pub hypotheses: usize,
    /// `heads` or `mc_dropout`.
    pub sampling: String,
    pub files: Vec<FileEntry>,
}

pub enum ReconSource<'a> {
    Checkpoint(&'a Path),
    /// Uses the true CT as the pCT.
    Identity,
}

/// pCTs of one sample (air outside the head): every head, or
/// `mc_samples` dropout passes.
fn hypotheses(cfg: &RunConfig, model: Option<&SynthesisModel>, s: &Sample) -> Result<Vec<Image2D>> {
    let Some(m) = model else {
        return Ok(vec![s.ct.clone()]);
    };
    if m.heads() == 1 && m.dropout() > 0.0 {
        let mut rng = Rng::derive(cfg.train.stage1.seed ^ 0x6d63_6472, s.id);
        m.mc_dropout_sample(&s.mr, cfg.model.mc_samples, &mut rng)?
            .into_iter()
            .map(|p| Ok(p.fill_outside(&s.head_mask, HU_AIR)?))
            .collect()
    } else {
        Ok(m.synthesize(&s.mr, &s.head_mask, DropoutMode::Off, &mut Rng::new(0))?)
    }
}

fn signed_residual(a: &Image2D, b: &Image2D, mask: Option<&Image2D>) -> Result<Image2D> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (x, y))| match mask {
            Some(m) if m.data()[i] < 0.5 => 0.0,
            _ => x - y,
        })
        .collect();
    Ok(a.with_data(Modality::Residual, data)?)
}

/// Reconstructs every sample of `split` with each hypothesis of the source.
pub fn recon(
    cfg: &RunConfig,
    source: ReconSource<'_>,
    data: &Dataset,
    split: Split,
    out: &Path,
    method: &str,
) -> Result<ReconManifest> {
    let (model, source_name, source_sha) = match source {
        ReconSource::Checkpoint(path) => {
            if !path.exists() {
                return Err(Error::usage(format!("checkpoint {} does not exist", path.display())));
            }
            let bytes = store::read(path)?;
            let params = petmr_core::checkpoint::decode(&bytes)
                .map_err(|e| Error::format(path, e.to_string()))?;
            let model = match AnyModel::from_checkpoint(params)? {
                AnyModel::Synthesis(m) => m,
                AnyModel::Imitation(_) => {
                    return Err(Error::usage(format!(
                        "{} is an imitation checkpoint; recon needs a synthesis checkpoint",
                        path.display()
                    )))
                }
            };
            if model.size != cfg.phantom.size {
                return Err(Error::usage(format!(
                    "checkpoint expects {}x{} images but the data are {}x{}",
                    model.size, model.size, cfg.phantom.size, cfg.phantom.size
                )));
            }
            let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            (Some(model), name, store::sha256_hex(&bytes))
        }
        ReconSource::Identity => (None, "identity".to_string(), String::new()),
    };
    let sim = PetSimulator::new(cfg.physics())?;
    store::create_dir(out)?;
    let samples = data.refs(split);
    if samples.is_empty() {
        return Err(Error::usage(format!("split `{}` is empty", split.tag())));
    }
    let results = par_map(cfg.run.workers, &samples, |s| {
        let pcts = hypotheses(cfg, model.as_ref(), s)?;
        let acq = sim.acquire(&s.ct, &s.pet)?;
        let reference = sim.reference(&acq)?;
        let mut b = ImageBundle::new(s.id);
        b.push("ct", s.ct.clone());
        b.push("head_mask", s.head_mask.clone());
        b.push("brain_mask", s.brain_mask.clone());
        b.push("reference", reference.clone());
        for (h, pct) in pcts.iter().enumerate() {
            let ppet = sim.reconstruct(&acq, pct)?;
            b.push(format!("h{h}_ct_residual"), signed_residual(pct, &s.ct, None)?);
            b.push(format!("h{h}_pet_residual"), signed_residual(&reference, &ppet, Some(&s.head_mask))?);
            b.push(format!("h{h}_pct"), pct.clone());
            b.push(format!("h{h}_ppet"), ppet);
        }
        let file = store::sample_file_name(s.id);
        let sha256 = b.write(&out.join(&file))?;
        Ok((pcts.len(), FileEntry { id: s.id, file, sha256 }))
    })?;
    let hyp = results[0].0;
    let sampling = match &model {
        Some(m) if m.heads() == 1 && m.dropout() > 0.0 => "mc_dropout",
        _ => "heads",
    };
    let m = ReconManifest {
        method: method.to_string(),
        source: source_name,
        source_sha256: source_sha,
        dataset_hash: data.manifest.dataset_hash.clone(),
        split: split.tag().into(),
        hypotheses: hyp,
        sampling: sampling.into(),
        files: results.into_iter().map(|r| r.1).collect(),
    };
    store::write_toml(&out.join("recon.toml"), &m)?;
    Ok(m)
}

/// One reconstructed sample as read back for evaluation.
pub struct ReconSample {
    pub id: u64,
    pub ct: Image2D,
    pub head_mask: Image2D,
    pub brain_mask: Image2D,
    pub reference: Image2D,
    pub pct: Vec<Image2D>,
    pub ppet: Vec<Image2D>,
    pub ct_residual: Vec<Image2D>,
    pub pet_residual: Vec<Image2D>,
}

pub fn load_recon(dir: &Path, workers: usize) -> Result<(ReconManifest, Vec<ReconSample>)> {
    let mpath = dir.join("recon.toml");
    if !mpath.exists() {
        return Err(Error::usage(format!("no reconstruction at {} (run recon first)", dir.display())));
    }
    let m: ReconManifest = store::read_toml(&mpath)?;
    let samples = par_map(workers, &m.files, |f| {
        let path = dir.join(&f.file);
        let bytes = store::read(&path)?;
        if store::sha256_hex(&bytes) != f.sha256 {
            return Err(Error::format(&path, "content hash differs from recon.toml"));
        }
        let params = petmr_core::checkpoint::decode(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
        let b = ImageBundle::from_params(&params, &path)?;
        let series = |name: &str| -> Result<Vec<Image2D>> {
            (0..m.hypotheses)
                .map(|h| b.require(&format!("h{h}_{name}"), &path).cloned())
                .collect()
        };
        Ok(ReconSample {
            id: b.id,
            ct: b.require("ct", &path)?.clone(),
            head_mask: b.require("head_mask", &path)?.clone(),
            brain_mask: b.require("brain_mask", &path)?.clone(),
            reference: b.require("reference", &path)?.clone(),
            pct: series("pct")?,
            ppet: series("ppet")?,
            ct_residual: series("ct_residual")?,
            pet_residual: series("pet_residual")?,
        })
    })?;
    Ok((m, samples))
}

/// Mean over hypotheses of the per-hypothesis MAEs.
pub fn metrics_row(method: &str, s: &ReconSample) -> Result<MetricsRow> {
    let n = s.pct.len() as f64;
    let mut ct = 0.0;
    let mut pet = 0.0;
    for (pct, ppet) in s.pct.iter().zip(&s.ppet) {
        ct += mae_masked(pct, &s.ct, &s.head_mask)? / n;
        pet += mae_masked(ppet, &s.reference, &s.brain_mask)? / n;
    }
    Ok(MetricsRow {
        sample_id: s.id,
        method: method.to_string(),
        mae_ct_hu: ct,
        mae_pet_au: pet,
    })
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// `(multi-hypothesis method, MC-dropout method)` for the sampling study.
    pub sampling: Option<(String, String)>,
    /// Write graymaps for the first `images` samples of each method.
    pub images: usize,
    pub workers: usize,
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub sampling: Option<SamplingStudy>,
}

/// Builds the metrics report over `methods`, each a subdirectory of
/// `recon_root`, and writes `report.csv` (plus `sampling.csv` and graymaps
/// when requested) into `out`.
pub fn eval(recon_root: &Path, methods: &[String], out: &Path, opts: &EvalOptions) -> Result<EvalOutcome> {
    if methods.is_empty() {
        return Err(Error::usage("no methods to evaluate"));
    }
    let mut unique: Vec<&String> = Vec::new();
    for m in methods {
        if !unique.contains(&m) {
            unique.push(m);
        }
    }
    let mut loaded = Vec::new();
    for m in &unique {
        let (manifest, samples) = load_recon(&recon_root.join(m), opts.workers)?;
        loaded.push((m.as_str(), manifest, samples));
    }
    let ids = |s: &[ReconSample]| -> Vec<u64> { s.iter().map(|x| x.id).collect() };
    let first = ids(&loaded[0].2);
    for (m, _, s) in &loaded[1..] {
        let other = ids(s);
        if other != first {
            let missing: Vec<u64> = first.iter().filter(|i| !other.contains(i)).copied().collect();
            let extra: Vec<u64> = other.iter().filter(|i| !first.contains(i)).copied().collect();
            return Err(Error::usage(format!(
                "method `{m}` covers different samples than `{}`: missing {missing:?}, extra {extra:?}",
                loaded[0].0
            )));
        }
    }
    let mut rows = Vec::new();
    for (m, _, samples) in &loaded {
        for s in samples {
            rows.push(metrics_row(m, s)?);
        }
    }
    let mut report = MetricsReport::from_rows(rows)?;
    for i in 0..unique.len() {
        for j in i + 1..unique.len() {
            if loaded[0].2.len() >= 2 {
                for metric in ["pet", "ct"] {
                    report.add_test(unique[j], unique[i], metric)?;
                }
            }
        }
    }
    store::create_dir(out)?;
    report::write_metrics(&out.join("report.csv"), &report)?;

    let mut study = None;
    if let Some((mh, mc)) = &opts.sampling {
        let find = |name: &str| {
            loaded
                .iter()
                .find(|l| l.0 == name)
                .ok_or_else(|| Error::usage(format!("sampling method `{name}` is not among the evaluated methods")))
        };
        let (a, b) = (find(mh)?, find(mc)?);
        let comparisons: Vec<_> = a
            .2
            .iter()
            .zip(&b.2)
            .map(|(x, y)| compare_sampling(&x.reference, &x.ppet, &y.ppet, &x.brain_mask))
            .collect::<petmr_core::Result<_>>()?;
        let s = sampling_study(&comparisons)?;
        store::write(&out.join("sampling.csv"), &report::sampling_csv(&s, mh, mc))?;
        if opts.images > 0 {
            for ((x, y), c) in a.2.iter().zip(&b.2).zip(&comparisons).take(opts.images) {
                for (method, set, summary) in [(mh, x, &c.multi_hypothesis), (mc, y, &c.mc_dropout)] {
                    let z = zscore_map(&set.reference, &set.ppet, &set.brain_mask, SIGMA_FLOOR)?;
                    report::write_pgm(out, set.id, method, "zscore", &z)?;
                    report::write_pgm(out, set.id, method, "variance", &summary.variance)?;
                }
            }
        }
        study = Some(s);
    }
    if opts.images > 0 {
        for (m, _, samples) in &loaded {
            for s in samples.iter().take(opts.images) {
                report::write_pgm(out, s.id, m, "ct", &s.ct)?;
                report::write_pgm(out, s.id, m, "reference", &s.reference)?;
                for h in 0..s.pct.len() {
                    report::write_pgm(out, s.id, m, &format!("h{h}_pct"), &s.pct[h])?;
                    report::write_pgm(out, s.id, m, &format!("h{h}_ppet"), &s.ppet[h])?;
                    report::write_pgm(out, s.id, m, &format!("h{h}_ct_residual"), &s.ct_residual[h])?;
                    report::write_pgm(out, s.id, m, &format!("h{h}_pet_residual"), &s.pet_residual[h])?;
                }
            }
        }
    }
    Ok(EvalOutcome {
        report,
        sampling: study,
    })
}

#[derive(Clone, Debug)]
pub struct PerturbationOptions {
    pub size: usize,
    pub delta_hu: f64,
    /// Patch centre `(row, col)`; defaults to the brain pixel nearest the
    /// brain centroid.
    pub center: Option<(usize, usize)>,
    pub threshold: f64,
}

impl Default for PerturbationOptions {
    fn default() -> Self {
        Self {
            size: 3,
            delta_hu: 1000.0,
            center: None,
            threshold: 0.05,
        }
    }
}

pub fn brain_center(mask: &Image2D) -> Option<(usize, usize)> {
    let w = mask.width();
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
    for (i, &m) in mask.data().iter().enumerate() {
        if m > 0.5 {
            sr += (i / w) as f64;
            sc += (i % w) as f64;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return None;
    }
    let (cr, cc) = (sr / n, sc / n);
    mask.data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.5)
        .map(|(i, _)| (i / w, i % w))
        .min_by(|a, b| {
            let d = |p: &(usize, usize)| (p.0 as f64 - cr).powi(2) + (p.1 as f64 - cc).powi(2);
            d(a).total_cmp(&d(b)).then(a.cmp(b))
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSummary {
    pub sample: u64,
    pub patch_row: usize,
    pub patch_col: usize,
    pub patch_size: usize,
    pub delta_hu: f64,
    pub threshold: f64,
    pub mean_brain_activity: f64,
    pub brain_pixels_outside: usize,
    pub above_threshold: usize,
    pub fraction: f64,
    pub max_relative_outside: f64,
    pub median_relative_outside: f64,
    pub ct_support: usize,
    pub ct_confined_to_patch: bool,
    pub pet_support: usize,
}

impl PerturbationSummary {
    pub fn line(&self) -> String {
        format!(
            "sample={} patch={}x{}@({},{}) delta_hu={} fraction_above_{}pct={:.4} ({}/{}) max_rel={:.4} ct_confined={} pet_support={}",
            self.sample,
            self.patch_size,
            self.patch_size,
            self.patch_row,
            self.patch_col,
            self.delta_hu,
            self.threshold * 100.0,
            self.fraction,
            self.above_threshold,
            self.brain_pixels_outside,
            self.max_relative_outside,
            self.ct_confined_to_patch,
            self.pet_support
        )
    }
}

/// Adds a patch to the true CT of `sample`, reconstructs, and writes the CT
/// and PET residual maps plus `perturbation.toml` into `out`.
pub fn demo_perturbation(
    cfg: &RunConfig,
    sample: &Sample,
    opts: &PerturbationOptions,
    out: &Path,
) -> Result<(PerturbationSummary, PerturbationResult)> {
    let (r, c) = match opts.center {
        Some(rc) => rc,
        None => brain_center(&sample.brain_mask).ok_or_else(|| Error::usage("sample has an empty brain mask"))?,
    };
    let patch = Patch::centered(r, c, opts.size, opts.delta_hu)?;
    let sim = PetSimulator::new(cfg.physics())?;
    let res = perturbation_study(
        &sim,
        &sample.ct,
        &sample.pet,
        &sample.head_mask,
        &sample.brain_mask,
        patch,
        opts.threshold,
    )?;
    let summary = PerturbationSummary {
        sample: sample.id,
        patch_row: patch.row,
        patch_col: patch.col,
        patch_size: patch.size,
        delta_hu: patch.delta_hu,
        threshold: opts.threshold,
        mean_brain_activity: res.mean_brain_activity,
        brain_pixels_outside: res.brain_outside,
        above_threshold: res.above_threshold,
        fraction: res.fraction,
        max_relative_outside: res.max_outside_relative,
        median_relative_outside: res.median_outside_relative,
        ct_support: res.ct_support,
        ct_confined_to_patch: res.ct_confined,
        pet_support: res.pet_support,
    };
    store::create_dir(out)?;
    report::write_pgm(out, sample.id, "perturbation", "ct_residual", &res.ct_residual)?;
    report::write_pgm(out, sample.id, "perturbation", "pet_residual", &res.pet_residual)?;
    store::write_toml(&out.join("perturbation.toml"), &summary)?;
    Ok((summary, res))
}
