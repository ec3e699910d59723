//! Losses and the three training stages.
//!
//! Stage 1 fits the multi-head synthesis network with a winner-takes-all
//! masked L2 loss. Stage 2 fits the imitation network on precomputed PET
//! residuals of stage-1 pseudo-CTs. Stage 3 retrains the synthesis network on
//! an equal mix of the CT loss and the imitation network's predicted residual
//! energy, with the imitation network frozen.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{Image2D, Modality, HU_AIR};
use crate::models::{batch_tensor, Architecture, ImitationModel, SynthesisModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::phantom::Sample;
use crate::physics::PetSimulator;
use crate::rng::Rng;
use crate::tensor::{DropoutMode, Graph, Real, Tensor, Var};

/// Mean of squared differences over the set pixels of `mask`.
pub fn l2_loss(pred: &Image2D, target: &Image2D, mask: &Image2D) -> Result<f64> {
    pred.check_grid("l2_loss", target)?;
    pred.check_grid("l2_loss", mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&p, &t), &m) in pred.data().iter().zip(target.data()).zip(mask.data()) {
        if m > 0.5 {
            let d = p as f64 - t as f64;
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::contract("l2_loss over an empty mask"));
    }
    Ok(sum / n as f64)
}

/// Lowest per-head [`l2_loss`] and the index of the head attaining it (ties
/// go to the lowest index).
pub fn wta_loss(preds: &[Image2D], target: &Image2D, mask: &Image2D) -> Result<(f64, usize)> {
    if preds.is_empty() {
        return Err(Error::contract("wta_loss needs at least one prediction"));
    }
    let mut best = (f64::INFINITY, 0);
    for (j, p) in preds.iter().enumerate() {
        let l = l2_loss(p, target, mask)?;
        if l < best.0 {
            best = (l, j);
        }
    }
    Ok(best)
}

/// Per-instance masked mean of `x`: `[N, 1, H, W]` to `[N]`.
///
/// `mask` holds 0/1 values of the same shape and `inv_counts[n]` is one over
/// the mask count of instance `n`.
pub fn masked_instance_mean<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    mask: Var,
    inv_counts: Var,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = shape[0];
    let per = shape[1..].iter().product();
    let m = g.mul(x, mask)?;
    let flat = g.reshape(m, &[n, per])?;
    let sums = g.sum_axis(flat, 1)?;
    g.mul(sums, inv_counts)
}

/// Masked per-instance L2 between `[N, 1, H, W]` tensors.
pub fn l2_instance_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    mask: Var,
    inv_counts: Var,
) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    masked_instance_mean(g, sq, mask, inv_counts)
}

/// Winner-takes-all over `[N]` per-head losses. Returns the batch mean, the
/// per-instance winners, and the per-instance winning losses.
pub fn wta_batch<T: Real>(g: &mut Graph<T>, per_head: &[Var]) -> Result<(Var, Vec<usize>)> {
    if per_head.is_empty() {
        return Err(Error::contract("wta over zero heads"));
    }
    let stacked = g.stack(per_head, 1)?;
    let (min, winners) = g.min_axis(stacked, 1)?;
    Ok((g.mean(min)?, winners))
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fraction of `iterations` after which the learning rate is multiplied
    /// by `lr_drop_factor`.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    pub seed: u64,
    /// Stage-1 iterations that average the loss over heads before switching
    /// to winner-takes-all, so every head leaves initialization.
    pub warmup_iterations: usize,
    pub validate_every: usize,
    /// Stage-1 winner-takes-all iterations per dead-head check; 0 disables.
    /// A head winning less than `revive_below` of the instances in the
    /// window restarts from a perturbed copy of the most-winning head.
    pub revive_every: usize,
    pub revive_below: f64,
    /// Stage-3 weight of the CT term.
    pub ct_weight: f64,
    /// Stage-3 weight of the imitation metric term.
    pub metric_weight: f64,
    /// Stage-2 probability of replacing a record by the identity pair
    /// (pCT = CT, zero residual).
    pub identity_fraction: f64,
    /// Stage 3 starts from the stage-1 weights; otherwise from a fresh
    /// initialization.
    pub resume_from_stage1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            adam: AdamConfig::default(),
            lr_drop_at: 0.6,
            lr_drop_factor: 0.1,
            seed: 7,
            warmup_iterations: 200,
            validate_every: 100,
            revive_every: 200,
            revive_below: 0.05,
            ct_weight: 0.5,
            metric_weight: 0.5,
            identity_fraction: 0.1,
            resume_from_stage1: true,
        }
    }
}

impl TrainConfig {
    pub fn stage_defaults(stage: u8) -> Self {
        let base = Self::default();
        match stage {
            2 => Self {
                iterations: 1000,
                warmup_iterations: 0,
                ..base
            },
            3 => Self {
                warmup_iterations: 0,
                ..base
            },
            _ => base,
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drop = libm::floor(self.lr_drop_at * self.iterations as f64) as usize;
        if iteration >= drop {
            self.adam.lr * self.lr_drop_factor
        } else {
            self.adam.lr
        }
    }

    pub fn validate(&self, stage: u8) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(self.adam.lr > 0.0) || !(self.lr_drop_factor > 0.0) {
            return Err(Error::contract("learning rate and drop factor must be positive"));
        }
        if !(0.0..=1.0).contains(&self.identity_fraction) {
            return Err(Error::contract("identity_fraction must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.revive_below) {
            return Err(Error::contract("revive_below must lie in [0, 1)"));
        }
        if stage == 3 {
            if self.ct_weight < 0.0 || self.metric_weight < 0.0 {
                return Err(Error::contract("stage-3 loss weights must be non-negative"));
            }
            if (self.ct_weight + self.metric_weight - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "stage-3 loss weights must sum to 1, got {} + {}",
                    self.ct_weight, self.metric_weight
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean over the batch of the winning head's CT term (stage 1 and 3).
    pub ct_term: f64,
    /// Mean over the batch of the winning head's metric term (stage 3).
    pub metric_term: f64,
    /// Wins per head within this batch.
    pub wins: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome<M> {
    /// Parameters of the checkpoint with the lowest validation loss.
    pub model: M,
    pub log: Vec<IterationLog>,
    /// `(iteration, validation loss)` at every validation point.
    pub validation: Vec<(usize, f64)>,
    pub best_iteration: usize,
    pub best_validation: f64,
    /// Wins per head summed over all winner-takes-all iterations.
    pub win_totals: Vec<usize>,
}

/// Cycles through shuffled epochs of `0..n`.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("training split is empty"));
        }
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        s.refill();
        Ok(s)
    }

    fn refill(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Graph inputs shared by every stage: images as `[N, 1, H, W]` constants.
struct ImageBatch<T: Real> {
    mask: Tensor<T>,
    inv_counts: Tensor<T>,
}

fn mask_batch<T: Real>(masks: &[&Image2D]) -> Result<ImageBatch<T>> {
    let rows: Vec<[&Image2D; 1]> = masks.iter().map(|m| [*m]).collect();
    let refs: Vec<&[&Image2D]> = rows.iter().map(|r| &r[..]).collect();
    let mask = batch_tensor(&refs)?;
    let mut inv = Vec::with_capacity(masks.len());
    for m in masks {
        let c = m.count_set();
        if c == 0 {
            return Err(Error::contract("training mask is empty"));
        }
        inv.push(T::from_f64(1.0 / c as f64));
    }
    Ok(ImageBatch {
        mask,
        inv_counts: Tensor::new(vec![masks.len()], inv)?,
    })
}

fn single_channel<T: Real>(images: &[&Image2D]) -> Result<Tensor<T>> {
    let rows: Vec<[&Image2D; 1]> = images.iter().map(|m| [*m]).collect();
    let refs: Vec<&[&Image2D]> = rows.iter().map(|r| &r[..]).collect();
    batch_tensor(&refs)
}

/// Loss terms of one synthesis batch, before the optimizer step.
pub struct SynthesisLoss {
    pub loss: Var,
    pub ct_term: f64,
    pub metric_term: f64,
    pub winners: Vec<usize>,
}

/// Frozen imitation network plus the constants that scale the stage-3 terms.
pub struct MetricTerm<'a> {
    pub model: &'a ImitationModel,
    /// Typical stage-1 CT loss (HU^2).
    pub c_ct: f64,
    /// Typical squared residual of the stage-2 dataset.
    pub c_pet: f64,
    pub ct_weight: f64,
    pub metric_weight: f64,
}

/// Builds the synthesis loss of one batch on `g`.
///
/// Without `metric` this is the stage-1 objective: per head the masked CT L2,
/// then winner-takes-all (or the head mean while `average_heads`). With
/// `metric` each head scores `w_ct * ct / c_ct + w_metric * mean(g^2) / c_pet`
/// before the winner is taken.
pub fn synthesis_batch_loss<T: Real>(
    g: &mut Graph<T>,
    model: &SynthesisModel,
    vars: &[Var],
    batch: &[&Sample],
    metric: Option<&MetricTerm<'_>>,
    average_heads: bool,
    mode: DropoutMode,
    rng: &mut Rng,
) -> Result<SynthesisLoss> {
    let mrs: Vec<&Image2D> = batch.iter().map(|s| &s.mr).collect();
    let cts: Vec<&Image2D> = batch.iter().map(|s| &s.ct).collect();
    let heads: Vec<&Image2D> = batch.iter().map(|s| &s.head_mask).collect();
    let x = g.constant(single_channel(&mrs)?);
    let y = g.constant(single_channel(&cts)?);
    let mb = mask_batch::<T>(&heads)?;
    let mask = g.constant(mb.mask);
    let inv = g.constant(mb.inv_counts);
    let outs = model.net.forward(g, vars, x, mode, rng)?;

    let mut ct_terms = Vec::with_capacity(outs.len());
    let mut metric_terms = Vec::with_capacity(outs.len());
    let mut scores = Vec::with_capacity(outs.len());
    let imitation_vars = match metric {
        Some(m) => Some(m.model.net.params().bind(g, false).vars),
        None => None,
    };
    // air outside the head, as in the pCTs the imitation network was trained on
    let air = metric.map(|_| {
        let m = g.value(mask).clone();
        g.constant(Tensor::from_fn(m.shape(), |i| {
            (T::from_f64(1.0) - m.data()[i]) * T::from_f64(HU_AIR as f64)
        }))
    });
    for &out in &outs {
        let ct = l2_instance_loss(g, out, y, mask, inv)?;
        ct_terms.push(ct);
        match (metric, &imitation_vars) {
            (Some(m), Some(ivars)) => {
                let inside = g.mul(out, mask)?;
                let pct = g.add(inside, air.expect("metric term"))?;
                let z = m.model.forward_graph(g, ivars, pct, y)?;
                let z2 = g.square(z);
                let met = masked_instance_mean(g, z2, mask, inv)?;
                metric_terms.push(met);
                let a = g.mul_scalar(ct, T::from_f64(m.ct_weight / m.c_ct));
                let b = g.mul_scalar(met, T::from_f64(m.metric_weight / m.c_pet));
                scores.push(g.add(a, b)?);
            }
            _ => scores.push(ct),
        }
    }

    let n = batch.len();
    let (loss, winners) = if average_heads {
        let stacked = g.stack(&scores, 1)?;
        let (_, winners) = g.min_axis(stacked, 1)?;
        let mean = g.mean(stacked)?;
        (mean, winners)
    } else {
        wta_batch(g, &scores)?
    };
    let pick = |g: &Graph<T>, terms: &[Var]| -> f64 {
        if terms.is_empty() {
            return 0.0;
        }
        (0..n)
            .map(|i| g.value(terms[winners[i]]).data()[i].to_f64())
            .sum::<f64>()
            / n as f64
    };
    Ok(SynthesisLoss {
        loss,
        ct_term: pick(g, &ct_terms),
        metric_term: pick(g, &metric_terms),
        winners,
    })
}

fn check_finite(stage: u8, iteration: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage,
            iteration,
            loss,
        })
    }
}

fn apply_step(
    adam: &mut Adam,
    params: &mut ParamSet,
    grads: Vec<Option<Vec<f32>>>,
    lr: f64,
) -> Result<()> {
    let refs: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
    adam.step(params, &refs, lr)
}

/// Validation loss of a synthesis model: mean over samples of the
/// winner-takes-all CT loss (stage 1) or of the winning combined score
/// (stage 3).
pub fn synthesis_validation_loss(
    model: &SynthesisModel,
    samples: &[&Sample],
    metric: Option<&MetricTerm<'_>>,
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("validation split is empty"));
    }
    let mut total = 0.0;
    let mut rng = Rng::new(0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut g = Graph::<f32>::new();
        let vars = model.net.params().bind(&mut g, false).vars;
        let l = synthesis_batch_loss(
            &mut g,
            model,
            &vars,
            chunk,
            metric,
            false,
            DropoutMode::Off,
            &mut rng,
        )?;
        total += g.value(l.loss).item() as f64 * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

struct Best<M> {
    model: M,
    iteration: usize,
    loss: f64,
}

fn should_validate(cfg: &TrainConfig, it: usize) -> bool {
    it == cfg.iterations || (cfg.validate_every > 0 && it % cfg.validate_every == 0)
}

/// Observer called after every iteration.
pub trait Observer {
    fn iteration(&mut self, _stage: u8, _log: &IterationLog) {}
    fn validation(&mut self, _stage: u8, _iteration: usize, _loss: f64) {}
}

impl Observer for () {}

fn fit_synthesis(
    stage: u8,
    mut model: SynthesisModel,
    cfg: &TrainConfig,
    train: &[&Sample],
    val: &[&Sample],
    metric: Option<&MetricTerm<'_>>,
    observer: &mut dyn Observer,
) -> Result<StageOutcome<SynthesisModel>> {
    let heads = model.heads();
    let mut sampler = BatchSampler::new(train.len(), Rng::derive(cfg.seed, 11))?;
    let mut dropout_rng = Rng::derive(cfg.seed, 12);
    let mut adam = Adam::new(cfg.adam);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut validation = Vec::new();
    let mut win_totals = vec![0usize; heads];
    let mut best: Option<Best<SynthesisModel>> = None;
    let mut window = vec![0usize; heads];
    let mut window_iters = 0;
    let mut revive_rng = Rng::derive(cfg.seed, 13);
    if cfg.iterations == 0 {
        let loss = synthesis_validation_loss(&model, val, metric, cfg.batch_size)?;
        validation.push((0, loss));
        best = Some(Best {
            model: model.clone(),
            iteration: 0,
            loss,
        });
    }

    for it in 1..=cfg.iterations {
        let idx = sampler.next(cfg.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
        let average = stage == 1 && it <= cfg.warmup_iterations && heads > 1;
        let mut g = Graph::<f32>::new();
        let bound = model.net.params().bind(&mut g, true);
        let terms = synthesis_batch_loss(
            &mut g,
            &model,
            &bound.vars,
            &batch,
            metric,
            average,
            DropoutMode::Train,
            &mut dropout_rng,
        )?;
        let loss = g.value(terms.loss).item() as f64;
        check_finite(stage, it, loss)?;
        g.backward(terms.loss)?;
        let grads = model.net.params().collect_grads(&g, &bound);
        drop(g);
        let lr = cfg.lr_at(it - 1);
        apply_step(&mut adam, model.net.params_mut(), grads, lr)?;

        let mut wins = vec![0usize; heads];
        for &w in &terms.winners {
            wins[w] += 1;
        }
        if !average {
            for (t, w) in win_totals.iter_mut().zip(&wins) {
                *t += w;
            }
            if stage == 1 && heads > 1 && cfg.revive_every > 0 {
                for (t, w) in window.iter_mut().zip(&wins) {
                    *t += w;
                }
                window_iters += 1;
                if window_iters == cfg.revive_every {
                    revive_dead_heads(&mut model, &window, cfg.revive_below, &mut revive_rng);
                    window.iter_mut().for_each(|w| *w = 0);
                    window_iters = 0;
                }
            }
        }
        let row = IterationLog {
            iteration: it,
            lr,
            loss,
            ct_term: terms.ct_term,
            metric_term: terms.metric_term,
            wins,
        };
        observer.iteration(stage, &row);
        log.push(row);

        if should_validate(cfg, it) {
            let v = synthesis_validation_loss(&model, val, metric, cfg.batch_size)?;
            check_finite(stage, it, v)?;
            observer.validation(stage, it, v);
            validation.push((it, v));
            if best.as_ref().is_none_or(|b| v < b.loss) {
                best = Some(Best {
                    model: model.clone(),
                    iteration: it,
                    loss: v,
                });
            }
        }
    }
    let best = best.expect("at least one validation point");
    Ok(StageOutcome {
        model: best.model,
        log,
        validation,
        best_iteration: best.iteration,
        best_validation: best.loss,
        win_totals,
    })
}

/// Head with the most wins; ties go to the lowest index.
pub fn dominant_head(wins: &[usize]) -> usize {
    (0..wins.len()).max_by_key(|&j| (wins[j], usize::MAX - j)).unwrap_or(0)
}

/// Copies the most-winning head's parameters, with 1% relative Gaussian
/// jitter, into every head whose share of `window` is below `below`.
/// Returns the revived heads.
pub fn revive_dead_heads(model: &mut SynthesisModel, window: &[usize], below: f64, rng: &mut Rng) -> Vec<usize> {
    let total: usize = window.iter().sum();
    if total == 0 {
        return Vec::new();
    }
    let strongest = dominant_head(window);
    let src = model.net.head_param_names(strongest);
    let mut revived = Vec::new();
    for j in 0..window.len() {
        if j == strongest || (window[j] as f64) >= below * total as f64 {
            continue;
        }
        for (from, to) in src.iter().zip(model.net.head_param_names(j)) {
            let values = model.net.params().get(from).expect("head parameter").data().to_vec();
            let scale = 0.01 * rms(&values);
            let dst = model.net.params_mut().get_mut(&to).expect("head parameter");
            for (d, v) in dst.data_mut().iter_mut().zip(&values) {
                *d = v + (scale * rng.normal()) as f32;
            }
        }
        revived.push(j);
    }
    revived
}

fn rms(v: &[f32]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    libm::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum::<f64>() / v.len() as f64)
}

/// Stage 1: winner-takes-all CT regression from a fresh initialization.
pub fn train_stage1(
    arch: Architecture,
    size: usize,
    cfg: &TrainConfig,
    train: &[&Sample],
    val: &[&Sample],
    observer: &mut dyn Observer,
) -> Result<StageOutcome<SynthesisModel>> {
    cfg.validate(1)?;
    let model = SynthesisModel::new(arch, size, &mut Rng::derive(cfg.seed, 10))?;
    fit_synthesis(1, model, cfg, train, val, None, observer)
}

/// Stage 3: retrains the synthesis network against the combined score.
/// `stage1` is the starting point when `cfg.resume_from_stage1`, and always
/// provides the architecture.
pub fn train_stage3(
    stage1: &SynthesisModel,
    metric: &MetricTerm<'_>,
    cfg: &TrainConfig,
    train: &[&Sample],
    val: &[&Sample],
    observer: &mut dyn Observer,
) -> Result<StageOutcome<SynthesisModel>> {
    cfg.validate(3)?;
    if !(metric.c_ct > 0.0 && metric.c_pet > 0.0) {
        return Err(Error::contract("stage-3 normalization constants must be positive"));
    }
    let model = if cfg.resume_from_stage1 {
        stage1.clone()
    } else {
        SynthesisModel::new(
            stage1.net.architecture().clone(),
            stage1.size,
            &mut Rng::derive(cfg.seed, 30),
        )?
    };
    fit_synthesis(3, model, cfg, train, val, Some(metric), observer)
}

/// One pseudo-CT of the residual dataset and the PET error it causes.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualRecord {
    pub sample_id: u64,
    pub head: usize,
    pub pct: Image2D,
    /// `reference - pPET`, zero outside the head mask.
    pub z: Image2D,
}

/// Signed residual `reference - ppet`, zeroed outside `mask`.
pub fn residual_map(reference: &Image2D, ppet: &Image2D, mask: &Image2D) -> Result<Image2D> {
    reference.check_grid("residual_map", ppet)?;
    reference.check_grid("residual_map", mask)?;
    let data = reference
        .data()
        .iter()
        .zip(ppet.data())
        .zip(mask.data())
        .map(|((&r, &p), &m)| if m > 0.5 { r - p } else { 0.0 })
        .collect();
    reference.with_data(Modality::Residual, data)
}

/// Reconstructs every head's pCT of every sample and records the residual
/// against the reference reconstruction. Records are ordered by sample, then
/// head.
pub fn build_residual_dataset(
    model: &SynthesisModel,
    sim: &PetSimulator,
    samples: &[&Sample],
) -> Result<Vec<ResidualRecord>> {
    let mut out = Vec::with_capacity(samples.len() * model.heads());
    for s in samples {
        out.extend(residual_records_for(model, sim, s)?);
    }
    Ok(out)
}

/// The records of one sample; see [`build_residual_dataset`].
pub fn residual_records_for(
    model: &SynthesisModel,
    sim: &PetSimulator,
    sample: &Sample,
) -> Result<Vec<ResidualRecord>> {
    let annotate = |e: Error| match e {
        Error::Contract(m) => Error::Contract(format!("sample {}: {m}", sample.id)),
        Error::NonFinite(m) => Error::NonFinite(format!("sample {}: {m}", sample.id)),
        other => other,
    };
    let pcts = model
        .synthesize(&sample.mr, &sample.head_mask, DropoutMode::Off, &mut Rng::new(0))
        .map_err(annotate)?;
    let acq = sim.acquire(&sample.ct, &sample.pet).map_err(annotate)?;
    let reference = sim.reference(&acq).map_err(annotate)?;
    pcts.into_iter()
        .enumerate()
        .map(|(head, pct)| {
            let ppet = sim.reconstruct(&acq, &pct).map_err(annotate)?;
            Ok(ResidualRecord {
                sample_id: sample.id,
                head,
                z: residual_map(&reference, &ppet, &sample.head_mask)?,
                pct,
            })
        })
        .collect()
}

/// A residual record joined with the sample it came from.
#[derive(Clone, Copy, Debug)]
pub struct ResidualExample<'a> {
    pub record: &'a ResidualRecord,
    pub sample: &'a Sample,
}

/// Mean over examples of the head-mask mean of `z^2`.
pub fn mean_squared_residual(examples: &[ResidualExample<'_>]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("residual dataset is empty"));
    }
    let mut total = 0.0;
    for e in examples {
        let z = e.record.z.data();
        let (mut s, mut n) = (0.0f64, 0usize);
        for (&v, &m) in z.iter().zip(e.sample.head_mask.data()) {
            if m > 0.5 {
                s += v as f64 * v as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::contract(format!("sample {} has an empty head mask", e.sample.id)));
        }
        total += s / n as f64;
    }
    Ok(total / examples.len() as f64)
}

/// RMS of `z` over head-mask pixels, used as the imitation output scale.
pub fn residual_rms(examples: &[ResidualExample<'_>]) -> f64 {
    let (mut s, mut n) = (0.0f64, 0usize);
    for e in examples {
        for (&z, &m) in e.record.z.data().iter().zip(e.sample.head_mask.data()) {
            if m > 0.5 {
                s += z as f64 * z as f64;
                n += 1;
            }
        }
    }
    if n == 0 || s == 0.0 {
        1.0
    } else {
        libm::sqrt(s / n as f64)
    }
}

fn imitation_batch_loss<T: Real>(
    g: &mut Graph<T>,
    model: &ImitationModel,
    vars: &[Var],
    batch: &[(&Image2D, &Image2D, &Image2D, &Image2D)],
) -> Result<Var> {
    let pcts: Vec<&Image2D> = batch.iter().map(|b| b.0).collect();
    let cts: Vec<&Image2D> = batch.iter().map(|b| b.1).collect();
    let zs: Vec<&Image2D> = batch.iter().map(|b| b.2).collect();
    let masks: Vec<&Image2D> = batch.iter().map(|b| b.3).collect();
    let p = g.constant(single_channel(&pcts)?);
    let c = g.constant(single_channel(&cts)?);
    let z = g.constant(single_channel(&zs)?);
    let mb = mask_batch::<T>(&masks)?;
    let mask = g.constant(mb.mask);
    let inv = g.constant(mb.inv_counts);
    let pred = model.forward_graph(g, vars, p, c)?;
    let per = l2_instance_loss(g, pred, z, mask, inv)?;
    g.mean(per)
}

/// Mean masked L2 between predicted and true residuals.
pub fn imitation_validation_loss(
    model: &ImitationModel,
    examples: &[ResidualExample<'_>],
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("validation records are empty"));
    }
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let mut g = Graph::<f32>::new();
        let vars = model.net.params().bind(&mut g, false).vars;
        let rows: Vec<_> = chunk
            .iter()
            .map(|e| (&e.record.pct, &e.sample.ct, &e.record.z, &e.sample.head_mask))
            .collect();
        let l = imitation_batch_loss(&mut g, model, &vars, &rows)?;
        total += g.value(l).item() as f64 * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Stage 2: fits the imitation network to the residual records.
///
/// The output scale of `arch` is replaced by the RMS residual of the
/// training records.
pub fn train_stage2(
    mut arch: Architecture,
    cfg: &TrainConfig,
    train: &[ResidualExample<'_>],
    val: &[ResidualExample<'_>],
    observer: &mut dyn Observer,
) -> Result<StageOutcome<ImitationModel>> {
    cfg.validate(2)?;
    arch.output_scale = residual_rms(train);
    let mut model = ImitationModel::new(arch, &mut Rng::derive(cfg.seed, 20))?;
    let mut sampler = BatchSampler::new(train.len(), Rng::derive(cfg.seed, 21))?;
    let mut aug = Rng::derive(cfg.seed, 22);
    let mut adam = Adam::new(cfg.adam);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut validation = Vec::new();
    let mut best: Option<Best<ImitationModel>> = None;
    if cfg.iterations == 0 {
        let loss = imitation_validation_loss(&model, val, cfg.batch_size)?;
        validation.push((0, loss));
        best = Some(Best {
            model: model.clone(),
            iteration: 0,
            loss,
        });
    }
    let zero = train[0]
        .record
        .z
        .with_data(Modality::Residual, vec![0.0; train[0].record.z.len()])?;

    for it in 1..=cfg.iterations {
        let idx = sampler.next(cfg.batch_size);
        let rows: Vec<_> = idx
            .iter()
            .map(|&i| {
                let e = &train[i];
                if aug.bernoulli(cfg.identity_fraction) {
                    (&e.sample.ct, &e.sample.ct, &zero, &e.sample.head_mask)
                } else {
                    (&e.record.pct, &e.sample.ct, &e.record.z, &e.sample.head_mask)
                }
            })
            .collect();
        let mut g = Graph::<f32>::new();
        let bound = model.net.params().bind(&mut g, true);
        let loss_var = imitation_batch_loss(&mut g, &model, &bound.vars, &rows)?;
        let loss = g.value(loss_var).item() as f64;
        check_finite(2, it, loss)?;
        g.backward(loss_var)?;
        let grads = model.net.params().collect_grads(&g, &bound);
        drop(g);
        let lr = cfg.lr_at(it - 1);
        apply_step(&mut adam, model.net.params_mut(), grads, lr)?;
        let row = IterationLog {
            iteration: it,
            lr,
            loss,
            ct_term: 0.0,
            metric_term: loss,
            wins: Vec::new(),
        };
        observer.iteration(2, &row);
        log.push(row);

        if should_validate(cfg, it) {
            let v = imitation_validation_loss(&model, val, cfg.batch_size)?;
            check_finite(2, it, v)?;
            observer.validation(2, it, v);
            validation.push((it, v));
            if best.as_ref().is_none_or(|b| v < b.loss) {
                best = Some(Best {
                    model: model.clone(),
                    iteration: it,
                    loss: v,
                });
            }
        }
    }
    let best = best.expect("at least one validation point");
    Ok(StageOutcome {
        model: best.model,
        log,
        validation,
        best_iteration: best.iteration,
        best_validation: best.loss,
        win_totals: Vec::new(),
    })
}
