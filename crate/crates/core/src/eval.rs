//! Masked error metrics, Z-score maps, the paired t-test and the per-method
//! report.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{Image2D, Modality};
use crate::physics::PetSimulator;

/// Floor applied to the per-pixel standard deviation of [`zscore_map`].
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Mean of `|a - b|` over the set pixels of `mask`.
pub fn mae_masked(a: &Image2D, b: &Image2D, mask: &Image2D) -> Result<f64> {
    a.check_grid("mae_masked", b)?;
    a.check_grid("mae_masked", mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&x, &y), &m) in a.data().iter().zip(b.data()).zip(mask.data()) {
        if m > 0.5 {
            sum += (x as f64 - y as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::contract("mae_masked over an empty mask"));
    }
    Ok(sum / n as f64)
}

fn check_samples(op: &'static str, like: &Image2D, samples: &[Image2D]) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::contract(format!(
            "{op} needs at least two samples, got {}",
            samples.len()
        )));
    }
    samples.iter().try_for_each(|s| like.check_grid(op, s))
}

/// Per-pixel mean and population variance over `samples`.
pub fn sample_moments(samples: &[Image2D]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("sample_moments needs at least two samples, got 0"))?;
    check_samples("sample_moments", first, samples)?;
    let n = samples[0].len();
    let m = samples.len() as f64;
    let mut mean = vec![0.0; n];
    for s in samples {
        for (acc, &v) in mean.iter_mut().zip(s.data()) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; n];
    for s in samples {
        for ((acc, &v), &mu) in var.iter_mut().zip(s.data()).zip(&mean) {
            let d = v as f64 - mu;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    Ok((mean, var))
}

/// `(reference - mean) / max(std, sigma_floor)` per pixel inside `mask`, zero
/// outside, with the population standard deviation over `samples`.
pub fn zscore_map(
    reference: &Image2D,
    samples: &[Image2D],
    mask: &Image2D,
    sigma_floor: f64,
) -> Result<Image2D> {
    if !(sigma_floor > 0.0) {
        return Err(Error::contract("sigma_floor must be positive"));
    }
    check_samples("zscore_map", reference, samples)?;
    reference.check_grid("zscore_map", mask)?;
    let (mean, var) = sample_moments(samples)?;
    let data = reference
        .data()
        .iter()
        .zip(mask.data())
        .zip(mean.iter().zip(&var))
        .map(|((&r, &m), (&mu, &v))| {
            if m > 0.5 {
                ((r as f64 - mu) / libm::sqrt(v).max(sigma_floor)) as f32
            } else {
                0.0
            }
        })
        .collect();
    reference.with_data(Modality::Residual, data)
}

/// Median of the values of `img` at set pixels of `mask` (mean of the two
/// middle values for even counts).
pub fn masked_median(img: &Image2D, mask: &Image2D) -> Result<f64> {
    img.check_grid("masked_median", mask)?;
    let mut v: Vec<f64> = img
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m > 0.5)
        .map(|(&x, _)| x as f64)
        .collect();
    if v.is_empty() {
        return Err(Error::contract("masked_median over an empty mask"));
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    })
}

/// Outcome of a two-sided paired t-test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value; `NaN` when `degenerate`.
    pub p: f64,
    pub n: usize,
    pub mean_difference: f64,
    /// The differences have zero variance but a non-zero mean, so `t` is
    /// unbounded. `t` is then `±inf` and `p` is `NaN`.
    pub degenerate: bool,
}

/// Paired t-test on `x[i] - y[i]`.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(Error::contract(format!(
            "paired_t_test length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::contract("paired_t_test needs at least two pairs"));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let ss = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let sd = libm::sqrt(ss / (n - 1) as f64);
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sd <= 1e-12 * scale || sd == 0.0 {
        if mean == 0.0 || scale == 0.0 {
            return Ok(TTest {
                t: 0.0,
                p: 1.0,
                n,
                mean_difference: 0.0,
                degenerate: false,
            });
        }
        return Ok(TTest {
            t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
            p: f64::NAN,
            n,
            mean_difference: mean,
            degenerate: true,
        });
    }
    let t = mean / (sd / libm::sqrt(n as f64));
    Ok(TTest {
        t,
        p: student_t_two_sided(t, (n - 1) as f64),
        n,
        mean_difference: mean,
        degenerate: false,
    })
}

/// `P(|T| >= |t|)` for Student's t with `dof` degrees of freedom.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    regularized_incomplete_beta(0.5 * dof, 0.5, x).clamp(0.0, 1.0)
}

/// `I_x(a, b)` by Lentz's continued fraction, using the symmetry relation to
/// stay in the fast-converging region. Relative accuracy is about 1e-12 for
/// moderate `a` and `b`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Spread and calibration of one sampling scheme on one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeSummary {
    /// Per-pixel population variance, zero outside the brain mask.
    pub variance: Image2D,
    /// Per-pixel `|Z|`, zero outside the brain mask.
    pub abs_z: Image2D,
    pub median_abs_z: f64,
    pub median_variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingComparison {
    pub multi_hypothesis: SchemeSummary,
    pub mc_dropout: SchemeSummary,
}

pub fn summarize_scheme(reference: &Image2D, samples: &[Image2D], mask: &Image2D) -> Result<SchemeSummary> {
    let z = zscore_map(reference, samples, mask, SIGMA_FLOOR)?;
    let (_, var) = sample_moments(samples)?;
    let variance = reference.with_data(
        Modality::Residual,
        var.iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m > 0.5 { v as f32 } else { 0.0 })
            .collect(),
    )?;
    let abs_z = z.with_data(Modality::Residual, z.data().iter().map(|v| v.abs()).collect())?;
    Ok(SchemeSummary {
        median_abs_z: masked_median(&abs_z, mask)?,
        median_variance: masked_median(&variance, mask)?,
        variance,
        abs_z,
    })
}

/// Variance and `|Z|` maps of both sampling schemes against `reference`.
pub fn compare_sampling(
    reference: &Image2D,
    mh_samples: &[Image2D],
    mc_samples: &[Image2D],
    brain_mask: &Image2D,
) -> Result<SamplingComparison> {
    Ok(SamplingComparison {
        multi_hypothesis: summarize_scheme(reference, mh_samples, brain_mask)?,
        mc_dropout: summarize_scheme(reference, mc_samples, brain_mask)?,
    })
}

/// Slice-averaged medians and the paired test of per-slice median `|Z|`
/// (multi-hypothesis minus MC dropout).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingStudy {
    pub slices: usize,
    pub mean_median_abs_z_mh: f64,
    pub mean_median_abs_z_mc: f64,
    pub mean_median_variance_mh: f64,
    pub mean_median_variance_mc: f64,
    pub test: TTest,
}

pub fn sampling_study(comparisons: &[SamplingComparison]) -> Result<SamplingStudy> {
    let n = comparisons.len();
    let mh: Vec<f64> = comparisons.iter().map(|c| c.multi_hypothesis.median_abs_z).collect();
    let mc: Vec<f64> = comparisons.iter().map(|c| c.mc_dropout.median_abs_z).collect();
    let test = paired_t_test(&mh, &mc)?;
    let mean = |v: &mut dyn Iterator<Item = f64>| v.sum::<f64>() / n as f64;
    Ok(SamplingStudy {
        slices: n,
        mean_median_abs_z_mh: mean(&mut mh.iter().copied()),
        mean_median_abs_z_mc: mean(&mut mc.iter().copied()),
        mean_median_variance_mh: mean(&mut comparisons.iter().map(|c| c.multi_hypothesis.median_variance)),
        mean_median_variance_mc: mean(&mut comparisons.iter().map(|c| c.mc_dropout.median_variance)),
        test,
    })
}

/// Metrics of one method on one test sample. Multi-head methods report the
/// mean over heads of the per-head errors.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub sample_id: u64,
    pub method: String,
    /// pCT MAE in HU over the head mask.
    pub mae_ct_hu: f64,
    /// pPET MAE over the brain mask, in activity units.
    pub mae_pet_au: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodAggregate {
    pub method: String,
    pub n: usize,
    pub ct_mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single row.
    pub ct_std: f64,
    pub pet_mean: f64,
    pub pet_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTest {
    /// Method whose values are `x` in `x - y`.
    pub method: String,
    pub against: String,
    pub metric: String,
    pub pairing: String,
    pub test: TTest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregates: Vec<MethodAggregate>,
    pub tests: Vec<ComparisonTest>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        libm::sqrt(v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0))
    } else {
        0.0
    };
    (mean, std)
}

/// Per-method aggregates in order of first appearance.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<MethodAggregate> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let ct: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.mae_ct_hu).collect();
            let pet: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.mae_pet_au).collect();
            let (ct_mean, ct_std) = mean_std(&ct);
            let (pet_mean, pet_std) = mean_std(&pet);
            MethodAggregate {
                method: m.into(),
                n: ct.len(),
                ct_mean,
                ct_std,
                pet_mean,
                pet_std,
            }
        })
        .collect()
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<MetricsRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("report has no rows"));
        }
        Ok(Self {
            aggregates: aggregate(&rows),
            rows,
            tests: Vec::new(),
        })
    }

    /// Values of `metric` ("ct" or "pet") for `method`, ordered by sample id.
    pub fn paired_values(&self, method: &str, metric: &str) -> Result<Vec<(u64, f64)>> {
        let mut v: Vec<(u64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| {
                (
                    r.sample_id,
                    if metric == "ct" { r.mae_ct_hu } else { r.mae_pet_au },
                )
            })
            .collect();
        if v.is_empty() {
            return Err(Error::contract(format!("no rows for method `{method}`")));
        }
        v.sort_by_key(|p| p.0);
        Ok(v)
    }

    /// Paired test of `method - against` on `metric` ("ct" or "pet"), pairing
    /// rows by sample id, appended to `tests`.
    pub fn add_test(&mut self, method: &str, against: &str, metric: &str) -> Result<TTest> {
        if metric != "ct" && metric != "pet" {
            return Err(Error::contract(format!("unknown metric `{metric}`")));
        }
        let a = self.paired_values(method, metric)?;
        let b = self.paired_values(against, metric)?;
        if a.iter().map(|p| p.0).ne(b.iter().map(|p| p.0)) {
            return Err(Error::contract(format!(
                "methods `{method}` and `{against}` cover different samples"
            )));
        }
        let x: Vec<f64> = a.iter().map(|p| p.1).collect();
        let y: Vec<f64> = b.iter().map(|p| p.1).collect();
        let test = paired_t_test(&x, &y)?;
        self.tests.push(ComparisonTest {
            method: method.into(),
            against: against.into(),
            metric: metric.into(),
            pairing: format!("by sample id, n = {}", x.len()),
            test,
        });
        Ok(test)
    }

    pub fn aggregate_for(&self, method: &str) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    /// Checks that `aggregates` match a recomputation from `rows` to within
    /// `rel_tol`.
    pub fn check_aggregates(&self, rel_tol: f64) -> Result<()> {
        let fresh = aggregate(&self.rows);
        if fresh.len() != self.aggregates.len() {
            return Err(Error::contract("report aggregates list different methods than its rows"));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= rel_tol * a.abs().max(b.abs()).max(1e-12);
        for (f, a) in fresh.iter().zip(&self.aggregates) {
            let ok = f.method == a.method
                && f.n == a.n
                && close(f.ct_mean, a.ct_mean)
                && close(f.ct_std, a.ct_std)
                && close(f.pet_mean, a.pet_mean)
                && close(f.pet_std, a.pet_std);
            if !ok {
                return Err(Error::contract(format!(
                    "aggregate for `{}` does not match its rows",
                    a.method
                )));
            }
        }
        Ok(())
    }
}

/// Square CT perturbation: `size x size` pixels with top-left corner
/// `(row, col)`, raised by `delta_hu`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub delta_hu: f64,
}

impl Patch {
    /// Patch of `size` centred on `(row, col)` (for even sizes the extra
    /// pixel goes down and right).
    pub fn centered(row: usize, col: usize, size: usize, delta_hu: f64) -> Result<Self> {
        let half = (size.max(1) - 1) / 2;
        if row < half || col < half || size == 0 {
            return Err(Error::contract("patch does not fit the image"));
        }
        Ok(Self {
            row: row - half,
            col: col - half,
            size,
            delta_hu,
        })
    }

    /// Whether `(r, c)` lies in the patch grown by a factor `scale` about its
    /// centre (`scale = 1` is the patch itself).
    pub fn contains_scaled(&self, r: usize, c: usize, scale: usize) -> bool {
        let grow = (self.size * scale.max(1) - self.size) / 2;
        let within = |v: usize, lo: usize| v + grow >= lo && v < lo + self.size + grow;
        within(r, self.row) && within(c, self.col)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationResult {
    /// Perturbed minus true CT.
    pub ct_residual: Image2D,
    /// Reconstruction with the perturbed CT minus the reference, zero
    /// outside the head mask.
    pub pet_residual: Image2D,
    pub mean_brain_activity: f64,
    /// Brain pixels outside the 3x-dilated patch.
    pub brain_outside: usize,
    /// Of those, pixels with `|pet_residual| > threshold * mean_brain_activity`.
    pub above_threshold: usize,
    pub fraction: f64,
    pub max_outside_relative: f64,
    pub median_outside_relative: f64,
    /// Pixels where the CT residual is non-zero.
    pub ct_support: usize,
    /// Pixels of the patch.
    pub patch_pixels: usize,
    /// The CT residual is non-zero exactly on the patch.
    pub ct_confined: bool,
    /// Pixels where the PET residual is non-zero.
    pub pet_support: usize,
}

/// Reconstructs the emission of `pet` (attenuated by `ct`) once with `ct`
/// and once with `ct` plus `patch`, and measures how far the PET error
/// spreads beyond the patch.
pub fn perturbation_study(
    sim: &PetSimulator,
    ct: &Image2D,
    pet: &Image2D,
    head_mask: &Image2D,
    brain_mask: &Image2D,
    patch: Patch,
    threshold: f64,
) -> Result<PerturbationResult> {
    let (w, h) = (ct.width(), ct.height());
    if patch.row + patch.size > h || patch.col + patch.size > w {
        return Err(Error::contract("patch does not fit the image"));
    }
    for r in patch.row..patch.row + patch.size {
        for c in patch.col..patch.col + patch.size {
            if head_mask.get(r, c) < 0.5 {
                return Err(Error::contract(format!(
                    "patch pixel ({r}, {c}) lies outside the head mask"
                )));
            }
        }
    }
    let mut data = ct.data().to_vec();
    for r in patch.row..patch.row + patch.size {
        for c in patch.col..patch.col + patch.size {
            data[r * w + c] += patch.delta_hu as f32;
        }
    }
    let perturbed = ct.with_data(Modality::CtHu, data)?;
    let acq = sim.acquire(ct, pet)?;
    let reference = sim.reference(&acq)?;
    let ppet = sim.reconstruct(&acq, &perturbed)?;
    let ct_residual = ct.with_data(
        Modality::Residual,
        perturbed.data().iter().zip(ct.data()).map(|(a, b)| a - b).collect(),
    )?;
    let pet_residual = ct.with_data(
        Modality::Residual,
        ppet.data()
            .iter()
            .zip(reference.data())
            .zip(head_mask.data())
            .map(|((a, b), &m)| if m > 0.5 { a - b } else { 0.0 })
            .collect(),
    )?;
    let mean = reference
        .masked_mean(brain_mask)
        .ok_or_else(|| Error::contract("brain mask is empty"))?;
    let mut rel = Vec::new();
    let mut ct_support = 0;
    let mut ct_confined = true;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let in_patch = patch.contains_scaled(r, c, 1);
            if ct_residual.data()[i] != 0.0 {
                ct_support += 1;
            }
            if (ct_residual.data()[i] != 0.0) != (in_patch && patch.delta_hu != 0.0) {
                ct_confined = false;
            }
            if brain_mask.data()[i] > 0.5 && !patch.contains_scaled(r, c, 3) {
                rel.push((pet_residual.data()[i] as f64).abs() / mean);
            }
        }
    }
    let above = rel.iter().filter(|&&v| v > threshold).count();
    let max = rel.iter().copied().fold(0.0, f64::max);
    rel.sort_by(f64::total_cmp);
    let median = if rel.is_empty() { 0.0 } else { rel[rel.len() / 2] };
    let pet_support = pet_residual.data().iter().filter(|&&v| v != 0.0).count();
    Ok(PerturbationResult {
        mean_brain_activity: mean,
        brain_outside: rel.len(),
        above_threshold: above,
        fraction: if rel.is_empty() { 0.0 } else { above as f64 / rel.len() as f64 },
        max_outside_relative: max,
        median_outside_relative: median,
        ct_support,
        patch_pixels: patch.size * patch.size,
        ct_confined,
        pet_support,
        ct_residual,
        pet_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, 1) = x and I_x(a, 1) = x^a
        assert!((regularized_incomplete_beta(1.0, 1.0, 0.3) - 0.3).abs() < 1e-12);
        assert!((regularized_incomplete_beta(3.0, 1.0, 0.6) - 0.216).abs() < 1e-12);
        // t with one dof is Cauchy: P(|T| > 1) = 1/2
        assert!((student_t_two_sided(1.0, 1.0) - 0.5).abs() < 1e-12);
        // two dof: P(|T| > t) = 1 - t / sqrt(2 + t^2)
        let t: f64 = 2.5;
        let want = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((student_t_two_sided(t, 2.0) - want).abs() < 1e-12);
    }
}
