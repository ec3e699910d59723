//! Paired MR / CT / PET head phantoms built from layered ellipses.
//!
//! Each sample is rendered from one latent tissue label map, so the three
//! modalities are registered exactly. MR intensity is a per-tissue remap
//! with a smooth multiplicative bias field; bone appears dark in MR whatever
//! its density, which leaves the skull HU genuinely ambiguous given the MR.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::{Image2D, Modality, HU_AIR};
use crate::rng::Rng;

/// Closed interval used for every randomized phantom attribute.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        rng.uniform_range(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum Tissue {
    Air = 0,
    Scalp = 1,
    Bone = 2,
    Gray = 3,
    White = 4,
    Csf = 5,
    Lesion = 6,
    /// Air pocket inside the head outline (sinus).
    Cavity = 7,
}

impl Tissue {
    fn in_brain(self) -> bool {
        matches!(self, Tissue::Gray | Tissue::White | Tissue::Csf | Tissue::Lesion)
    }

    fn in_head(self) -> bool {
        self != Tissue::Air
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct MrRendering {
    pub scalp: f64,
    pub bone: f64,
    pub gray: f64,
    pub white: f64,
    pub csf: f64,
    pub lesion: f64,
    pub cavity: f64,
    /// Relative per-sample jitter applied to each tissue level.
    pub contrast_jitter: f64,
    /// Peak relative amplitude of the multiplicative bias field.
    pub bias_amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for MrRendering {
    fn default() -> Self {
        Self {
            scalp: 0.85,
            bone: 0.08,
            gray: 0.55,
            white: 0.72,
            csf: 0.22,
            lesion: 0.62,
            cavity: 0.02,
            contrast_jitter: 0.05,
            bias_amplitude: 0.15,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct PetRendering {
    /// Uptake of white matter, a.u.
    pub white_uptake: f64,
    /// Gray over white uptake ratio.
    pub gray_white_ratio: f64,
    pub csf_uptake: f64,
    pub scalp_uptake: f64,
    /// Probability that a sample carries one hot lesion.
    pub lesion_probability: f64,
    /// Lesion uptake relative to gray matter.
    pub lesion_contrast: f64,
    /// Gaussian partial-volume blur of the uptake map, in pixels. Bone and
    /// air are zeroed again afterwards.
    pub smoothing_px: f64,
}

impl Default for PetRendering {
    fn default() -> Self {
        Self {
            white_uptake: 100.0,
            gray_white_ratio: 3.0,
            csf_uptake: 10.0,
            scalp_uptake: 30.0,
            lesion_probability: 0.3,
            lesion_contrast: 1.8,
            smoothing_px: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct PhantomSpec {
    pub size: usize,
    pub spacing_mm: f64,
    pub seed: u64,
    pub head_semi_x_mm: Range,
    pub head_semi_y_mm: Range,
    pub rotation_deg: Range,
    pub center_jitter_mm: f64,
    pub scalp_thickness_mm: Range,
    pub skull_thickness_mm: Range,
    /// CSF layer between the inner skull table and the cortex.
    pub csf_rim_mm: Range,
    pub cortex_thickness_mm: Range,
    pub ventricle_count: (usize, usize),
    pub ventricle_semi_mm: Range,
    pub cavity_count: (usize, usize),
    pub cavity_radius_mm: Range,
    pub lesion_radius_mm: Range,
    pub bone_hu: Range,
    pub soft_tissue_hu: Range,
    pub gray_hu: Range,
    pub white_hu: Range,
    pub csf_hu: Range,
    pub ct_noise_hu: f64,
    pub mr: MrRendering,
    pub pet: PetRendering,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            spacing_mm: 3.0,
            seed: 20_190_801,
            head_semi_x_mm: Range::new(66.0, 78.0),
            head_semi_y_mm: Range::new(78.0, 88.0),
            rotation_deg: Range::new(-10.0, 10.0),
            center_jitter_mm: 4.0,
            scalp_thickness_mm: Range::new(3.0, 6.0),
            skull_thickness_mm: Range::new(5.0, 9.0),
            csf_rim_mm: Range::new(3.0, 4.5),
            cortex_thickness_mm: Range::new(6.0, 10.0),
            ventricle_count: (1, 3),
            ventricle_semi_mm: Range::new(4.0, 12.0),
            cavity_count: (0, 2),
            cavity_radius_mm: Range::new(4.0, 8.0),
            lesion_radius_mm: Range::new(4.0, 8.0),
            bone_hu: Range::new(700.0, 1400.0),
            soft_tissue_hu: Range::new(-50.0, 80.0),
            gray_hu: Range::new(35.0, 45.0),
            white_hu: Range::new(24.0, 32.0),
            csf_hu: Range::new(4.0, 12.0),
            ct_noise_hu: 8.0,
            mr: MrRendering::default(),
            pet: PetRendering::default(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("head_semi_x_mm", self.head_semi_x_mm),
            ("head_semi_y_mm", self.head_semi_y_mm),
            ("scalp_thickness_mm", self.scalp_thickness_mm),
            ("skull_thickness_mm", self.skull_thickness_mm),
            ("csf_rim_mm", self.csf_rim_mm),
            ("cortex_thickness_mm", self.cortex_thickness_mm),
            ("ventricle_semi_mm", self.ventricle_semi_mm),
            ("cavity_radius_mm", self.cavity_radius_mm),
            ("lesion_radius_mm", self.lesion_radius_mm),
            ("bone_hu", self.bone_hu),
            ("soft_tissue_hu", self.soft_tissue_hu),
        ];
        for (name, r) in ranges {
            if !(r.lo < r.hi) {
                return Err(Error::contract(alloc::format!(
                    "phantom range `{name}` is degenerate: [{}, {}]",
                    r.lo,
                    r.hi
                )));
            }
        }
        if self.size < 8 || !(self.spacing_mm > 0.0) {
            return Err(Error::contract("phantom grid too small or spacing not positive"));
        }
        let fov = self.size as f64 * self.spacing_mm / 2.0;
        if self.head_semi_y_mm.hi + self.center_jitter_mm >= fov
            || self.head_semi_x_mm.hi + self.center_jitter_mm >= fov
        {
            return Err(Error::contract("head ellipse does not fit the field of view"));
        }
        if self.ventricle_count.0 > self.ventricle_count.1 || self.cavity_count.0 > self.cavity_count.1 {
            return Err(Error::contract("count ranges must satisfy min <= max"));
        }
        if !(self.pet.smoothing_px >= 0.0) {
            return Err(Error::contract("PET smoothing must be non-negative"));
        }
        if self.bone_hu.lo <= 0.0 {
            return Err(Error::contract("bone HU range must be positive"));
        }
        Ok(())
    }
}

/// One paired record.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub mr: Image2D,
    pub ct: Image2D,
    pub pet: Image2D,
    pub head_mask: Image2D,
    pub brain_mask: Image2D,
}

impl Sample {
    pub fn check_invariants(&self) -> Result<()> {
        for img in [&self.ct, &self.pet, &self.head_mask, &self.brain_mask] {
            self.mr.check_grid("Sample", img)?;
        }
        let head = self.head_mask.data();
        let brain = self.brain_mask.data();
        if head.iter().zip(brain).any(|(&h, &b)| b > 0.5 && h < 0.5) {
            return Err(Error::contract("brain mask is not contained in head mask"));
        }
        let ct = self.ct.data();
        if head.iter().zip(ct).any(|(&h, &c)| h < 0.5 && c != HU_AIR) {
            return Err(Error::contract("CT outside the head must be air"));
        }
        if !head.iter().zip(ct).any(|(&h, &c)| h > 0.5 && c > HU_AIR) {
            return Err(Error::contract("CT inside the head is all air"));
        }
        if head
            .iter()
            .zip(self.pet.data())
            .any(|(&h, &p)| h < 0.5 && p != 0.0)
        {
            return Err(Error::contract("PET outside the head must be zero"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Self {
        Self {
            cx,
            cy,
            a: a.max(1e-6),
            b: b.max(1e-6),
            cos: libm::cos(angle),
            sin: libm::sin(angle),
        }
    }

    fn shrunk(&self, by: f64) -> Self {
        Self {
            a: (self.a - by).max(1e-6),
            b: (self.b - by).max(1e-6),
            ..*self
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) <= 1.0
    }

    /// Point on the boundary at parametric angle `t` (in the ellipse frame).
    fn boundary(&self, t: f64) -> (f64, f64) {
        let (u, v) = (self.a * libm::cos(t), self.b * libm::sin(t));
        (
            self.cx + u * self.cos - v * self.sin,
            self.cy + u * self.sin + v * self.cos,
        )
    }

    /// Maps local coordinates scaled to the unit disk into world coordinates.
    fn local_point(&self, u: f64, v: f64) -> (f64, f64) {
        let (u, v) = (u * self.a, v * self.b);
        (
            self.cx + u * self.cos - v * self.sin,
            self.cy + u * self.sin + v * self.cos,
        )
    }
}

/// Tissue label per pixel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub size: usize,
    pub labels: Vec<Tissue>,
}

struct SampleTissues {
    bone_hu: f64,
    scalp_hu: f64,
    gray_hu: f64,
    white_hu: f64,
    csf_hu: f64,
}

fn pixel_center(spec: &PhantomSpec, row: usize, col: usize) -> (f64, f64) {
    let half = (spec.size as f64 - 1.0) / 2.0;
    (
        (col as f64 - half) * spec.spacing_mm,
        (half - row as f64) * spec.spacing_mm,
    )
}

fn build_labels(spec: &PhantomSpec, rng: &mut Rng) -> LabelMap {
    let angle = spec.rotation_deg.draw(rng) * PI / 180.0;
    let cx = rng.uniform_range(-spec.center_jitter_mm, spec.center_jitter_mm);
    let cy = rng.uniform_range(-spec.center_jitter_mm, spec.center_jitter_mm);
    let head = Ellipse::new(
        cx,
        cy,
        spec.head_semi_x_mm.draw(rng),
        spec.head_semi_y_mm.draw(rng),
        angle,
    );
    let skull = head.shrunk(spec.scalp_thickness_mm.draw(rng));
    let brain = skull.shrunk(spec.skull_thickness_mm.draw(rng));
    let cortex = brain.shrunk(spec.csf_rim_mm.draw(rng));
    let white = cortex.shrunk(spec.cortex_thickness_mm.draw(rng));

    let n_vent = rng.int_range(spec.ventricle_count.0, spec.ventricle_count.1);
    let ventricles: Vec<Ellipse> = (0..n_vent)
        .map(|_| {
            let (x, y) = white.local_point(rng.uniform_range(-0.35, 0.35), rng.uniform_range(-0.3, 0.3));
            Ellipse::new(
                x,
                y,
                spec.ventricle_semi_mm.draw(rng) * 0.5,
                spec.ventricle_semi_mm.draw(rng),
                angle + rng.uniform_range(-0.4, 0.4),
            )
        })
        .collect();

    let lesion_shape = if rng.bernoulli(spec.pet.lesion_probability) {
        let (x, y) = cortex.local_point(rng.uniform_range(-0.6, 0.6), rng.uniform_range(-0.6, 0.6));
        let r = spec.lesion_radius_mm.draw(rng);
        Some(Ellipse::new(x, y, r, r, 0.0))
    } else {
        None
    };

    let n_cav = rng.int_range(spec.cavity_count.0, spec.cavity_count.1);
    let cavities: Vec<Ellipse> = (0..n_cav)
        .map(|_| {
            // frontal sinus region: around the front (+y) of the skull
            let t = PI / 2.0 + rng.uniform_range(-0.45, 0.45);
            let (x, y) = skull.boundary(t);
            let r = spec.cavity_radius_mm.draw(rng);
            Ellipse::new(x, y, r, r * rng.uniform_range(0.6, 1.0), rng.uniform_range(0.0, PI))
        })
        .collect();

    let n = spec.size;
    let mut labels = vec![Tissue::Air; n * n];
    for row in 0..n {
        for col in 0..n {
            let (x, y) = pixel_center(spec, row, col);
            let mut t = Tissue::Air;
            if head.contains(x, y) {
                t = Tissue::Scalp;
            }
            if skull.contains(x, y) {
                t = Tissue::Bone;
            }
            if brain.contains(x, y) {
                t = Tissue::Csf;
            }
            if cortex.contains(x, y) {
                t = Tissue::Gray;
            }
            if white.contains(x, y) {
                t = Tissue::White;
            }
            if t == Tissue::White && ventricles.iter().any(|v| v.contains(x, y)) {
                t = Tissue::Csf;
            }
            if let Some(l) = &lesion_shape {
                if matches!(t, Tissue::Gray | Tissue::White) && l.contains(x, y) {
                    t = Tissue::Lesion;
                }
            }
            if t.in_head() && !t.in_brain() && cavities.iter().any(|c| c.contains(x, y)) {
                t = Tissue::Cavity;
            }
            labels[row * n + col] = t;
        }
    }
    LabelMap { size: n, labels }
}

/// Low-order polynomial field with peak relative amplitude `amp`.
fn bias_field(spec: &PhantomSpec, rng: &mut Rng) -> Vec<f64> {
    let amp = spec.mr.bias_amplitude;
    let coeffs: [f64; 5] = core::array::from_fn(|_| rng.uniform_range(-1.0, 1.0));
    let n = spec.size;
    let half = (n as f64 - 1.0) / 2.0;
    let mut field = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let u = (col as f64 - half) / half;
            let v = (half - row as f64) / half;
            let p = coeffs[0] * u + coeffs[1] * v + coeffs[2] * u * v + coeffs[3] * (u * u - 0.5)
                + coeffs[4] * (v * v - 0.5);
            field.push(1.0 + amp * libm::tanh(p / 2.0));
        }
    }
    field
}

/// Deterministic function of `(spec.seed, index)`.
pub fn generate_sample(spec: &PhantomSpec, index: u64) -> Result<Sample> {
    generate_labeled(spec, index).map(|(s, _)| s)
}

/// Like [`generate_sample`], also returning the latent label map.
pub fn generate_labeled(spec: &PhantomSpec, index: u64) -> Result<(Sample, LabelMap)> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.seed, index);
    let labels = build_labels(spec, &mut rng);
    let tissues = SampleTissues {
        bone_hu: spec.bone_hu.draw(&mut rng),
        scalp_hu: spec.soft_tissue_hu.draw(&mut rng),
        gray_hu: spec.gray_hu.draw(&mut rng),
        white_hu: spec.white_hu.draw(&mut rng),
        csf_hu: spec.csf_hu.draw(&mut rng),
    };
    let mrj: [f64; 7] = core::array::from_fn(|_| {
        1.0 + rng.uniform_range(-spec.mr.contrast_jitter, spec.mr.contrast_jitter)
    });
    let bias = bias_field(spec, &mut rng);

    let n = spec.size;
    let mut ct = vec![HU_AIR; n * n];
    let mut mr = vec![0.0f32; n * n];
    let mut uptake = vec![0.0f64; n * n];
    let mut head = vec![0.0f32; n * n];
    let mut brain = vec![0.0f32; n * n];
    let p = &spec.pet;
    let gray_uptake = p.white_uptake * p.gray_white_ratio;

    for (i, &t) in labels.labels.iter().enumerate() {
        let noise = rng.normal() * spec.ct_noise_hu;
        let hu = match t {
            Tissue::Air | Tissue::Cavity => HU_AIR as f64,
            Tissue::Scalp => tissues.scalp_hu + noise,
            Tissue::Bone => (tissues.bone_hu + 4.0 * noise).clamp(spec.bone_hu.lo, spec.bone_hu.hi),
            Tissue::Gray => tissues.gray_hu + noise,
            Tissue::White => tissues.white_hu + noise,
            Tissue::Csf => tissues.csf_hu + noise,
            Tissue::Lesion => tissues.gray_hu + 5.0 + noise,
        };
        ct[i] = hu as f32;

        let level = match t {
            Tissue::Air => 0.0,
            Tissue::Scalp => spec.mr.scalp * mrj[0],
            Tissue::Bone => spec.mr.bone * mrj[1],
            Tissue::Gray => spec.mr.gray * mrj[2],
            Tissue::White => spec.mr.white * mrj[3],
            Tissue::Csf => spec.mr.csf * mrj[4],
            Tissue::Lesion => spec.mr.lesion * mrj[5],
            Tissue::Cavity => spec.mr.cavity * mrj[6],
        };
        let mr_noise = rng.normal() * spec.mr.noise_sigma;
        mr[i] = (level * bias[i] + mr_noise) as f32;

        uptake[i] = match t {
            Tissue::Air | Tissue::Cavity | Tissue::Bone => 0.0,
            Tissue::Scalp => p.scalp_uptake,
            Tissue::Gray => gray_uptake,
            Tissue::White => p.white_uptake,
            Tissue::Csf => p.csf_uptake,
            Tissue::Lesion => gray_uptake * p.lesion_contrast,
        };

        if t.in_head() {
            head[i] = 1.0;
        }
        if t.in_brain() {
            brain[i] = 1.0;
        }
    }
    let smoothed = gaussian_blur(&uptake, n, spec.pet.smoothing_px);
    let pet: Vec<f32> = labels
        .labels
        .iter()
        .zip(&smoothed)
        .map(|(&t, &v)| match t {
            Tissue::Air | Tissue::Cavity | Tissue::Bone => 0.0,
            _ => v.max(0.0) as f32,
        })
        .collect();

    let make = |modality, data| Image2D::new(n, n, spec.spacing_mm, modality, data);
    let sample = Sample {
        id: index,
        mr: make(Modality::Mr, mr)?,
        ct: make(Modality::CtHu, ct)?,
        pet: make(Modality::Pet, pet)?,
        head_mask: make(Modality::Mask, head)?,
        brain_mask: make(Modality::Mask, brain)?,
    };
    Ok((sample, labels))
}

/// Separable Gaussian blur with zero padding; `sigma == 0` copies.
fn gaussian_blur(src: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return src.to_vec();
    }
    let r = libm::ceil(3.0 * sigma) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let norm: f64 = taps.iter().sum();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; n * n];
        for row in 0..n {
            for col in 0..n {
                let mut acc = 0.0;
                for (k, &w) in taps.iter().enumerate() {
                    let off = k as isize - r;
                    let (rr, cc) = if horizontal {
                        (row as isize, col as isize + off)
                    } else {
                        (row as isize + off, col as isize)
                    };
                    if rr >= 0 && cc >= 0 && (rr as usize) < n && (cc as usize) < n {
                        acc += w * src[rr as usize * n + cc as usize];
                    }
                }
                out[row * n + col] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Sample counts per split: validation and test are floored, the remainder
/// goes to training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn counts(&self, n: usize) -> Result<SplitCounts> {
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 || self.train < 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(Error::contract(alloc::format!(
                "split fractions must be non-negative and sum to 1, got {total}"
            )));
        }
        // the epsilon keeps e.g. 0.2 * 10 from flooring to 1
        let val = libm::floor(self.val * n as f64 + 1e-9) as usize;
        let test = libm::floor(self.test * n as f64 + 1e-9) as usize;
        Ok(SplitCounts {
            train: n - val - test,
            val,
            test,
        })
    }
}

/// Index ranges of each split: train first, then validation, then test.
pub fn split_indices(counts: SplitCounts) -> [core::ops::Range<u64>; 3] {
    let a = counts.train as u64;
    let b = a + counts.val as u64;
    let c = b + counts.test as u64;
    [0..a, a..b, b..c]
}

impl LabelMap {
    pub fn count(&self, t: Tissue) -> usize {
        self.labels.iter().filter(|&&l| l == t).count()
    }
}
