use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::{Image2D, Modality};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SinogramKind {
    /// Plain line integrals.
    Projection,
    /// `exp(-line integral of mu)`, values in (0, 1].
    AttenuationFactors,
    /// Attenuated emission data, non-negative.
    Emission,
}

impl SinogramKind {
    pub fn tag(self) -> &'static str {
        match self {
            SinogramKind::Projection => "projection",
            SinogramKind::AttenuationFactors => "attenuation_factors",
            SinogramKind::Emission => "emission",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "projection" => SinogramKind::Projection,
            "attenuation_factors" => SinogramKind::AttenuationFactors,
            "emission" => SinogramKind::Emission,
            _ => return None,
        })
    }
}

/// Projection-space data, angle-major: `values[angle * n_bins + bin]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub kind: SinogramKind,
    pub n_angles: usize,
    pub n_bins: usize,
    pub bin_spacing_mm: f64,
    /// Projection angles in radians, uniform over `[0, pi)`.
    pub angles: Vec<f64>,
    pub values: Vec<f32>,
}

impl Sinogram {
    pub fn bin(&self, angle: usize, bin: usize) -> f32 {
        self.values[angle * self.n_bins + bin]
    }

    fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} sinogram", self.kind.tag())));
        }
        match self.kind {
            SinogramKind::AttenuationFactors => {
                if self.values.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                    return Err(Error::contract("attenuation factors must lie in (0, 1]"));
                }
            }
            SinogramKind::Emission => {
                if self.values.iter().any(|&v| v < 0.0) {
                    return Err(Error::contract("emission sinogram must be non-negative"));
                }
            }
            SinogramKind::Projection => {}
        }
        Ok(())
    }

    /// Rebuilds a sinogram read from storage, re-checking its invariants.
    pub fn from_parts(
        kind: SinogramKind,
        n_bins: usize,
        bin_spacing_mm: f64,
        angles: Vec<f64>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != angles.len() * n_bins {
            return Err(Error::shape(
                "Sinogram::from_parts",
                &[angles.len(), n_bins],
                &[values.len()],
            ));
        }
        let s = Self {
            kind,
            n_angles: angles.len(),
            n_bins,
            bin_spacing_mm,
            angles,
            values,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RayModel {
    /// Bilinear sampling along each ray at a fixed step given in pixels.
    Interpolated { step_pixels: f64 },
}

impl RayModel {
    pub fn tag(&self) -> &'static str {
        match self {
            RayModel::Interpolated { .. } => "interpolated",
        }
    }
}

/// Parallel-beam geometry over an isotropic image grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectorGeometry {
    pub width: usize,
    pub height: usize,
    pub pixel_mm: f64,
    pub n_angles: usize,
    pub n_bins: usize,
    pub bin_mm: f64,
    pub ray_model: RayModel,
}

impl ProjectorGeometry {
    /// Square grid with enough bins of pixel width to cover the diagonal.
    pub fn for_image(size: usize, pixel_mm: f64, n_angles: usize) -> Self {
        let diag = libm::ceil(size as f64 * core::f64::consts::SQRT_2) as usize;
        Self {
            width: size,
            height: size,
            pixel_mm,
            n_angles,
            n_bins: diag | 1,
            bin_mm: pixel_mm,
            ray_model: RayModel::Interpolated { step_pixels: 0.5 },
        }
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.n_angles)
            .map(|a| a as f64 * PI / self.n_angles as f64)
            .collect()
    }

    /// Signed offset of a bin centre from the rotation axis, in mm.
    pub fn bin_offset_mm(&self, bin: usize) -> f64 {
        (bin as f64 - (self.n_bins as f64 - 1.0) / 2.0) * self.bin_mm
    }

    fn validate(&self) -> Result<()> {
        let RayModel::Interpolated { step_pixels } = self.ray_model;
        if self.width == 0 || self.height == 0 || self.n_angles == 0 || self.n_bins == 0 {
            return Err(Error::contract("projector geometry has an empty extent"));
        }
        if !(self.pixel_mm > 0.0 && self.bin_mm > 0.0) {
            return Err(Error::contract("projector spacings must be positive"));
        }
        if !(step_pixels > 0.0 && step_pixels <= 0.5) {
            return Err(Error::contract(
                "ray sampling step must be positive and at most half a pixel",
            ));
        }
        Ok(())
    }
}

/// Ray-driven projector with its system matrix held in compressed rows.
///
/// Row `angle * n_bins + bin` lists the bilinear weights (times the step
/// length in cm) of every pixel the ray samples. `backproject` applies the
/// transpose of the same matrix, so the pair is adjoint by construction.
#[derive(Clone, Debug)]
pub struct Projector {
    geometry: ProjectorGeometry,
    row_start: Vec<u32>,
    cols: Vec<u32>,
    weights: Vec<f32>,
}

impl Projector {
    pub fn new(geometry: ProjectorGeometry) -> Result<Self> {
        geometry.validate()?;
        let RayModel::Interpolated { step_pixels } = geometry.ray_model;
        let (w, h) = (geometry.width, geometry.height);
        let px = geometry.pixel_mm;
        let step_mm = step_pixels * px;
        let step_cm = step_mm / 10.0;
        let half_w = (w as f64 - 1.0) / 2.0;
        let half_h = (h as f64 - 1.0) / 2.0;
        let reach_mm = libm::sqrt(((w * w + h * h) as f64) / 4.0) * px + px;
        let n_steps = libm::ceil(reach_mm / step_mm) as i64;

        let mut row_start = Vec::with_capacity(geometry.n_angles * geometry.n_bins + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut scratch = vec![0.0f64; w * h];
        let mut touched: Vec<u32> = Vec::new();
        row_start.push(0u32);

        for theta in geometry.angles() {
            let (sin, cos) = (libm::sin(theta), libm::cos(theta));
            for bin in 0..geometry.n_bins {
                let s = geometry.bin_offset_mm(bin);
                for k in -n_steps..=n_steps {
                    let t = k as f64 * step_mm;
                    let x = s * cos - t * sin;
                    let y = s * sin + t * cos;
                    let fc = x / px + half_w;
                    let fr = half_h - y / px;
                    let c0 = libm::floor(fc);
                    let r0 = libm::floor(fr);
                    let (wx, wy) = (fc - c0, fr - r0);
                    let (c0, r0) = (c0 as i64, r0 as i64);
                    let taps = [
                        (r0, c0, (1.0 - wy) * (1.0 - wx)),
                        (r0, c0 + 1, (1.0 - wy) * wx),
                        (r0 + 1, c0, wy * (1.0 - wx)),
                        (r0 + 1, c0 + 1, wy * wx),
                    ];
                    for (r, c, wt) in taps {
                        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 || wt <= 0.0 {
                            continue;
                        }
                        let idx = r as usize * w + c as usize;
                        if scratch[idx] == 0.0 {
                            touched.push(idx as u32);
                        }
                        scratch[idx] += wt * step_cm;
                    }
                }
                touched.sort_unstable();
                for &idx in &touched {
                    cols.push(idx);
                    weights.push(scratch[idx as usize] as f32);
                    scratch[idx as usize] = 0.0;
                }
                touched.clear();
                row_start.push(cols.len() as u32);
            }
        }
        Ok(Self {
            geometry,
            row_start,
            cols,
            weights,
        })
    }

    pub fn geometry(&self) -> &ProjectorGeometry {
        &self.geometry
    }

    pub fn nonzeros(&self) -> usize {
        self.weights.len()
    }

    pub fn n_rays(&self) -> usize {
        self.row_start.len() - 1
    }

    fn check_image(&self, img: &Image2D) -> Result<()> {
        let g = &self.geometry;
        if img.width() != g.width || img.height() != g.height || img.spacing_mm() != g.pixel_mm {
            return Err(Error::shape(
                "forward_project",
                &[g.height, g.width],
                &[img.height(), img.width()],
            ));
        }
        Ok(())
    }

    fn check_sinogram(&self, sino: &Sinogram) -> Result<()> {
        let g = &self.geometry;
        if sino.n_angles != g.n_angles || sino.n_bins != g.n_bins || sino.bin_spacing_mm != g.bin_mm {
            return Err(Error::shape(
                "backproject",
                &[g.n_angles, g.n_bins],
                &[sino.n_angles, sino.n_bins],
            ));
        }
        Ok(())
    }

    /// `A x` on raw pixel values.
    pub fn project_raw(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.geometry.width * self.geometry.height);
        for (ray, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_start[ray] as usize, self.row_start[ray + 1] as usize);
            let mut acc = 0.0f64;
            for (&c, &wt) in self.cols[a..b].iter().zip(&self.weights[a..b]) {
                acc += wt as f64 * x[c as usize] as f64;
            }
            *o = acc as f32;
        }
    }

    /// `A^T y` on raw sinogram values, accumulated in `f64`.
    pub fn backproject_raw(&self, y: &[f32], out: &mut [f32]) {
        let mut acc = vec![0.0f64; out.len()];
        for (ray, &yv) in y.iter().enumerate() {
            if yv == 0.0 {
                continue;
            }
            let (a, b) = (self.row_start[ray] as usize, self.row_start[ray + 1] as usize);
            for (&c, &wt) in self.cols[a..b].iter().zip(&self.weights[a..b]) {
                acc[c as usize] += wt as f64 * yv as f64;
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = a as f32;
        }
    }

    pub fn empty_sinogram(&self, kind: SinogramKind, values: Vec<f32>) -> Sinogram {
        Sinogram {
            kind,
            n_angles: self.geometry.n_angles,
            n_bins: self.geometry.n_bins,
            bin_spacing_mm: self.geometry.bin_mm,
            angles: self.geometry.angles(),
            values,
        }
    }

    /// Line integrals in value * cm.
    pub fn forward_project(&self, img: &Image2D) -> Result<Sinogram> {
        self.check_image(img)?;
        let mut values = vec![0.0; self.n_rays()];
        self.project_raw(img.data(), &mut values);
        Ok(self.empty_sinogram(SinogramKind::Projection, values))
    }

    /// Exact adjoint of [`Projector::forward_project`].
    pub fn backproject(&self, sino: &Sinogram) -> Result<Image2D> {
        self.check_sinogram(sino)?;
        let g = &self.geometry;
        let mut out = vec![0.0; g.width * g.height];
        self.backproject_raw(&sino.values, &mut out);
        Image2D::new(g.width, g.height, g.pixel_mm, Modality::Residual, out)
    }

    /// `exp(-A mu)`.
    pub fn attenuation_factors(&self, mu: &Image2D) -> Result<Sinogram> {
        mu.expect_modality("attenuation_factors", Modality::MuMap)?;
        if mu.data().iter().any(|&v| v < 0.0) {
            return Err(Error::contract("attenuation map has negative values"));
        }
        let mut s = self.forward_project(mu)?;
        for v in &mut s.values {
            // Clamped so that extreme line integrals cannot underflow to 0.
            *v = libm::exp(-(*v as f64)).max(f32::MIN_POSITIVE as f64) as f32;
        }
        s.kind = SinogramKind::AttenuationFactors;
        s.validate()?;
        Ok(s)
    }

    pub fn check_compatible(&self, sino: &Sinogram) -> Result<()> {
        self.check_sinogram(sino)
    }
}
