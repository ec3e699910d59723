use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::projector::{Projector, Sinogram, SinogramKind};
use crate::error::{Error, Result};
use crate::image::{Image2D, Modality};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct MlemConfig {
    pub iterations: usize,
    /// Lower bound on the sensitivity image in the update denominator.
    pub sensitivity_floor: f64,
    /// Uniform starting value; `None` starts at `sum(em) / sum(sensitivity)`.
    pub init: Option<f32>,
}

impl Default for MlemConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            sensitivity_floor: 1e-8,
            init: None,
        }
    }
}

/// MLEM with attenuation folded into the system model `A = diag(af) R`:
///
/// `x <- x / (A^T 1) * A^T (em / A x)`, with `0 / 0 := 0`.
///
/// `observe` is called after every iteration with the 1-based iteration
/// number and the current estimate.
pub fn mlem_reconstruct_with(
    projector: &Projector,
    em: &Sinogram,
    af: &Sinogram,
    config: &MlemConfig,
    mut observe: impl FnMut(usize, &[f32]),
) -> Result<Image2D> {
    projector.check_compatible(em)?;
    projector.check_compatible(af)?;
    if em.values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::contract("emission data must be finite and non-negative"));
    }
    if af.values.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::contract("attenuation factors must lie in (0, 1]"));
    }
    let g = projector.geometry();
    let npix = g.width * g.height;
    let nray = projector.n_rays();

    let mut sens = vec![0.0f32; npix];
    projector.backproject_raw(&af.values, &mut sens);
    let floor = config.sensitivity_floor as f32;
    let inv_sens: Vec<f32> = sens.iter().map(|&s| 1.0 / s.max(floor)).collect();

    let init = match config.init {
        Some(v) if v > 0.0 && v.is_finite() => v,
        Some(v) => {
            return Err(Error::contract(format!(
                "MLEM initial value must be positive, got {v}"
            )))
        }
        None => {
            let total_em: f64 = em.values.iter().map(|&v| v as f64).sum();
            let total_sens: f64 = sens.iter().map(|&v| v as f64).sum();
            if total_em > 0.0 && total_sens > 0.0 {
                (total_em / total_sens) as f32
            } else {
                1.0
            }
        }
    };
    let mut x = vec![init; npix];
    let mut fwd = vec![0.0f32; nray];
    let mut back = vec![0.0f32; npix];

    for it in 1..=config.iterations {
        projector.project_raw(&x, &mut fwd);
        for ((f, &a), &e) in fwd.iter_mut().zip(&af.values).zip(&em.values) {
            let expected = *f * a;
            // ratio em / (A x) folded with the diag(af) of A^T
            *f = if expected > 0.0 { e / expected * a } else { 0.0 };
        }
        projector.backproject_raw(&fwd, &mut back);
        for ((xv, &b), &is) in x.iter_mut().zip(&back).zip(&inv_sens) {
            *xv *= b * is;
        }
        if let Some(p) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "MLEM iterate {it} at pixel {p}"
            )));
        }
        observe(it, &x);
    }
    Image2D::new(g.width, g.height, g.pixel_mm, Modality::Pet, x)
}

pub fn mlem_reconstruct(
    projector: &Projector,
    em: &Sinogram,
    af: &Sinogram,
    config: &MlemConfig,
) -> Result<Image2D> {
    mlem_reconstruct_with(projector, em, af, config, |_, _| {})
}

pub(crate) fn ensure_kind(s: &Sinogram, kind: SinogramKind, op: &str) -> Result<()> {
    if s.kind == kind {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "{op} expects a {} sinogram, got {}",
            kind.tag(),
            s.kind.tag()
        )))
    }
}
