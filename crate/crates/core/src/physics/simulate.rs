use super::mlem::{ensure_kind, mlem_reconstruct, MlemConfig};
use super::mu::{hu_to_mu, MuConfig};
use super::projector::{Projector, ProjectorGeometry, Sinogram, SinogramKind};
use crate::error::{Error, Result};
use crate::image::{Image2D, Modality};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum EmissionNoise {
    None,
    /// Scale the noiseless data to `mean_counts` per non-empty bin, draw
    /// Poisson counts, and scale back.
    Poisson { mean_counts: f64, seed: u64 },
}

/// `R(pet) * af`, optionally Poisson resampled.
pub fn simulate_emission(
    projector: &Projector,
    pet: &Image2D,
    af: &Sinogram,
    noise: EmissionNoise,
) -> Result<Sinogram> {
    pet.expect_modality("simulate_emission", Modality::Pet)?;
    ensure_kind(af, SinogramKind::AttenuationFactors, "simulate_emission")?;
    projector.check_compatible(af)?;
    let mut em = projector.forward_project(pet)?;
    em.kind = SinogramKind::Emission;
    for (v, &a) in em.values.iter_mut().zip(&af.values) {
        *v = (*v * a).max(0.0);
    }
    if let EmissionNoise::Poisson { mean_counts, seed } = noise {
        if !(mean_counts > 0.0) {
            return Err(Error::contract("Poisson mean counts must be positive"));
        }
        let (sum, n) = em
            .values
            .iter()
            .filter(|&&v| v > 0.0)
            .fold((0.0f64, 0usize), |(s, n), &v| (s + v as f64, n + 1));
        if n > 0 {
            let scale = mean_counts / (sum / n as f64);
            let mut rng = Rng::new(seed);
            for v in &mut em.values {
                *v = (rng.poisson(*v as f64 * scale) / scale) as f32;
            }
        }
    }
    Ok(em)
}

/// Data shared by every reconstruction of one slice: the emission sinogram
/// simulated through the true attenuation.
#[derive(Clone, Debug)]
pub struct Acquisition {
    pub emission: Sinogram,
    pub true_factors: Sinogram,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicsConfig {
    pub geometry: ProjectorGeometry,
    pub mu: MuConfig,
    pub mlem: MlemConfig,
    pub noise: EmissionNoise,
}

impl PhysicsConfig {
    pub fn for_image(size: usize, pixel_mm: f64) -> Self {
        Self {
            geometry: ProjectorGeometry::for_image(size, pixel_mm, 96),
            mu: MuConfig::default(),
            mlem: MlemConfig::default(),
            noise: EmissionNoise::None,
        }
    }
}

/// Simulated PET acquisition and attenuation-corrected reconstruction.
#[derive(Clone, Debug)]
pub struct PetSimulator {
    projector: Projector,
    pub config: PhysicsConfig,
}

impl PetSimulator {
    pub fn new(config: PhysicsConfig) -> Result<Self> {
        Ok(Self {
            projector: Projector::new(config.geometry)?,
            config,
        })
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn factors_from_ct(&self, ct: &Image2D) -> Result<Sinogram> {
        let mu = hu_to_mu(ct, &self.config.mu)?;
        self.projector.attenuation_factors(&mu)
    }

    /// Emission data of `pet` attenuated by the true CT.
    pub fn acquire(&self, true_ct: &Image2D, pet: &Image2D) -> Result<Acquisition> {
        true_ct.check_grid("acquire", pet)?;
        let true_factors = self.factors_from_ct(true_ct)?;
        let emission = simulate_emission(&self.projector, pet, &true_factors, self.config.noise)?;
        Ok(Acquisition {
            emission,
            true_factors,
        })
    }

    /// Reconstruction of `acq` corrected with the attenuation implied by `ct_for_ac`.
    pub fn reconstruct(&self, acq: &Acquisition, ct_for_ac: &Image2D) -> Result<Image2D> {
        let af = self.factors_from_ct(ct_for_ac)?;
        mlem_reconstruct(&self.projector, &acq.emission, &af, &self.config.mlem)
    }

    /// Reference reconstruction, corrected with the true attenuation.
    pub fn reference(&self, acq: &Acquisition) -> Result<Image2D> {
        mlem_reconstruct(
            &self.projector,
            &acq.emission,
            &acq.true_factors,
            &self.config.mlem,
        )
    }

    /// Emission from `pet_ref` through the true CT, reconstructed with the
    /// attenuation map of `pct`.
    pub fn reconstruct_ppet(
        &self,
        pct: &Image2D,
        true_ct: &Image2D,
        pet_ref: &Image2D,
    ) -> Result<Image2D> {
        pct.check_grid("reconstruct_ppet", true_ct)?;
        let acq = self.acquire(true_ct, pet_ref)?;
        self.reconstruct(&acq, pct)
    }
}
