use alloc::vec::Vec;

use crate::error::Result;
use crate::image::{Image2D, Modality};

/// Bilinear HU to 511 keV attenuation conversion.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct MuConfig {
    /// Attenuation of water in cm^-1.
    pub mu_water: f64,
    /// Slope above 0 HU in cm^-1 per HU.
    pub bone_slope: f64,
}

impl Default for MuConfig {
    fn default() -> Self {
        Self {
            mu_water: 0.096,
            bone_slope: 5.64e-5,
        }
    }
}

impl MuConfig {
    /// `mu_water * (hu + 1000) / 1000` up to water, `mu_water + bone_slope * hu`
    /// above it, never negative.
    pub fn mu(&self, hu: f64) -> f64 {
        let mu = if hu <= 0.0 {
            self.mu_water * (hu + 1000.0) / 1000.0
        } else {
            self.mu_water + self.bone_slope * hu
        };
        mu.max(0.0)
    }
}

pub fn hu_to_mu(ct: &Image2D, config: &MuConfig) -> Result<Image2D> {
    ct.expect_modality("hu_to_mu", Modality::CtHu)?;
    let data: Vec<f32> = ct
        .data()
        .iter()
        .map(|&hu| config.mu(hu as f64) as f32)
        .collect();
    ct.with_data(Modality::MuMap, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn anchor_points() {
        let c = MuConfig::default();
        assert_eq!(c.mu(-1000.0), 0.0);
        assert!((c.mu(0.0) - 0.096).abs() < 1e-15);
        assert!((c.mu(1000.0) - 0.1524).abs() < 1e-12);
    }

    #[test]
    fn continuous_at_water() {
        let c = MuConfig::default();
        assert!((c.mu(-1e-9) - 0.096).abs() < 1e-9);
        assert!((c.mu(1e-9) - 0.096).abs() < 1e-9);
    }

    #[test]
    fn rejects_wrong_modality() {
        let mr = Image2D::filled(2, 2, 1.0, Modality::Mr, 0.5).unwrap();
        assert!(hu_to_mu(&mr, &MuConfig::default()).is_err());
    }

    #[test]
    fn output_is_nonnegative() {
        let ct = Image2D::new(3, 1, 1.0, Modality::CtHu, vec![-1000.0, -400.0, 2000.0]).unwrap();
        let mu = hu_to_mu(&ct, &MuConfig::default()).unwrap();
        assert!(mu.data().iter().all(|&v| v >= 0.0));
        assert_eq!(mu.modality(), Modality::MuMap);
    }
}
