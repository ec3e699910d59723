use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Lowest representable CT value (air).
pub const HU_AIR: f32 = -1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Mr,
    CtHu,
    /// Linear attenuation coefficients in cm^-1.
    MuMap,
    /// Activity in arbitrary units.
    Pet,
    Mask,
    Residual,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Mr => "mr",
            Modality::CtHu => "ct_hu",
            Modality::MuMap => "mu_per_cm",
            Modality::Pet => "pet_au",
            Modality::Mask => "mask",
            Modality::Residual => "residual",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "mr" => Modality::Mr,
            "ct_hu" => Modality::CtHu,
            "mu_per_cm" => Modality::MuMap,
            "pet_au" => Modality::Pet,
            "mask" => Modality::Mask,
            "residual" => Modality::Residual,
            _ => return None,
        })
    }
}

/// Single-channel image on an isotropic grid, stored row-major (row 0 at the top).
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    spacing_mm: f64,
    modality: Modality,
    data: Vec<f32>,
}

impl Image2D {
    /// Builds an image and enforces the modality's value domain: CT is clamped
    /// at the air floor, masks must be binary, attenuation and activity must be
    /// non-negative.
    pub fn new(
        width: usize,
        height: usize,
        spacing_mm: f64,
        modality: Modality,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("Image2D::new", &[height, width], &[data.len()]));
        }
        if !(spacing_mm > 0.0) {
            return Err(Error::contract("pixel spacing must be positive"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} image at pixel {i}",
                modality.tag()
            )));
        }
        match modality {
            Modality::CtHu => data.iter_mut().for_each(|v| *v = v.max(HU_AIR)),
            Modality::Mask => {
                if data.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::contract("mask values must be 0 or 1"));
                }
            }
            Modality::MuMap | Modality::Pet => {
                if let Some(v) = data.iter().find(|&&v| v < 0.0) {
                    return Err(Error::contract(format!(
                        "{} image has negative value {v}",
                        modality.tag()
                    )));
                }
            }
            Modality::Mr | Modality::Residual => {}
        }
        Ok(Self {
            width,
            height,
            spacing_mm,
            modality,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, spacing_mm: f64, modality: Modality, value: f32) -> Result<Self> {
        Self::new(width, height, spacing_mm, modality, vec![value; width * height])
    }

    /// Same grid as `self`, different content.
    pub fn with_data(&self, modality: Modality, data: Vec<f32>) -> Result<Self> {
        Self::new(self.width, self.height, self.spacing_mm, modality, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn same_grid(&self, other: &Image2D) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.spacing_mm == other.spacing_mm
    }

    pub fn check_grid(&self, op: &'static str, other: &Image2D) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                &[self.height, self.width],
                &[other.height, other.width],
            ))
        }
    }

    pub fn expect_modality(&self, op: &str, modality: Modality) -> Result<()> {
        if self.modality == modality {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "{op} expects a {} image, got {}",
                modality.tag(),
                self.modality.tag()
            )))
        }
    }

    /// Number of set pixels of a mask image.
    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    /// Copy with every pixel outside `mask` set to `value`.
    pub fn fill_outside(&self, mask: &Image2D, value: f32) -> Result<Self> {
        self.check_grid("fill_outside", mask)?;
        let data = self
            .data
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m > 0.5 { v } else { value })
            .collect();
        self.with_data(self.modality, data)
    }

    /// Mean over set pixels of `mask`; `None` when the mask is empty.
    pub fn masked_mean(&self, mask: &Image2D) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (&v, &m) in self.data.iter().zip(mask.data()) {
            if m > 0.5 {
                sum += v as f64;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ct_is_clamped_at_air() {
        let img = Image2D::new(2, 1, 1.0, Modality::CtHu, vec![-1500.0, 20.0]).unwrap();
        assert_eq!(img.data(), &[-1000.0, 20.0]);
    }

    #[test]
    fn mask_must_be_binary() {
        assert!(Image2D::new(2, 1, 1.0, Modality::Mask, vec![0.0, 0.5]).is_err());
        assert!(Image2D::new(2, 1, 1.0, Modality::Mask, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn activity_must_be_nonnegative() {
        assert!(Image2D::new(1, 1, 1.0, Modality::Pet, vec![-1.0]).is_err());
        assert!(Image2D::new(1, 1, 1.0, Modality::MuMap, vec![-0.1]).is_err());
    }

    #[test]
    fn modality_tags_round_trip() {
        for m in [
            Modality::Mr,
            Modality::CtHu,
            Modality::MuMap,
            Modality::Pet,
            Modality::Mask,
            Modality::Residual,
        ] {
            assert_eq!(Modality::from_tag(m.tag()), Some(m));
        }
    }
}
