//! Simulated PET acquisition and reconstruction.

mod mlem;
mod mu;
mod projector;
mod simulate;

pub use mlem::{mlem_reconstruct, mlem_reconstruct_with, MlemConfig};
pub use mu::{hu_to_mu, MuConfig};
pub use projector::{Projector, ProjectorGeometry, RayModel, Sinogram, SinogramKind};
pub use simulate::{simulate_emission, Acquisition, EmissionNoise, PetSimulator, PhysicsConfig};
