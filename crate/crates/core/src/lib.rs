//! Cone-beam CT simulation toolkit.
//!
//! Turns a CT volume and its label mask into synthetic cone-beam CT at
//! several projection counts: Siddon ray-traced DRRs, FDK reconstruction,
//! and resampling of the CT and mask onto the reconstruction grid. Analytic
//! ellipsoid phantoms and volume metrics provide ground truth for testing.

pub mod error;
pub mod fdk;
pub mod geometry;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod projector;
pub mod resample;
pub mod volume;

pub use error::{Error, Result};
pub use fdk::{backproject, cosine_weight, fdk_reconstruct, ramp_filter_rows, RampKernel};
pub use geometry::{make_circular_trajectory, ConeBeamGeometry, Ray};
pub use nifti::{read_nifti, read_nifti_labels, write_nifti};
pub use projector::{forward_project, hu_to_attenuation, siddon_trace, to_intensity, ProjectionStack};
pub use resample::{AffineTransform, DisplacementField};

pub use volume::{center_of_gravity, Grid, LabelVolume, Volume, Volume3};
