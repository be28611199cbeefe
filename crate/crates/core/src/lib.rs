//! ARHNet-style foreground harmonization for 3D brain-lesion volumes.
//!
//! The crate bundles the full desk-scale pipeline: volume I/O and patch
//! geometry, lesion-aware augmentation, a reverse-mode tensor engine with
//! dense 3D convolution, the adaptive region harmonization normalization
//! module, the generator/discriminator pair and their adversarial training
//! loop, classical harmonization baselines, and the evaluation metrics.

pub mod arh;
pub mod augment;
pub mod classic;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use augment::{sample_perturbation, Perturbation, PlacementPolicy};
pub use tensor::{Graph, Shape, TensorData, TensorError, Var};
pub use volume::{normalize_intensity, Mask3D, PatchSpec, Volume3D};
