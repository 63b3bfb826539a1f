//! Datasets: manifest parsing, synthetic face generation, landmark
//! detection, alignment/cropping, and the training-time augmentations.

pub mod align;
pub mod augment;
pub mod imageio;
pub mod landmarks;
pub mod manifest;
pub mod preprocess;
pub mod synth;

pub use align::{align_and_crop, similarity_transform, template_points, warp_affine, Similarity};
pub use augment::{augment_training_set, build_expansion_sets, mirror, rotate, ExpansionOp};
pub use imageio::{load_image, save_image};
pub use landmarks::detect_landmarks;
pub use manifest::{load_manifest, resolve_apex, save_manifest, DatasetId, Manifest, Sample};
pub use preprocess::{preprocess_manifest, PreprocessOutcome};
pub use synth::generate_synthetic_dataset;
