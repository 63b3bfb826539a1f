//! Network components: feature separator, motion extractor, apex
//! reconstructor, projection head, and classifier.

mod config;
mod heads;
mod motion;
mod network;
mod reconstructor;
mod separator;

pub use config::ModelConfig;
pub use heads::{Classifier, Projector};
pub use motion::MotionExtractor;
pub use network::{
    export_params, import_params, FinetuneModel, ImportReport, PretrainModel, PretrainOutput,
};
pub use reconstructor::Reconstructor;
pub use separator::{Backbone, Branch, Separator};
