//! File formats, manifests, configuration, synthetic corpora, and the
//! extraction and training recipes behind the command line tool.

pub mod extract;
pub mod format;
pub mod manifest;
pub mod settings;
pub mod synth;

pub use extract::{extract, Descriptor, Encoder, ExtractConfig, Extraction, FvConfig, ModelSet};
pub use format::{config_hash, FeatureMeta, FeatureSet, Model, ModelInfo, ModelKind, SavedModel};
pub use manifest::{load_manifest, save_manifest, Manifest, ManifestRecord, SplitTag};
pub use settings::Settings;
pub use synth::{synth_docs, NoiseConfig, SynthConfig};
