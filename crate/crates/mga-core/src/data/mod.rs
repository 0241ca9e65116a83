//! Feature ingestion, global-feature derivation, the MGAF file format, and
//! the synthetic dataset generator.

pub mod mgaf;
pub mod synth;
pub mod types;

pub use mgaf::{read_feature_file, records_digest, write_feature_file};
pub use synth::{generate_synthetic, LayerShape, SynthSpec};
pub use types::{derive_global, GlobalFeature, GridFeatures, ImageRecord, LayerTag, Split};
