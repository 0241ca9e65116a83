//! Multi-granular alignment for image retrieval.
//!
//! The model scores image pairs at two granularities: a cosine over pooled
//! global features, and a token-level similarity computed from fine-granular
//! tokens (grid features soft-assigned to learnable cluster centers) aligned
//! by a pair of transformer attention blocks. The fused score drives a
//! triplet objective alongside identity and center losses; a two-stage
//! retrieval pipeline shortlists by global cosine and reranks by the fused
//! score.
//!
//! Inputs are grid-feature files (the backbone network that would produce
//! them is out of scope); a deterministic synthetic generator provides
//! datasets whose classes share coarse prototypes but differ in fine motifs,
//! the regime where global features alone are insufficient.

pub mod ata;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod fga;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod rng;
pub mod scorer;
pub mod trainer;

pub use ata::{AtaParams, AttendedPair, AttentionBlockParams, Reduction};
pub use data::{GridFeatures, ImageRecord, LayerTag, Split, SynthSpec};
pub use error::{MgaError, Result};
pub use fga::{AssignmentMatrix, FgaParams, TokenSet};
pub use losses::{ClassCenters, IdentityHead, LossWeights, MiningStrategy, TripletConfig};
pub use model::{ImageEmbedding, ModelConfig, ModelParams};
pub use numerics::{Matrix, Real};
pub use retrieval::{build_index, evaluate, search, EvalReport, GalleryIndex, RankedList};
pub use scorer::{score_pair, SimilarityReport};
pub use trainer::{train, TrainConfig, Trainer};
