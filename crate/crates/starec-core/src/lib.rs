//! Search-based time-aware recommendation.
//!
//! The pipeline: encode users/items from categorical fields, retrieve
//! the relevant slice of each long behavior history (hard, soft, or
//! temperature-annealed adaptive search, plus similar-user search),
//! run time-decayed recurrent networks with the label-as-input channel
//! over the retrieved sequences, fuse everything into a click
//! probability, and train end to end with log loss. A two-level
//! serving index supports top-K recommendation with snapshot-isolated
//! rebuilds and delayed-feedback imputation.

pub mod data;
pub mod encoder;
pub mod evaluation;
pub mod fusion;
pub mod model;
pub mod params;
pub mod search;
pub mod sequence;
pub mod serving;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use data::{Dataset, DatasetSplit, Interaction, Task, UserHistory};
pub use model::{Model, ModelConfig, VariantFlags};
pub use params::{ParamId, ParameterStore};
pub use search::{RetrievedContext, SearchConfig, SearchMode};
pub use sequence::DecayMode;
pub use tape::Tape;
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainReport};
