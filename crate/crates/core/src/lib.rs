//! Attentive dual encoder for dialogue response retrieval: a reverse-mode
//! autodiff backbone, transformer encoders with word-level cross attention,
//! an in-batch retrieval loss with a mutual-information regulariser, a
//! min-max trainer and a Recall@k evaluation harness.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod visualize;

pub use attention::{AttentionPair, Pooling};
pub use config::TrainConfig;
pub use corpus::{CandidateList, Dialogue, Pair, TokenSequence, Vocabulary};
pub use encoder::{EncodedSequence, EncoderConfig};
pub use error::{Error, Result};
pub use evaluation::{evaluate, Metrics, Protocol, RankingResult, Scorer};
pub use model::{Model, ModelConfig, Variant};
pub use objectives::LossBreakdown;
pub use params::ParameterStore;
pub use tensor::Tensor;
pub use trainer::{train, Dataset, TrainReport};
