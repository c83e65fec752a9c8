//! Autoregressive transformer policy over action tokens.

pub mod checkpoint;
pub mod net;
pub mod params;
pub mod sample;
pub mod tape;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{featurize, Model, ModelConfig, StepFeatures};
pub use params::{Adam, Gradients, ParamStore};
pub use sample::{ActionDistribution, Sampler};
pub use tape::{Tape, Var};
pub use train::{cross_entropy, evaluate_ce, sequences_for_agent, train, LossCurve, OneCycle, Sequence, TrainConfig};
