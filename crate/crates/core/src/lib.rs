pub mod codec;
pub mod error;
pub mod kinematics;
pub mod tokenizer;

pub use codec::{dequantize, quantize, ActionToken, VOCAB};
pub use error::{Error, Result};
pub use kinematics::{ctra_rollout, ctra_step, wrap_angle, AgentState, ControlAction};
pub use tokenizer::{tokenize_track, TokenizedTrack, TokenizerConfig};
pub mod scene;
pub mod model;
pub mod rollout;
pub mod metrics;
pub mod preference;
pub mod dataset;
pub mod plot;
