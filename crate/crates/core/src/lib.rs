//! Hybrid CSI feedback simulator with twin recurrent channel predictors.
//!
//! The crate generates or loads channel traces, trains bit-identical Jordan
//! network predictors at both ends of the link, runs conventional, hybrid and
//! switching feedback sessions and evaluates the channel the base station ends
//! up with.

pub mod channel;
pub mod cli;
pub mod error;
pub mod feedback;
pub mod metrics;
pub mod predictor;
pub mod quantizer;

pub use channel::{ChannelMatrix, ChannelTrace};
pub use error::{Error, Result};
pub use feedback::{Mode, ProtocolConfig, SessionLog};
pub use predictor::{PredictorConfig, PredictorModel};
pub use quantizer::QuantizerSpec;
