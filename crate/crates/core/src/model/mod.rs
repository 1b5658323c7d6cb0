//! Transformer encoders for the teacher and student roles.

mod checkpoint;
mod config;
mod encoder;

pub use checkpoint::Checkpoint;
pub use config::{EncoderConfig, FrontEnd};
pub use encoder::{pool, EncoderInput, EncoderModel, HiddenStack, Mode, Pooling};
