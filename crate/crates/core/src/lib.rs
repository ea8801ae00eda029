pub mod adversarial;
pub mod audio;
pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod duration;
pub mod error;
pub mod flow_training;
pub mod latent_ops;
pub mod nn;
pub mod profiler;
pub mod sampler;
pub mod text;
pub mod text_to_latent;

pub use error::{Error, Result};
