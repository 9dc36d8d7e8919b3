//! Toy encoder-decoder restoration networks and their cost accounting.

mod accounting;
mod config;
mod net;

pub use accounting::{count_params_flops, Cost};
pub use config::{compress_config, ModelConfig};
pub use net::{NetOutput, ParamStore, RestorationNet, FFN_EXPANSION};
