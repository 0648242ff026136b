//! File formats: binary netpbm images and the TOML pipeline configuration.
//! The caption manifest lives in [`crate::conditioning`].

pub mod config;
pub mod image;

pub use config::{load_config, parse_config, ConfigOverrides};
pub use image::{read_image, write_image};
