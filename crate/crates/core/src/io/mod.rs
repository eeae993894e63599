//! Persistence, configuration, datasets, metrics and benchmarking.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{ingest_images, ingest_text, ImageDataset};
