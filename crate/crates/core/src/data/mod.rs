//! Dataset ingestion, synthetic data, checkpoints and image output.

pub mod checkpoint;
pub mod dataset;
pub mod image_io;
pub mod synthetic;

pub use checkpoint::Checkpoint;
pub use dataset::{load_tile_dataset, TileDataset, TileItem};
pub use synthetic::generate_synthetic_pair;
