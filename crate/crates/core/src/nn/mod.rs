//! Small neural-network toolkit on top of candle: seeded parameter storage,
//! the handful of layers the models need, Adam, and checkpoint containers.

mod adam;
mod checkpoint;
pub mod conv;
mod layers;
pub mod ops;
mod params;

pub use adam::{Adam, AdamConfig, Direction};
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{BatchNorm2d, Conv2d, Embedding, Linear};
pub use params::ParamStore;
