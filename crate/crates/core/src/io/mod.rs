//! Images, tensor archives and checkpoints.

pub mod archive;
pub mod checkpoint;
pub mod image;

pub use archive::Archive;
pub use checkpoint::{load_checkpoint, load_pyramid, read_checkpoint_config, save_checkpoint, save_pyramid};
pub use image::{load_image, save_image};
