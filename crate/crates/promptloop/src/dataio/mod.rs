//! On-disk formats: PPM/PGM images, dataset directories with a TSV index,
//! and flat binary weight checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod ppm;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use ppm::{decode_p5, decode_p6, read_p5, read_p6, to_grid, write_p5, write_p6};
