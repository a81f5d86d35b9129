//! Synthetic moving-square videos and NPY tensor files.

mod blobs;
mod npy;

pub use blobs::{generate_moving_blobs, trajectory, BlobSpec, ObjectState, SequenceBatch};
pub use npy::{load_npy, save_npy, NpyDtype};
