//! Data in and out: frames, synthetic scenes, meshes and metrics.

pub mod dataset;
mod frame;
mod mc_tables;
pub mod mesh;
pub mod metrics;
pub mod recon;
pub mod synthetic;
pub mod trajectory;

pub use dataset::{load_dataset, write_dataset, Dataset};
pub use frame::Frame;
pub use metrics::{ate, reconstruction_metrics, AteStats, ReconStats};
pub use recon::{evaluate_reconstruction, ReconConfig, ReconReport};
pub use mesh::{extract_mesh, Mesh, SdfField};
pub use synthetic::{generate_synthetic, SyntheticScene};
pub use trajectory::{read_tum, write_tum, Trajectory};
