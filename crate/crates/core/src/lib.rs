//! Dense RGB-D SLAM with a feature-matching tracker and a single MLP that
//! regresses a truncated signed distance field as the map.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod keyframe;
pub mod mapper;
pub mod mlp;
pub mod render;
pub mod slam;
pub mod tensor;
pub mod tracker;

pub use error::{Result, SlamError};
pub use eval::Frame;
pub use geometry::{Intrinsics, PoseSE3};
pub use slam::{Slam, SystemConfig};
