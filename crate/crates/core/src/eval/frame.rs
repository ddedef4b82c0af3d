use crate::error::{Result, SlamError};
use crate::geometry::{Intrinsics, Vec3};

/// One RGB-D observation. Images are row-major; depth is in metres with 0
/// marking an invalid measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub rgb: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
    pub intrinsics: Intrinsics,
    pub timestamp: f64,
}

impl Frame {
    pub fn new(
        rgb: Vec<[f32; 3]>,
        depth: Vec<f32>,
        intrinsics: Intrinsics,
        timestamp: f64,
    ) -> Result<Self> {
        intrinsics.validate()?;
        let n = intrinsics.width * intrinsics.height;
        if rgb.len() != n || depth.len() != n {
            return Err(SlamError::contract(format!(
                "frame of {}x{} needs {n} pixels, got {} colours and {} depths",
                intrinsics.width,
                intrinsics.height,
                rgb.len(),
                depth.len()
            )));
        }
        if depth.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(SlamError::contract("depth must be finite and non-negative"));
        }
        Ok(Frame {
            rgb,
            depth,
            intrinsics,
            timestamp,
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.intrinsics.width + col
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f32 {
        self.depth[self.index(row, col)]
    }

    pub fn rgb_at(&self, row: usize, col: usize) -> [f32; 3] {
        self.rgb[self.index(row, col)]
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    /// Camera-frame 3-D point of a pixel with valid depth.
    pub fn point_at(&self, row: usize, col: usize) -> Option<Vec3> {
        let d = self.depth_at(row, col);
        (d > 0.0).then(|| self.intrinsics.back_project(row as f64, col as f64, d as f64))
    }
}
