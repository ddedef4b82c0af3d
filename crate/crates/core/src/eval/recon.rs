//! Surface-to-surface evaluation of a reconstruction against a synthetic scene,
//! restricted to the region the input frames observed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mesh::{extract_mesh, Mesh};
use super::metrics::{observed, reconstruction_metrics, ReconStats};
use super::synthetic::SyntheticScene;
use super::Frame;
use crate::error::{Result, SlamError};
use crate::geometry::{PoseSE3, Vec3};
use crate::mlp::SceneBounds;

/// Surface draws per kept point before giving up on filling the sample.
const MAX_DRAWS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    /// Points kept from each surface inside the observed region.
    pub samples: usize,
    /// Completion-ratio threshold, metres.
    pub threshold: f64,
    /// Grid spacing of the ground-truth mesh, metres.
    pub truth_resolution: f64,
    /// How far behind a measured surface a point still counts as observed.
    pub observed_margin: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            samples: 10_000,
            threshold: 0.05,
            truth_resolution: 0.02,
            observed_margin: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub stats: ReconStats,
    /// Share of surface draws inside the observed region.
    pub predicted_observed: f64,
    pub truth_observed: f64,
    pub region: &'static str,
}

/// Zero level set of the scene's analytic distance, slightly beyond its walls.
pub fn truth_mesh(scene: &SyntheticScene, resolution: f64) -> Result<Mesh> {
    let pad = 2.0 * resolution;
    let bounds = SceneBounds::new(scene.room_min.map(|v| v - pad), scene.room_max.map(|v| v + pad))?;
    extract_mesh(&|p: &Vec3| scene.sdf(p), &bounds, resolution)
}

/// Draws surface points until `cfg.samples` lie in the observed region.
/// Returns them with the share of draws that were observed.
fn observed_samples(
    mesh: &Mesh,
    views: &[(&Frame, PoseSE3)],
    cfg: &ReconConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec3>, f64)> {
    let mut kept = Vec::with_capacity(cfg.samples);
    let mut drawn = 0;
    while kept.len() < cfg.samples && drawn < MAX_DRAWS * cfg.samples {
        let batch = mesh.sample_surface(cfg.samples, rng)?;
        drawn += batch.len();
        kept.extend(batch.into_iter().filter(|p| observed(p, views, cfg.observed_margin)));
    }
    kept.truncate(cfg.samples);
    if kept.is_empty() {
        return Err(SlamError::Metric("no surface point lies in the observed region".into()));
    }
    let share = kept.len() as f64 / drawn as f64;
    Ok((kept, share))
}

/// Accuracy, completion and completion ratio of `predicted` (world frame)
/// against `scene`, both sampled uniformly and masked to points seen by
/// `views` (frames with their true poses).
pub fn evaluate_reconstruction(
    predicted: &Mesh,
    scene: &SyntheticScene,
    views: &[(&Frame, PoseSE3)],
    cfg: &ReconConfig,
    rng: &mut impl Rng,
) -> Result<ReconReport> {
    if predicted.is_empty() {
        return Err(SlamError::Metric("predicted mesh is empty".into()));
    }
    let truth = truth_mesh(scene, cfg.truth_resolution)?;
    let (gt, truth_observed) = observed_samples(&truth, views, cfg, rng)?;
    let (pred, predicted_observed) = observed_samples(predicted, views, cfg, rng)?;
    Ok(ReconReport {
        stats: reconstruction_metrics(&pred, &gt, cfg.threshold)?,
        predicted_observed,
        truth_observed,
        region: "observed frustum union",
    })
}
