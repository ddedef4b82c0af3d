//! Frame-to-keyframe tracking from per-pixel features.

mod correspondence;
mod extractor;
mod finetune;
mod procrustes;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use correspondence::{
    find_correspondences, ratio_confidence, select_cell, Correspondence, CorrespondenceSet, SELECT_CELLS, SELECT_GRID,
};
pub use extractor::{FeatureExtractor, FeatureMap, FEATURE_DIM, HIDDEN_CHANNELS, OUTCONV};
pub use finetune::{registration_loss, FinetuneLoss, FinetuneReport};
pub use procrustes::{residuals, weight_gradient, weighted_median, weighted_procrustes};

use crate::error::{Result, SlamError};
use crate::eval::Frame;
use crate::geometry::PoseSE3;
use crate::keyframe::Keyframe;
use crate::tensor::{AdamConfig, AdamState, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Correspondences kept per frame pair, K.
    pub k: usize,
    /// Lattice step of the reference pixels searched.
    pub ref_stride: usize,
    /// Refine reference matches to sub-pixel precision.
    pub subpixel: bool,
    /// Weighted-median residual in metres above which tracking is lost.
    pub rho_lost: f64,
    /// Re-solves after dropping matches far from the current solution.
    pub inlier_rounds: usize,
    /// Matches with residual above this multiple of the median are dropped.
    pub inlier_factor: f64,
    /// Residuals below this are never dropped, in metres.
    pub inlier_floor: f64,
    /// Keyframes stored before finetuning starts, N_kf.
    pub n_kf: usize,
    pub finetune_iters: usize,
    pub finetune_rays: usize,
    pub lr_conv: f64,
    pub w_p: f64,
    pub w_d: f64,
    pub w_r: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            k: 200,
            ref_stride: 2,
            subpixel: true,
            rho_lost: 0.05,
            inlier_rounds: 3,
            inlier_factor: 2.0,
            inlier_floor: 0.005,
            n_kf: 10,
            finetune_iters: 5,
            finetune_rays: 128,
            lr_conv: 1e-4,
            w_p: 1.0,
            w_d: 1.0,
            w_r: 1.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.k >= SELECT_CELLS
            && self.ref_stride >= 1
            && self.rho_lost > 0.0
            && self.inlier_factor > 0.0
            && self.inlier_floor >= 0.0
            && self.finetune_rays >= 1
            && self.lr_conv > 0.0
            && [self.w_p, self.w_d, self.w_r].iter().all(|w| *w > 0.0 && w.is_finite());
        if ok {
            Ok(())
        } else {
            Err(SlamError::Config(format!("invalid tracker configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackResult {
    /// World-from-camera of the current frame (the fallback when lost).
    pub pose: PoseSE3,
    /// Reference-from-current.
    pub relative: PoseSE3,
    pub lost: bool,
    /// Weighted median of the post-solve residuals, metres.
    pub residual: f64,
    pub correspondences: Option<CorrespondenceSet>,
    /// Weights used in the final solve: confidences with dropped matches zeroed.
    pub solve_weights: Vec<f64>,
    pub reason: Option<String>,
}

impl TrackResult {
    fn lost(fallback: &PoseSE3, reason: String) -> Self {
        TrackResult {
            pose: *fallback,
            relative: PoseSE3::identity(),
            lost: true,
            residual: f64::INFINITY,
            correspondences: None,
            solve_weights: Vec::new(),
            reason: Some(reason),
        }
    }
}

/// Procrustes followed by rounds that zero matches far off the solution.
/// Returns the transform, the weights of the final solve and its residual.
pub fn robust_solve(corr: &CorrespondenceSet, cfg: &TrackerConfig) -> Result<(PoseSE3, Vec<f64>, f64)> {
    let pc = corr.current_points();
    let pr = corr.reference_points();
    let conf = corr.weights();
    let mut weights = conf.clone();
    let mut rel = weighted_procrustes(&pc, &pr, &weights)?;
    for _ in 0..cfg.inlier_rounds {
        let dist: Vec<f64> = residuals(&pc, &pr, &rel).iter().map(|r| r.norm()).collect();
        let Some(med) = weighted_median(&dist, &weights) else { break };
        let cut = (cfg.inlier_factor * med).max(cfg.inlier_floor);
        let next: Vec<f64> = conf.iter().zip(&dist).map(|(w, d)| if *d <= cut { *w } else { 0.0 }).collect();
        if next == weights {
            break;
        }
        match weighted_procrustes(&pc, &pr, &next) {
            Ok(r) => {
                rel = r;
                weights = next;
            }
            Err(_) => break,
        }
    }
    let dist: Vec<f64> = residuals(&pc, &pr, &rel).iter().map(|r| r.norm()).collect();
    let residual = weighted_median(&dist, &weights).unwrap_or(f64::INFINITY);
    Ok((rel, weights, residual))
}

/// Tracks from precomputed feature maps; see [`track`].
pub fn track_features<T: Real>(
    feat_c: &FeatureMap<T>,
    feat_r: &FeatureMap<T>,
    frame: &Frame,
    reference: &Keyframe,
    fallback: &PoseSE3,
    cfg: &TrackerConfig,
) -> Result<TrackResult> {
    let corr = match find_correspondences(feat_c, feat_r, frame, &reference.frame, cfg.k, cfg.ref_stride, cfg.subpixel) {
        Ok(c) => c,
        Err(SlamError::TrackerLost(why)) => return Ok(TrackResult::lost(fallback, why)),
        Err(e) => return Err(e),
    };
    let (relative, solve_weights, residual) = match robust_solve(&corr, cfg) {
        Ok(v) => v,
        Err(SlamError::TrackerLost(why)) => return Ok(TrackResult::lost(fallback, why)),
        Err(e) => return Err(e),
    };
    let lost = !(residual <= cfg.rho_lost);
    let pose = if lost { *fallback } else { reference.pose.compose(&relative) };
    Ok(TrackResult {
        pose,
        relative,
        lost,
        residual,
        correspondences: Some(corr),
        solve_weights,
        reason: lost.then(|| format!("median residual {residual:.4} m")),
    })
}

/// Pose of `frame` relative to the reference keyframe; on failure the
/// result is marked lost and carries `fallback`.
pub fn track<T: Real>(
    extractor: &FeatureExtractor<T>,
    frame: &Frame,
    reference: &Keyframe,
    fallback: &PoseSE3,
    cfg: &TrackerConfig,
) -> Result<TrackResult> {
    let feat_c = extractor.extract(&frame.rgb, frame.height(), frame.width())?;
    let feat_r = extractor.extract(&reference.frame.rgb, reference.frame.height(), reference.frame.width())?;
    track_features(&feat_c, &feat_r, frame, reference, fallback, cfg)
}

/// The extractor with its head optimiser.
pub struct Tracker {
    pub config: TrackerConfig,
    extractor: FeatureExtractor<f32>,
    adam: AdamState<f32>,
}

impl Tracker {
    pub fn new(config: TrackerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self::with_extractor(config, FeatureExtractor::new(rng)))
    }

    pub fn with_extractor(config: TrackerConfig, extractor: FeatureExtractor<f32>) -> Self {
        let (w, b) = extractor.outconv_ids();
        let sizes = [extractor.params().get(w).numel(), extractor.params().get(b).numel()];
        Tracker {
            config,
            adam: AdamState::new(AdamConfig::new(config.lr_conv), &sizes),
            extractor,
        }
    }

    pub fn extractor(&self) -> &FeatureExtractor<f32> {
        &self.extractor
    }

    pub fn track(&self, frame: &Frame, reference: &Keyframe, fallback: &PoseSE3) -> Result<TrackResult> {
        let r = track(&self.extractor, frame, reference, fallback, &self.config)?;
        debug!(
            "tracked against keyframe {}: residual {:.4} m{}",
            reference.id,
            r.residual,
            if r.lost { " (lost)" } else { "" }
        );
        Ok(r)
    }
}
