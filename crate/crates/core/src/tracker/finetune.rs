//! Online finetuning of the extractor head against the frozen map.
//!
//! The loss of a keyframe pair depends on the head only through the match
//! confidences: they set the Procrustes solution, which sets the pose the
//! current keyframe is rendered from, and they scale the registration term.
//! Gradients therefore flow map → pose → Procrustes weights → features → head.

use std::collections::HashMap;

use log::debug;
use ndarray::Array2;
use rand::Rng;

use super::correspondence::{feature_distance, find_correspondences};
use super::extractor::FeatureExtractor;
use super::procrustes::weight_gradient;
use super::{robust_solve, Tracker, TrackerConfig};
use crate::error::{Result, SlamError};
use crate::geometry::{skew, PoseSE3, Vec3};
use crate::keyframe::{Keyframe, KeyframeStore};
use crate::mapper::{evaluate_batch, increment_gradient, sample_pixels, GradTarget, MapperConfig, Objective, RayBatch};
use crate::mlp::ImplicitMap;
use crate::tensor::Real;

/// `(1/|C|) Σ w ||p_r − (R p_c + t)||`.
pub fn registration_loss(pc: &[Vec3], pr: &[Vec3], w: &[f64], relative: &PoseSE3) -> f64 {
    if pc.is_empty() {
        return 0.0;
    }
    let sum: f64 = pc
        .iter()
        .zip(pr)
        .zip(w)
        .map(|((c, r), w)| w * (r - relative.transform_point(c)).norm())
        .sum();
    sum / pc.len() as f64
}

/// Unweighted loss terms of one finetuning step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FinetuneLoss {
    pub photometric: f64,
    pub depth: f64,
    pub registration: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    /// False when the store was below the keyframe gate.
    pub ran: bool,
    pub iterations: usize,
    /// Iterations whose pair could not be tracked.
    pub skipped: usize,
    pub losses: Vec<FinetuneLoss>,
}

/// Loss and head gradient `(dW, db)` for one pair, `None` when the pair
/// cannot be tracked.
pub(crate) fn pair_objective<T: Real>(
    extractor: &FeatureExtractor<T>,
    map: &ImplicitMap<T>,
    reference: &Keyframe,
    current: &Keyframe,
    mapper: &MapperConfig,
    cfg: &TrackerConfig,
    rng: &mut impl Rng,
) -> Result<Option<(FinetuneLoss, Array2<T>, Array2<T>)>> {
    let (fr_, cf) = (&reference.frame, &current.frame);
    let feat_r = extractor.extract(&fr_.rgb, fr_.height(), fr_.width())?;
    let feat_c = extractor.extract(&cf.rgb, cf.height(), cf.width())?;
    let corr = match find_correspondences(&feat_c, &feat_r, cf, fr_, cfg.k, cfg.ref_stride, cfg.subpixel) {
        Ok(c) => c,
        Err(SlamError::TrackerLost(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let (rel, solve_w, _) = match robust_solve(&corr, cfg) {
        Ok(v) => v,
        Err(SlamError::TrackerLost(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let tc = reference.pose.compose(&rel);

    // Rendering terms at the tracked pose, gradient as a left increment.
    let mut fcfg = *mapper;
    fcfg.weights.w_p = cfg.w_p;
    fcfg.weights.w_d = cfg.w_d;
    let pixels = sample_pixels(&current.cell_losses, cfg.finetune_rays, false, cf.height(), cf.width(), rng)?;
    let mut batch = RayBatch::empty();
    batch.push_frame(0, cf, &tc, &pixels, &fcfg, rng)?;
    let (render_loss, _, geo) = evaluate_batch(map, &batch, &fcfg, Objective::Finetune, GradTarget::Geometry)?;
    let geo = geo.expect("geometry gradients requested");
    let g = increment_gradient(&[0.0; 6], &tc, &batch, &geo);
    let (g_w, g_v) = (Vec3::new(g[0], g[1], g[2]), Vec3::new(g[3], g[4], g[5]));
    // Pose of the current frame is T_r · [Exp(ξ) R* | t].
    let rr_t = reference.pose.rotation.transpose();
    let mut g_xi = rr_t * (g_w - tc.translation.cross(&g_v));
    let mut g_t = rr_t * g_v;

    let pc = corr.current_points();
    let pr = corr.reference_points();
    let n = pc.len() as f64;
    let registration = registration_loss(&pc, &pr, &solve_w, &rel);
    let mut direct = Vec::with_capacity(pc.len());
    for i in 0..pc.len() {
        let q = rel.rotation * pc[i];
        let r = pr[i] - q - rel.translation;
        let norm = r.norm();
        direct.push(cfg.w_r * norm / n);
        if norm > 0.0 {
            let u = r / norm;
            let c = cfg.w_r * solve_w[i] / n;
            g_xi += c * (skew(&q).transpose() * u);
            g_t -= c * u;
        }
    }
    let g_theta = [g_xi.x, g_xi.y, g_xi.z, g_t.x, g_t.y, g_t.z];
    let through_pose = weight_gradient(&pc, &pr, &solve_w, &rel, &g_theta);

    let mut grads_c: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut grads_r: HashMap<usize, Vec<f64>> = HashMap::new();
    let dim = feat_c.dim();
    for (i, e) in corr.entries.iter().enumerate() {
        // Dropped matches do not enter the final solve.
        if solve_w[i] == 0.0 && e.weight != 0.0 {
            continue;
        }
        let dl_dw = direct[i] + through_pose[i];
        let ic = feat_c.index(e.current.0, e.current.1);
        let i1 = feat_r.index(e.reference.0, e.reference.1);
        let i2 = feat_r.index(e.second.0, e.second.1);
        let fc = feat_c.features.row(ic);
        let f1 = feat_r.features.row(i1);
        let f2 = feat_r.features.row(i2);
        let d1 = feature_distance(fc, f1);
        let d2 = feature_distance(fc, f2);
        // w = 1 − d1/d2 is flat where d2 = 0 and has a kink at d1 = 0.
        if d1 <= 0.0 || d2 <= 0.0 || d1 >= d2 {
            continue;
        }
        let gc = grads_c.entry(ic).or_insert_with(|| vec![0.0; dim]);
        for k in 0..dim {
            let (c, a, b) = (fc[k].as_f64(), f1[k].as_f64(), f2[k].as_f64());
            gc[k] += dl_dw * (-(c - a) / (d1 * d2) + d1 * (c - b) / (d2 * d2 * d2));
        }
        let g1 = grads_r.entry(i1).or_insert_with(|| vec![0.0; dim]);
        for k in 0..dim {
            g1[k] += dl_dw * (fc[k].as_f64() - f1[k].as_f64()) / (d1 * d2);
        }
        let g2 = grads_r.entry(i2).or_insert_with(|| vec![0.0; dim]);
        for k in 0..dim {
            g2[k] -= dl_dw * d1 * (fc[k].as_f64() - f2[k].as_f64()) / (d2 * d2 * d2);
        }
    }
    let sorted = |m: HashMap<usize, Vec<f64>>| {
        let mut v: Vec<_> = m.into_iter().collect();
        v.sort_by_key(|(i, _)| *i);
        v
    };
    let (mut gw, mut gb) = extractor.head_gradient(&feat_c, &sorted(grads_c));
    let (gw_r, gb_r) = extractor.head_gradient(&feat_r, &sorted(grads_r));
    gw += &gw_r;
    gb += &gb_r;

    let loss = FinetuneLoss {
        photometric: render_loss.photometric,
        depth: render_loss.depth,
        registration,
        total: render_loss.total + cfg.w_r * registration,
    };
    Ok(Some((loss, gw, gb)))
}

impl Tracker {
    /// Runs `finetune_iters` steps on random id-adjacent keyframe pairs;
    /// a no-op while the store holds fewer than `n_kf` keyframes.
    pub fn finetune(
        &mut self,
        map: &ImplicitMap<f32>,
        store: &KeyframeStore,
        mapper: &MapperConfig,
        rng: &mut impl Rng,
    ) -> Result<FinetuneReport> {
        let mut report = FinetuneReport::default();
        let kfs = store.keyframes();
        if kfs.len() < self.config.n_kf || kfs.len() < 2 {
            return Ok(report);
        }
        report.ran = true;
        for _ in 0..self.config.finetune_iters {
            let i = rng.random_range(1..kfs.len());
            report.iterations += 1;
            match self.finetune_pair(map, &kfs[i - 1], &kfs[i], mapper, rng)? {
                Some(l) => report.losses.push(l),
                None => report.skipped += 1,
            }
        }
        debug!(
            "finetune: {} steps, {} skipped, last loss {:?}",
            report.iterations,
            report.skipped,
            report.losses.last().map(|l| l.total)
        );
        Ok(report)
    }

    /// One head update on a pair; the earlier keyframe is the reference.
    pub fn finetune_pair(
        &mut self,
        map: &ImplicitMap<f32>,
        reference: &Keyframe,
        current: &Keyframe,
        mapper: &MapperConfig,
        rng: &mut impl Rng,
    ) -> Result<Option<FinetuneLoss>> {
        let Some((loss, gw, gb)) = pair_objective(&self.extractor, map, reference, current, mapper, &self.config, rng)? else {
            return Ok(None);
        };
        if !loss.total.is_finite() || gw.iter().chain(gb.iter()).any(|g| !g.is_finite()) {
            return Ok(None);
        }
        let gw = gw.as_standard_layout().to_owned();
        let gb = gb.as_standard_layout().to_owned();
        let (w, b) = self.extractor.outconv_mut();
        self.adam.step(
            &mut [w, b],
            &[gw.as_slice().expect("standard layout"), gb.as_slice().expect("standard layout")],
        )?;
        Ok(Some(loss))
    }
}
