//! Map and keyframe-pose optimisation against rendered colour and SDF.

use std::io::Write;

use log::{debug, warn};
use ndarray::{Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::eval::Frame;
use crate::geometry::{right_jacobian_so3, PoseSE3, Vec3};
use crate::keyframe::Keyframe;
use crate::mlp::ImplicitMap;
use crate::render::{composite_on_tape, generate_rays, sample_along_ray, Ray, RaySampleSet, Region, RenderConfig};
use crate::tensor::{AdamConfig, AdamState, CustomOp, Real, Tape};

pub const GRID: usize = 8;
pub const CELLS: usize = GRID * GRID;
/// Keeps inverted sampling scores finite for zero-loss cells.
pub const INVERT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_fs: f64,
    pub w_tr: f64,
    pub w_p: f64,
    /// Depth term of the extractor finetuning loss.
    pub w_d: f64,
    /// Registration term of the extractor finetuning loss.
    pub w_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_fs: 1.0,
            w_tr: 6.0,
            w_p: 0.1,
            w_d: 1.0,
            w_r: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_fs, self.w_tr, self.w_p, self.w_d, self.w_r];
        if all.iter().all(|w| w.is_finite() && *w > 0.0) {
            Ok(())
        } else {
            Err(SlamError::Config(format!("loss weights must be positive: {self:?}")))
        }
    }
}

/// Mean loss and sample count per cell of an 8x8 image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CellLossGrid {
    pub loss: [f64; CELLS],
    pub counts: [usize; CELLS],
}

impl Default for CellLossGrid {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl CellLossGrid {
    pub fn uniform(loss: f64) -> Self {
        CellLossGrid {
            loss: [loss; CELLS],
            counts: [0; CELLS],
        }
    }

    pub fn cell_of(row: usize, col: usize, height: usize, width: usize) -> usize {
        (row * GRID / height) * GRID + col * GRID / width
    }

    /// Pixel ranges `(rows, cols)` covered by a cell.
    pub fn cell_bounds(cell: usize, height: usize, width: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (ci, cj) = (cell / GRID, cell % GRID);
        let lo = |i: usize, n: usize| (i * n).div_ceil(GRID);
        (lo(ci, height)..lo(ci + 1, height), lo(cj, width)..lo(cj + 1, width))
    }

    /// Replaces the loss of every cell that received samples by their mean.
    pub fn update(&mut self, cells: &[usize], losses: &[f64]) {
        let mut sum = [0.0; CELLS];
        let mut n = [0usize; CELLS];
        for (c, l) in cells.iter().zip(losses) {
            if l.is_finite() {
                sum[*c] += l;
                n[*c] += 1;
            }
        }
        for c in 0..CELLS {
            self.counts[c] = n[c];
            if n[c] > 0 {
                self.loss[c] = sum[c] / n[c] as f64;
            }
        }
    }

    fn scores(&self, invert: bool) -> [f64; CELLS] {
        let mut s = [0.0; CELLS];
        for (o, l) in s.iter_mut().zip(&self.loss) {
            let l = l.max(0.0);
            *o = if invert { 1.0 / (l + INVERT_EPS) } else { l };
        }
        if s.iter().sum::<f64>() <= 0.0 || s.iter().any(|v| !v.is_finite()) {
            s = [1.0; CELLS];
        }
        s
    }
}

/// Samples per cell: `max(1, round(budget · score / Σ score))`, with the
/// rounding residual added to the highest-scoring cells or removed from the
/// lowest-scoring cells that can spare one.
pub fn allocate(grid: &CellLossGrid, budget: usize, invert: bool) -> Result<[usize; CELLS]> {
    if budget < CELLS {
        return Err(SlamError::contract(format!(
            "active sampling needs at least {CELLS} samples, got {budget}"
        )));
    }
    let scores = grid.scores(invert);
    let total: f64 = scores.iter().sum();
    let mut n = [0usize; CELLS];
    for (o, s) in n.iter_mut().zip(&scores) {
        *o = ((budget as f64 * s / total).round() as usize).max(1);
    }
    let mut order: Vec<usize> = (0..CELLS).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    let mut assigned: usize = n.iter().sum();
    while assigned < budget {
        for &c in &order {
            if assigned == budget {
                break;
            }
            n[c] += 1;
            assigned += 1;
        }
    }
    while assigned > budget {
        for &c in order.iter().rev() {
            if assigned == budget {
                break;
            }
            if n[c] > 1 {
                n[c] -= 1;
                assigned -= 1;
            }
        }
    }
    Ok(n)
}

/// Pixels drawn uniformly inside each cell according to [`allocate`].
pub fn active_sample_pixels(
    grid: &CellLossGrid,
    budget: usize,
    invert: bool,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    if height < GRID || width < GRID {
        return Err(SlamError::contract(format!(
            "image of {width}x{height} is smaller than the {GRID}x{GRID} sampling grid"
        )));
    }
    let alloc = allocate(grid, budget, invert)?;
    let mut pixels = Vec::with_capacity(budget);
    for (cell, &k) in alloc.iter().enumerate() {
        draw_in_cell(&mut pixels, cell, k, height, width, rng);
    }
    Ok(pixels)
}

fn draw_in_cell(
    out: &mut Vec<(usize, usize)>,
    cell: usize,
    k: usize,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) {
    let (rows, cols) = CellLossGrid::cell_bounds(cell, height, width);
    for _ in 0..k {
        out.push((rng.random_range(rows.clone()), rng.random_range(cols.clone())));
    }
}

/// Budgets below one sample per cell draw cells at random in proportion to
/// their scores instead.
pub fn sample_pixels(
    grid: &CellLossGrid,
    budget: usize,
    invert: bool,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    if budget >= CELLS {
        return active_sample_pixels(grid, budget, invert, height, width, rng);
    }
    let dist = WeightedIndex::new(grid.scores(invert))
        .map_err(|e| SlamError::contract(format!("cell scores: {e}")))?;
    let mut pixels = Vec::with_capacity(budget);
    for _ in 0..budget {
        let cell = dist.sample(rng);
        draw_in_cell(&mut pixels, cell, 1, height, width, rng);
    }
    Ok(pixels)
}

/// `(1/|B|) Σ ||I − Î||₂` over a batch of colours.
pub fn photometric_loss(rendered: &[[f64; 3]], measured: &[[f64; 3]]) -> Result<f64> {
    if rendered.is_empty() || rendered.len() != measured.len() {
        return Err(SlamError::contract(format!(
            "photometric loss needs equal non-empty batches ({} vs {})",
            rendered.len(),
            measured.len()
        )));
    }
    let sum: f64 = rendered
        .iter()
        .zip(measured)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .sum();
    Ok(sum / rendered.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeometricLoss {
    /// Unweighted free-space term.
    pub free_space: f64,
    /// Unweighted truncation term.
    pub truncation: f64,
    pub total: f64,
}

/// Per-sample coefficient and target such that the geometric loss is
/// `Σ coeff · |s − target|`. Samples outside both subsets get coefficient 0.
/// `rays` is the batch size the means are taken over.
fn geometric_terms(set: &RaySampleSet, rays: usize, tr: f64, weights: &LossWeights) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n_fs = set.count(Region::FreeSpace);
    let n_tr = set.count(Region::Truncation);
    let mut coeff = Vec::with_capacity(set.len());
    let mut target = Vec::with_capacity(set.len());
    let mut is_fs = Vec::with_capacity(set.len());
    for (label, t) in set.region_labels.iter().zip(&set.sdf_targets) {
        let (c, tg) = match label {
            Region::FreeSpace => (weights.w_fs / (rays * n_fs) as f64, tr),
            Region::Truncation => (weights.w_tr / (rays * n_tr) as f64, *t),
            Region::Behind | Region::Unobserved => (0.0, 0.0),
        };
        coeff.push(c);
        target.push(tg);
        is_fs.push(*label == Region::FreeSpace);
    }
    (coeff, target, is_fs)
}

/// Weighted free-space plus truncation loss over a batch of rays.
pub fn geometric_loss(
    samples: &[RaySampleSet],
    predicted_sdf: &[Vec<f64>],
    tr: f64,
    weights: &LossWeights,
) -> Result<GeometricLoss> {
    if samples.len() != predicted_sdf.len() || samples.iter().zip(predicted_sdf).any(|(s, p)| s.len() != p.len()) {
        return Err(SlamError::contract("geometric loss: predictions not aligned with samples"));
    }
    if samples.is_empty() {
        return Ok(GeometricLoss::default());
    }
    let mut out = GeometricLoss::default();
    for (set, pred) in samples.iter().zip(predicted_sdf) {
        let (coeff, target, is_fs) = geometric_terms(set, samples.len(), tr, weights);
        for i in 0..set.len() {
            let v = coeff[i] * (pred[i] - target[i]).abs();
            out.total += v;
            if is_fs[i] {
                out.free_space += v / weights.w_fs;
            } else if coeff[i] > 0.0 {
                out.truncation += v / weights.w_tr;
            }
        }
    }
    Ok(out)
}

/// `Σ coeff · |x − target|` over a column.
struct AbsLossOp<T> {
    coeff: Vec<T>,
    target: Vec<T>,
}

impl<T: Real> CustomOp<T> for AbsLossOp<T> {
    fn backward(
        &self,
        inputs: &[ArrayView2<'_, T>],
        _output: ArrayView2<'_, T>,
        grad_out: ArrayView2<'_, T>,
        _wants: &[bool],
    ) -> Vec<Option<Array2<T>>> {
        let g = grad_out[[0, 0]];
        let x = &inputs[0];
        let mut out = Array2::zeros(x.dim());
        for i in 0..self.coeff.len() {
            let d = x[[i, 0]] - self.target[i];
            let sign = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            out[[i, 0]] = g * self.coeff[i] * sign;
        }
        vec![Some(out)]
    }
}

/// `Σ coeff · ||rgb_r − measured_r||₂` over the colour columns of rendered rows.
struct ColourLossOp<T> {
    coeff: T,
    measured: Vec<[T; 3]>,
}

impl<T: Real> CustomOp<T> for ColourLossOp<T> {
    fn backward(
        &self,
        inputs: &[ArrayView2<'_, T>],
        _output: ArrayView2<'_, T>,
        grad_out: ArrayView2<'_, T>,
        _wants: &[bool],
    ) -> Vec<Option<Array2<T>>> {
        let g = grad_out[[0, 0]];
        let x = &inputs[0];
        let mut out = Array2::zeros(x.dim());
        for (r, m) in self.measured.iter().enumerate() {
            let d = [x[[r, 0]] - m[0], x[[r, 1]] - m[1], x[[r, 2]] - m[2]];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if norm > T::zero() {
                for c in 0..3 {
                    out[[r, c]] = g * self.coeff * d[c] / norm;
                }
            }
        }
        vec![Some(out)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperConfig {
    /// Pixels (rays) per iteration, B.
    pub rays_per_iter: usize,
    /// Samples per ray, S_p.
    pub samples_per_ray: usize,
    /// Truncation distance in metres.
    pub tr: f64,
    pub near: f64,
    pub far: f64,
    pub surface_fraction: f64,
    pub bell_width: f64,
    pub first_surface_only: bool,
    pub weights: LossWeights,
    pub n_map_iters: usize,
    pub n_pose_iters: usize,
    pub lr_map: f64,
    pub lr_pose: f64,
    pub pose_decay_factor: f64,
    pub pose_decay_every: usize,
    /// Rays evaluated per tape; bounds memory, not results.
    pub chunk_rays: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            rays_per_iter: 1024,
            samples_per_ray: 144,
            tr: 0.10,
            near: 0.05,
            far: 6.0,
            surface_fraction: 1.0 / 3.0,
            bell_width: 0.01,
            first_surface_only: true,
            weights: LossWeights::default(),
            n_map_iters: 60,
            n_pose_iters: 50,
            lr_map: 0.005,
            lr_pose: 0.005,
            pose_decay_factor: 0.7,
            pose_decay_every: 10,
            chunk_rays: 128,
        }
    }
}

impl MapperConfig {
    pub fn render(&self) -> RenderConfig {
        RenderConfig {
            near: self.near,
            far: self.far,
            surface_fraction: self.surface_fraction,
            bell_width: self.bell_width,
            first_surface_only: self.first_surface_only,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let ok = self.rays_per_iter >= 1
            && self.samples_per_ray >= 2
            && self.tr > 0.0
            && self.near > 0.0
            && self.near < self.far
            && (0.0..=1.0).contains(&self.surface_fraction)
            && self.bell_width > 0.0
            && self.lr_map > 0.0
            && self.lr_pose > 0.0
            && self.pose_decay_factor > 0.0
            && self.pose_decay_factor <= 1.0
            && self.chunk_rays >= 1;
        if ok {
            Ok(())
        } else {
            Err(SlamError::Config(format!("invalid mapper configuration {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Tracking,
    PoseOpt,
    MapOpt,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Tracking => "tracking",
            Phase::PoseOpt => "pose_opt",
            Phase::MapOpt => "map_opt",
            Phase::Finetune => "finetune",
        }
    }
}

/// One optimisation iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub phase: Phase,
    pub event: usize,
    pub iteration: usize,
    pub photometric: f64,
    pub free_space: f64,
    pub truncation: f64,
    pub total: f64,
}

pub fn write_loss_csv(records: &[LossRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "phase,event,iteration,l_p,l_fs,l_tr,total")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.phase.as_str(),
            r.event,
            r.iteration,
            r.photometric,
            r.free_space,
            r.truncation,
            r.total
        )?;
    }
    Ok(())
}

/// Rays of one iteration with their samples.
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub samples: Vec<RaySampleSet>,
    /// Index of the keyframe each ray came from.
    pub owner: Vec<usize>,
    /// Grid cell of each ray in its keyframe.
    pub cell: Vec<usize>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Adds rays through `pixels` of `frame` seen from `pose`, with samples.
    pub fn push_frame(
        &mut self,
        owner: usize,
        frame: &Frame,
        pose: &PoseSE3,
        pixels: &[(usize, usize)],
        cfg: &MapperConfig,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let (h, w) = (frame.height(), frame.width());
        let render = cfg.render();
        for ray in generate_rays(frame, pose, pixels)? {
            self.samples.push(sample_along_ray(&ray, cfg.samples_per_ray, cfg.tr, &render, rng)?);
            self.cell.push(CellLossGrid::cell_of(ray.pixel.0, ray.pixel.1, h, w));
            self.owner.push(owner);
            self.rays.push(ray);
        }
        Ok(())
    }

    pub fn empty() -> Self {
        RayBatch {
            rays: Vec::new(),
            samples: Vec::new(),
            owner: Vec::new(),
            cell: Vec::new(),
        }
    }
}

/// Loss values of a batch; components are unweighted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub photometric: f64,
    pub free_space: f64,
    pub truncation: f64,
    /// Mean absolute z-depth error of rays with measured depth.
    pub depth: f64,
    pub total: f64,
    /// Weighted loss of each ray, not divided by the batch size.
    pub per_ray: Vec<f64>,
    pub degenerate_rays: usize,
}

impl BatchLoss {
    fn add(&mut self, other: BatchLoss) {
        self.photometric += other.photometric;
        self.free_space += other.free_space;
        self.truncation += other.truncation;
        self.depth += other.depth;
        self.total += other.total;
        self.per_ray.extend(other.per_ray);
        self.degenerate_rays += other.degenerate_rays;
    }
}

/// Gradients wanted from a batch evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    None,
    /// Accumulate into the map parameters' gradients.
    Params,
    /// Return gradients with respect to sample points and ray directions.
    Geometry,
}

/// Gradients with respect to every sample point and each ray direction.
pub struct GeometryGrads {
    pub points: Array2<f64>,
    pub dirs: Array2<f64>,
}

/// Which loss a batch evaluation computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Geometric plus weighted photometric loss.
    Mapping,
    /// Weighted photometric plus weighted rendered-depth loss.
    Finetune,
}

/// Renders a chunk of rays and evaluates the objective, normalised by
/// `batch_size` so that chunks add up to the full batch.
#[allow(clippy::too_many_arguments)]
fn eval_chunk<T: Real>(
    map: &ImplicitMap<T>,
    rays: &[Ray],
    sets: &[RaySampleSet],
    batch_size: usize,
    cfg: &MapperConfig,
    objective: Objective,
    target: GradTarget,
) -> Result<(BatchLoss, Option<ParamGrads<T>>, Option<GeometryGrads>)> {
    let render = cfg.render();
    let w = cfg.weights;
    let mapping = objective == Objective::Mapping;
    let mut offsets = vec![0];
    let mut depths = Vec::new();
    let mut pts = Vec::new();
    let mut dirs = Vec::new();
    let mut coeff = Vec::new();
    let mut target_sdf = Vec::new();
    let mut is_fs = Vec::new();
    for (ray, set) in rays.iter().zip(sets) {
        for t in &set.depths {
            let p = ray.point_at(*t);
            pts.extend([T::of(p.x), T::of(p.y), T::of(p.z)]);
            dirs.extend([T::of(ray.direction.x), T::of(ray.direction.y), T::of(ray.direction.z)]);
            depths.push(*t);
        }
        offsets.push(depths.len());
        let (mut c, tg, f) = geometric_terms(set, batch_size, cfg.tr, &w);
        if !mapping {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        coeff.extend(c);
        target_sdf.extend(tg);
        is_fs.extend(f);
    }
    let n = depths.len();
    let pts = Array2::from_shape_vec((n, 3), pts).expect("3 values per sample");
    let dirs = Array2::from_shape_vec((n, 3), dirs).expect("3 values per sample");

    let mut tape = Tape::new();
    let geometry = target == GradTarget::Geometry;
    let (pv, dv) = if geometry {
        (tape.leaf(pts), tape.leaf(dirs))
    } else {
        (tape.constant(pts), tape.constant(dirs))
    };
    let out = map.forward(&mut tape, pv, dv, target == GradTarget::Params)?;
    let (rendered, flags) = composite_on_tape(&mut tape, out.sdf, out.rgb, &offsets, &depths, cfg.tr, &render)?;

    let sdf_vals: Vec<f64> = tape.value(out.sdf).iter().map(|v| v.as_f64()).collect();
    let rendered_vals = tape.value(rendered).to_owned();
    let mut loss = BatchLoss {
        degenerate_rays: flags.iter().filter(|f| **f).count(),
        ..Default::default()
    };
    let mut measured = Vec::with_capacity(rays.len());
    // Rendered depth is a distance along the ray; the depth loss compares
    // z-depths, so both sides are scaled by the ray's z per distance.
    let mut depth_coeff = Vec::with_capacity(rays.len());
    let mut depth_target = Vec::with_capacity(rays.len());
    for (r, ray) in rays.iter().enumerate() {
        let m = ray.measured_rgb.map(|v| v as f64);
        let d: f64 = (0..3).map(|c| (rendered_vals[[r, c]].as_f64() - m[c]).powi(2)).sum::<f64>().sqrt();
        loss.photometric += d / batch_size as f64;
        let mut ray_loss = w.w_p * d;
        for i in offsets[r]..offsets[r + 1] {
            let v = coeff[i] * (sdf_vals[i] - target_sdf[i]).abs();
            loss.total += v;
            ray_loss += v * batch_size as f64;
            if is_fs[i] {
                loss.free_space += v / w.w_fs;
            } else if coeff[i] > 0.0 {
                loss.truncation += v / w.w_tr;
            }
        }
        let dc = if ray.has_depth() { ray.z_per_distance / batch_size as f64 } else { 0.0 };
        let de = dc * (rendered_vals[[r, 3]].as_f64() - ray.measured_depth).abs();
        loss.depth += de;
        if !mapping {
            ray_loss += w.w_d * de * batch_size as f64;
        }
        depth_coeff.push(T::of(dc));
        depth_target.push(T::of(ray.measured_depth));
        loss.per_ray.push(ray_loss);
        measured.push(m.map(T::of));
    }
    let geometric = loss.total;
    loss.total += w.w_p * loss.photometric;
    if !mapping {
        loss.total += w.w_d * loss.depth;
    }

    if target == GradTarget::None {
        return Ok((loss, None, None));
    }
    let photo_val = Array2::from_elem((1, 1), T::of(loss.photometric));
    let photo = tape.custom(
        &[rendered],
        photo_val,
        Box::new(ColourLossOp {
            coeff: T::of(1.0 / batch_size as f64),
            measured,
        }),
    );
    let photo = tape.affine(photo, T::of(w.w_p), T::zero());
    let total = if mapping {
        let geo = tape.custom(
            &[out.sdf],
            Array2::from_elem((1, 1), T::of(geometric)),
            Box::new(AbsLossOp {
                coeff: coeff.iter().map(|c| T::of(*c)).collect(),
                target: target_sdf.iter().map(|t| T::of(*t)).collect(),
            }),
        );
        tape.add(geo, photo)?
    } else {
        let depth_col = tape.slice_cols(rendered, 3, 4)?;
        let dl = tape.custom(
            &[depth_col],
            Array2::from_elem((1, 1), T::of(loss.depth)),
            Box::new(AbsLossOp {
                coeff: depth_coeff,
                target: depth_target,
            }),
        );
        let dl = tape.affine(dl, T::of(w.w_d), T::zero());
        tape.add(dl, photo)?
    };
    tape.backward(total)?;

    if geometry {
        let cast = |a: &Array2<T>| a.mapv(|v| v.as_f64());
        let zeros = || Array2::zeros((n, 3));
        let grads = GeometryGrads {
            points: tape.grad(pv).map(cast).unwrap_or_else(zeros),
            dirs: tape.grad(dv).map(cast).unwrap_or_else(zeros),
        };
        Ok((loss, None, Some(grads)))
    } else {
        let grads = out.params.iter().map(|v| tape.grad(*v).cloned()).collect();
        Ok((loss, Some(grads), None))
    }
}

/// Parameter gradients of a batch, indexed like the map's parameter store.
pub type ParamGrads<T> = Vec<Option<Array2<T>>>;

/// Evaluates a batch chunk by chunk, summing the requested gradients.
pub fn evaluate_batch<T: Real>(
    map: &ImplicitMap<T>,
    batch: &RayBatch,
    cfg: &MapperConfig,
    objective: Objective,
    target: GradTarget,
) -> Result<(BatchLoss, Option<ParamGrads<T>>, Option<GeometryGrads>)> {
    let n = batch.len();
    if n == 0 {
        return Err(SlamError::contract("empty ray batch"));
    }
    let mut loss = BatchLoss::default();
    let mut params: Option<ParamGrads<T>> = None;
    let mut geo: Option<GeometryGrads> = None;
    let mut start = 0;
    while start < n {
        let end = (start + cfg.chunk_rays).min(n);
        let (l, pg, gg) = eval_chunk(map, &batch.rays[start..end], &batch.samples[start..end], n, cfg, objective, target)?;
        loss.add(l);
        if let Some(pg) = pg {
            params = Some(match params {
                None => pg,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(pg) {
                        match (a.as_mut(), g) {
                            (Some(a), Some(g)) => *a += &g,
                            (None, Some(g)) => *a = Some(g),
                            _ => {}
                        }
                    }
                    acc
                }
            });
        }
        if let Some(gg) = gg {
            geo = Some(match geo {
                None => gg,
                Some(acc) => GeometryGrads {
                    points: ndarray::concatenate![ndarray::Axis(0), acc.points, gg.points],
                    dirs: ndarray::concatenate![ndarray::Axis(0), acc.dirs, gg.dirs],
                },
            });
        }
        start = end;
    }
    Ok((loss, params, geo))
}

/// Refreshes each keyframe's grid from the per-ray losses of a batch.
fn refresh_grids(kfs: &mut [&mut Keyframe], batch: &RayBatch, loss: &BatchLoss) {
    for (k, kf) in kfs.iter_mut().enumerate() {
        let (cells, losses): (Vec<usize>, Vec<f64>) = batch
            .owner
            .iter()
            .zip(&batch.cell)
            .zip(&loss.per_ray)
            .filter(|((o, _), _)| **o == k)
            .map(|((_, c), l)| (*c, *l))
            .unzip();
        kf.cell_losses.update(&cells, &losses);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub skipped_iterations: usize,
    pub rays_per_iteration: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseReport {
    pub pose: PoseSE3,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_iteration: usize,
    /// The loss became non-finite and the initial pose was returned.
    pub failed: bool,
}

/// Pixels for one iteration, the budget split evenly over keyframes.
fn draw_batch(
    cfg: &MapperConfig,
    kfs: &[&mut Keyframe],
    invert: bool,
    poses: &[PoseSE3],
    rng: &mut impl Rng,
) -> Result<RayBatch> {
    let mut batch = RayBatch::empty();
    let per = cfg.rays_per_iter / kfs.len();
    let extra = cfg.rays_per_iter % kfs.len();
    for (k, kf) in kfs.iter().enumerate() {
        let budget = per + usize::from(k < extra);
        if budget == 0 {
            continue;
        }
        let pixels = sample_pixels(&kf.cell_losses, budget, invert, kf.frame.height(), kf.frame.width(), rng)?;
        batch.push_frame(k, &kf.frame, &poses[k], &pixels, cfg, rng)?;
    }
    Ok(batch)
}

/// Owns the optimiser state of the map and the loss trace.
pub struct Mapper {
    pub config: MapperConfig,
    adam: Option<AdamState<f32>>,
    pub log: Vec<LossRecord>,
    pub event: usize,
}

impl Mapper {
    pub fn new(config: MapperConfig) -> Result<Self> {
        config.validate()?;
        Ok(Mapper {
            config,
            adam: None,
            log: Vec::new(),
            event: 0,
        })
    }

    /// Trains the map on the replayed keyframes; poses are read only.
    pub fn optimize_map(
        &mut self,
        map: &mut ImplicitMap<f32>,
        replay: &mut [&mut Keyframe],
        rng: &mut impl Rng,
    ) -> Result<MapReport> {
        if replay.is_empty() {
            return Err(SlamError::contract("optimize_map needs at least one keyframe"));
        }
        let cfg = self.config;
        let adam = self
            .adam
            .get_or_insert_with(|| AdamState::for_store(AdamConfig::new(cfg.lr_map), map.params()));
        let poses: Vec<PoseSE3> = replay.iter().map(|k| k.pose).collect();
        let mut report = MapReport {
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
            iterations: cfg.n_map_iters,
            skipped_iterations: 0,
            rays_per_iteration: Vec::with_capacity(cfg.n_map_iters),
        };
        for it in 0..cfg.n_map_iters {
            let batch = draw_batch(&cfg, replay, false, &poses, rng)?;
            report.rays_per_iteration.push(batch.len());
            map.params_mut().zero_grad();
            let (loss, grads, _) = evaluate_batch(map, &batch, &cfg, Objective::Mapping, GradTarget::Params)?;
            let ids: Vec<_> = map.params().ids().collect();
            for (id, g) in ids.into_iter().zip(grads.into_iter().flatten()) {
                if let Some(g) = g {
                    map.params_mut().accumulate_grad(id, g.view())?;
                }
            }
            if !loss.total.is_finite() || !map.params().grads_finite() {
                warn!("map iteration {it}: non-finite loss {}, step skipped", loss.total);
                report.skipped_iterations += 1;
                map.params_mut().zero_grad();
                continue;
            }
            adam.step_store(map.params_mut())?;
            if report.initial_loss.is_nan() {
                report.initial_loss = loss.total;
            }
            report.final_loss = loss.total;
            refresh_grids(replay, &batch, &loss);
            self.log.push(LossRecord {
                phase: Phase::MapOpt,
                event: self.event,
                iteration: it,
                photometric: loss.photometric,
                free_space: loss.free_space,
                truncation: loss.truncation,
                total: loss.total,
            });
        }
        map.params_mut().zero_grad();
        debug!(
            "map event {}: loss {:.4} -> {:.4} over {} keyframes",
            self.event,
            report.initial_loss,
            report.final_loss,
            replay.len()
        );
        Ok(report)
    }

    /// Refines `kf.pose` against the frozen map; returns the best pose seen.
    pub fn optimize_pose<T: Real>(
        &mut self,
        map: &ImplicitMap<T>,
        kf: &mut Keyframe,
        rng: &mut impl Rng,
    ) -> Result<PoseReport> {
        let cfg = self.config;
        let init = kf.pose;
        let mut delta = [0.0f64; 6];
        let mut adam = AdamState::<f64>::new(
            AdamConfig::new(cfg.lr_pose).with_step_decay(cfg.pose_decay_factor, cfg.pose_decay_every),
            &[6],
        );
        let mut report = PoseReport {
            pose: init,
            initial_loss: f64::NAN,
            best_loss: f64::INFINITY,
            best_iteration: 0,
            failed: false,
        };
        for it in 0..cfg.n_pose_iters {
            let pose = init.left_increment(&delta);
            let mut single = [&mut *kf];
            let batch = draw_batch(&cfg, &single, true, &[pose], rng)?;
            let (loss, _, grads) = evaluate_batch(map, &batch, &cfg, Objective::Mapping, GradTarget::Geometry)?;
            let grads = grads.expect("geometry gradients requested");
            if !loss.total.is_finite() || grads.points.iter().any(|g| !g.is_finite()) {
                warn!("pose iteration {it}: non-finite loss, keeping the initial pose");
                report.pose = init;
                report.failed = true;
                return Ok(report);
            }
            if it == 0 {
                report.initial_loss = loss.total;
            }
            if loss.total < report.best_loss {
                report.best_loss = loss.total;
                report.best_iteration = it;
                report.pose = pose;
            }
            refresh_grids(&mut single, &batch, &loss);
            self.log.push(LossRecord {
                phase: Phase::PoseOpt,
                event: self.event,
                iteration: it,
                photometric: loss.photometric,
                free_space: loss.free_space,
                truncation: loss.truncation,
                total: loss.total,
            });
            let g = increment_gradient(&delta, &init, &batch, &grads);
            let mut params = [&mut delta[..]];
            adam.step(&mut params, &[&g[..]])?;
        }
        debug!(
            "pose event {}: loss {:.4} -> {:.4} (iteration {})",
            self.event, report.initial_loss, report.best_loss, report.best_iteration
        );
        Ok(report)
    }
}

/// Chains point and direction gradients to the increment `[ω, v]` of
/// `[Exp(ω) | v] · init`.
///
/// A sample at distance `t` on a ray with camera-frame direction `c` sits at
/// `Exp(ω) q + v` with `q = t₀ + t R₀ c`. For a gradient `g` at that point,
/// `gᵀ ∂p/∂ω = (q × Rᵀg)ᵀ J_r(ω)`, so the per-sample terms are summed before
/// applying the right Jacobian once.
pub fn increment_gradient(delta: &[f64; 6], init: &PoseSE3, batch: &RayBatch, grads: &GeometryGrads) -> [f64; 6] {
    let w = Vec3::new(delta[0], delta[1], delta[2]);
    let rot = crate::geometry::exp_so3(&w);
    let rt = rot.transpose();
    let mut rot_acc = Vec3::zeros();
    let mut trans = Vec3::zeros();
    let mut i = 0;
    for (ray, set) in batch.rays.iter().zip(&batch.samples) {
        // Direction before the increment: Exp(ω)ᵀ applied to the ray's.
        let d0 = rt * ray.direction;
        for t in &set.depths {
            let q = init.translation + d0 * *t;
            let gp = Vec3::new(grads.points[[i, 0]], grads.points[[i, 1]], grads.points[[i, 2]]);
            let gd = Vec3::new(grads.dirs[[i, 0]], grads.dirs[[i, 1]], grads.dirs[[i, 2]]);
            rot_acc += q.cross(&(rt * gp)) + d0.cross(&(rt * gd));
            trans += gp;
            i += 1;
        }
    }
    let gw = right_jacobian_so3(&w).transpose() * rot_acc;
    [gw.x, gw.y, gw.z, trans.x, trans.y, trans.z]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::mlp::{MapConfig, SceneBounds};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn photometric_examples() {
        assert_eq!(photometric_loss(&[[0.3, 0.2, 0.1]], &[[0.3, 0.2, 0.1]]).unwrap(), 0.0);
        assert_eq!(photometric_loss(&[[1.0, 0.0, 0.0]], &[[0.0; 3]]).unwrap(), 1.0);
        let a = [[0.1, 0.5, 0.9], [0.0, 0.0, 0.0], [1.0, 1.0, 0.0]];
        let b = [[0.4, 0.1, 0.9], [0.3, 0.4, 0.0], [1.0, 1.0, 1.0]];
        // Hand-computed norms: 0.5, 0.5, 1.0.
        assert_relative_eq!(photometric_loss(&a, &b).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert!(photometric_loss(&[], &[]).is_err());
    }

    #[test]
    fn geometric_examples() {
        let tr = 0.1;
        let set = RaySampleSet::from_depths(vec![0.5, 1.0], 2.0, tr);
        let w = LossWeights {
            w_tr: 1e-9,
            ..Default::default()
        };
        let l = geometric_loss(&[set.clone()], &[vec![tr, tr + 0.02]], tr, &w).unwrap();
        assert_relative_eq!(l.total, 0.01, epsilon = 1e-12);

        let set = RaySampleSet::from_depths(vec![0.5, 1.95, 2.05, 2.5], 2.0, tr);
        let exact = vec![tr, 0.05, -0.05, 7.0];
        let l = geometric_loss(&[set], &[exact], tr, &LossWeights::default()).unwrap();
        assert_relative_eq!(l.total, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn uniform_grid_allocates_evenly() {
        let alloc = allocate(&CellLossGrid::uniform(0.3), 1024, false).unwrap();
        assert!(alloc.iter().all(|n| *n == 16));
        assert!(allocate(&CellLossGrid::uniform(0.3), 63, false).is_err());
    }

    #[test]
    fn hot_cell_gets_most_or_least() {
        let mut g = CellLossGrid::uniform(1.0);
        g.loss[37] = 10.0;
        let a = allocate(&g, 1024, false).unwrap();
        assert!((0..CELLS).filter(|c| *c != 37).all(|c| a[c] < a[37]));
        let a = allocate(&g, 1024, true).unwrap();
        assert!((0..CELLS).filter(|c| *c != 37).all(|c| a[c] > a[37]));
        assert_eq!(a.iter().sum::<usize>(), 1024);
    }

    #[test]
    fn sampled_pixels_stay_in_their_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = CellLossGrid::uniform(1.0);
        g.loss[0] = 50.0;
        let px = active_sample_pixels(&g, 200, false, 60, 80, &mut rng).unwrap();
        assert_eq!(px.len(), 200);
        let mut counts = [0; CELLS];
        for (r, c) in px {
            counts[CellLossGrid::cell_of(r, c, 60, 80)] += 1;
        }
        assert_eq!(counts, allocate(&g, 200, false).unwrap());
    }

    #[test]
    fn cell_bounds_tile_the_image() {
        let (h, w) = (60, 80);
        let mut hits = vec![0; h * w];
        for cell in 0..CELLS {
            let (rows, cols) = CellLossGrid::cell_bounds(cell, h, w);
            for r in rows {
                for c in cols.clone() {
                    assert_eq!(CellLossGrid::cell_of(r, c, h, w), cell);
                    hits[r * w + c] += 1;
                }
            }
        }
        assert!(hits.iter().all(|h| *h == 1));
    }

    fn wall_keyframe(depth: f32) -> Keyframe {
        let k = Intrinsics::from_fov(16, 12, 60.0);
        let rgb = (0..16 * 12).map(|i| [(i % 16) as f32 / 16.0, 0.5, (i / 16) as f32 / 12.0]).collect();
        let frame = Frame::new(rgb, vec![depth; 16 * 12], k, 0.0).unwrap();
        Keyframe::new(0, frame, PoseSE3::identity())
    }

    fn small_config() -> MapperConfig {
        MapperConfig {
            rays_per_iter: 64,
            samples_per_ray: 24,
            far: 3.0,
            n_map_iters: 3,
            n_pose_iters: 3,
            chunk_rays: 20,
            ..Default::default()
        }
    }

    #[test]
    fn map_step_uses_the_full_budget_and_keeps_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bounds = SceneBounds::new([-2.0, -2.0, -1.0], [2.0, 2.0, 3.0]).unwrap();
        let mut map = ImplicitMap::<f32>::new(MapConfig::new(bounds), &mut rng);
        let mut kf = wall_keyframe(1.5);
        let pose = kf.pose;
        let mut mapper = Mapper::new(small_config()).unwrap();
        let before = map.checksum();
        let report = mapper.optimize_map(&mut map, &mut [&mut kf], &mut rng).unwrap();
        assert_eq!(report.rays_per_iteration, vec![64; 3]);
        assert_ne!(map.checksum(), before);
        assert_eq!(kf.pose, pose);
        assert_eq!(mapper.log.len(), 3);
        assert!(kf.cell_losses.counts.iter().all(|c| *c == 1));
    }

    #[test]
    fn pose_step_keeps_the_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bounds = SceneBounds::new([-2.0, -2.0, -1.0], [2.0, 2.0, 3.0]).unwrap();
        let map = ImplicitMap::<f32>::new(MapConfig::new(bounds), &mut rng);
        let mut kf = wall_keyframe(1.5);
        let mut mapper = Mapper::new(small_config()).unwrap();
        let before = map.checksum();
        let report = mapper.optimize_pose(&map, &mut kf, &mut rng).unwrap();
        assert_eq!(map.checksum(), before);
        assert!(!report.failed);
        assert!(report.best_loss <= report.initial_loss);
        assert!(report.pose.is_valid(1e-9));
    }

    #[test]
    fn increment_gradient_matches_finite_differences() {
        // A smooth loss on points and directions: Σ a·p + b·d over a batch.
        let k = Intrinsics::from_fov(16, 12, 60.0);
        let frame = Frame::new(vec![[0.2; 3]; 192], vec![1.0; 192], k, 0.0).unwrap();
        let init = PoseSE3::from_axis_angle(Vec3::new(0.1, -0.3, 0.2), Vec3::new(0.5, 0.1, -0.2));
        let delta = [0.02, -0.01, 0.03, 0.01, 0.0, -0.02];
        let pixels = [(0, 0), (5, 9), (11, 15)];
        let a = Vec3::new(0.3, -1.1, 0.7);
        let b = Vec3::new(-0.4, 0.2, 0.9);
        let loss_at = |d: &[f64; 6]| -> (f64, RayBatch) {
            let pose = init.left_increment(d);
            let mut batch = RayBatch::empty();
            for ray in generate_rays(&frame, &pose, &pixels).unwrap() {
                batch.samples.push(RaySampleSet::from_depths(vec![0.5, 1.0, 2.5], 1.0, 0.1));
                batch.rays.push(ray);
            }
            let mut l = 0.0;
            for (ray, set) in batch.rays.iter().zip(&batch.samples) {
                for t in &set.depths {
                    l += a.dot(&ray.point_at(*t)) + b.dot(&ray.direction);
                }
            }
            (l, batch)
        };
        let (_, batch) = loss_at(&delta);
        let n = 9;
        let grads = GeometryGrads {
            points: Array2::from_shape_fn((n, 3), |(_, j)| a[j]),
            dirs: Array2::from_shape_fn((n, 3), |(_, j)| b[j]),
        };
        let g = increment_gradient(&delta, &init, &batch, &grads);
        let h = 1e-6;
        for k in 0..6 {
            let (mut p, mut m) = (delta, delta);
            p[k] += h;
            m[k] -= h;
            let fd = (loss_at(&p).0 - loss_at(&m).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "component {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn pose_gradient_of_both_objectives_matches_finite_differences() {
        let bounds = SceneBounds::new([-2.0, -2.0, -1.0], [2.0, 2.0, 3.0]).unwrap();
        let map = ImplicitMap::<f64>::new(
            MapConfig {
                pos_freqs: 2,
                dir_freqs: 1,
                bounds,
            },
            &mut ChaCha8Rng::seed_from_u64(21),
        );
        let k = Intrinsics::from_fov(16, 12, 60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let rgb = (0..192).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let depth = (0..192).map(|i| if i % 7 == 3 { 0.0 } else { rng.random_range(0.8f32..1.6) }).collect();
        let frame = Frame::new(rgb, depth, k, 0.0).unwrap();
        let init = PoseSE3::from_axis_angle(Vec3::new(0.1, -0.2, 0.05), Vec3::new(0.2, 0.1, 0.3));
        let cfg = MapperConfig {
            samples_per_ray: 12,
            ..Default::default()
        };
        let pixels: Vec<(usize, usize)> = (0..24).map(|i| (i % 12, (i * 5) % 16)).collect();
        for objective in [Objective::Mapping, Objective::Finetune] {
            let eval = |d: &[f64; 6], target: GradTarget| {
                let mut batch = RayBatch::empty();
                batch
                    .push_frame(0, &frame, &init.left_increment(d), &pixels, &cfg, &mut ChaCha8Rng::seed_from_u64(23))
                    .unwrap();
                let (l, _, g) = evaluate_batch(&map, &batch, &cfg, objective, target).unwrap();
                (l.total, g, batch)
            };
            let (_, g, batch) = eval(&[0.0; 6], GradTarget::Geometry);
            let g = increment_gradient(&[0.0; 6], &init, &batch, &g.unwrap());
            let h = 1e-6;
            for c in 0..6 {
                let mut p = [0.0; 6];
                p[c] = h;
                let mut m = [0.0; 6];
                m[c] = -h;
                let fd = (eval(&p, GradTarget::None).0 - eval(&m, GradTarget::None).0) / (2.0 * h);
                let scale = fd.abs().max(g[c].abs()).max(1e-4);
                assert!((fd - g[c]).abs() / scale < 1e-4, "{objective:?} component {c}: fd {fd} vs {}", g[c]);
            }
        }
    }
}
