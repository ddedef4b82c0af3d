//! Ray generation, per-ray sampling and SDF-weighted compositing.
//!
//! Sample "depths" on a [`Ray`] are distances along its unit direction. The
//! measured depth of a ray is converted from the sensor's z-depth into that
//! same distance when the ray is generated.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::eval::Frame;
use crate::geometry::{PoseSE3, Vec3};
use crate::mlp::ImplicitMap;
use crate::tensor::{CustomOp, Real, Tape, Var};

/// Anything that returns a signed distance and colour for world points.
pub trait SceneField {
    fn sample(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<f64>, Vec<[f64; 3]>)>;
}

impl<T: Real> SceneField for ImplicitMap<T> {
    fn sample(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
        self.query_batch(points, dirs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: (usize, usize),
    pub measured_rgb: [f32; 3],
    /// Distance along `direction` to the measured surface; 0 when invalid.
    pub measured_depth: f64,
    /// Converts a distance along the ray back into camera z-depth.
    pub z_per_distance: f64,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn has_depth(&self) -> bool {
        self.measured_depth > 0.0
    }
}

/// Which supervision a sample receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    /// Between the camera and the near edge of the truncation band.
    FreeSpace,
    /// Within `tr` of the measured surface.
    Truncation,
    /// Beyond the far edge of the truncation band; never supervised.
    Behind,
    /// The ray has no valid depth measurement.
    Unobserved,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleSet {
    pub depths: Vec<f64>,
    pub sdf_targets: Vec<f64>,
    pub region_labels: Vec<Region>,
}

impl RaySampleSet {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn count(&self, region: Region) -> usize {
        self.region_labels.iter().filter(|r| **r == region).count()
    }

    /// Labels and clamped targets for the given distances along a ray.
    pub fn from_depths(mut depths: Vec<f64>, measured_depth: f64, tr: f64) -> Self {
        depths.sort_by(f64::total_cmp);
        let mut labels = Vec::with_capacity(depths.len());
        let mut targets = Vec::with_capacity(depths.len());
        for &d in &depths {
            if measured_depth > 0.0 {
                let diff = measured_depth - d;
                labels.push(if diff > tr {
                    Region::FreeSpace
                } else if diff >= -tr {
                    Region::Truncation
                } else {
                    Region::Behind
                });
                targets.push(diff.clamp(-tr, tr));
            } else {
                labels.push(Region::Unobserved);
                targets.push(0.0);
            }
        }
        RaySampleSet {
            depths,
            sdf_targets: targets,
            region_labels: labels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    /// Share of the per-ray budget placed inside the truncation band.
    pub surface_fraction: f64,
    /// Width of the SDF bell `σ(s/β)·σ(−s/β)`, in metres.
    pub bell_width: f64,
    /// Ignore samples more than `tr` past the first predicted surface.
    pub first_surface_only: bool,
}

impl RenderConfig {
    pub fn new(far: f64, tr: f64) -> Self {
        RenderConfig {
            near: 0.05,
            far,
            surface_fraction: 1.0 / 3.0,
            bell_width: 0.1 * tr,
            first_surface_only: true,
        }
    }
}

/// One ray per pixel through its centre, starting at the camera centre.
pub fn generate_rays(frame: &Frame, pose: &PoseSE3, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    let k = &frame.intrinsics;
    k.validate()?;
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= k.height || col >= k.width {
                return Err(SlamError::contract(format!(
                    "pixel ({row}, {col}) outside {}x{} image",
                    k.width, k.height
                )));
            }
            let cam = k.unproject_unit(row as f64, col as f64);
            let norm = cam.norm();
            let direction = pose.rotate(&(cam / norm));
            let z = frame.depth_at(row, col) as f64;
            Ok(Ray {
                origin: pose.translation,
                direction,
                pixel: (row, col),
                measured_rgb: frame.rgb_at(row, col),
                measured_depth: if z > 0.0 { z * norm } else { 0.0 },
                z_per_distance: 1.0 / norm,
            })
        })
        .collect()
}

/// Stratified samples over `[near, far]` plus, for rays with depth, samples
/// in the band `[D − tr, D + tr]`.
pub fn sample_along_ray(
    ray: &Ray,
    samples: usize,
    tr: f64,
    cfg: &RenderConfig,
    rng: &mut impl Rng,
) -> Result<RaySampleSet> {
    let (near, far) = (cfg.near, cfg.far);
    if !(near < far) || samples < 2 {
        return Err(SlamError::contract(format!(
            "sampling needs near < far and at least 2 samples (near {near}, far {far}, {samples} samples)"
        )));
    }
    let budget_surf = ((samples as f64 * cfg.surface_fraction).floor() as usize).min(samples);
    if !ray.has_depth() && budget_surf == samples {
        return Err(SlamError::contract("ray without depth and no stratified samples"));
    }
    // Rays without depth spend the whole budget on stratified samples.
    let n_surf = if ray.has_depth() { budget_surf } else { 0 };
    let n_strat = samples - n_surf;
    let mut depths = Vec::with_capacity(samples);
    stratified(&mut depths, near, far, n_strat, rng);
    if n_surf > 0 {
        let d = ray.measured_depth;
        stratified(&mut depths, (d - tr).max(1e-4), d + tr, n_surf, rng);
    }
    Ok(RaySampleSet::from_depths(depths, ray.measured_depth, tr))
}

fn stratified(out: &mut Vec<f64>, lo: f64, hi: f64, n: usize, rng: &mut impl Rng) {
    let step = (hi - lo) / n as f64;
    for i in 0..n {
        out.push(lo + step * (i as f64 + rng.random::<f64>()));
    }
}

/// Compositing result of one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub weights: Vec<f64>,
    /// The bell weights vanished and uniform weights were used instead.
    pub degenerate: bool,
}

/// Weight sums below this fall back to uniform weights.
pub const DEGENERATE_WEIGHT_SUM: f64 = 1e-12;

struct RayWeights<T> {
    /// Normalised weights.
    weights: Vec<T>,
    /// Unnormalised, masked weights.
    raw: Vec<T>,
    /// `d raw / d sdf` for each sample.
    dsdf: Vec<T>,
    total: T,
    degenerate: bool,
}

fn ray_weights<T: Real>(sdf: &[T], depths: &[T], tr: T, cfg: &RenderConfig) -> RayWeights<T> {
    let beta = T::of(cfg.bell_width);
    let n = sdf.len();
    let mut cutoff = T::infinity();
    if cfg.first_surface_only {
        if let Some(i) = (0..n.saturating_sub(1)).find(|&i| sdf[i] >= T::zero() && sdf[i + 1] < T::zero()) {
            cutoff = depths[i + 1] + tr;
        }
    }
    let mut raw = Vec::with_capacity(n);
    let mut dsdf = Vec::with_capacity(n);
    for i in 0..n {
        if depths[i] > cutoff {
            raw.push(T::zero());
            dsdf.push(T::zero());
            continue;
        }
        // σ(x)σ(−x) = e^{−|x|} / (1 + e^{−|x|})², which keeps its relative
        // precision far from the surface where 1 − σ(x) would round away.
        let x = sdf[i] / beta;
        let e = (-x.abs()).exp();
        let w = e / ((T::one() + e) * (T::one() + e));
        raw.push(w);
        dsdf.push(-w * (x * T::of(0.5)).tanh() / beta);
    }
    let total: T = raw.iter().copied().sum();
    let degenerate = total.as_f64() < DEGENERATE_WEIGHT_SUM;
    let weights = if degenerate {
        vec![T::one() / T::of(n as f64); n]
    } else {
        raw.iter().map(|w| *w / total).collect()
    };
    RayWeights {
        weights,
        raw,
        dsdf,
        total,
        degenerate,
    }
}

/// SDF-bell compositing of already evaluated samples.
pub fn composite(
    sdf: &[f64],
    rgb: &[[f64; 3]],
    depths: &[f64],
    tr: f64,
    cfg: &RenderConfig,
) -> Result<Composite> {
    if sdf.is_empty() || sdf.len() != rgb.len() || sdf.len() != depths.len() {
        return Err(SlamError::contract(format!(
            "composite needs matching non-empty inputs ({} sdf, {} rgb, {} depths)",
            sdf.len(),
            rgb.len(),
            depths.len()
        )));
    }
    let rw = ray_weights(sdf, depths, tr, cfg);
    let mut out = [0.0; 3];
    let mut depth = 0.0;
    for (i, w) in rw.weights.iter().enumerate() {
        for c in 0..3 {
            out[c] += w * rgb[i][c];
        }
        depth += w * depths[i];
    }
    Ok(Composite {
        rgb: out,
        depth,
        weights: rw.weights,
        degenerate: rw.degenerate,
    })
}

/// Rendered colour, depth (along the ray) and per-sample SDF of one ray.
pub fn render(
    field: &dyn SceneField,
    samples: &RaySampleSet,
    ray: &Ray,
    tr: f64,
    cfg: &RenderConfig,
) -> Result<(Composite, Vec<f64>)> {
    if samples.is_empty() {
        return Err(SlamError::contract("render needs at least one sample"));
    }
    let points: Vec<Vec3> = samples.depths.iter().map(|t| ray.point_at(*t)).collect();
    let dirs = vec![ray.direction; points.len()];
    let (sdf, rgb) = field.sample(&points, &dirs)?;
    let c = composite(&sdf, &rgb, &samples.depths, tr, cfg)?;
    Ok((c, sdf))
}

/// Fused compositing of many rays whose samples are stored contiguously.
struct CompositeOp<T> {
    offsets: Vec<usize>,
    depths: Vec<T>,
    weights: Vec<T>,
    raw: Vec<T>,
    dsdf: Vec<T>,
    totals: Vec<T>,
    degenerate: Vec<bool>,
}

impl<T: Real> CustomOp<T> for CompositeOp<T> {
    fn backward(
        &self,
        inputs: &[ArrayView2<'_, T>],
        _output: ArrayView2<'_, T>,
        grad_out: ArrayView2<'_, T>,
        wants: &[bool],
    ) -> Vec<Option<Array2<T>>> {
        let rgb = &inputs[1];
        let n = self.depths.len();
        let mut g_sdf = Array2::zeros((n, 1));
        let mut g_rgb = Array2::zeros((n, 3));
        for r in 0..self.offsets.len() - 1 {
            let (a, b) = (self.offsets[r], self.offsets[r + 1]);
            let g = grad_out.row(r);
            let mut adj = Vec::with_capacity(b - a);
            let mut mean_adj = T::zero();
            for i in a..b {
                let w = self.weights[i];
                for c in 0..3 {
                    g_rgb[[i, c]] = w * g[c];
                }
                let ai = g[0] * rgb[[i, 0]] + g[1] * rgb[[i, 1]] + g[2] * rgb[[i, 2]] + g[3] * self.depths[i];
                mean_adj = mean_adj + w * ai;
                adj.push(ai);
            }
            if self.degenerate[r] {
                continue;
            }
            for (k, i) in (a..b).enumerate() {
                if self.raw[i] > T::zero() {
                    g_sdf[[i, 0]] = (adj[k] - mean_adj) / self.totals[r] * self.dsdf[i];
                }
            }
        }
        vec![wants[0].then_some(g_sdf), wants[1].then_some(g_rgb)]
    }
}

/// Composites `sdf` (N x 1) and `rgb` (N x 3) into an (R x 4) value of
/// `[r, g, b, depth]` rows; also returns the degenerate-ray flags.
pub fn composite_on_tape<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    sdf: Var,
    rgb: Var,
    offsets: &[usize],
    depths: &[f64],
    tr: f64,
    cfg: &RenderConfig,
) -> Result<(Var, Vec<bool>)> {
    let n = *offsets.last().unwrap_or(&0);
    if tape.shape(sdf) != (n, 1) || tape.shape(rgb) != (n, 3) || depths.len() != n {
        return Err(SlamError::contract("composite_on_tape: sample counts disagree"));
    }
    let sdf_v: Vec<T> = tape.value(sdf).iter().copied().collect();
    let rgb_v = tape.value(rgb);
    let depths_t: Vec<T> = depths.iter().map(|d| T::of(*d)).collect();
    let rays = offsets.len() - 1;
    let mut out = Array2::zeros((rays, 4));
    let mut op = CompositeOp {
        offsets: offsets.to_vec(),
        depths: depths_t,
        weights: Vec::with_capacity(n),
        raw: Vec::with_capacity(n),
        dsdf: Vec::with_capacity(n),
        totals: Vec::with_capacity(rays),
        degenerate: Vec::with_capacity(rays),
    };
    for r in 0..rays {
        let (a, b) = (offsets[r], offsets[r + 1]);
        if a == b {
            return Err(SlamError::contract("render needs at least one sample per ray"));
        }
        let rw = ray_weights(&sdf_v[a..b], &op.depths[a..b], T::of(tr), cfg);
        for (k, i) in (a..b).enumerate() {
            let w = rw.weights[k];
            for c in 0..3 {
                out[[r, c]] = out[[r, c]] + w * rgb_v[[i, c]];
            }
            out[[r, 3]] = out[[r, 3]] + w * op.depths[i];
        }
        op.weights.extend(rw.weights);
        op.raw.extend(rw.raw);
        op.dsdf.extend(rw.dsdf);
        op.totals.push(rw.total);
        op.degenerate.push(rw.degenerate);
    }
    let flags = op.degenerate.clone();
    Ok((tape.custom(&[sdf, rgb], out, Box::new(op)), flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(depth: f32) -> Frame {
        let k = Intrinsics::new(40.0, 40.0, 7.0, 5.0, 16, 12).unwrap();
        Frame::new(vec![[0.5; 3]; 16 * 12], vec![depth; 16 * 12], k, 0.0).unwrap()
    }

    fn ray_with_depth(d: f64) -> Ray {
        Ray {
            origin: Vec3::zeros(),
            direction: Vec3::z(),
            pixel: (0, 0),
            measured_rgb: [0.0; 3],
            measured_depth: d,
            z_per_distance: 1.0,
        }
    }

    #[test]
    fn principal_pixel_looks_forward() {
        let f = frame(1.0);
        let rays = generate_rays(&f, &PoseSE3::identity(), &[(5, 7)]).unwrap();
        assert_relative_eq!(rays[0].direction, Vec3::z(), epsilon = 1e-12);
        assert_relative_eq!(rays[0].measured_depth, 1.0, epsilon = 1e-12);
        assert!(generate_rays(&f, &PoseSE3::identity(), &[(12, 0)]).is_err());
    }

    #[test]
    fn translation_moves_every_origin() {
        let f = frame(1.0);
        let t = Vec3::new(0.3, -1.0, 2.0);
        let rays = generate_rays(&f, &PoseSE3::from_translation(t), &[(0, 0), (11, 15), (3, 9)]).unwrap();
        assert!(rays.iter().all(|r| r.origin == t));
    }

    #[test]
    fn corner_directions_match_inverse_intrinsics() {
        let f = frame(2.0);
        let pose = PoseSE3::from_axis_angle(Vec3::new(0.2, -0.4, 0.9), Vec3::new(1.0, 2.0, 3.0));
        let k = &f.intrinsics;
        let corners = [(0, 0), (0, 15), (11, 0), (11, 15)];
        let rays = generate_rays(&f, &pose, &corners).unwrap();
        for ((r, c), ray) in corners.iter().zip(&rays) {
            // K^{-1} [u, v, 1]^T written out by hand
            let x = (*c as f64 - k.cx) / k.fx;
            let y = (*r as f64 - k.cy) / k.fy;
            let v = Vec3::new(x, y, 1.0);
            let expected = pose.rotation * v / v.norm();
            assert_relative_eq!(ray.direction, expected, epsilon = 1e-12);
            assert_relative_eq!(ray.measured_depth, 2.0 * v.norm(), epsilon = 1e-6);
        }
    }

    #[test]
    fn invalid_depth_gives_only_stratified_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = RenderConfig::new(4.0, 0.1);
        let s = sample_along_ray(&ray_with_depth(0.0), 144, 0.1, &cfg, &mut rng).unwrap();
        assert_eq!(s.len(), 144);
        assert!(s.depths.iter().all(|d| *d >= 0.05 && *d <= 4.0));
        assert!(s.region_labels.iter().all(|r| *r == Region::Unobserved));
    }

    #[test]
    fn labels_follow_the_truncation_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = RenderConfig::new(4.0, 0.1);
        let s = sample_along_ray(&ray_with_depth(2.0), 144, 0.1, &cfg, &mut rng).unwrap();
        assert_eq!(s.len(), 144);
        assert!(s.depths.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.count(Region::Truncation) >= 48, true);
        for (d, l) in s.depths.iter().zip(&s.region_labels) {
            if *d < 1.9 {
                assert_eq!(*l, Region::FreeSpace);
            } else if *d <= 2.1 {
                assert_eq!(*l, Region::Truncation);
            } else {
                assert_eq!(*l, Region::Behind);
            }
        }
    }

    #[test]
    fn sdf_targets_are_clamped_differences() {
        let s = RaySampleSet::from_depths(vec![1.0, 1.95, 2.05, 3.0], 2.0, 0.1);
        let expected = [0.1, 0.05, -0.05, -0.1];
        for (t, e) in s.sdf_targets.iter().zip(expected) {
            assert_relative_eq!(*t, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampling_rejects_bad_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = RenderConfig::new(4.0, 0.1);
        assert!(sample_along_ray(&ray_with_depth(1.0), 1, 0.1, &cfg, &mut rng).is_err());
        cfg.far = 0.01;
        assert!(sample_along_ray(&ray_with_depth(1.0), 10, 0.1, &cfg, &mut rng).is_err());
        let mut all_surface = RenderConfig::new(4.0, 0.1);
        all_surface.surface_fraction = 1.0;
        assert!(sample_along_ray(&ray_with_depth(0.0), 10, 0.1, &all_surface, &mut rng).is_err());
    }

    #[test]
    fn single_sample_and_constant_sdf() {
        let cfg = RenderConfig::new(4.0, 0.1);
        let c = composite(&[0.03], &[[0.2, 0.4, 0.6]], &[1.5], 0.1, &cfg).unwrap();
        assert_eq!(c.weights, vec![1.0]);
        assert_eq!(c.rgb, [0.2, 0.4, 0.6]);
        assert_eq!(c.depth, 1.5);

        let depths = [1.0, 2.0, 3.5, 4.0];
        let c = composite(&[0.02; 4], &[[0.1; 3]; 4], &depths, 0.1, &cfg).unwrap();
        for w in &c.weights {
            assert_relative_eq!(*w, 0.25, epsilon = 1e-12);
        }
        assert_relative_eq!(c.depth, 2.625, epsilon = 1e-12);
    }

    #[test]
    fn zero_crossing_gets_the_largest_weight() {
        let cfg = RenderConfig::new(4.0, 0.1);
        let c = composite(&[0.1, 0.0, -0.1], &[[0.0; 3]; 3], &[1.0, 1.1, 1.2], 0.1, &cfg).unwrap();
        assert!(c.weights[1] > c.weights[0] && c.weights[1] > c.weights[2]);
        let s: f64 = c.weights.iter().sum();
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn vanishing_weights_fall_back_to_uniform() {
        let cfg = RenderConfig::new(4.0, 0.1);
        let c = composite(&[5.0, 6.0], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[1.0, 3.0], 0.1, &cfg).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.weights, vec![0.5, 0.5]);
        assert_eq!(c.depth, 2.0);
    }

    struct UnitSphere;

    impl SceneField for UnitSphere {
        fn sample(&self, points: &[Vec3], _dirs: &[Vec3]) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
            Ok((points.iter().map(|p| p.norm() - 1.0).collect(), vec![[0.5; 3]; points.len()]))
        }
    }

    #[test]
    fn analytic_sphere_depth() {
        let tr = 0.1;
        let cfg = RenderConfig::new(3.5, tr);
        let ray = Ray {
            origin: Vec3::new(0.0, 0.0, -3.0),
            ..ray_with_depth(0.0)
        };
        // Dense, evenly spaced samples.
        let depths: Vec<f64> = (0..2000).map(|i| 0.5 + 3.0 * i as f64 / 1999.0).collect();
        let set = RaySampleSet::from_depths(depths, 0.0, tr);
        let (c, sdf) = render(&UnitSphere, &set, &ray, tr, &cfg).unwrap();
        assert_eq!(sdf.len(), 2000);
        assert!((c.depth - 2.0).abs() <= tr / 4.0, "depth {}", c.depth);
    }

    #[test]
    fn tape_composite_matches_plain_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = RenderConfig::new(4.0, 0.1);
        let offsets = vec![0, 5, 9];
        let depths: Vec<f64> = vec![1.0, 1.02, 1.05, 1.07, 1.3, 0.5, 0.52, 0.6, 0.61];
        let sdf0: Vec<f64> = vec![0.04, 0.02, 0.004, -0.01, -0.1, 0.015, 0.005, -0.003, -0.02];
        let rgb0: Vec<f64> = (0..27).map(|_| rng.random::<f64>()).collect();
        let lossw: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |sdf: &[f64], rgb: &[f64]| -> (f64, Option<(Array2<f64>, Array2<f64>)>) {
            let mut tape = Tape::new();
            let s = tape.leaf(Array2::from_shape_vec((9, 1), sdf.to_vec()).unwrap());
            let c = tape.leaf(Array2::from_shape_vec((9, 3), rgb.to_vec()).unwrap());
            let (out, flags) = composite_on_tape(&mut tape, s, c, &offsets, &depths, 0.1, &cfg).unwrap();
            assert!(flags.iter().all(|f| !f));
            let loss = tape.dot_const(out, Array2::from_shape_vec((2, 4), lossw.clone()).unwrap()).unwrap();
            let v = tape.scalar(loss);
            tape.backward(loss).unwrap();
            (v, Some((tape.grad(s).unwrap().clone(), tape.grad(c).unwrap().clone())))
        };
        let (_, grads) = eval(&sdf0, &rgb0);
        let (gs, gc) = grads.unwrap();
        let h = 1e-7;
        for i in 0..9 {
            let mut p = sdf0.clone();
            let mut m = sdf0.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (eval(&p, &rgb0).0 - eval(&m, &rgb0).0) / (2.0 * h);
            assert!((fd - gs[[i, 0]]).abs() < 1e-6 * fd.abs().max(1.0), "sdf {i}: {fd} vs {}", gs[[i, 0]]);
        }
        for i in 0..27 {
            let mut p = rgb0.clone();
            let mut m = rgb0.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (eval(&sdf0, &p).0 - eval(&sdf0, &m).0) / (2.0 * h);
            assert!((fd - gc[[i / 3, i % 3]]).abs() < 1e-6);
        }
        // Same values as the plain compositor.
        let plain = composite(&sdf0[..5], &[[0.0; 3]; 5], &depths[..5], 0.1, &cfg).unwrap();
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Array2::from_shape_vec((9, 1), sdf0.clone()).unwrap());
        let c = tape.constant(Array2::zeros((9, 3)));
        let (out, _) = composite_on_tape(&mut tape, s, c, &offsets, &depths, 0.1, &cfg).unwrap();
        assert_relative_eq!(tape.value(out)[[0, 3]], plain.depth, epsilon = 1e-12);
    }
}
