//! Analytic desk-scale rooms rendered to RGB-D by sphere tracing.

use std::f64::consts::PI;

use log::debug;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Frame;
use crate::error::{Result, SlamError};
use crate::geometry::{Intrinsics, Mat3, PoseSE3, Vec3};
use crate::mlp::SceneBounds;

pub const TRACE_TOLERANCE: f64 = 1e-5;
pub const TRACE_MAX_STEPS: usize = 256;
/// Closest a camera centre may come to any surface.
pub const CAMERA_CLEARANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half: [f64; 3] },
}

fn box_sdf(p: &Vec3, center: &Vec3, half: &Vec3) -> f64 {
    let q = (p - center).abs() - half;
    let outside = q.sup(&Vec3::zeros()).norm();
    outside + q.max().min(0.0)
}

impl Primitive {
    /// Signed distance, positive outside the solid.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => (p - Vec3::from(*center)).norm() - radius,
            Primitive::Box { center, half } => box_sdf(p, &Vec3::from(*center), &Vec3::from(*half)),
        }
    }

    /// First positive ray parameter at which the ray enters the solid.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        match self {
            Primitive::Sphere { center, radius } => {
                let oc = o - Vec3::from(*center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > 0.0).then_some(t)
            }
            Primitive::Box { center, half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    let lo = (center[i] - half[i] - o[i]) / d[i];
                    let hi = (center[i] + half[i] - o[i]) / d[i];
                    t0 = t0.max(lo.min(hi));
                    t1 = t1.min(lo.max(hi));
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
        }
    }
}

/// Smooth camera path through the room, parametrised by `s ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub start: [f64; 3],
    pub end: [f64; 3],
    /// Amplitude of a sideways sine added to the straight line.
    pub sway: f64,
    /// Amplitude of a vertical half-sine.
    pub bob: f64,
    /// Heading at `s = 0` and its total change, radians about +z.
    pub yaw: f64,
    pub yaw_span: f64,
    /// Downward tilt, radians.
    pub pitch: f64,
}

impl CameraPath {
    pub fn pose_at(&self, s: f64) -> PoseSE3 {
        let (a, b) = (Vec3::from(self.start), Vec3::from(self.end));
        let dir = b - a;
        let side = Vec3::new(-dir.y, dir.x, 0.0).try_normalize(1e-12).unwrap_or_else(Vec3::y);
        let centre = a + dir * s + side * (self.sway * (2.0 * PI * s).sin()) + Vec3::z() * (self.bob * (PI * s).sin());
        // Smoothstep keeps the rotation rate zero at both ends.
        let yaw = self.yaw + self.yaw_span * s * s * (3.0 - 2.0 * s);
        let forward = Vec3::new(yaw.cos() * self.pitch.cos(), yaw.sin() * self.pitch.cos(), -self.pitch.sin());
        look_along(centre, forward)
    }
}

/// World-from-camera pose of a camera at `eye` looking along `forward`,
/// image rows pointing as close to world −z as possible.
pub fn look_along(eye: Vec3, forward: Vec3) -> PoseSE3 {
    let f = forward.normalize();
    let right = f.cross(&Vec3::z()).normalize();
    let down = f.cross(&right);
    PoseSE3::new(Mat3::from_columns(&[right, down, f]), eye)
}

/// A box room seen from inside with solid primitives floating in it.
/// The signed distance is positive in free space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub primitives: Vec<Primitive>,
    pub path: CameraPath,
    /// Point light position.
    pub light: [f64; 3],
    pub ambient: f64,
    pub texture_seed: u64,
    /// Standard deviation of additive depth noise in metres, 0 for none.
    pub depth_noise: f64,
}

impl Default for SyntheticScene {
    fn default() -> Self {
        SyntheticScene {
            room_min: [-2.0, -2.0, 0.0],
            room_max: [2.0, 2.0, 3.0],
            primitives: vec![
                Primitive::Sphere { center: [0.9, 0.9, 0.5], radius: 0.45 },
                Primitive::Sphere { center: [-0.8, -1.0, 1.2], radius: 0.3 },
                Primitive::Box { center: [-0.9, 0.8, 0.4], half: [0.4, 0.3, 0.3] },
                Primitive::Box { center: [1.0, -0.9, 0.8], half: [0.3, 0.3, 0.5] },
            ],
            path: CameraPath {
                start: [-0.9, -0.4, 1.4],
                end: [0.9, 0.4, 1.4],
                sway: 0.2,
                bob: 0.15,
                yaw: 0.4,
                yaw_span: 0.8,
                pitch: 0.35,
            },
            light: [0.3, 0.2, 2.7],
            ambient: 0.35,
            texture_seed: 7,
            depth_noise: 0.0,
        }
    }
}

/// Hash of an integer lattice point to `[0, 1)`.
fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise with smoothstep blending, in `[0, 1]`.
fn value_noise(seed: u64, p: &Vec3) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (bx, by, bz) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let w = (if dx == 1 { s.x } else { 1.0 - s.x })
            * (if dy == 1 { s.y } else { 1.0 - s.y })
            * (if dz == 1 { s.z } else { 1.0 - s.z });
        acc += w * lattice(seed, bx + dx as i64, by + dy as i64, bz + dz as i64);
    }
    acc
}

impl SyntheticScene {
    pub fn room_bounds(&self) -> SceneBounds {
        SceneBounds {
            min: self.room_min,
            max: self.room_max,
        }
    }

    /// Room bounds seen from `frame` (world-from-frame), grown by `margin`.
    pub fn bounds_in(&self, frame: &PoseSE3, margin: f64) -> SceneBounds {
        let inv = frame.inverse();
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for c in 0..8 {
            let corner = Vec3::from_fn(|i, _| if c >> i & 1 == 1 { self.room_max[i] } else { self.room_min[i] });
            let p = inv.transform_point(&corner);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        SceneBounds {
            min: (lo - Vec3::repeat(margin)).into(),
            max: (hi + Vec3::repeat(margin)).into(),
        }
    }

    fn room_sdf(&self, p: &Vec3) -> f64 {
        let (lo, hi) = (Vec3::from(self.room_min), Vec3::from(self.room_max));
        -box_sdf(p, &((lo + hi) * 0.5), &((hi - lo) * 0.5))
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.primitives.iter().fold(self.room_sdf(p), |d, prim| d.min(prim.sdf(p)))
    }

    /// Index of the closest surface: 0..6 for the room faces, then primitives.
    fn surface_id(&self, p: &Vec3) -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..3 {
            for (k, d) in [(0, p[i] - self.room_min[i]), (1, self.room_max[i] - p[i])] {
                if d.abs() < best.0 {
                    best = (d.abs(), 2 * i + k);
                }
            }
        }
        for (j, prim) in self.primitives.iter().enumerate() {
            let d = prim.sdf(p).abs();
            if d < best.0 {
                best = (d, 6 + j);
            }
        }
        best.1
    }

    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let h = 1e-5;
        let g = Vec3::from_fn(|i, _| {
            let mut e = Vec3::zeros();
            e[i] = h;
            self.sdf(&(p + e)) - self.sdf(&(p - e))
        });
        g.try_normalize(1e-12).unwrap_or_else(Vec3::z)
    }

    /// Textured surface colour before shading.
    pub fn albedo(&self, p: &Vec3) -> [f64; 3] {
        let id = self.surface_id(p);
        let hue = lattice(self.texture_seed, id as i64, 17, 3);
        let base = [0.45 + 0.4 * hue, 0.35 + 0.4 * (1.0 - hue), 0.4 + 0.3 * lattice(self.texture_seed, id as i64, 5, 11)];
        let coarse = value_noise(self.texture_seed, &(p * 3.0));
        let fine = value_noise(self.texture_seed.wrapping_add(1), &(p * 11.0));
        let pattern = 0.45 + 0.35 * coarse + 0.3 * fine;
        base.map(|b| (b * pattern).min(1.0))
    }

    /// Lambertian shading under a point light plus an ambient term.
    pub fn shade(&self, p: &Vec3, view: &Vec3) -> [f32; 3] {
        let mut n = self.normal(p);
        if n.dot(view) > 0.0 {
            n = -n;
        }
        let l = (Vec3::from(self.light) - p).try_normalize(1e-12).unwrap_or_else(Vec3::z);
        let k = self.ambient + (1.0 - self.ambient) * n.dot(&l).max(0.0);
        self.albedo(p).map(|a| (a * k).clamp(0.0, 1.0) as f32)
    }

    /// Distance along a unit ray to the first surface, `None` without convergence.
    pub fn trace(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let mut t = 0.0;
        for _ in 0..TRACE_MAX_STEPS {
            let s = self.sdf(&(o + d * t));
            if s.abs() < TRACE_TOLERANCE {
                return Some(t);
            }
            t += s;
        }
        None
    }

    /// Closed-form counterpart of [`trace`](Self::trace) for rays starting in free space.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let mut best = f64::INFINITY;
        for i in 0..3 {
            if d[i] != 0.0 {
                for plane in [self.room_min[i], self.room_max[i]] {
                    let t = (plane - o[i]) / d[i];
                    if t > 0.0 {
                        best = best.min(t);
                    }
                }
            }
        }
        for prim in &self.primitives {
            if let Some(t) = prim.intersect(o, d) {
                best = best.min(t);
            }
        }
        best.is_finite().then_some(best)
    }

    pub fn check_camera(&self, pose: &PoseSE3) -> Result<()> {
        let c = pose.translation;
        let clearance = self.sdf(&c);
        if !self.room_bounds().contains(&c) || clearance < CAMERA_CLEARANCE {
            return Err(SlamError::Generation(format!(
                "camera at ({:.3}, {:.3}, {:.3}) is {clearance:.3} m from the nearest surface",
                c.x, c.y, c.z
            )));
        }
        Ok(())
    }

    /// RGB-D image from `pose`; pixels where tracing fails get depth 0.
    pub fn render(&self, pose: &PoseSE3, k: &Intrinsics, timestamp: f64, rng: &mut impl Rng) -> Result<Frame> {
        self.check_camera(pose)?;
        let noise = if self.depth_noise > 0.0 {
            Some(Normal::new(0.0, self.depth_noise).map_err(|e| SlamError::Config(e.to_string()))?)
        } else {
            None
        };
        let n = k.width * k.height;
        let (mut rgb, mut depth) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let o = pose.translation;
        for row in 0..k.height {
            for col in 0..k.width {
                let ray = k.unproject_unit(row as f64, col as f64);
                let d = pose.rotate(&ray.normalize());
                match self.trace(&o, &d) {
                    Some(t) => {
                        let p = o + d * t;
                        rgb.push(self.shade(&p, &d));
                        let mut z = t / ray.norm();
                        if let Some(noise) = &noise {
                            z = (z + noise.sample(rng)).max(0.0);
                        }
                        depth.push(z as f32);
                    }
                    None => {
                        rgb.push([0.0; 3]);
                        depth.push(0.0);
                    }
                }
            }
        }
        Frame::new(rgb, depth, *k, timestamp)
    }
}

/// Frame rate of generated sequences.
pub const SYNTHETIC_FPS: f64 = 30.0;

/// Renders `n_frames` along the scene's camera path. Returns the frames and
/// the ground-truth `(timestamp, pose)` list.
pub fn generate_synthetic(
    scene: &SyntheticScene,
    n_frames: usize,
    intrinsics: &Intrinsics,
    rng: &mut impl Rng,
) -> Result<(Vec<Frame>, Vec<(f64, PoseSE3)>)> {
    intrinsics.validate()?;
    if n_frames == 0 {
        return Err(SlamError::Generation("no frames requested".into()));
    }
    let mut frames = Vec::with_capacity(n_frames);
    let mut poses = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let s = if n_frames == 1 { 0.0 } else { i as f64 / (n_frames - 1) as f64 };
        let pose = scene.path.pose_at(s);
        let t = i as f64 / SYNTHETIC_FPS;
        frames.push(scene.render(&pose, intrinsics, t, rng)?);
        poses.push((t, pose));
    }
    debug!("generated {n_frames} synthetic frames");
    Ok((frames, poses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty_room() -> SyntheticScene {
        SyntheticScene {
            primitives: Vec::new(),
            ..SyntheticScene::default()
        }
    }

    #[test]
    fn wall_three_metres_ahead() {
        // Camera at x = -1 facing +x: the wall x = 2 is 3 m away.
        let scene = empty_room();
        let pose = look_along(Vec3::new(-1.0, 0.0, 1.5), Vec3::x());
        let k = Intrinsics::from_fov(41, 31, 60.0);
        let f = scene.render(&pose, &k, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((f.depth_at(15, 20) as f64 - 3.0).abs() < 1e-4);
    }

    #[test]
    fn traced_depth_matches_closed_form_intersections() {
        let scene = SyntheticScene::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 100 {
            let o = Vec3::new(rng.random_range(-1.9..1.9), rng.random_range(-1.9..1.9), rng.random_range(0.1..2.9));
            if scene.sdf(&o) < 0.05 {
                continue;
            }
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize();
            let exact = scene.intersect(&o, &d).unwrap();
            let traced = scene.trace(&o, &d).expect("trace converges");
            assert!((traced - exact).abs() < 1e-4, "traced {traced}, exact {exact}");
            // Sphere tracing with an exact distance never steps through.
            assert!(traced <= exact + TRACE_TOLERANCE);
            checked += 1;
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = SyntheticScene::default();
        let k = Intrinsics::from_fov(32, 24, 60.0);
        let pose = scene.path.pose_at(0.3);
        let a = scene.render(&pose, &k, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = scene.render(&pose, &k, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn path_stays_clear_and_images_are_textured() {
        let scene = SyntheticScene::default();
        let k = Intrinsics::from_fov(40, 30, 60.0);
        let (frames, poses) = generate_synthetic(&scene, 12, &k, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(frames.len(), 12);
        let span = poses[0].1.translation_distance_to(&poses[11].1);
        assert!(span > 1.5 && span < 2.5, "span {span}");
        for f in &frames {
            // Grazing rays into corners may not converge.
            assert!(f.valid_depth_count() >= 40 * 30 * 99 / 100);
            let g: Vec<f32> = f.rgb.iter().map(|c| c[1]).collect();
            let mean = g.iter().sum::<f32>() / g.len() as f32;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / g.len() as f32;
            assert!(var.sqrt() > 0.03);
        }
        assert!(poses.windows(2).all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn camera_outside_the_room_is_rejected() {
        let scene = SyntheticScene::default();
        let k = Intrinsics::from_fov(8, 6, 60.0);
        let outside = look_along(Vec3::new(3.0, 0.0, 1.0), Vec3::x());
        let inside_solid = look_along(Vec3::new(0.9, 0.9, 0.5), Vec3::x());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(scene.render(&outside, &k, 0.0, &mut rng), Err(SlamError::Generation(_))));
        assert!(matches!(scene.render(&inside_solid, &k, 0.0, &mut rng), Err(SlamError::Generation(_))));
    }

    #[test]
    fn look_along_is_a_rotation() {
        let p = look_along(Vec3::new(0.1, 0.2, 1.0), Vec3::new(1.0, 0.5, -0.3));
        assert!(p.is_valid(1e-12));
        assert!((p.rotate(&Vec3::z()) - Vec3::new(1.0, 0.5, -0.3).normalize()).norm() < 1e-12);
        // Image rows point downward in the world.
        assert!(p.rotate(&Vec3::y()).z < 0.0);
    }
}
