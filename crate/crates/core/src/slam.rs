//! The per-frame pipeline: track, decide on a keyframe, then either refine
//! the keyframe pose and train the map, or finetune the tracker.
//!
//! Phases run strictly one after another. Every phase is bracketed by
//! checksums of the map, the stored keyframe poses and the two parts of the
//! feature extractor, and any change a phase is not allowed to make is
//! recorded as a violation.

use std::path::Path;

use log::{debug, info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::eval::Frame;
use crate::geometry::PoseSE3;
use crate::keyframe::{InsertOutcome, Keyframe, KeyframeStore};
use crate::mapper::{LossRecord, Mapper, MapperConfig, Phase};
use crate::mlp::{ImplicitMap, MapConfig, SceneBounds};
use crate::render::{generate_rays, render, sample_along_ray};
use crate::tensor::Fnv;
use crate::tracker::{FinetuneReport, Tracker, TrackerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub seed: u64,
    /// Motion since the last keyframe that makes a new one, metres.
    pub kf_translation_thresh: f64,
    /// Same, degrees.
    pub kf_rotation_thresh: f64,
    /// Keyframes replayed alongside a new one, N_rep.
    pub n_rep: usize,
    pub sigma_cull: f64,
    pub sigma_covis: f64,
    /// Pixel stride of covisibility scores.
    pub covis_stride: usize,
    /// Map iterations on the first frame.
    pub init_map_iters: usize,
    /// World region of the map, in the frame of the first camera.
    pub scene_bounds: SceneBounds,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub mapper: MapperConfig,
    pub tracker: TrackerConfig,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            seed: 0,
            kf_translation_thresh: 0.10,
            kf_rotation_thresh: 10.0,
            n_rep: 10,
            sigma_cull: 0.5,
            sigma_covis: 0.3,
            covis_stride: 2,
            init_map_iters: 200,
            scene_bounds: SceneBounds {
                min: [-3.0, -3.0, -1.0],
                max: [3.0, 3.0, 5.0],
            },
            pos_freqs: 10,
            dir_freqs: 4,
            mapper: MapperConfig::default(),
            tracker: TrackerConfig::default(),
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        self.mapper.validate()?;
        self.tracker.validate()?;
        SceneBounds::new(self.scene_bounds.min, self.scene_bounds.max)?;
        let ok = self.kf_translation_thresh > 0.0
            && self.kf_rotation_thresh > 0.0
            && self.sigma_covis >= 0.0
            && self.sigma_covis <= self.sigma_cull
            && self.sigma_cull <= 1.0
            && self.covis_stride >= 1;
        if ok {
            Ok(())
        } else {
            Err(SlamError::Config(format!(
                "keyframe thresholds must be positive with 0 <= sigma_covis <= sigma_cull <= 1, got {self:?}"
            )))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SystemConfig = toml::from_str(text).map_err(|e| SlamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SlamError::load(path, e))?;
        Self::from_toml(&text).map_err(|e| SlamError::load(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn map_config(&self) -> MapConfig {
        MapConfig {
            pos_freqs: self.pos_freqs,
            dir_freqs: self.dir_freqs,
            bounds: self.scene_bounds,
        }
    }
}

/// State that phases may or may not touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Checksums {
    pub map: u64,
    pub keyframe_poses: u64,
    pub outconv: u64,
    pub frozen: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PhaseRecord {
    pub frame: usize,
    pub phase: Phase,
    pub before: Checksums,
    pub after: Checksums,
}

impl PhaseRecord {
    /// Names of the quantities this phase changed without being allowed to.
    pub fn violations(&self) -> Vec<&'static str> {
        let (b, a) = (&self.before, &self.after);
        let mut out = Vec::new();
        if b.map != a.map && self.phase != Phase::MapOpt {
            out.push("map");
        }
        // The new keyframe is optimised before it is stored, so no stored
        // pose changes in any phase.
        if b.keyframe_poses != a.keyframe_poses {
            out.push("keyframe poses");
        }
        if b.outconv != a.outconv && self.phase != Phase::Finetune {
            out.push("outconv");
        }
        if b.frozen != a.frozen {
            out.push("frozen extractor layers");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeyframeEvent {
    pub id: usize,
    pub culled: bool,
    /// Pose-optimisation loss before and after.
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Keyframes the map was trained on.
    pub replay: Vec<usize>,
    pub map_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub index: usize,
    pub timestamp: f64,
    pub pose: PoseSE3,
    pub lost: bool,
    pub residual: f64,
    pub keyframe: Option<KeyframeEvent>,
    /// Set when a lost frame's pose optimisation failed and it was not kept.
    pub skipped_keyframe: bool,
    pub finetune_steps: usize,
}

/// The whole system: map, keyframes, tracker and trajectory.
pub struct Slam {
    config: SystemConfig,
    map: ImplicitMap<f32>,
    store: KeyframeStore,
    tracker: Tracker,
    mapper: Mapper,
    rng: ChaCha8Rng,
    last_pose: PoseSE3,
    /// The most recent frame taken as a keyframe, stored or culled. It is
    /// the tracking reference and the origin of keyframe motion.
    reference: Keyframe,
    trajectory: Vec<(f64, PoseSE3)>,
    phase: Phase,
    next_id: usize,
    phase_log: Vec<PhaseRecord>,
    frames: usize,
}

impl Slam {
    /// Makes `first` keyframe 0 at the identity and trains the map on it.
    pub fn initialize(first: Frame, config: SystemConfig) -> Result<Self> {
        config.validate()?;
        if first.valid_depth_count() == 0 {
            return Err(SlamError::Initialization("first frame has no valid depth".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let map = ImplicitMap::new(config.map_config(), &mut rng);
        let tracker = Tracker::new(config.tracker, &mut rng)?;
        let mut init_cfg = config.mapper;
        init_cfg.n_map_iters = config.init_map_iters;
        let mapper = Mapper::new(init_cfg)?;
        let mut slam = Slam {
            store: KeyframeStore::new(config.sigma_cull, config.sigma_covis, config.covis_stride),
            map,
            tracker,
            mapper,
            rng,
            last_pose: PoseSE3::identity(),
            reference: Keyframe::new(0, first.clone(), PoseSE3::identity()),
            trajectory: Vec::new(),
            phase: Phase::Tracking,
            next_id: 1,
            phase_log: Vec::new(),
            frames: 0,
            config,
        };
        let t0 = first.timestamp;
        slam.store.insert(Keyframe::new(0, first, PoseSE3::identity()))?;
        let report = slam.run_phase(Phase::MapOpt, |s| {
            let mut kfs = s.store.get_many_mut(&[0])?;
            s.mapper.optimize_map(&mut s.map, &mut kfs, &mut s.rng)
        })?;
        slam.mapper.config = slam.config.mapper;
        slam.mapper.event += 1;
        slam.trajectory.push((t0, PoseSE3::identity()));
        slam.frames = 1;
        info!("initialised: map loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);
        Ok(slam)
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn map(&self) -> &ImplicitMap<f32> {
        &self.map
    }

    pub fn store(&self) -> &KeyframeStore {
        &self.store
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn trajectory(&self) -> &[(f64, PoseSE3)] {
        &self.trajectory
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn phase_log(&self) -> &[PhaseRecord] {
        &self.phase_log
    }

    pub fn loss_log(&self) -> &[LossRecord] {
        &self.mapper.log
    }

    /// Every disallowed change seen so far, as `(frame, phase, what)`.
    pub fn violations(&self) -> Vec<(usize, Phase, &'static str)> {
        self.phase_log
            .iter()
            .flat_map(|r| r.violations().into_iter().map(move |v| (r.frame, r.phase, v)))
            .collect()
    }

    pub fn checksums(&self) -> Checksums {
        let mut h = Fnv::new();
        for kf in self.store.keyframes() {
            h.write(&kf.id.to_le_bytes());
            for v in kf.pose.to_row_major() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        Checksums {
            map: self.map.checksum(),
            keyframe_poses: h.finish(),
            outconv: self.tracker.extractor().outconv_checksum(),
            frozen: self.tracker.extractor().frozen_checksum(),
        }
    }

    fn run_phase<R>(&mut self, phase: Phase, body: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        debug_assert_eq!(self.phase, Phase::Tracking, "phases never nest");
        let before = self.checksums();
        self.phase = phase;
        let out = body(self);
        self.phase = Phase::Tracking;
        let record = PhaseRecord {
            frame: self.frames,
            phase,
            before,
            after: self.checksums(),
        };
        for v in record.violations() {
            warn!("frame {}: {v} changed during {}", self.frames, phase.as_str());
        }
        self.phase_log.push(record);
        out
    }

    pub fn process_frame(&mut self, frame: Frame) -> Result<FrameReport> {
        let index = self.frames;
        if let Some((t, _)) = self.trajectory.last() {
            if frame.timestamp <= *t {
                return Err(SlamError::contract(format!(
                    "frame timestamp {} does not follow {t}",
                    frame.timestamp
                )));
            }
        }
        // A culled keyframe still serves as the reference: measured from
        // the last stored one, every frame after a cull would be another
        // keyframe, tracked over an ever wider baseline.
        let fallback = self.last_pose;
        let track = self.run_phase(Phase::Tracking, |s| s.tracker.track(&frame, &s.reference, &fallback))?;
        let rel = self.reference.pose.inverse().compose(&track.pose);
        let moved = rel.translation.norm() > self.config.kf_translation_thresh
            || PoseSE3::identity().rotation_angle_to(&rel).to_degrees() > self.config.kf_rotation_thresh;
        let mut report = FrameReport {
            index,
            timestamp: frame.timestamp,
            pose: track.pose,
            lost: track.lost,
            residual: track.residual,
            keyframe: None,
            skipped_keyframe: false,
            finetune_steps: 0,
        };
        if moved || track.lost {
            self.keyframe_path(frame, &track.pose, track.lost, &mut report)?;
        } else if self.store.len() >= self.config.tracker.n_kf {
            let ft: FinetuneReport = self.run_phase(Phase::Finetune, |s| {
                s.tracker.finetune(&s.map, &s.store, &s.mapper.config, &mut s.rng)
            })?;
            report.finetune_steps = ft.iterations - ft.skipped;
        }
        self.last_pose = report.pose;
        self.trajectory.push((report.timestamp, report.pose));
        self.frames += 1;
        debug!(
            "frame {index}: residual {:.4}{}{}",
            report.residual,
            if report.lost { " lost" } else { "" },
            match &report.keyframe {
                Some(k) if k.culled => " keyframe (culled)",
                Some(_) => " keyframe",
                None => "",
            }
        );
        Ok(report)
    }

    fn keyframe_path(&mut self, frame: Frame, tracked: &PoseSE3, lost: bool, report: &mut FrameReport) -> Result<()> {
        let id = self.next_id;
        let mut kf = Keyframe::new(id, frame, *tracked);
        let pose = self.run_phase(Phase::PoseOpt, |s| s.mapper.optimize_pose(&s.map, &mut kf, &mut s.rng))?;
        if pose.failed && lost {
            warn!("keyframe {id}: pose optimisation failed on a lost frame; keeping the tracker pose");
            report.skipped_keyframe = true;
            return Ok(());
        }
        kf.pose = pose.pose;
        report.pose = pose.pose;
        self.next_id += 1;
        let outcome = self.store.insert(kf.clone())?;
        self.reference = kf.clone();
        let culled = matches!(outcome, InsertOutcome::Culled { .. });
        let n_rep = self.config.n_rep;
        let (replay, map) = self.run_phase(Phase::MapOpt, |s| {
            let (replay, rep) = if culled {
                // The culled frame is trained on once with a random replay set.
                let ids: Vec<usize> = s.store.keyframes().iter().map(|k| k.id).collect();
                let chosen: Vec<usize> =
                    sample(&mut s.rng, ids.len(), n_rep.min(ids.len())).into_iter().map(|i| ids[i]).collect();
                let mut kfs = s.store.get_many_mut(&chosen)?;
                kfs.insert(0, &mut kf);
                let rep = s.mapper.optimize_map(&mut s.map, &mut kfs, &mut s.rng)?;
                let mut replay = vec![id];
                replay.extend(chosen);
                (replay, rep)
            } else {
                let replay = s.store.select_replay(id, n_rep, &mut s.rng)?;
                let mut kfs = s.store.get_many_mut(&replay)?;
                (replay.clone(), s.mapper.optimize_map(&mut s.map, &mut kfs, &mut s.rng)?)
            };
            Ok((replay, rep))
        })?;
        self.mapper.event += 1;
        report.keyframe = Some(KeyframeEvent {
            id,
            culled,
            initial_loss: pose.initial_loss,
            best_loss: pose.best_loss,
            replay,
            map_loss: map.final_loss,
        });
        Ok(())
    }

    /// Colour and z-depth rendered from `pose`, sampling around the
    /// frame's measured depth as in training.
    pub fn render_view(&mut self, frame: &Frame, pose: &PoseSE3) -> Result<(Vec<[f32; 3]>, Vec<f32>)> {
        let cfg = self.config.mapper;
        let pixels: Vec<(usize, usize)> =
            (0..frame.height()).flat_map(|r| (0..frame.width()).map(move |c| (r, c))).collect();
        let rays = generate_rays(frame, pose, &pixels)?;
        let (mut rgb, mut depth) = (Vec::with_capacity(rays.len()), Vec::with_capacity(rays.len()));
        for ray in &rays {
            let samples = sample_along_ray(ray, cfg.samples_per_ray, cfg.tr, &cfg.render(), &mut self.rng)?;
            let (c, _) = render(&self.map, &samples, ray, cfg.tr, &cfg.render())?;
            rgb.push(c.rgb.map(|v| v as f32));
            depth.push((c.depth * ray.z_per_distance) as f32);
        }
        Ok((rgb, depth))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_synthetic, SyntheticScene};
    use crate::geometry::Intrinsics;
    use rand::SeedableRng;

    /// Small and cheap: enough to exercise every path, not to map well.
    fn light_config() -> SystemConfig {
        let mut cfg = SystemConfig::default();
        cfg.mapper.rays_per_iter = 32;
        cfg.mapper.samples_per_ray = 8;
        cfg.mapper.n_map_iters = 2;
        cfg.mapper.n_pose_iters = 2;
        cfg.init_map_iters = 3;
        cfg.tracker.k = 64;
        cfg.tracker.n_kf = 2;
        cfg.tracker.finetune_iters = 1;
        cfg.tracker.finetune_rays = 16;
        cfg
    }

    fn sequence(n: usize) -> (Vec<Frame>, Vec<(f64, PoseSE3)>) {
        let k = Intrinsics::from_fov(32, 24, 60.0);
        generate_synthetic(&SyntheticScene::default(), n, &k, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn initialisation_stores_one_keyframe_at_identity() {
        let (frames, _) = sequence(1);
        let slam = Slam::initialize(frames[0].clone(), light_config()).unwrap();
        assert_eq!(slam.store().len(), 1);
        assert_eq!(slam.trajectory(), &[(frames[0].timestamp, PoseSE3::identity())]);
        assert_eq!(slam.store().keyframes()[0].pose, PoseSE3::identity());
        assert_eq!(slam.phase(), Phase::Tracking);
        assert!(slam.violations().is_empty());
    }

    #[test]
    fn initialisation_is_deterministic_and_rejects_empty_depth() {
        let (frames, _) = sequence(1);
        let a = Slam::initialize(frames[0].clone(), light_config()).unwrap();
        let b = Slam::initialize(frames[0].clone(), light_config()).unwrap();
        assert_eq!(a.map().checksum(), b.map().checksum());
        let mut blank = frames[0].clone();
        blank.depth.iter_mut().for_each(|d| *d = 0.0);
        assert!(matches!(Slam::initialize(blank, light_config()), Err(SlamError::Initialization(_))));
    }

    #[test]
    fn unmoved_frame_takes_the_tracking_path() {
        let (frames, _) = sequence(1);
        let mut slam = Slam::initialize(frames[0].clone(), light_config()).unwrap();
        let mut again = frames[0].clone();
        again.timestamp += 0.1;
        let r = slam.process_frame(again).unwrap();
        assert!(r.keyframe.is_none() && !r.lost);
        assert!(r.pose.translation.norm() < 1e-9);
        assert_eq!(slam.store().len(), 1);
        assert_eq!(slam.trajectory().len(), 2);
    }

    #[test]
    fn large_motion_makes_a_keyframe_and_phases_stay_isolated() {
        // Frames 0.25 m apart along the default path.
        let (frames, _) = sequence(8);
        let mut slam = Slam::initialize(frames[0].clone(), light_config()).unwrap();
        let mut events = 0;
        for f in frames.into_iter().skip(1) {
            let r = slam.process_frame(f).unwrap();
            events += usize::from(r.keyframe.is_some() || r.lost);
        }
        assert!(events >= 1);
        assert_eq!(slam.trajectory().len(), 8);
        assert!(slam.trajectory().windows(2).all(|w| w[1].0 > w[0].0));
        assert!(slam.violations().is_empty(), "{:?}", slam.violations());
        let phases: Vec<Phase> = slam.phase_log().iter().map(|r| r.phase).collect();
        // Each pose refinement is directly followed by the map update that uses it.
        for (i, p) in phases.iter().enumerate() {
            if *p == Phase::PoseOpt {
                assert_eq!(phases.get(i + 1), Some(&Phase::MapOpt));
            }
        }
    }

    #[test]
    fn timestamps_must_increase() {
        let (frames, _) = sequence(1);
        let mut slam = Slam::initialize(frames[0].clone(), light_config()).unwrap();
        assert!(slam.process_frame(frames[0].clone()).is_err());
    }

    #[test]
    fn violations_are_detected() {
        let before = Checksums { map: 1, keyframe_poses: 2, outconv: 3, frozen: 4 };
        let after = Checksums { map: 9, outconv: 9, ..before };
        let rec = |phase| PhaseRecord { frame: 0, phase, before, after };
        assert_eq!(rec(Phase::Finetune).violations(), vec!["map"]);
        assert_eq!(rec(Phase::MapOpt).violations(), vec!["outconv"]);
        assert_eq!(rec(Phase::PoseOpt).violations(), vec!["map", "outconv"]);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = SystemConfig::default();
        cfg.mapper.rays_per_iter = 77;
        cfg.scene_bounds.max[2] = 4.5;
        let back = SystemConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = SystemConfig::from_toml("seed = 5\n[mapper]\nn_map_iters = 3\n").unwrap();
        assert_eq!((partial.seed, partial.mapper.n_map_iters, partial.mapper.rays_per_iter), (5, 3, 1024));
        assert!(SystemConfig::from_toml("sigma_covis = 0.9").is_err());
        let defaults = SystemConfig::default();
        assert_eq!((defaults.mapper.rays_per_iter, defaults.mapper.samples_per_ray, defaults.tracker.k), (1024, 144, 200));
        assert_eq!((defaults.n_rep, defaults.sigma_cull, defaults.sigma_covis, defaults.tracker.n_kf), (10, 0.5, 0.3, 10));
    }
}
