//! Trajectory and reconstruction error statistics.

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use super::Frame;
use crate::error::{Result, SlamError};
use crate::geometry::{Mat3, PoseSE3, Vec3};

/// Largest timestamp gap for two poses to be associated, seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteStats {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub pairs: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Pairs each estimated pose with the nearest ground-truth timestamp within
/// [`ASSOCIATION_WINDOW`]; a ground-truth pose is used at most once.
pub fn associate(estimated: &[(f64, PoseSE3)], ground_truth: &[(f64, PoseSE3)]) -> Vec<(Vec3, Vec3)> {
    let mut gt: Vec<(f64, usize)> = ground_truth.iter().enumerate().map(|(i, (t, _))| (*t, i)).collect();
    gt.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut used = vec![false; ground_truth.len()];
    let mut pairs = Vec::new();
    for (t, pose) in estimated {
        let at = gt.partition_point(|(g, _)| g < t);
        let best = [at.wrapping_sub(1), at]
            .into_iter()
            .filter_map(|i| gt.get(i))
            .filter(|(g, i)| (g - t).abs() <= ASSOCIATION_WINDOW && !used[*i])
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()));
        if let Some(&(_, i)) = best {
            used[i] = true;
            pairs.push((pose.translation, ground_truth[i].1.translation));
        }
    }
    pairs
}

/// Rotation and translation minimising `Σ ||b − (R a + t)||²`.
pub fn rigid_alignment(a: &[Vec3], b: &[Vec3]) -> PoseSE3 {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vec3>() / n;
    let cb = b.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        cov += (q - cb) * (p - ca).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut fix = Mat3::identity();
    fix[(2, 2)] = (u * vt).determinant().signum();
    let r = u * fix * vt;
    PoseSE3::new(r, cb - r * ca)
}

/// Translational error after rigidly aligning the estimate to the ground truth.
pub fn ate(estimated: &[(f64, PoseSE3)], ground_truth: &[(f64, PoseSE3)]) -> Result<AteStats> {
    let pairs = associate(estimated, ground_truth);
    if pairs.len() < 3 {
        return Err(SlamError::Metric(format!("only {} associated poses, need 3", pairs.len())));
    }
    let (est, gt): (Vec<Vec3>, Vec<Vec3>) = pairs.into_iter().unzip();
    let align = rigid_alignment(&est, &gt);
    let mut err: Vec<f64> = est.iter().zip(&gt).map(|(e, g)| (align.transform_point(e) - g).norm()).collect();
    let n = err.len() as f64;
    Ok(AteStats {
        rmse: (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: err.iter().sum::<f64>() / n,
        max: err.iter().cloned().fold(0.0, f64::max),
        median: median(&mut err),
        pairs: err.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconStats {
    /// Mean predicted-to-truth distance, metres.
    pub accuracy: f64,
    /// Mean truth-to-predicted distance, metres.
    pub completion: f64,
    /// Truth points within `threshold` of the prediction, percent.
    pub completion_ratio: f64,
    pub threshold: f64,
    pub predicted_points: usize,
    pub truth_points: usize,
}

/// Distance from every query point to its nearest neighbour in `cloud`.
pub fn nearest_distances(queries: &[Vec3], cloud: &[Vec3]) -> Vec<f64> {
    queries
        .iter()
        .map(|q| cloud.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .collect()
}

pub fn reconstruction_metrics(predicted: &[Vec3], truth: &[Vec3], threshold: f64) -> Result<ReconStats> {
    if predicted.is_empty() || truth.is_empty() {
        return Err(SlamError::Metric(format!(
            "need non-empty point sets, got {} predicted and {} truth",
            predicted.len(),
            truth.len()
        )));
    }
    let acc = nearest_distances(predicted, truth);
    let comp = nearest_distances(truth, predicted);
    Ok(ReconStats {
        accuracy: acc.iter().sum::<f64>() / acc.len() as f64,
        completion: comp.iter().sum::<f64>() / comp.len() as f64,
        completion_ratio: 100.0 * comp.iter().filter(|d| **d < threshold).count() as f64 / comp.len() as f64,
        threshold,
        predicted_points: predicted.len(),
        truth_points: truth.len(),
    })
}

/// Whether a world point was seen by at least one posed frame: it projects
/// inside the image onto a valid depth and lies no more than `margin`
/// behind the measured surface.
pub fn observed(point: &Vec3, views: &[(&Frame, PoseSE3)], margin: f64) -> bool {
    views.iter().any(|(frame, pose)| {
        let p = pose.inverse().transform_point(point);
        let Some((r, c)) = frame.intrinsics.project(&p) else {
            return false;
        };
        if !frame.intrinsics.contains(r, c) {
            return false;
        }
        let d = frame.depth_at(r.round() as usize, c.round() as usize) as f64;
        d > 0.0 && p.z <= d + margin
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> Vec<(f64, PoseSE3)> {
        (0..n)
            .map(|i| {
                let s = i as f64 / n as f64;
                (i as f64 / 30.0, PoseSE3::from_translation(Vec3::new(s, (3.0 * s).sin(), 0.2 * s * s)))
            })
            .collect()
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = line(50);
        let s = ate(&gt, &gt).unwrap();
        assert!(s.rmse < 1e-12 && s.mean < 1e-12 && s.median < 1e-12);
        assert_eq!(s.pairs, 50);
    }

    #[test]
    fn rigid_offset_is_absorbed() {
        let gt = line(40);
        let t = PoseSE3::from_axis_angle(Vec3::new(0.2, -0.4, 0.9), Vec3::new(1.0, -2.0, 0.5));
        let est: Vec<_> = gt.iter().map(|(s, p)| (*s + 0.004, t.compose(p))).collect();
        assert!(ate(&est, &gt).unwrap().rmse < 1e-9);
    }

    #[test]
    fn single_perturbed_pose_matches_direct_statistics() {
        let gt = line(100);
        let mut est = gt.clone();
        est[37].1.translation.x += 0.03;
        let s = ate(&est, &gt).unwrap();
        let a: Vec<Vec3> = est.iter().map(|p| p.1.translation).collect();
        let b: Vec<Vec3> = gt.iter().map(|p| p.1.translation).collect();
        let al = rigid_alignment(&a, &b);
        // The alignment is a minimum: no small rigid nudge lowers the cost.
        let cost = |t: &PoseSE3| a.iter().zip(&b).map(|(x, y)| (t.transform_point(x) - y).norm_squared()).sum::<f64>();
        for k in 0..6 {
            for sign in [-1.0, 1.0] {
                let mut d = [0.0; 6];
                d[k] = sign * 1e-4;
                assert!(cost(&al.left_increment(&d)) >= cost(&al) - 1e-15);
            }
        }
        let mut e: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (al.transform_point(x) - y).norm()).collect();
        let rmse = (e.iter().map(|v| v * v).sum::<f64>() / 100.0).sqrt();
        assert!((s.rmse - rmse).abs() < 1e-12);
        assert!((s.mean - e.iter().sum::<f64>() / 100.0).abs() < 1e-12);
        e.sort_by(f64::total_cmp);
        assert!((s.median - 0.5 * (e[49] + e[50])).abs() < 1e-12);
        // Alignment can only reduce the unaligned 0.03/√100.
        assert!(s.rmse <= 0.003 + 1e-12 && s.rmse > 0.002);
    }

    #[test]
    fn too_few_associations_is_an_error() {
        let gt = line(10);
        let shifted: Vec<_> = gt.iter().map(|(t, p)| (t + 0.5, *p)).collect();
        assert!(matches!(ate(&shifted, &gt), Err(SlamError::Metric(_))));
        assert!(matches!(ate(&gt[..2], &gt), Err(SlamError::Metric(_))));
    }

    #[test]
    fn reconstruction_of_identical_and_shifted_sets() {
        let pts: Vec<Vec3> = (0..20)
            .flat_map(|i| (0..20).map(move |j| Vec3::new(i as f64 * 0.05, j as f64 * 0.05, 0.0)))
            .collect();
        let s = reconstruction_metrics(&pts, &pts, 0.05).unwrap();
        assert_eq!((s.accuracy, s.completion, s.completion_ratio), (0.0, 0.0, 100.0));
        let shifted: Vec<Vec3> = pts.iter().map(|p| p + Vec3::new(0.0, 0.0, 0.01)).collect();
        let s = reconstruction_metrics(&shifted, &pts, 0.05).unwrap();
        assert!((s.accuracy - 0.01).abs() < 1e-12 && (s.completion - 0.01).abs() < 1e-12);
        assert_eq!(s.completion_ratio, 100.0);
        assert!(reconstruction_metrics(&[], &pts, 0.05).is_err());
    }

    #[test]
    fn random_sets_match_a_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = random_cloud(&mut rng, 100);
            let b = random_cloud(&mut rng, 100);
            let brute = |q: &[Vec3], c: &[Vec3]| -> Vec<f64> {
                q.iter().map(|p| c.iter().map(|x| (x - p).norm()).fold(f64::INFINITY, f64::min)).collect()
            };
            let (da, db) = (brute(&a, &b), brute(&b, &a));
            let s = reconstruction_metrics(&a, &b, 0.1).unwrap();
            assert!((s.accuracy - da.iter().sum::<f64>() / 100.0).abs() < 1e-12);
            assert!((s.completion - db.iter().sum::<f64>() / 100.0).abs() < 1e-12);
            assert_eq!(s.completion_ratio, db.iter().filter(|d| **d < 0.1).count() as f64);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn accuracy_and_completion_are_symmetric(seed in 0u64..1000, n in 1usize..60, m in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, n);
            let b = random_cloud(&mut rng, m);
            let ab = reconstruction_metrics(&a, &b, 0.1).unwrap();
            let ba = reconstruction_metrics(&b, &a, 0.1).unwrap();
            prop_assert!((ab.accuracy - ba.completion).abs() < 1e-12);
        }

        #[test]
        fn completion_ratio_grows_with_threshold(seed in 0u64..1000, t1 in 0.0f64..0.5, dt in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, 40);
            let b = random_cloud(&mut rng, 40);
            let lo = reconstruction_metrics(&a, &b, t1).unwrap().completion_ratio;
            let hi = reconstruction_metrics(&a, &b, t1 + dt).unwrap().completion_ratio;
            prop_assert!(hi >= lo);
        }

        #[test]
        fn ate_is_invariant_to_rigid_motion(seed in 0u64..1000, wx in -3.0f64..3.0, wy in -3.0f64..3.0, wz in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = line(30);
            let est: Vec<_> = gt
                .iter()
                .map(|(t, p)| (*t, PoseSE3::from_translation(p.translation + Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))))
                .collect();
            let m = PoseSE3::from_axis_angle(Vec3::new(wx, wy, wz), Vec3::new(wz, wx, wy));
            let moved: Vec<_> = est.iter().map(|(t, p)| (*t, m.compose(p))).collect();
            let (a, b) = (ate(&est, &gt).unwrap(), ate(&moved, &gt).unwrap());
            prop_assert!((a.rmse - b.rmse).abs() < 1e-9);
        }
    }
}
