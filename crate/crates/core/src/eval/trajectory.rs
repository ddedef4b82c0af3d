//! TUM trajectory files: `timestamp tx ty tz qx qy qz qw` per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SlamError};
use crate::geometry::{PoseSE3, Vec3};

pub type Trajectory = Vec<(f64, PoseSE3)>;

pub fn write_tum(mut out: impl Write, trajectory: &[(f64, PoseSE3)]) -> Result<()> {
    for (t, pose) in trajectory {
        let p = pose.translation;
        let [qx, qy, qz, qw] = pose.quaternion();
        writeln!(out, "{t:.6} {:.9} {:.9} {:.9} {qx:.9} {qy:.9} {qz:.9} {qw:.9}", p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn parse_tum(text: &str) -> std::result::Result<Trajectory, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", n + 1))?;
        if v.len() != 8 {
            return Err(format!("line {}: expected 8 values, found {}", n + 1, v.len()));
        }
        out.push((v[0], PoseSE3::from_quaternion(Vec3::new(v[1], v[2], v[3]), v[4], v[5], v[6], v[7])));
    }
    Ok(out)
}

pub fn read_tum(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| SlamError::load(path, e))?;
    parse_tum(&text).map_err(|e| SlamError::load(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_poses() {
        let traj: Trajectory = (0..5)
            .map(|i| {
                let a = i as f64 * 0.3;
                (i as f64 / 30.0, PoseSE3::from_axis_angle(Vec3::new(a, -0.5 * a, 0.1), Vec3::new(a, 1.0, -a)))
            })
            .collect();
        let mut buf = Vec::new();
        write_tum(&mut buf, &traj).unwrap();
        let back = parse_tum(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.len(), 5);
        for ((t0, p0), (t1, p1)) in traj.iter().zip(&back) {
            assert!((t0 - t1).abs() < 1e-6);
            assert!(p0.translation_distance_to(p1) < 1e-8 && (p0.rotation - p1.rotation).norm() < 1e-8);
        }
    }

    #[test]
    fn malformed_lines_are_reported() {
        assert!(parse_tum("# comment\n\n0 0 0 0 0 0 0 1\n").unwrap().len() == 1);
        assert!(parse_tum("0 0 0 0 0 0 1").unwrap_err().contains("line 1"));
        assert!(parse_tum("0 0 0 0 0 0 x 1").is_err());
    }
}
