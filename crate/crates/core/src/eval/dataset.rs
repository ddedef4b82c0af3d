//! RGB-D sequences on disk in the TUM association layout:
//!
//! - `intrinsics.txt`: `fx fy cx cy width height depth_scale`
//! - `associations.txt`: `t_rgb rgb/path.png t_depth depth/path.png` per line
//! - 8-bit RGB PNGs and 16-bit depth PNGs holding `metres · depth_scale`
//! - optionally `groundtruth.txt` as a TUM trajectory

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use super::trajectory::{read_tum, write_tum, Trajectory};
use super::Frame;
use crate::error::{Result, SlamError};
use crate::geometry::{Intrinsics, PoseSE3};

pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const ASSOCIATIONS_FILE: &str = "associations.txt";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.txt";

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    timestamp: f64,
    rgb: PathBuf,
    depth: PathBuf,
}

/// An opened sequence; images are read lazily, in timestamp order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub intrinsics: Intrinsics,
    pub depth_scale: f64,
    entries: Vec<Entry>,
}

fn parse_intrinsics(path: &Path) -> Result<(Intrinsics, f64)> {
    let text = fs::read_to_string(path).map_err(|e| SlamError::load(path, e))?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| SlamError::load(path, e))?;
    if v.len() != 7 {
        return Err(SlamError::load(path, format!("expected 7 values, found {}", v.len())));
    }
    if v[4] < 1.0 || v[5] < 1.0 || v[4].fract() != 0.0 || v[5].fract() != 0.0 || !(v[6] > 0.0) {
        return Err(SlamError::load(path, "width, height and depth_scale must be positive"));
    }
    let k = Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize).map_err(|e| SlamError::load(path, e))?;
    Ok((k, v[6]))
}

fn parse_associations(path: &Path) -> Result<Vec<Entry>> {
    let text = fs::read_to_string(path).map_err(|e| SlamError::load(path, e))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || SlamError::load(path, format!("line {}: expected `t rgb t depth`", n + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let timestamp: f64 = f[0].parse().map_err(|_| bad())?;
        f[2].parse::<f64>().map_err(|_| bad())?;
        entries.push(Entry {
            timestamp,
            rgb: f[1].into(),
            depth: f[3].into(),
        });
    }
    entries.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(entries)
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let (intrinsics, depth_scale) = parse_intrinsics(&dir.join(INTRINSICS_FILE))?;
        let entries = parse_associations(&dir.join(ASSOCIATIONS_FILE))?;
        Ok(Dataset {
            dir,
            intrinsics,
            depth_scale,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.timestamp).collect()
    }

    pub fn frame(&self, i: usize) -> Result<Frame> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| SlamError::contract(format!("frame {i} of {}", self.len())))?;
        let (w, h) = (self.intrinsics.width as u32, self.intrinsics.height as u32);
        let rgb_path = self.dir.join(&e.rgb);
        let rgb = image::open(&rgb_path).map_err(|err| SlamError::load(&rgb_path, err))?.to_rgb8();
        if rgb.dimensions() != (w, h) {
            return Err(SlamError::load(&rgb_path, format!("image is {:?}, intrinsics say {w}x{h}", rgb.dimensions())));
        }
        let depth_path = self.dir.join(&e.depth);
        let depth = image::open(&depth_path).map_err(|err| SlamError::load(&depth_path, err))?;
        let depth = match depth {
            image::DynamicImage::ImageLuma16(d) => d,
            other => return Err(SlamError::load(&depth_path, format!("expected 16-bit depth, found {:?}", other.color()))),
        };
        if depth.dimensions() != (w, h) {
            return Err(SlamError::load(&depth_path, format!("image is {:?}, intrinsics say {w}x{h}", depth.dimensions())));
        }
        let rgb = rgb.pixels().map(|p| p.0.map(|c| c as f32 / 255.0)).collect();
        let depth = depth.pixels().map(|p| (p.0[0] as f64 / self.depth_scale) as f32).collect();
        Frame::new(rgb, depth, self.intrinsics, e.timestamp)
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<Frame>> + '_ {
        (0..self.len()).map(|i| self.frame(i))
    }

    /// `groundtruth.txt` if the sequence has one.
    pub fn ground_truth(&self) -> Result<Option<Trajectory>> {
        let path = self.dir.join(GROUND_TRUTH_FILE);
        if !path.exists() {
            return Ok(None);
        }
        read_tum(&path).map(Some)
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::open(dir)
}

/// Writes frames (and optionally their true poses) in the layout [`Dataset`] reads.
/// Depth is rounded to the nearest `1 / depth_scale` metre.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    frames: &[Frame],
    ground_truth: Option<&[(f64, PoseSE3)]>,
    depth_scale: f64,
) -> Result<()> {
    let dir = dir.as_ref();
    let first = frames.first().ok_or_else(|| SlamError::contract("no frames to write"))?;
    if !(depth_scale > 0.0) {
        return Err(SlamError::contract("depth_scale must be positive"));
    }
    let k = first.intrinsics;
    fs::create_dir_all(dir.join("rgb"))?;
    fs::create_dir_all(dir.join("depth"))?;
    fs::write(
        dir.join(INTRINSICS_FILE),
        format!("{} {} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height, depth_scale),
    )?;
    let mut assoc = String::from("# timestamp rgb timestamp depth\n");
    for (i, f) in frames.iter().enumerate() {
        if f.intrinsics != k {
            return Err(SlamError::contract(format!("frame {i} has different intrinsics")));
        }
        let (w, h) = (k.width as u32, k.height as u32);
        let rgb = ImageBuffer::<Rgb<u8>, _>::from_fn(w, h, |x, y| {
            Rgb(f.rgb_at(y as usize, x as usize).map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        let depth = ImageBuffer::<Luma<u16>, _>::from_fn(w, h, |x, y| {
            Luma([(f.depth_at(y as usize, x as usize) as f64 * depth_scale).round().min(u16::MAX as f64) as u16])
        });
        let (rgb_name, depth_name) = (format!("rgb/{i:06}.png"), format!("depth/{i:06}.png"));
        rgb.save(dir.join(&rgb_name)).map_err(|e| SlamError::Io(std::io::Error::other(e)))?;
        depth.save(dir.join(&depth_name)).map_err(|e| SlamError::Io(std::io::Error::other(e)))?;
        assoc.push_str(&format!("{:.6} {rgb_name} {:.6} {depth_name}\n", f.timestamp, f.timestamp));
    }
    fs::write(dir.join(ASSOCIATIONS_FILE), assoc)?;
    if let Some(gt) = ground_truth {
        write_tum(fs::File::create(dir.join(GROUND_TRUTH_FILE))?, gt)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_synthetic, SyntheticScene};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(dir: &Path, values: &[u16], scale: f64) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join(INTRINSICS_FILE), format!("10 10 1 0.5 3 2 {scale}\n")).unwrap();
        ImageBuffer::<Luma<u16>, _>::from_fn(3, 2, |x, y| Luma([values[(y * 3 + x) as usize]]))
            .save(dir.join("d.png"))
            .unwrap();
        ImageBuffer::<Rgb<u8>, _>::from_pixel(3, 2, Rgb([255, 0, 51])).save(dir.join("c.png")).unwrap();
    }

    #[test]
    fn depth_units_and_timestamp_order() {
        let tmp = tempfile::tempdir().unwrap();
        tiny(tmp.path(), &[5000, 0, 10000, 2500, 1, 65535], 5000.0);
        fs::write(tmp.path().join(ASSOCIATIONS_FILE), "# out of order\n2.0 c.png 2.0 d.png\n1.0 c.png 1.0 d.png\n").unwrap();
        let ds = load_dataset(tmp.path()).unwrap();
        assert_eq!(ds.timestamps(), vec![1.0, 2.0]);
        let f = ds.frame(0).unwrap();
        assert_eq!(f.depth_at(0, 0), 1.0);
        assert_eq!(f.depth_at(0, 1), 0.0);
        assert_eq!(f.depth_at(1, 0), 0.5);
        assert_eq!(f.rgb_at(1, 2), [1.0, 0.0, 0.2]);
        assert!(ds.ground_truth().unwrap().is_none());
    }

    #[test]
    fn missing_and_mismatched_files_name_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        let err = load_dataset(tmp.path()).unwrap_err().to_string();
        assert!(err.contains(INTRINSICS_FILE), "{err}");
        tiny(tmp.path(), &[0; 6], 1000.0);
        fs::write(tmp.path().join(ASSOCIATIONS_FILE), "0 c.png 0 missing.png\n").unwrap();
        let err = load_dataset(tmp.path()).unwrap().frame(0).unwrap_err().to_string();
        assert!(err.contains("missing.png"), "{err}");
        fs::write(tmp.path().join(INTRINSICS_FILE), "10 10 1 1 4 2 1000\n").unwrap();
        fs::write(tmp.path().join(ASSOCIATIONS_FILE), "0 c.png 0 d.png\n").unwrap();
        let err = load_dataset(tmp.path()).unwrap().frame(0).unwrap_err().to_string();
        assert!(err.contains("c.png"), "{err}");
        fs::write(tmp.path().join(ASSOCIATIONS_FILE), "0 c.png d.png\n").unwrap();
        assert!(load_dataset(tmp.path()).unwrap_err().to_string().contains(ASSOCIATIONS_FILE));
    }

    #[test]
    fn synthetic_sequence_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let k = Intrinsics::from_fov(32, 24, 60.0);
        let (frames, gt) = generate_synthetic(&SyntheticScene::default(), 4, &k, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let scale = 5000.0;
        write_dataset(tmp.path(), &frames, Some(&gt), scale).unwrap();
        let ds = load_dataset(tmp.path()).unwrap();
        assert_eq!(ds.len(), 4);
        for (orig, back) in frames.iter().zip(ds.frames()) {
            let back = back.unwrap();
            assert!((orig.timestamp - back.timestamp).abs() < 1e-6);
            for (a, b) in orig.depth.iter().zip(&back.depth) {
                // The stored value is the rounded integer, exactly recovered.
                assert_eq!(*b, ((*a as f64 * scale).round() / scale) as f32);
                assert!((a - b).abs() as f64 <= 0.5 / scale + 1e-7);
            }
            for (a, b) in orig.rgb.iter().zip(&back.rgb) {
                assert!((0..3).all(|c| (a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-6));
            }
        }
        let gt_back = ds.ground_truth().unwrap().unwrap();
        assert_eq!(gt_back.len(), 4);
        assert!(gt_back[3].1.translation_distance_to(&gt[3].1) < 1e-8);
    }
}
