//! Feature-space nearest neighbours with a per-cell cap on the current image.

use std::io::Write;

use ndarray::{s, Array2};

use super::extractor::FeatureMap;
use super::procrustes::weighted_procrustes;
use crate::error::{Result, SlamError};
use crate::eval::Frame;
use crate::geometry::{PoseSE3, Vec3};
use crate::tensor::Real;

/// Side of the selection grid over the current image.
pub const SELECT_GRID: usize = 4;
pub const SELECT_CELLS: usize = SELECT_GRID * SELECT_GRID;

/// Current rows multiplied against the reference features at once.
const QUERY_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    /// Pixel `(row, col)` in the current frame.
    pub current: (usize, usize),
    /// Nearest reference pixel.
    pub reference: (usize, usize),
    /// Second-nearest reference pixel; the confidence depends on it too.
    pub second: (usize, usize),
    /// Refined reference location `p_r` was back-projected from.
    pub reference_subpixel: (f64, f64),
    /// Camera-frame points.
    pub p_c: Vec3,
    pub p_r: Vec3,
    pub weight: f64,
    pub cell: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn current_points(&self) -> Vec<Vec3> {
        self.entries.iter().map(|e| e.p_c).collect()
    }

    pub fn reference_points(&self) -> Vec<Vec3> {
        self.entries.iter().map(|e| e.p_r).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    pub fn cell_counts(&self) -> [usize; SELECT_CELLS] {
        let mut n = [0; SELECT_CELLS];
        for e in &self.entries {
            n[e.cell] += 1;
        }
        n
    }

    /// Reference-from-current transform with the stored weights.
    pub fn procrustes(&self) -> Result<PoseSE3> {
        weighted_procrustes(&self.current_points(), &self.reference_points(), &self.weights())
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "cur_row,cur_col,ref_row,ref_col,weight,cell")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.current.0, e.current.1, e.reference.0, e.reference.1, e.weight, e.cell
            )?;
        }
        Ok(())
    }
}

pub fn select_cell(row: usize, col: usize, height: usize, width: usize) -> usize {
    (row * SELECT_GRID / height) * SELECT_GRID + col * SELECT_GRID / width
}

/// `1 − d1/d2`; zero when the two nearest are equally far.
pub fn ratio_confidence(d1: f64, d2: f64) -> f64 {
    if d2 <= 0.0 {
        0.0
    } else {
        (1.0 - d1 / d2).clamp(0.0, 1.0)
    }
}

pub(crate) fn feature_distance<T: Real>(a: ndarray::ArrayView1<'_, T>, b: ndarray::ArrayView1<'_, T>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Matches every valid-depth current pixel against valid-depth reference
/// pixels on a `stride` lattice, then keeps the most confident matches with
/// at most `k / 16` per cell of the current image and `k` overall.
pub fn find_correspondences<T: Real>(
    feat_c: &FeatureMap<T>,
    feat_r: &FeatureMap<T>,
    current: &Frame,
    reference: &Frame,
    k: usize,
    stride: usize,
    subpixel: bool,
) -> Result<CorrespondenceSet> {
    if k < SELECT_CELLS || stride == 0 {
        return Err(SlamError::contract(format!("need k >= {SELECT_CELLS} and stride >= 1, got {k} and {stride}")));
    }
    let (h, w) = (current.height(), current.width());
    if (feat_c.height, feat_c.width) != (h, w) || (feat_r.height, feat_r.width) != (reference.height(), reference.width()) {
        return Err(SlamError::contract("feature maps do not match their frames"));
    }
    if h < SELECT_GRID || w < SELECT_GRID {
        return Err(SlamError::contract(format!("{w}x{h} image is smaller than the selection grid")));
    }
    let dim = feat_c.dim();
    let refs: Vec<(usize, usize)> = (0..reference.height())
        .step_by(stride)
        .flat_map(|r| (0..reference.width()).step_by(stride).map(move |c| (r, c)))
        .filter(|&(r, c)| reference.depth_at(r, c) > 0.0)
        .collect();
    if refs.len() < 2 {
        return Err(SlamError::TrackerLost(format!("{} reference pixels with depth", refs.len())));
    }
    let ref_feats = Array2::from_shape_fn((refs.len(), dim), |(i, f)| feat_r.features[[feat_r.index(refs[i].0, refs[i].1), f]]);
    let queries: Vec<usize> = (0..h * w).filter(|&i| current.depth[i] > 0.0).collect();

    // (weight, pixel, nearest, second)
    let mut candidates: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(QUERY_CHUNK) {
        let q = Array2::from_shape_fn((chunk.len(), dim), |(i, f)| feat_c.features[[chunk[i], f]]);
        let sim = q.dot(&ref_feats.t());
        for (row, &pix) in chunk.iter().enumerate() {
            let sims = sim.slice(s![row, ..]);
            let (mut b1, mut b2) = (0usize, usize::MAX);
            for j in 1..sims.len() {
                if sims[j] > sims[b1] {
                    b2 = b1;
                    b1 = j;
                } else if b2 == usize::MAX || sims[j] > sims[b2] {
                    b2 = j;
                }
            }
            if b2 == usize::MAX {
                b2 = 1;
            }
            let fc = feat_c.features.row(pix);
            let d1 = feature_distance(fc, ref_feats.row(b1));
            let d2 = feature_distance(fc, ref_feats.row(b2));
            candidates.push((ratio_confidence(d1, d2), pix, b1, b2));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let cap = k / SELECT_CELLS;
    let mut per_cell = [0usize; SELECT_CELLS];
    let mut set = CorrespondenceSet::default();
    for (weight, pix, j1, j2) in candidates {
        if set.len() == k {
            break;
        }
        let (row, col) = (pix / w, pix % w);
        let cell = select_cell(row, col, h, w);
        if per_cell[cell] == cap {
            continue;
        }
        let (rr, rc) = refs[j1];
        let exact = weight >= 1.0;
        let (sub, p_r) = if subpixel && !exact {
            refine(feat_c.features.row(pix), feat_r, reference, (rr, rc))
        } else {
            ((rr as f64, rc as f64), reference.point_at(rr, rc))
        };
        let (Some(p_c), Some(p_r)) = (current.point_at(row, col), p_r) else {
            continue;
        };
        per_cell[cell] += 1;
        set.entries.push(Correspondence {
            current: (row, col),
            reference: (rr, rc),
            second: refs[j2],
            reference_subpixel: sub,
            p_c,
            p_r,
            weight,
            cell,
        });
    }
    if set.len() < 3 {
        return Err(SlamError::TrackerLost(format!("only {} correspondences", set.len())));
    }
    Ok(set)
}

fn similarity<T: Real>(f: ndarray::ArrayView1<'_, T>, map: &FeatureMap<T>, row: usize, col: usize) -> f64 {
    f.iter().zip(map.feature(row, col)).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
}

/// Moves a lattice match to the most similar full-resolution neighbour,
/// then to the peak of a parabola through the similarities on each axis.
/// Depth is interpolated bilinearly when all four neighbours have it.
fn refine<T: Real>(
    f: ndarray::ArrayView1<'_, T>,
    map: &FeatureMap<T>,
    frame: &Frame,
    start: (usize, usize),
) -> ((f64, f64), Option<Vec3>) {
    let (h, w) = (frame.height(), frame.width());
    let valid = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && frame.depth_at(r as usize, c as usize) > 0.0;
    let (mut r, mut c) = (start.0 as isize, start.1 as isize);
    let mut best = similarity(f, map, start.0, start.1);
    for _ in 0..2 {
        let mut moved = false;
        let (r0, c0) = (r, c);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r0 + dr, c0 + dc);
                if (dr, dc) == (0, 0) || !valid(nr, nc) {
                    continue;
                }
                let s = similarity(f, map, nr as usize, nc as usize);
                if s > best {
                    best = s;
                    (r, c) = (nr, nc);
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
    let offset = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => {
            let curv = a - 2.0 * best + b;
            if curv < 0.0 {
                (0.5 * (a - b) / curv).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    let at = |r: isize, c: isize| valid(r, c).then(|| similarity(f, map, r as usize, c as usize));
    let fr = r as f64 + offset(at(r - 1, c), at(r + 1, c));
    let fc = c as f64 + offset(at(r, c - 1), at(r, c + 1));
    let (r0, c0) = (fr.floor() as isize, fc.floor() as isize);
    let (ar, ac) = (fr - r0 as f64, fc - c0 as f64);
    let corners = [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)];
    let depth = if corners.iter().all(|&(a, b)| valid(a, b)) {
        let d = |a: isize, b: isize| frame.depth_at(a as usize, b as usize) as f64;
        (1.0 - ar) * ((1.0 - ac) * d(r0, c0) + ac * d(r0, c0 + 1)) + ar * ((1.0 - ac) * d(r0 + 1, c0) + ac * d(r0 + 1, c0 + 1))
    } else {
        return ((r as f64, c as f64), frame.point_at(r as usize, c as usize));
    };
    ((fr, fc), Some(frame.intrinsics.back_project(fr, fc, depth)))
}
