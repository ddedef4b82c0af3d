//! Keyframes, covisibility, culling and replay selection.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::{Result, SlamError};
use crate::eval::Frame;
use crate::geometry::PoseSE3;
use crate::mapper::CellLossGrid;

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub id: usize,
    pub frame: Frame,
    /// World-from-camera.
    pub pose: PoseSE3,
    pub cell_losses: CellLossGrid,
}

impl Keyframe {
    pub fn new(id: usize, frame: Frame, pose: PoseSE3) -> Self {
        Keyframe {
            id,
            frame,
            pose,
            cell_losses: CellLossGrid::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covisibility {
    pub score: f64,
    /// The new keyframe had no pixel with valid depth.
    pub no_valid_depth: bool,
}

/// Share of `new`'s valid-depth pixels (every `stride`-th row and column)
/// that land inside `old`'s image in front of its camera. Occlusion is not
/// considered.
pub fn covisibility_score(new: &Keyframe, old: &Keyframe, stride: usize) -> Covisibility {
    let stride = stride.max(1);
    let k_new = &new.frame.intrinsics;
    let k_old = &old.frame.intrinsics;
    let rel = old.pose.inverse().compose(&new.pose);
    let (mut valid, mut inside) = (0usize, 0usize);
    for row in (0..k_new.height).step_by(stride) {
        for col in (0..k_new.width).step_by(stride) {
            let Some(p) = new.frame.point_at(row, col) else { continue };
            valid += 1;
            let q = rel.transform_point(&p);
            if let Some((r, c)) = k_old.project(&q) {
                if k_old.contains(r, c) {
                    inside += 1;
                }
            }
        }
    }
    if valid == 0 {
        warn!("keyframe {} has no valid depth; covisibility is 0", new.id);
        return Covisibility {
            score: 0.0,
            no_valid_depth: true,
        };
    }
    Covisibility {
        score: inside as f64 / valid as f64,
        no_valid_depth: false,
    }
}

/// Undirected, scored covisibility edges.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CovisGraph {
    edges: BTreeMap<(usize, usize), f64>,
}

impl CovisGraph {
    fn key(a: usize, b: usize) -> (usize, usize) {
        (a.min(b), a.max(b))
    }

    pub fn add_edge(&mut self, a: usize, b: usize, score: f64) -> Result<()> {
        if a == b {
            return Err(SlamError::contract(format!("self-edge on keyframe {a}")));
        }
        self.edges.insert(Self::key(a, b), score);
        Ok(())
    }

    pub fn score(&self, a: usize, b: usize) -> Option<f64> {
        self.edges.get(&Self::key(a, b)).copied()
    }

    pub fn connected(&self, a: usize, b: usize) -> bool {
        self.score(a, b).is_some()
    }

    /// Neighbours of `id` with edge scores, in id order.
    pub fn neighbors(&self, id: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .edges
            .iter()
            .filter_map(|(&(a, b), &s)| {
                if a == id {
                    Some((b, s))
                } else if b == id {
                    Some((a, s))
                } else {
                    None
                }
            })
            .collect();
        out.sort_by_key(|e| e.0);
        out
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InsertOutcome {
    Culled { max_score: f64, against: usize },
    Inserted { edges: Vec<(usize, f64)> },
}

#[derive(Clone, Debug)]
pub struct KeyframeStore {
    keyframes: Vec<Keyframe>,
    graph: CovisGraph,
    pub sigma_cull: f64,
    pub sigma_covis: f64,
    /// Pixel stride used for covisibility scores.
    pub stride: usize,
}

#[derive(Serialize)]
struct KeyframeRecord<'a> {
    id: usize,
    timestamp: f64,
    pose: [f64; 16],
    edges: &'a [(usize, f64)],
}

impl KeyframeStore {
    pub fn new(sigma_cull: f64, sigma_covis: f64, stride: usize) -> Self {
        KeyframeStore {
            keyframes: Vec::new(),
            graph: CovisGraph::default(),
            sigma_cull,
            sigma_covis,
            stride: stride.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn graph(&self) -> &CovisGraph {
        &self.graph
    }

    pub fn get(&self, id: usize) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut Keyframe> {
        self.keyframes.iter_mut().find(|k| k.id == id)
    }

    pub fn latest(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    /// Disjoint mutable references in the order of `ids`.
    pub fn get_many_mut(&mut self, ids: &[usize]) -> Result<Vec<&mut Keyframe>> {
        let mut slots: Vec<Option<&mut Keyframe>> = (0..ids.len()).map(|_| None).collect();
        for kf in self.keyframes.iter_mut() {
            if let Some(pos) = ids.iter().position(|i| *i == kf.id) {
                slots[pos] = Some(kf);
            }
        }
        slots
            .into_iter()
            .zip(ids)
            .map(|(s, id)| s.ok_or_else(|| SlamError::contract(format!("unknown keyframe {id}"))))
            .collect()
    }

    /// Scores of `kf` against every stored keyframe, in store order.
    pub fn scores(&self, kf: &Keyframe) -> Vec<(usize, f64)> {
        self.keyframes
            .iter()
            .map(|old| (old.id, covisibility_score(kf, old, self.stride).score))
            .collect()
    }

    /// Culls `kf` when it overlaps a stored keyframe by more than
    /// `sigma_cull`; otherwise stores it with edges above `sigma_covis`.
    pub fn insert(&mut self, kf: Keyframe) -> Result<InsertOutcome> {
        if self.get(kf.id).is_some() {
            return Err(SlamError::contract(format!("keyframe id {} already stored", kf.id)));
        }
        if !kf.pose.is_valid(1e-6) {
            return Err(SlamError::contract(format!("keyframe {} has an invalid pose", kf.id)));
        }
        let scores = self.scores(&kf);
        if let Some(&(against, max_score)) = scores.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
            if max_score > self.sigma_cull {
                return Ok(InsertOutcome::Culled { max_score, against });
            }
        }
        let edges: Vec<(usize, f64)> = scores.into_iter().filter(|(_, s)| *s > self.sigma_covis).collect();
        for (other, s) in &edges {
            self.graph.add_edge(kf.id, *other, *s)?;
        }
        self.keyframes.push(kf);
        Ok(InsertOutcome::Inserted { edges })
    }

    /// `new_id` followed by up to `n_rep` keyframes, drawn without
    /// replacement from those not adjacent to it.
    pub fn select_replay(&self, new_id: usize, n_rep: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.get(new_id).is_none() {
            return Err(SlamError::contract(format!("keyframe {new_id} is not stored")));
        }
        let candidates: Vec<usize> = self
            .keyframes
            .iter()
            .map(|k| k.id)
            .filter(|id| *id != new_id && !self.graph.connected(*id, new_id))
            .collect();
        let take = n_rep.min(candidates.len());
        let mut out = vec![new_id];
        out.extend(sample(rng, candidates.len(), take).into_iter().map(|i| candidates[i]));
        Ok(out)
    }

    /// One JSON object per keyframe: id, timestamp, row-major pose, edges.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for kf in &self.keyframes {
            let edges = self.graph.neighbors(kf.id);
            let rec = KeyframeRecord {
                id: kf.id,
                timestamp: kf.frame.timestamp,
                pose: kf.pose.to_row_major(),
                edges: &edges,
            };
            serde_json::to_writer(&mut out, &rec).map_err(|e| SlamError::Io(e.into()))?;
            writeln!(out)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Vec3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kf(id: usize, pose: PoseSE3, depth: f32) -> Keyframe {
        let k = Intrinsics::from_fov(20, 10, 60.0);
        let frame = Frame::new(vec![[0.5; 3]; 200], vec![depth; 200], k, id as f64).unwrap();
        Keyframe::new(id, frame, pose)
    }

    #[test]
    fn self_overlap_is_total() {
        let a = kf(0, PoseSE3::identity(), 2.0);
        assert_eq!(covisibility_score(&a, &a, 1).score, 1.0);
        let far = kf(1, PoseSE3::from_translation(Vec3::new(100.0, 0.0, 0.0)), 2.0);
        assert_eq!(covisibility_score(&far, &a, 1).score, 0.0);
        let empty = kf(2, PoseSE3::identity(), 0.0);
        assert!(covisibility_score(&empty, &a, 1).no_valid_depth);
    }

    #[test]
    fn duplicates_are_culled_and_first_is_kept() {
        let mut store = KeyframeStore::new(0.5, 0.3, 1);
        assert_eq!(store.insert(kf(0, PoseSE3::identity(), 2.0)).unwrap(), InsertOutcome::Inserted { edges: vec![] });
        assert!(matches!(store.insert(kf(1, PoseSE3::identity(), 2.0)).unwrap(), InsertOutcome::Culled { .. }));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn partial_overlap_adds_one_edge() {
        // 20 columns at 2 m with a 60° field of view span about 2.31 m; a
        // sideways shift of 60% of that leaves 8 of 20 columns visible.
        let mut store = KeyframeStore::new(0.5, 0.3, 1);
        store.insert(kf(0, PoseSE3::identity(), 2.0)).unwrap();
        let k = Intrinsics::from_fov(20, 10, 60.0);
        let shift = 12.0 * 2.0 / k.fx;
        let new = kf(1, PoseSE3::from_translation(Vec3::new(shift, 0.0, 0.0)), 2.0);
        let s = covisibility_score(&new, store.get(0).unwrap(), 1).score;
        assert!((s - 0.4).abs() < 1e-12, "score {s}");
        match store.insert(new).unwrap() {
            InsertOutcome::Inserted { edges } => assert_eq!(edges.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.graph().score(0, 1), store.graph().score(1, 0));
    }

    #[test]
    fn replay_excludes_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = KeyframeStore::new(0.5, 0.3, 1);
        for i in 0..16 {
            // Far apart: no overlap, no edges.
            store.insert(kf(i, PoseSE3::from_translation(Vec3::new(10.0 * i as f64, 0.0, 0.0)), 2.0)).unwrap();
        }
        let r = store.select_replay(15, 10, &mut rng).unwrap();
        assert_eq!(r.len(), 11);
        assert_eq!(r[0], 15);
        let mut uniq = r.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 11);
        assert_eq!(store.select_replay(0, 0, &mut rng).unwrap(), vec![0]);
    }

    #[test]
    fn jsonl_has_one_line_per_keyframe() {
        let mut store = KeyframeStore::new(0.5, 0.3, 1);
        store.insert(kf(0, PoseSE3::identity(), 2.0)).unwrap();
        store.insert(kf(3, PoseSE3::from_translation(Vec3::new(50.0, 0.0, 0.0)), 2.0)).unwrap();
        let mut buf = Vec::new();
        store.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["id"], 3);
        assert_eq!(v["pose"].as_array().unwrap().len(), 16);
        assert_eq!(v["pose"][3], 50.0);
    }
}
