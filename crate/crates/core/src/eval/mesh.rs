//! Zero level set of a signed distance field as a triangle mesh.

use std::collections::HashMap;
use std::io::Write;

use log::warn;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;

use super::mc_tables::TRIANGLE_TABLE;
use crate::error::{Result, SlamError};
use crate::geometry::Vec3;
use crate::mlp::{ImplicitMap, SceneBounds};
use crate::tensor::Real;

/// Anything that reports signed distances for batches of world points.
pub trait SdfField {
    fn sdf(&self, points: &[Vec3]) -> Result<Vec<f64>>;
}

impl<T: Real> SdfField for ImplicitMap<T> {
    fn sdf(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        self.sdf_batch(points)
    }
}

impl<F: Fn(&Vec3) -> f64> SdfField for F {
    fn sdf(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        Ok(points.iter().map(self).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

/// Upper bound on grid samples per axis.
pub const MAX_GRID: usize = 256;
const QUERY_CHUNK: usize = 8192;

/// Cube corner offsets.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corners joined by each cube edge.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [3, 2],
    [0, 3],
    [4, 5],
    [5, 6],
    [7, 6],
    [4, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// `n` points uniformly distributed over the surface area.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
        let areas: Vec<f64> = (0..self.triangles.len()).map(|t| self.triangle_area(t)).collect();
        let dist = WeightedIndex::new(&areas).map_err(|e| SlamError::Metric(format!("cannot sample mesh: {e}")))?;
        Ok((0..n)
            .map(|_| {
                let [a, b, c] = self.triangles[dist.sample(rng)];
                let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
                if u + v > 1.0 {
                    (u, v) = (1.0 - u, 1.0 - v);
                }
                let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
                a + (b - a) * u + (c - a) * v
            })
            .collect())
    }

    /// ASCII PLY with vertex positions and faces.
    pub fn write_ply(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "ply")?;
        writeln!(out, "format ascii 1.0")?;
        writeln!(out, "element vertex {}", self.vertices.len())?;
        writeln!(out, "property float x")?;
        writeln!(out, "property float y")?;
        writeln!(out, "property float z")?;
        writeln!(out, "element face {}", self.triangles.len())?;
        writeln!(out, "property list uchar int vertex_indices")?;
        writeln!(out, "end_header")?;
        for v in &self.vertices {
            writeln!(out, "{} {} {}", v.x as f32, v.y as f32, v.z as f32)?;
        }
        for t in &self.triangles {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    /// Reads the ASCII PLY subset [`write_ply`](Self::write_ply) produces:
    /// float `x y z` vertices first, then triangle faces.
    pub fn read_ply(text: &str) -> std::result::Result<Mesh, String> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err("missing `ply` magic".into());
        }
        let (mut nv, mut nf) = (0usize, 0usize);
        for line in lines.by_ref() {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => return Err(format!("unsupported format {fmt}")),
                ["element", "vertex", n] => nv = n.parse().map_err(|_| "bad vertex count")?,
                ["element", "face", n] => nf = n.parse().map_err(|_| "bad face count")?,
                ["end_header"] => break,
                _ => {}
            }
        }
        let mut mesh = Mesh::default();
        for i in 0..nv {
            let line = lines.next().ok_or(format!("missing vertex {i}"))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .take(3)
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format!("vertex {i}: {e}"))?;
            if v.len() != 3 {
                return Err(format!("vertex {i}: expected x y z"));
            }
            mesh.vertices.push(Vec3::new(v[0], v[1], v[2]));
        }
        for i in 0..nf {
            let line = lines.next().ok_or(format!("missing face {i}"))?;
            let v: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format!("face {i}: {e}"))?;
            if v.len() != 4 || v[0] != 3 || v[1..].iter().any(|&j| j >= nv) {
                return Err(format!("face {i}: expected a triangle of valid vertices"));
            }
            mesh.triangles.push([v[1], v[2], v[3]]);
        }
        Ok(mesh)
    }
}

/// Samples the field on a regular grid of spacing `resolution` over
/// `bounds` and triangulates its zero crossings. Vertices on shared cube
/// edges are shared.
pub fn extract_mesh(field: &dyn SdfField, bounds: &SceneBounds, resolution: f64) -> Result<Mesh> {
    if !(resolution > 0.0) {
        return Err(SlamError::contract(format!("mesh resolution {resolution} must be positive")));
    }
    let mut dims = [0usize; 3];
    for i in 0..3 {
        let n = ((bounds.max[i] - bounds.min[i]) / resolution).round() as usize + 1;
        if n > MAX_GRID {
            return Err(SlamError::contract(format!(
                "resolution {resolution} needs {n} samples on axis {i}, more than {MAX_GRID}"
            )));
        }
        dims[i] = n.max(2);
    }
    let at = |i: usize, j: usize, k: usize| {
        Vec3::new(
            bounds.min[0] + i as f64 * resolution,
            bounds.min[1] + j as f64 * resolution,
            bounds.min[2] + k as f64 * resolution,
        )
    };
    let idx = |i: usize, j: usize, k: usize| (k * dims[1] + j) * dims[0] + i;
    let total = dims[0] * dims[1] * dims[2];
    let mut values = Vec::with_capacity(total);
    let mut batch = Vec::with_capacity(QUERY_CHUNK);
    for n in 0..total {
        let (i, j, k) = (n % dims[0], (n / dims[0]) % dims[1], n / (dims[0] * dims[1]));
        batch.push(at(i, j, k));
        if batch.len() == QUERY_CHUNK || n + 1 == total {
            values.extend(field.sdf(&batch)?);
            batch.clear();
        }
    }

    let mut mesh = Mesh::default();
    let mut shared: HashMap<(usize, usize), usize> = HashMap::new();
    for k in 0..dims[2] - 1 {
        for j in 0..dims[1] - 1 {
            for i in 0..dims[0] - 1 {
                let corner = |c: usize| {
                    let o = CORNERS[c];
                    (i + o[0], j + o[1], k + o[2])
                };
                let mut case = 0usize;
                let mut v = [0.0; 8];
                for c in 0..8 {
                    let (a, b, d) = corner(c);
                    v[c] = values[idx(a, b, d)];
                    if v[c] < 0.0 {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let mut edge_vertex = [usize::MAX; 12];
                for (e, &[c0, c1]) in EDGES.iter().enumerate() {
                    if (v[c0] < 0.0) == (v[c1] < 0.0) {
                        continue;
                    }
                    let (a0, b0, d0) = corner(c0);
                    let (a1, b1, d1) = corner(c1);
                    let key = (idx(a0, b0, d0), idx(a1, b1, d1));
                    edge_vertex[e] = *shared.entry(key).or_insert_with(|| {
                        let t = v[c0] / (v[c0] - v[c1]);
                        let p = at(a0, b0, d0) + (at(a1, b1, d1) - at(a0, b0, d0)) * t;
                        mesh.vertices.push(p);
                        mesh.vertices.len() - 1
                    });
                }
                for tri in TRIANGLE_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [
                        edge_vertex[tri[0] as usize],
                        edge_vertex[tri[1] as usize],
                        edge_vertex[tri[2] as usize],
                    ];
                    if t.iter().all(|v| *v != usize::MAX) {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    if mesh.is_empty() {
        warn!("no zero crossing inside the bounds; the mesh is empty");
    }
    Ok(mesh)
}
