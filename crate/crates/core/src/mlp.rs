//! The map: a single MLP from encoded position (and view direction) to a
//! truncated signed distance and a colour.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::geometry::Vec3;
use crate::tensor::{CustomOp, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const HIDDEN_LAYERS: usize = 8;
pub const HIDDEN_WIDTH: usize = 256;
/// Hidden layer that receives the encoded position a second time.
pub const SKIP_LAYER: usize = 5;

/// Sinusoidal encoding with `num_freqs` octaves per input component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub num_freqs: usize,
    pub include_input: bool,
}

impl PositionalEncoding {
    pub fn new(num_freqs: usize, include_input: bool) -> Self {
        PositionalEncoding {
            num_freqs,
            include_input,
        }
    }

    pub fn per_component(&self) -> usize {
        2 * self.num_freqs + usize::from(self.include_input)
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * self.per_component()
    }
}

/// Per component: `[x, sin(2^0 π x), cos(2^0 π x), …, sin(2^(L-1) π x), cos(2^(L-1) π x)]`.
pub fn encode(x: &[f64], enc: &PositionalEncoding) -> Vec<f64> {
    let mut out = Vec::with_capacity(enc.output_dim(x.len()));
    for &v in x {
        if enc.include_input {
            out.push(v);
        }
        for k in 0..enc.num_freqs {
            let a = (1u64 << k) as f64 * PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Affine normalisation per column followed by the encoding, as one op.
struct EncodeOp<T> {
    enc: PositionalEncoding,
    scale: [T; 3],
    offset: [T; 3],
}

impl<T: Real> EncodeOp<T> {
    fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let per = self.enc.per_component();
        let mut out = Array2::zeros((x.nrows(), 3 * per));
        let pi = T::of(PI);
        for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
            for c in 0..3 {
                let v = xr[c] * self.scale[c] + self.offset[c];
                let mut j = c * per;
                if self.enc.include_input {
                    or[j] = v;
                    j += 1;
                }
                let mut f = pi;
                for _ in 0..self.enc.num_freqs {
                    let (s, co) = (f * v).sin_cos();
                    or[j] = s;
                    or[j + 1] = co;
                    j += 2;
                    f = f + f;
                }
            }
        }
        out
    }
}

impl<T: Real> CustomOp<T> for EncodeOp<T> {
    fn backward(
        &self,
        _inputs: &[ArrayView2<'_, T>],
        output: ArrayView2<'_, T>,
        grad_out: ArrayView2<'_, T>,
        _wants: &[bool],
    ) -> Vec<Option<Array2<T>>> {
        let per = self.enc.per_component();
        let mut gx = Array2::zeros((output.nrows(), 3));
        let pi = T::of(PI);
        for r in 0..output.nrows() {
            for c in 0..3 {
                let mut j = c * per;
                let mut acc = T::zero();
                if self.enc.include_input {
                    acc = acc + grad_out[[r, j]];
                    j += 1;
                }
                let mut f = pi;
                for _ in 0..self.enc.num_freqs {
                    // d sin = f cos, d cos = -f sin
                    acc = acc + f * (grad_out[[r, j]] * output[[r, j + 1]] - grad_out[[r, j + 1]] * output[[r, j]]);
                    j += 2;
                    f = f + f;
                }
                gx[[r, c]] = acc * self.scale[c];
            }
        }
        vec![Some(gx)]
    }
}

/// Axis-aligned world region mapped onto `[-1, 1]^3` before encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(max[i] > min[i])) {
            return Err(SlamError::Config(format!("empty scene bounds {min:?}..{max:?}")));
        }
        Ok(SceneBounds { min, max })
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|i| (self.max[i] - self.min[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn normalisation<T: Real>(&self) -> ([T; 3], [T; 3]) {
        let mut scale = [T::zero(); 3];
        let mut offset = [T::zero(); 3];
        for i in 0..3 {
            let s = 2.0 / (self.max[i] - self.min[i]);
            scale[i] = T::of(s);
            offset[i] = T::of(-1.0 - self.min[i] * s);
        }
        (scale, offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub bounds: SceneBounds,
}

impl MapConfig {
    pub fn new(bounds: SceneBounds) -> Self {
        MapConfig {
            pos_freqs: 10,
            dir_freqs: 4,
            bounds,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// Tape handles of one forward evaluation.
pub struct MapOutput {
    pub sdf: Var,
    pub rgb: Var,
    /// Tape variable of every parameter, indexed like the parameter store.
    pub params: Vec<Var>,
}

/// Parameters and layout of the scene network.
#[derive(Clone, Debug)]
pub struct ImplicitMap<T> {
    params: ParamStore<T>,
    hidden: Vec<Layer>,
    sdf_head: Layer,
    color_head: Layer,
    pos_enc: PositionalEncoding,
    dir_enc: PositionalEncoding,
    config: MapConfig,
}

fn uniform_tensor<T: Real>(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl<T: Real> ImplicitMap<T> {
    /// Fan-in scaled uniform initialisation from `rng`.
    pub fn new(config: MapConfig, rng: &mut impl Rng) -> Self {
        let pos_enc = PositionalEncoding::new(config.pos_freqs, true);
        let dir_enc = PositionalEncoding::new(config.dir_freqs, true);
        let pos_dim = pos_enc.output_dim(3);
        let dir_dim = dir_enc.output_dim(3);
        let mut params = ParamStore::new();
        let mut add = |params: &mut ParamStore<T>, name: &str, fan_in: usize, out: usize, gain: f64| {
            let bound = gain / (fan_in as f64).sqrt();
            let weight = params.add(
                format!("{name}.weight"),
                uniform_tensor(rng, vec![fan_in, out], bound),
            );
            let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![1, out]));
            Layer { weight, bias }
        };
        let mut hidden = Vec::with_capacity(HIDDEN_LAYERS);
        for i in 0..HIDDEN_LAYERS {
            let fan_in = match i {
                0 => pos_dim,
                SKIP_LAYER => HIDDEN_WIDTH + pos_dim,
                _ => HIDDEN_WIDTH,
            };
            // ReLU layers keep activation variance with sqrt(6 / fan_in).
            hidden.push(add(&mut params, &format!("hidden.{i}"), fan_in, HIDDEN_WIDTH, 6f64.sqrt()));
        }
        let sdf_head = add(&mut params, "sdf_head", HIDDEN_WIDTH, 1, 1.0);
        let color_head = add(&mut params, "color_head", HIDDEN_WIDTH + dir_dim, 3, 1.0);
        ImplicitMap {
            params,
            hidden,
            sdf_head,
            color_head,
            pos_enc,
            dir_enc,
            config,
        }
    }

    /// Rebuilds a map from stored parameters, checking names and shapes.
    pub fn from_params(config: MapConfig, params: ParamStore<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Self::new(config, &mut rng);
        if params.len() != template.params.len() {
            return Err(SlamError::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((tn, tt), (n, t)) in template.params.named().zip(params.named()) {
            if tn != n || tt.shape() != t.shape() {
                return Err(SlamError::Checkpoint(format!(
                    "expected '{tn}' {:?}, found '{n}' {:?}",
                    tt.shape(),
                    t.shape()
                )));
            }
        }
        Ok(ImplicitMap { params, ..template })
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn cast<U: Real>(&self) -> ImplicitMap<U> {
        ImplicitMap {
            params: self.params.cast(),
            hidden: self.hidden.clone(),
            sdf_head: self.sdf_head,
            color_head: self.color_head,
            pos_enc: self.pos_enc,
            dir_enc: self.dir_enc,
            config: self.config,
        }
    }

    /// Records the network on `tape` for world points and unit view
    /// directions (both N x 3). Parameters become gradient leaves only when
    /// `train` is set.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        points: Var,
        dirs: Var,
        train: bool,
    ) -> Result<MapOutput> {
        let (np, nd) = (tape.shape(points), tape.shape(dirs));
        if np.1 != 3 || nd != np {
            return Err(SlamError::contract(format!(
                "map forward needs N x 3 points and directions, got {np:?} and {nd:?}"
            )));
        }
        let params: Vec<Var> = self
            .params
            .ids()
            .map(|id| {
                let v = self.params.get(id).matrix();
                if train {
                    tape.leaf(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        let p = |l: &Layer| (params[l.weight.0], params[l.bias.0]);

        let (scale, offset) = self.config.bounds.normalisation::<T>();
        let pos_op = EncodeOp {
            enc: self.pos_enc,
            scale,
            offset,
        };
        let enc_p = pos_op.forward(tape.value(points));
        let enc_p = tape.custom(&[points], enc_p, Box::new(pos_op));
        let dir_op = EncodeOp {
            enc: self.dir_enc,
            scale: [T::one(); 3],
            offset: [T::zero(); 3],
        };
        let enc_d = dir_op.forward(tape.value(dirs));
        let enc_d = tape.custom(&[dirs], enc_d, Box::new(dir_op));

        let mut h = enc_p;
        for (i, layer) in self.hidden.iter().enumerate() {
            let input = if i == SKIP_LAYER {
                tape.concat_cols(&[h, enc_p])?
            } else {
                h
            };
            let (w, b) = p(layer);
            let z = tape.linear(input, w, b)?;
            h = tape.relu(z);
        }
        let (w, b) = p(&self.sdf_head);
        let sdf = tape.linear(h, w, b)?;
        let feat = tape.concat_cols(&[h, enc_d])?;
        let (w, b) = p(&self.color_head);
        let logits = tape.linear(feat, w, b)?;
        let rgb = tape.sigmoid(logits);
        Ok(MapOutput { sdf, rgb, params })
    }

    /// Adds the tape gradients of a training forward pass into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape<'_, T>, vars: &[Var]) -> Result<()> {
        for (id, var) in self.params.ids().collect::<Vec<_>>().into_iter().zip(vars) {
            if let Some(g) = tape.grad(*var) {
                self.params.accumulate_grad(id, g.view())?;
            }
        }
        Ok(())
    }

    /// Evaluates many points without recording gradients.
    pub fn query_batch(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
        if points.len() != dirs.len() {
            return Err(SlamError::contract("query_batch: points and directions differ in length"));
        }
        const CHUNK: usize = 4096;
        let mut sdf = Vec::with_capacity(points.len());
        let mut rgb = Vec::with_capacity(points.len());
        for (pc, dc) in points.chunks(CHUNK).zip(dirs.chunks(CHUNK)) {
            let to_arr = |v: &[Vec3]| Array2::from_shape_fn((v.len(), 3), |(i, j)| T::of(v[i][j]));
            let mut tape = Tape::new();
            let p = tape.constant(to_arr(pc));
            let d = tape.constant(to_arr(dc));
            let out = self.forward(&mut tape, p, d, false)?;
            sdf.extend(tape.value(out.sdf).iter().map(|v| v.as_f64()));
            rgb.extend(
                tape.value(out.rgb)
                    .rows()
                    .into_iter()
                    .map(|r| [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]),
            );
        }
        Ok((sdf, rgb))
    }

    /// T-SDF (metres) and colour at one point seen along unit direction `d`.
    pub fn query(&self, p: &Vec3, d: &Vec3) -> Result<(f64, [f64; 3])> {
        if !(p.iter().chain(d.iter()).all(|v| v.is_finite())) {
            return Err(SlamError::contract("query with non-finite input"));
        }
        if (d.norm() - 1.0).abs() > 1e-6 {
            return Err(SlamError::contract(format!(
                "view direction must have unit norm, |d| = {}",
                d.norm()
            )));
        }
        let (s, c) = self.query_batch(std::slice::from_ref(p), std::slice::from_ref(d))?;
        Ok((s[0], c[0]))
    }

    /// SDF only, for mesh extraction. Directions do not influence it.
    pub fn sdf_batch(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        let dirs = vec![Vec3::new(0.0, 0.0, 1.0); points.len()];
        Ok(self.query_batch(points, &dirs)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bounds() -> SceneBounds {
        SceneBounds::new([-2.0, -2.0, -1.5], [2.0, 2.0, 1.5]).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode(&[0.0], &PositionalEncoding::new(2, true)), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
        let e = encode(&[0.5], &PositionalEncoding::new(1, false));
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15);
    }

    #[test]
    fn encode_matches_term_by_term() {
        let enc = PositionalEncoding::new(4, true);
        let got = encode(&[0.3], &enc);
        let mut expected = vec![0.3];
        for k in 0..4 {
            let f = 2f64.powi(k) * PI;
            expected.push((f * 0.3).sin());
            expected.push((f * 0.3).cos());
        }
        assert_eq!(got.len(), enc.output_dim(1));
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn encode_op_matches_scalar_encode() {
        let op = EncodeOp::<f64> {
            enc: PositionalEncoding::new(3, true),
            scale: [1.0; 3],
            offset: [0.0; 3],
        };
        let x = Array2::from_shape_vec((1, 3), vec![0.1, -0.4, 0.7]).unwrap();
        let out = op.forward(x.view());
        let expected: Vec<f64> = encode(&[0.1, -0.4, 0.7], &op.enc);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn outputs_are_finite_and_colours_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = ImplicitMap::<f32>::new(MapConfig::new(bounds()), &mut rng);
        assert_eq!(map.params().len(), 2 * (HIDDEN_LAYERS + 2));
        let pts: Vec<Vec3> = (0..50)
            .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5)))
            .collect();
        let dirs: Vec<Vec3> = pts.iter().map(|_| Vec3::new(0.0, 0.6, 0.8)).collect();
        let (s, c) = map.query_batch(&pts, &dirs).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(c.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn query_validates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = ImplicitMap::<f32>::new(MapConfig::new(bounds()), &mut rng);
        let p = Vec3::new(0.1, 0.2, 0.3);
        assert!(map.query(&p, &Vec3::new(0.0, 0.0, 2.0)).is_err());
        assert!(map.query(&Vec3::new(f64::NAN, 0.0, 0.0), &Vec3::z()).is_err());
        let a = map.query(&p, &Vec3::z()).unwrap();
        let b = map.query(&p, &Vec3::z()).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
    }

    #[test]
    fn batch_equals_individual_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = ImplicitMap::<f64>::new(MapConfig::new(bounds()), &mut rng);
        let pts: Vec<Vec3> = (0..7).map(|i| Vec3::new(0.1 * i as f64, -0.2, 0.05 * i as f64)).collect();
        let dirs: Vec<Vec3> = (0..7).map(|i| Vec3::new(0.0, (i as f64 * 0.3).sin(), (i as f64 * 0.3).cos())).collect();
        let (s, c) = map.query_batch(&pts, &dirs).unwrap();
        for i in 0..7 {
            let (si, ci) = map.query(&pts[i], &dirs[i]).unwrap();
            assert!((si - s[i]).abs() < 1e-12);
            for k in 0..3 {
                assert!((ci[k] - c[i][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sdf_gradient_wrt_position_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Few octaves keep ReLU kinks far apart at the finite-difference scale.
        let cfg = MapConfig {
            pos_freqs: 2,
            ..MapConfig::new(bounds())
        };
        let map = ImplicitMap::<f64>::new(cfg, &mut rng);
        let p = Vec3::new(0.31, -0.47, 0.22);
        let d = Vec3::new(0.0, 0.0, 1.0);
        let mut tape = Tape::new();
        let pv = tape.leaf(Array2::from_shape_vec((1, 3), vec![p.x, p.y, p.z]).unwrap());
        let dv = tape.constant(Array2::from_shape_vec((1, 3), vec![d.x, d.y, d.z]).unwrap());
        let out = map.forward(&mut tape, pv, dv, false).unwrap();
        let loss = tape.sum(out.sdf);
        tape.backward(loss).unwrap();
        let g = tape.grad(pv).unwrap().clone();
        let h = 1e-6;
        for k in 0..3 {
            let (mut a, mut b) = (p, p);
            a[k] += h;
            b[k] -= h;
            let fd = (map.query(&a, &d).unwrap().0 - map.query(&b, &d).unwrap().0) / (2.0 * h);
            let rel = (g[[0, k]] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "axis {k}: analytic {} fd {fd}", g[[0, k]]);
        }
    }

    #[test]
    fn rebuild_from_params_checks_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = ImplicitMap::<f32>::new(MapConfig::new(bounds()), &mut rng);
        let again = ImplicitMap::from_params(*map.config(), map.params().clone()).unwrap();
        assert_eq!(again.checksum(), map.checksum());
        assert!(ImplicitMap::<f32>::from_params(*map.config(), ParamStore::new()).is_err());
    }
}
