//! Fully convolutional per-pixel features: two 3x3 blocks and a 1x1 head.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Result, SlamError};
use crate::tensor::{ParamId, ParamStore, Real, Tensor};

pub const FEATURE_DIM: usize = 32;
pub const HIDDEN_CHANNELS: usize = 32;

/// Parameter-name prefix of the only layer updated online.
pub const OUTCONV: &str = "outconv";

#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    params: ParamStore<T>,
    layer1: (ParamId, ParamId),
    layer2: (ParamId, ParamId),
    outconv: (ParamId, ParamId),
}

/// Features of one image plus what the head's gradient needs.
#[derive(Clone, Debug)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    /// Unit-norm feature of every pixel, row-major (H·W x F).
    pub features: Array2<T>,
    /// Input of the 1x1 head (H·W x C).
    pub hidden: Array2<T>,
    /// Norm of each pixel's feature before normalisation.
    pub norms: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn feature(&self, row: usize, col: usize) -> ndarray::ArrayView1<'_, T> {
        self.features.row(self.index(row, col))
    }
}

fn uniform<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Zero-padded 3x3 neighbourhoods of an (H·W x C) image as rows of
/// (9·C) values ordered (dy, dx, channel).
fn im2col<T: Real>(x: ArrayView2<'_, T>, height: usize, width: usize) -> Array2<T> {
    let c = x.ncols();
    let mut out = Array2::zeros((height * width, 9 * c));
    for r in 0..height {
        for col in 0..width {
            let mut dst = out.row_mut(r * width + col);
            for dy in 0..3 {
                let rr = r as isize + dy as isize - 1;
                if rr < 0 || rr >= height as isize {
                    continue;
                }
                for dx in 0..3 {
                    let cc = col as isize + dx as isize - 1;
                    if cc < 0 || cc >= width as isize {
                        continue;
                    }
                    let src = x.row(rr as usize * width + cc as usize);
                    let k = (dy * 3 + dx) * c;
                    dst.slice_mut(s![k..k + c]).assign(&src);
                }
            }
        }
    }
    out
}

fn dense<T: Real>(x: ArrayView2<'_, T>, w: &Tensor<T>, b: &Tensor<T>, relu: bool) -> Array2<T> {
    let mut y = x.dot(&w.matrix());
    y += &b.matrix();
    if relu {
        y.mapv_inplace(|v| v.max(T::zero()));
    }
    y
}

impl<T: Real> FeatureExtractor<T> {
    /// Fan-in scaled uniform weights from `rng`, zero biases.
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let mut layer = |params: &mut ParamStore<T>, name: &str, fan_in: usize, out: usize, gain: f64| {
            let w = params.add(format!("{name}.weight"), uniform(rng, fan_in, out, gain / (fan_in as f64).sqrt()));
            let b = params.add(format!("{name}.bias"), Tensor::zeros(vec![1, out]));
            (w, b)
        };
        let layer1 = layer(&mut params, "layer1", 27, HIDDEN_CHANNELS, 6f64.sqrt());
        let layer2 = layer(&mut params, "layer2", 9 * HIDDEN_CHANNELS, HIDDEN_CHANNELS, 6f64.sqrt());
        let outconv = layer(&mut params, OUTCONV, HIDDEN_CHANNELS, FEATURE_DIM, 3f64.sqrt());
        FeatureExtractor {
            params,
            layer1,
            layer2,
            outconv,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn outconv_ids(&self) -> (ParamId, ParamId) {
        self.outconv
    }

    pub fn outconv_mut(&mut self) -> (&mut [T], &mut [T]) {
        // The bias is registered right after the weight.
        let (w, b) = self.outconv;
        debug_assert_eq!(b.0, w.0 + 1);
        let (values, _) = self.params.values_and_grads();
        let (lo, hi) = values.split_at_mut(b.0);
        (lo[w.0].data_mut(), hi[0].data_mut())
    }

    /// Checksum of everything except the head.
    pub fn frozen_checksum(&self) -> u64 {
        self.params.checksum_where(|n| !n.starts_with(OUTCONV))
    }

    pub fn outconv_checksum(&self) -> u64 {
        self.params.checksum_where(|n| n.starts_with(OUTCONV))
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            params: self.params.cast(),
            layer1: self.layer1,
            layer2: self.layer2,
            outconv: self.outconv,
        }
    }

    /// Unit-norm features for a row-major RGB image; spatial size is kept.
    pub fn extract(&self, image: &[[f32; 3]], height: usize, width: usize) -> Result<FeatureMap<T>> {
        if image.len() != height * width || height == 0 || width == 0 {
            return Err(SlamError::contract(format!(
                "image of {} pixels does not match {width}x{height}",
                image.len()
            )));
        }
        // Centre colours so that flat grey carries no signal.
        let x = Array2::from_shape_fn((height * width, 3), |(i, c)| T::of(image[i][c] as f64 - 0.5));
        let p = |id: ParamId| self.params.get(id);
        let h1 = dense(im2col(x.view(), height, width).view(), p(self.layer1.0), p(self.layer1.1), true);
        let h2 = dense(im2col(h1.view(), height, width).view(), p(self.layer2.0), p(self.layer2.1), true);
        let mut f = dense(h2.view(), p(self.outconv.0), p(self.outconv.1), false);
        let mut norms = Vec::with_capacity(height * width);
        for mut row in f.axis_iter_mut(Axis(0)) {
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let n = n.max(T::of(1e-12));
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        Ok(FeatureMap {
            height,
            width,
            features: f,
            hidden: h2,
            norms,
        })
    }

    /// Gradients of the head given d(loss)/d(feature) for some pixels.
    pub fn head_gradient(&self, map: &FeatureMap<T>, pixel_grads: &[(usize, Vec<f64>)]) -> (Array2<T>, Array2<T>) {
        let (c, f) = (map.hidden.ncols(), map.dim());
        let mut gw = Array2::zeros((c, f));
        let mut gb = Array2::zeros((1, f));
        for (idx, g) in pixel_grads {
            let feat = map.features.row(*idx);
            let dot: f64 = feat.iter().zip(g).map(|(a, b)| a.as_f64() * b).sum();
            let n = map.norms[*idx].as_f64();
            // Through the normalisation: (I − f fᵀ) g / |raw|.
            let graw: Vec<T> = (0..f).map(|k| T::of((g[k] - feat[k].as_f64() * dot) / n)).collect();
            let h = map.hidden.row(*idx);
            for i in 0..c {
                if h[i] == T::zero() {
                    continue;
                }
                for k in 0..f {
                    gw[[i, k]] += h[i] * graw[k];
                }
            }
            for k in 0..f {
                gb[[0, k]] += graw[k];
            }
        }
        (gw, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> Vec<[f32; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..h * w).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
    }

    #[test]
    fn keeps_spatial_size_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = FeatureExtractor::<f32>::new(&mut rng);
        let img = image(9, 13, 2);
        let a = ex.extract(&img, 9, 13).unwrap();
        let b = ex.extract(&img, 9, 13).unwrap();
        assert_eq!(a.features.dim(), (9 * 13, FEATURE_DIM));
        assert_eq!(a.features, b.features);
        for row in a.features.rows() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_image_has_constant_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = FeatureExtractor::<f64>::new(&mut rng);
        let img = vec![[0.8f32, 0.3, 0.1]; 10 * 12];
        let m = ex.extract(&img, 10, 12).unwrap();
        // Two stacked 3x3 convolutions see two pixels in every direction.
        let reference = m.feature(2, 2).to_owned();
        for r in 2..8 {
            for c in 2..10 {
                for (a, b) in m.feature(r, c).iter().zip(&reference) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let x = Array2::from_shape_fn((12, 2), |(i, c)| (i * 2 + c) as f64);
        let cols = im2col(x.view(), 3, 4);
        // Centre pixel (1, 1): its (dy, dx) = (0, 0) neighbour is (0, 0).
        assert_eq!(cols[[5, 0]], x[[0, 0]]);
        assert_eq!(cols[[5, 1]], x[[0, 1]]);
        // Corner pixel (0, 0) has a zero top-left neighbour.
        assert_eq!(cols[[0, 0]], 0.0);
        // (dy, dx) = (1, 1) is the pixel itself.
        assert_eq!(cols[[7, 8]], x[[7, 0]]);
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = FeatureExtractor::<f64>::new(&mut rng);
        let img = image(6, 7, 5);
        let coef: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pixels = [3usize, 17, 40];
        let loss = |e: &FeatureExtractor<f64>| -> f64 {
            let m = e.extract(&img, 6, 7).unwrap();
            pixels.iter().map(|p| m.features.row(*p).iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        let m = ex.extract(&img, 6, 7).unwrap();
        let pg: Vec<(usize, Vec<f64>)> = pixels.iter().map(|p| (*p, coef.clone())).collect();
        let (gw, gb) = ex.head_gradient(&m, &pg);
        let h = 1e-6;
        for (k, analytic) in [(0usize, gw[[0, 0]]), (37, gw[[1, 5]]), (FEATURE_DIM * HIDDEN_CHANNELS - 1, gw[[31, 31]])] {
            let mut p = ex.clone();
            let mut q = ex.clone();
            p.outconv_mut().0[k] += h;
            q.outconv_mut().0[k] -= h;
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-6, "weight {k}: {fd} vs {analytic}");
        }
        let mut p = ex.clone();
        let mut q = ex.clone();
        p.outconv_mut().1[2] += h;
        q.outconv_mut().1[2] -= h;
        let fd = (loss(&p) - loss(&q)) / (2.0 * h);
        assert!((fd - gb[[0, 2]]).abs() < 1e-6);
        // The weight gradient of the head must not be all zero here.
        assert!(gw.iter().any(|v| v.abs() > 1e-6));
    }
}
