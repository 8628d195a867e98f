//! Frame descriptors from convolutional feature maps.
//!
//! A frame arrives as a stack of `K` activation grids. Each grid is pooled to
//! one vector per layer (global max for iMAC, regional max-sum-normalize for
//! L3-iRMAC), the layer vectors are concatenated in ascending layer order,
//! whitened, and L2-normalized.

mod whitening;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{mismatch, Error, Result};
use crate::matrix::norm;

pub use whitening::{fit_whitening, WhiteningModel, EIGEN_FLOOR_RATIO};

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORM_EPSILON: f64 = 1e-12;

/// One convolutional activation grid, stored `h × w × c` row-major (channel fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LayerGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::MalformedInput(format!(
                "empty layer grid {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(mismatch("layer grid buffer", height * width * channels, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedInput("layer grid contains non-finite activations".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Per-channel maximum over the window `rows × cols`.
    fn window_max(&self, rows: (usize, usize), cols: (usize, usize)) -> Vec<f64> {
        let mut out = alloc::vec![f64::NEG_INFINITY; self.channels];
        for y in rows.0..rows.1 {
            for x in cols.0..cols.1 {
                let base = (y * self.width + x) * self.channels;
                for (o, &v) in out.iter_mut().zip(&self.data[base..base + self.channels]) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
        out
    }
}

/// The `K` feature maps produced by the backbone for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack {
    pub frame_index: usize,
    layers: Vec<LayerGrid>,
}

impl FeatureMapStack {
    pub fn new(frame_index: usize, layers: Vec<LayerGrid>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::MalformedInput("feature map stack has no layers".into()));
        }
        Ok(Self { frame_index, layers })
    }

    pub fn layers(&self) -> &[LayerGrid] {
        &self.layers
    }

    /// Total channel count, i.e. the dimension of the concatenated pooled descriptor.
    pub fn pooled_dim(&self) -> usize {
        self.layers.iter().map(LayerGrid::channels).sum()
    }
}

/// A pooled per-layer vector of length `c_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVector(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingMode {
    Imac,
    L3Irmac,
}

/// Global max pooling of every channel of every layer.
pub fn imac_pool(maps: &FeatureMapStack) -> Vec<LayerVector> {
    maps.layers
        .iter()
        .map(|g| LayerVector(g.window_max((0, g.height), (0, g.width))))
        .collect()
}

/// Bounds of band `i` of 3 over an axis of length `n`: `[⌊i·n/3⌋, ⌈(i+1)·n/3⌉)`.
pub fn region_band(n: usize, i: usize) -> (usize, usize) {
    (i * n / 3, ((i + 1) * n).div_ceil(3))
}

/// Regional 3×3 max pooling per layer, summed over the nine regions and L2-normalized.
pub fn l3_irmac_pool(maps: &FeatureMapStack) -> Result<Vec<LayerVector>> {
    maps.layers
        .iter()
        .enumerate()
        .map(|(k, g)| {
            if g.height < 3 || g.width < 3 {
                return Err(Error::MalformedInput(format!(
                    "layer {k} grid {}x{} is smaller than 3x3",
                    g.height, g.width
                )));
            }
            let mut sum = alloc::vec![0.0; g.channels];
            for by in 0..3 {
                for bx in 0..3 {
                    let region = g.window_max(region_band(g.height, by), region_band(g.width, bx));
                    sum.iter_mut().zip(&region).for_each(|(s, r)| *s += r);
                }
            }
            l2_normalize(&sum)
                .map(LayerVector)
                .map_err(|_| Error::Degenerate(format!("layer {k} regional sum is zero")))
        })
        .collect()
}

pub fn pool(maps: &FeatureMapStack, mode: PoolingMode) -> Result<Vec<LayerVector>> {
    match mode {
        PoolingMode::Imac => Ok(imac_pool(maps)),
        PoolingMode::L3Irmac => l3_irmac_pool(maps),
    }
}

/// Concatenates layer vectors in ascending layer order.
pub fn concatenate(layers: &[LayerVector]) -> Vec<f64> {
    layers.iter().flat_map(|v| v.0.iter().copied()).collect()
}

/// Pooled and concatenated descriptor before whitening.
pub fn pooled_descriptor(maps: &FeatureMapStack, mode: PoolingMode) -> Result<Vec<f64>> {
    Ok(concatenate(&pool(maps, mode)?))
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n.is_nan() || n <= NORM_EPSILON {
        return Err(Error::Degenerate(format!("vector norm {n:e} is below {NORM_EPSILON:e}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Full per-frame pipeline: pool, concatenate, whiten, normalize.
pub fn frame_descriptor(
    maps: &FeatureMapStack,
    mode: PoolingMode,
    model: &WhiteningModel,
) -> Result<Vec<f64>> {
    if maps.pooled_dim() != model.input_dim() {
        return Err(mismatch("pooled descriptor", model.input_dim(), maps.pooled_dim()));
    }
    let pooled = pooled_descriptor(maps, mode)?;
    l2_normalize(&model.apply(&pooled)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LayerGrid {
        LayerGrid::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn imac_single_channel_takes_max() {
        let g = LayerGrid::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let maps = FeatureMapStack::new(0, vec![g]).unwrap();
        assert_eq!(imac_pool(&maps), vec![LayerVector(vec![4.0])]);
    }

    #[test]
    fn imac_constant_map() {
        let g = LayerGrid::from_fn(3, 5, 2, |_, _, _| 0.7).unwrap();
        let maps = FeatureMapStack::new(0, vec![g]).unwrap();
        assert_eq!(imac_pool(&maps)[0].0, vec![0.7, 0.7]);
    }

    #[test]
    fn imac_matches_position_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_grid(&mut rng, 7, 7, 4);
        let pooled = imac_pool(&FeatureMapStack::new(0, vec![g.clone()]).unwrap());
        for c in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for p in 0..49 {
                best = best.max(g.at(p / 7, p % 7, c));
            }
            assert_eq!(pooled[0].0[c], best);
        }
    }

    #[test]
    fn empty_grids_are_malformed() {
        assert!(matches!(LayerGrid::new(0, 2, 1, vec![]), Err(Error::MalformedInput(_))));
        assert!(matches!(FeatureMapStack::new(0, vec![]), Err(Error::MalformedInput(_))));
        assert!(LayerGrid::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn region_bands_cover_axis() {
        assert_eq!(region_band(6, 0), (0, 2));
        assert_eq!(region_band(6, 2), (4, 6));
        assert_eq!(region_band(4, 0), (0, 2));
        assert_eq!(region_band(4, 1), (1, 3));
        assert_eq!(region_band(4, 2), (2, 4));
        for n in 3..40 {
            assert_eq!(region_band(n, 0).0, 0);
            assert_eq!(region_band(n, 2).1, n);
            for i in 0..3 {
                let (a, b) = region_band(n, i);
                assert!(b > a);
            }
        }
    }

    #[test]
    fn irmac_constant_map_is_uniform() {
        let c = 5;
        let g = LayerGrid::from_fn(4, 6, c, |_, _, _| 2.5).unwrap();
        let out = l3_irmac_pool(&FeatureMapStack::new(0, vec![g]).unwrap()).unwrap();
        for v in &out[0].0 {
            assert!((v - 1.0 / libm::sqrt(c as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn irmac_single_active_channel_is_one_hot() {
        let g = LayerGrid::from_fn(5, 5, 3, |y, x, c| if c == 1 { (y * 5 + x) as f64 } else { 0.0 })
            .unwrap();
        let out = l3_irmac_pool(&FeatureMapStack::new(0, vec![g]).unwrap()).unwrap();
        assert_eq!(out[0].0, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn irmac_matches_region_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_grid(&mut rng, 6, 6, 8);
        let out = l3_irmac_pool(&FeatureMapStack::new(0, vec![g.clone()]).unwrap()).unwrap();
        // 6x6 splits evenly into 2x2 cells.
        let mut sum = [0.0f64; 8];
        for ry in 0..3 {
            for rx in 0..3 {
                for (c, s) in sum.iter_mut().enumerate() {
                    let mut m = f64::NEG_INFINITY;
                    for y in 2 * ry..2 * ry + 2 {
                        for x in 2 * rx..2 * rx + 2 {
                            m = m.max(g.at(y, x, c));
                        }
                    }
                    *s += m;
                }
            }
        }
        let n = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..8 {
            assert!((out[0].0[c] - sum[c] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn irmac_rejects_small_and_zero_grids() {
        let small = LayerGrid::from_fn(2, 5, 1, |_, _, _| 1.0).unwrap();
        assert!(matches!(
            l3_irmac_pool(&FeatureMapStack::new(0, vec![small]).unwrap()),
            Err(Error::MalformedInput(_))
        ));
        let zero = LayerGrid::from_fn(3, 3, 2, |_, _, _| 0.0).unwrap();
        assert!(matches!(
            l3_irmac_pool(&FeatureMapStack::new(0, vec![zero]).unwrap()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn pooling_commutes_with_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_grid(&mut rng, 5, 4, 6);
        let lambda = 3.7;
        let scaled = LayerGrid::new(5, 4, 6, g.as_slice().iter().map(|v| v * lambda).collect()).unwrap();
        let a = imac_pool(&FeatureMapStack::new(0, vec![g]).unwrap());
        let b = imac_pool(&FeatureMapStack::new(0, vec![scaled]).unwrap());
        for (x, y) in a[0].0.iter().zip(&b[0].0) {
            assert!((x * lambda - y).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::Degenerate(_))));
        assert!(matches!(l2_normalize(&[1e-13, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn l2_normalize_random_is_unit_and_colinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let u = l2_normalize(&v).unwrap();
            assert!((norm(&u) - 1.0).abs() < 1e-12);
            let cos = crate::matrix::dot(&u, &v) / norm(&v);
            assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    fn two_layer_stack(rng: &mut ChaCha8Rng) -> FeatureMapStack {
        FeatureMapStack::new(0, vec![random_grid(rng, 4, 4, 3), random_grid(rng, 3, 5, 5)]).unwrap()
    }

    #[test]
    fn frame_descriptor_matches_stage_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let samples: Vec<Vec<f64>> = (0..60)
            .map(|_| pooled_descriptor(&two_layer_stack(&mut rng), PoolingMode::L3Irmac).unwrap())
            .collect();
        let model = fit_whitening(&samples, 6).unwrap();
        let maps = two_layer_stack(&mut rng);

        for mode in [PoolingMode::Imac, PoolingMode::L3Irmac] {
            let got = frame_descriptor(&maps, mode, &model).unwrap();
            assert!((norm(&got) - 1.0).abs() < 1e-6);
            assert_eq!(got, frame_descriptor(&maps, mode, &model).unwrap());

            // Manual stages.
            let layers = pool(&maps, mode).unwrap();
            let concat: Vec<f64> = layers.iter().flat_map(|l| l.0.clone()).collect();
            let mut whitened = vec![0.0; 6];
            for (j, w) in whitened.iter_mut().enumerate() {
                for (i, x) in concat.iter().enumerate() {
                    *w += (x - model.mean()[i]) * model.projection().get(i, j);
                }
            }
            let n = whitened.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (a, b) in got.iter().zip(&whitened) {
                assert!((a - b / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frame_descriptor_rejects_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
        let model = fit_whitening(&samples, 3).unwrap();
        let maps = two_layer_stack(&mut rng);
        assert!(matches!(
            frame_descriptor(&maps, PoolingMode::Imac, &model),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
