//! Decoder activations → probe inputs.
//!
//! Segmentation: each block is bilinearly upsampled to the output resolution
//! and the blocks are stacked along the feature axis (ascending block index).
//! Classification: one block is max-pooled down to a 512-vector.
//!
//! Pooling cascade for `C×H×W`:
//! 1. apply 2×2/stride-2 max pooling `p` times, `p` being the largest count
//!    with `C·⌊H/2^p⌋·⌊W/2^p⌋ ≥ 512` and `⌊H/2^p⌋ ≥ 1`;
//! 2. flatten channel-major (c, then y, then x) to length `L`, max-pool with
//!    kernel = stride = `⌊L/512⌋` and keep the first 512 values.

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{BlockSpec, DecoderActivation};
use crate::error::{param, Error, Result};

pub const CLS_DIM: usize = 512;

/// Per-pixel features, `H×W×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureMap {
    pub data: Array3<f32>,
    pub provenance: Vec<BlockSpec>,
}

impl PixelFeatureMap {
    pub fn height(&self) -> usize {
        self.data.dim().0
    }
    pub fn width(&self) -> usize {
        self.data.dim().1
    }
    pub fn feature_dim(&self) -> usize {
        self.data.dim().2
    }

    /// `(H·W) × D` row-major view; row `y·W + x` is pixel `(y, x)`.
    pub fn pixels(&self) -> ndarray::ArrayView2<'_, f32> {
        let (h, w, d) = self.data.dim();
        self.data.view().into_shape_with_order((h * w, d)).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationVector {
    pub values: Vec<f32>,
    pub provenance: BlockSpec,
}

/// Half-pixel-centre (align-corners = false) bilinear resize to `out × out`.
pub fn upsample_bilinear(act: &DecoderActivation, out: usize) -> Result<Array3<f32>> {
    let (c, h, w) = act.data.dim();
    if out < h || out < w {
        return param(format!("cannot upsample {h}x{w} down to {out}x{out}"));
    }
    if out == h && out == w {
        return Ok(act.data.clone());
    }
    let taps = |n_in: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h);
    let xs = taps(w);
    let mut res = Array3::<f32>::zeros((c, out, out));
    for ch in 0..c {
        let plane = act.data.index_axis(Axis(0), ch);
        let mut dst = res.index_axis_mut(Axis(0), ch);
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = plane[[y0, x0]] * (1.0 - lx) + plane[[y0, x1]] * lx;
                let bot = plane[[y1, x0]] * (1.0 - lx) + plane[[y1, x1]] * lx;
                dst[[oy, ox]] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Ok(res)
}

/// Stacks upsampled blocks into one feature map, ordered by block index.
pub fn concat_features(parts: Vec<(BlockSpec, Array3<f32>)>) -> Result<PixelFeatureMap> {
    let mut parts = parts;
    if parts.is_empty() {
        return param("no feature blocks to concatenate");
    }
    parts.sort_by_key(|(spec, _)| spec.block);
    let (_, r, r2) = parts[0].1.dim();
    if let Some((spec, a)) = parts.iter().find(|(_, a)| a.dim().1 != r || a.dim().2 != r2) {
        return param(format!(
            "block {} is {}x{}, expected {r}x{r2}",
            spec.block,
            a.dim().1,
            a.dim().2
        ));
    }
    let d: usize = parts.iter().map(|(_, a)| a.dim().0).sum();
    let mut data = Array3::<f32>::zeros((r, r2, d));
    let mut off = 0;
    for (_, a) in &parts {
        let c = a.dim().0;
        // C×H×W → H×W×C
        data.slice_mut(s![.., .., off..off + c])
            .assign(&a.view().permuted_axes([1, 2, 0]));
        off += c;
    }
    Ok(PixelFeatureMap {
        data,
        provenance: parts.into_iter().map(|(s, _)| s).collect(),
    })
}

/// Upsamples every activation to `out` and concatenates.
pub fn segmentation_features(acts: &[DecoderActivation], out: usize) -> Result<PixelFeatureMap> {
    let parts = acts
        .iter()
        .map(|a| Ok((a.spec, upsample_bilinear(a, out)?)))
        .collect::<Result<Vec<_>>>()?;
    concat_features(parts)
}

/// Number of 2×2 spatial pooling passes used for a `C×H×W` activation.
pub fn spatial_pool_count(c: usize, h: usize, w: usize) -> usize {
    let mut p = 0;
    while (h >> (p + 1)) >= 1 && c * (h >> (p + 1)) * (w >> (p + 1)) >= CLS_DIM {
        p += 1;
    }
    p
}

fn max_pool2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        x[[ch, 2 * y, 2 * xx]]
            .max(x[[ch, 2 * y + 1, 2 * xx]])
            .max(x[[ch, 2 * y, 2 * xx + 1]])
            .max(x[[ch, 2 * y + 1, 2 * xx + 1]])
    })
}

pub fn pool_to_512(act: &DecoderActivation) -> Result<ClassificationVector> {
    let (c, h, w) = act.data.dim();
    if c * h * w < CLS_DIM {
        return Err(Error::TooSmallActivation {
            channels: c,
            height: h,
            width: w,
        });
    }
    let mut x = act.data.clone();
    for _ in 0..spatial_pool_count(c, h, w) {
        x = max_pool2(&x);
    }
    let flat: Vec<f32> = x.iter().copied().collect();
    let k = flat.len() / CLS_DIM;
    let values = flat
        .chunks_exact(k)
        .take(CLS_DIM)
        .map(|win| win.iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect();
    Ok(ClassificationVector {
        values,
        provenance: act.spec,
    })
}

/// Stacks classification vectors into an `N × 512` f64 matrix.
pub fn stack_vectors(vs: &[ClassificationVector]) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((vs.len(), CLS_DIM));
    for (mut row, v) in m.rows_mut().into_iter().zip(vs) {
        row.assign(&Array1::from_iter(v.values.iter().map(|&x| x as f64)));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UnetConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn act(data: Array3<f32>, block: usize) -> DecoderActivation {
        DecoderActivation {
            spec: BlockSpec::new(block, 100),
            data,
        }
    }

    fn random(rng: &mut impl Rng, d: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_fn(d, |_| rng.random_range(-5.0f32..5.0))
    }

    #[test]
    fn constant_extension() {
        let a = act(Array3::from_elem((2, 1, 1), 3.5), 1);
        let up = upsample_bilinear(&a, 7).unwrap();
        assert!(up.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn two_by_two_to_four_by_four() {
        // independent oracle: weights from half-pixel source coordinates
        let src = [[0.0f64, 1.0], [2.0, 3.0]];
        let coord = |i: usize| ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        let a = act(Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap(), 1);
        let up = upsample_bilinear(&a, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let (fy, fx) = (coord(y), coord(x));
                let want = src[0][0] * (1.0 - fy) * (1.0 - fx)
                    + src[0][1] * (1.0 - fy) * fx
                    + src[1][0] * fy * (1.0 - fx)
                    + src[1][1] * fy * fx;
                assert!((up[[0, y, x]] as f64 - want).abs() < 1e-6, "({y},{x})");
            }
        }
        // spot values: corners clamp, interior blends
        assert_eq!(up[[0, 0, 0]], 0.0);
        assert!((up[[0, 1, 1]] - 0.75).abs() < 1e-6);
        assert_eq!(up[[0, 3, 3]], 3.0);
    }

    #[test]
    fn identity_and_downsample_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = act(random(&mut rng, (3, 4, 4)), 1);
        assert_eq!(upsample_bilinear(&a, 4).unwrap(), a.data);
        assert!(upsample_bilinear(&a, 2).is_err());
    }

    #[test]
    fn concat_dims_and_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, (256, 4, 4));
        let b = random(&mut rng, (512, 4, 4));
        let fm = concat_features(vec![
            (BlockSpec::new(8, 100), b.clone()),
            (BlockSpec::new(6, 100), a.clone()),
        ])
        .unwrap();
        assert_eq!(fm.feature_dim(), 768);
        assert_eq!(fm.provenance[0].block, 6);
        let first = fm.data.slice(s![.., .., 0..256]).permuted_axes([2, 0, 1]);
        assert_eq!(first, a);
        let single = concat_features(vec![(BlockSpec::new(3, 0), a.clone())]).unwrap();
        assert_eq!(single.data.view().permuted_axes([2, 0, 1]), a);
        assert!(concat_features(vec![
            (BlockSpec::new(1, 0), a),
            (BlockSpec::new(2, 0), random(&mut rng, (4, 8, 8)))
        ])
        .is_err());
        assert!(concat_features(vec![]).is_err());
    }

    #[test]
    fn concat_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let parts: Vec<_> = (1..=3)
            .map(|b| (BlockSpec::new(b, 0), random(&mut rng, (b + 1, 3, 3))))
            .collect();
        let mut rev = parts.clone();
        rev.reverse();
        assert_eq!(concat_features(parts).unwrap(), concat_features(rev).unwrap());
    }

    /// Independent scalar oracle: explicit window maxima with index arithmetic.
    fn pool_oracle(x: &Array3<f32>) -> Vec<f32> {
        let (c, h, w) = x.dim();
        let mut p = 0;
        loop {
            let (nh, nw) = (h / (1 << (p + 1)), w / (1 << (p + 1)));
            if nh >= 1 && c * nh * nw >= 512 {
                p += 1;
            } else {
                break;
            }
        }
        let f = 1usize << p;
        let (ph, pw) = (h / f, w / f);
        let mut flat = Vec::new();
        for ch in 0..c {
            for y in 0..ph {
                for xx in 0..pw {
                    let mut m = f32::NEG_INFINITY;
                    for dy in 0..f {
                        for dx in 0..f {
                            m = m.max(x[[ch, y * f + dy, xx * f + dx]]);
                        }
                    }
                    flat.push(m);
                }
            }
        }
        let k = flat.len() / 512;
        (0..512)
            .map(|i| (0..k).map(|j| flat[i * k + j]).fold(f32::NEG_INFINITY, f32::max))
            .collect()
    }

    #[test]
    fn per_channel_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, (512, 8, 8));
        assert_eq!(spatial_pool_count(512, 8, 8), 3);
        let v = pool_to_512(&act(x.clone(), 1)).unwrap();
        for c in 0..512 {
            let m = x.index_axis(Axis(0), c).fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            assert_eq!(v.values[c], m);
        }
    }

    #[test]
    fn pair_maxima_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, (256, 16, 16));
        assert_eq!(spatial_pool_count(256, 16, 16), 3);
        assert_eq!(pool_to_512(&act(x.clone(), 1)).unwrap().values, pool_oracle(&x));
        let y = random(&mut rng, (512, 1, 1));
        assert_eq!(
            pool_to_512(&act(y.clone(), 1)).unwrap().values,
            y.iter().copied().collect::<Vec<_>>()
        );
        assert!(matches!(
            pool_to_512(&act(Array3::zeros((3, 8, 8)), 1)),
            Err(Error::TooSmallActivation { .. })
        ));
    }

    #[test]
    fn every_descriptor_row_pools_to_512() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cfg in [UnetConfig::toy(64, 16), UnetConfig::toy(64, 8), UnetConfig::adm_256_uncond()] {
            for (c, s) in cfg.decoder_geometry() {
                if c * s * s < 512 {
                    continue;
                }
                let x = random(&mut rng, (c, s, s));
                let v = pool_to_512(&act(x.clone(), 1)).unwrap();
                assert_eq!(v.values.len(), 512);
                assert_eq!(v.values, pool_oracle(&x));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pooling_selects_and_scales(c in 1usize..64, h in 1usize..24, w in 1usize..24, seed in 0u64..1000, scale in 0.1f32..10.0) {
            prop_assume!(c * h * w >= 512);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, (c, h, w));
            let v = pool_to_512(&act(x.clone(), 1)).unwrap();
            prop_assert_eq!(v.values.len(), 512);
            for val in &v.values {
                prop_assert!(x.iter().any(|e| e == val));
            }
            let vs = pool_to_512(&act(x.mapv(|e| e * scale), 1)).unwrap();
            for (a, b) in vs.values.iter().zip(&v.values) {
                prop_assert_eq!(*a, b * scale);
            }
        }
    }
}
