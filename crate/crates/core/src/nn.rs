//! Backbone layer primitives with hand-written backward passes.
//!
//! Activations are single images laid out `C×H×W`. Every layer that owns
//! parameters can be cloned into a gradient buffer of the same shape (see
//! [`Params::zeroed`]); `backward` accumulates into that buffer and returns the
//! input gradient.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

/// Named parameter access in a fixed, deterministic order.
pub trait Params<A> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, A>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, A>)>);

    fn named_params(&self) -> Vec<(String, ArrayViewD<'_, A>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, A>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    /// A copy with every parameter set to zero, used as a gradient accumulator.
    fn zeroed(&self) -> Self
    where
        Self: Clone,
        A: Clone + num_traits::Zero,
    {
        let mut z = self.clone();
        for (_, mut p) in z.named_params_mut() {
            p.fill(A::zero());
        }
        z
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Array3<f32>) -> Array3<f32> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_vec(x: &Array1<f32>) -> Array1<f32> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of SiLU given its input and the upstream gradient.
pub fn silu_backward<D: ndarray::Dimension>(
    x: &ndarray::Array<f32, D>,
    dy: &ndarray::Array<f32, D>,
) -> ndarray::Array<f32, D> {
    Zip::from(x).and(dy).map_collect(|&v, &g| {
        let s = sigmoid(v);
        g * (s + v * s * (1.0 - s))
    })
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `out × in × k × k`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub padding: usize,
}

// upper bound on im2col buffer size (elements) before splitting into row bands
const IM2COL_BUDGET: usize = 1 << 23;

impl Conv2d {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let bound = 1.0 / ((cin * k * k) as f32).sqrt();
        Self {
            weight: Array4::from_shape_vec((cout, cin, k, k), uniform(rng, cout * cin * k * k, bound))
                .unwrap(),
            bias: Array1::from(uniform(rng, cout, bound)),
            stride,
            padding: k / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel()) / self.stride + 1
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f32> {
        let (o, i, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, i * k * k)).unwrap()
    }

    /// Unfolds output rows `r0..r1` into a `(cin·k·k) × (rows·wo)` matrix.
    fn im2col(&self, x: &Array3<f32>, r0: usize, r1: usize) -> Array2<f32> {
        let (cin, h, w) = x.dim();
        let k = self.kernel();
        let wo = self.out_size(w);
        let (st, pad) = (self.stride as isize, self.padding as isize);
        let ncols = (r1 - r0) * wo;
        let mut cols = Array2::<f32>::zeros((cin * k * k, ncols));
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        for c in 0..cin {
            let plane = &xs[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().unwrap();
                    for oy in r0..r1 {
                        let iy = oy as isize * st + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let base = (oy - r0) * wo;
                        for ox in 0..wo {
                            let ix = ox as isize * st + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (cin, h, w) = x.dim();
        assert_eq!(cin, self.in_channels(), "conv input channels");
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let cout = self.out_channels();
        let k = self.kernel();
        let rows_per_band = (IM2COL_BUDGET / (cin * k * k * wo).max(1)).clamp(1, ho);
        let wm = self.weight_matrix();
        let mut out = Array2::<f32>::zeros((cout, ho * wo));
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + rows_per_band).min(ho);
            let cols = self.im2col(x, r0, r1);
            let band = wm.dot(&cols);
            out.slice_mut(s![.., r0 * wo..r1 * wo]).assign(&band);
            r0 = r1;
        }
        out += &self.bias.view().insert_axis(Axis(1));
        out.into_shape_with_order((cout, ho, wo)).unwrap()
    }

    /// Accumulates weight/bias gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array3<f32>, dy: &Array3<f32>, grad: &mut Conv2d) -> Array3<f32> {
        let (cin, h, w) = x.dim();
        let (cout, ho, wo) = dy.dim();
        let k = self.kernel();
        let cols = self.im2col(x, 0, ho);
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, ho * wo))
            .unwrap();
        let dw = dy2.dot(&cols.t());
        {
            let mut gw = grad
                .weight
                .view_mut()
                .into_shape_with_order((cout, cin * k * k))
                .unwrap();
            gw += &dw;
        }
        grad.bias += &dy2.sum_axis(Axis(1));
        let dcols = self.weight_matrix().t().dot(&dy2);
        // col2im
        let mut dx = Array3::<f32>::zeros((cin, h, w));
        let (st, pad) = (self.stride as isize, self.padding as isize);
        {
            let dxs = dx.as_slice_mut().unwrap();
            for c in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = dcols.row((c * k + ky) * k + kx);
                        let src = row.as_slice().unwrap();
                        for oy in 0..ho {
                            let iy = oy as isize * st + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = c * h * w + iy as usize * w;
                            for ox in 0..wo {
                                let ix = ox as isize * st + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    dxs[base + ix as usize] += src[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Params<f32> for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

/// Fully connected layer on a single vector, `weight` is `out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f32).sqrt();
        Self {
            weight: Array2::from_shape_vec((dout, din), uniform(rng, dout * din, bound)).unwrap(),
            bias: Array1::from(uniform(rng, dout, bound)),
        }
    }

    pub fn forward(&self, x: &Array1<f32>) -> Array1<f32> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(&self, x: &Array1<f32>, dy: &Array1<f32>, grad: &mut Linear) -> Array1<f32> {
        let outer = dy
            .view()
            .insert_axis(Axis(1))
            .dot(&x.view().insert_axis(Axis(0)));
        grad.weight += &outer;
        grad.bias += dy;
        self.weight.t().dot(dy)
    }
}

impl Params<f32> for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub weight: Array1<f32>,
    pub bias: Array1<f32>,
    pub groups: usize,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    xhat: Array3<f32>,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(
            groups > 0 && channels % groups == 0,
            "{channels} channels not divisible into {groups} groups"
        );
        Self {
            weight: Array1::ones(channels),
            bias: Array1::zeros(channels),
            groups,
            eps: 1e-5,
        }
    }

    fn normalize(&self, x: &Array3<f32>) -> (Array3<f32>, Vec<f32>) {
        let (c, h, w) = x.dim();
        let cpg = c / self.groups;
        let n = cpg * h * w;
        let mut xhat = x.as_standard_layout().into_owned();
        let mut inv = Vec::with_capacity(self.groups);
        let data = xhat.as_slice_mut().unwrap();
        for g in 0..self.groups {
            let chunk = &mut data[g * n..(g + 1) * n];
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = chunk
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let istd = 1.0 / (var + self.eps as f64).sqrt();
            for v in chunk.iter_mut() {
                *v = ((*v as f64 - mean) * istd) as f32;
            }
            inv.push(istd as f32);
        }
        (xhat, inv)
    }

    fn affine(&self, xhat: &Array3<f32>) -> Array3<f32> {
        let g = self.weight.view().insert_axis(Axis(1)).insert_axis(Axis(2));
        let b = self.bias.view().insert_axis(Axis(1)).insert_axis(Axis(2));
        xhat * &g + &b
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        self.affine(&self.normalize(x).0)
    }

    pub fn forward_train(&self, x: &Array3<f32>) -> (Array3<f32>, GroupNormCache) {
        let (xhat, inv_std) = self.normalize(x);
        (self.affine(&xhat), GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &GroupNormCache, dy: &Array3<f32>, grad: &mut GroupNorm) -> Array3<f32> {
        let (c, h, w) = dy.dim();
        let cpg = c / self.groups;
        let hw = h * w;
        let n = cpg * hw;
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().unwrap();
        let xh = cache.xhat.as_slice().unwrap();
        let mut dx = Array3::<f32>::zeros((c, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        for ch in 0..c {
            let r = ch * hw..(ch + 1) * hw;
            let (mut dg, mut db) = (0.0f64, 0.0f64);
            for (g, x) in dys[r.clone()].iter().zip(&xh[r]) {
                dg += (*g * *x) as f64;
                db += *g as f64;
            }
            grad.weight[ch] += dg as f32;
            grad.bias[ch] += db as f32;
        }
        for g in 0..self.groups {
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for ch in g * cpg..(g + 1) * cpg {
                let gamma = self.weight[ch];
                for i in ch * hw..(ch + 1) * hw {
                    let d = (dys[i] * gamma) as f64;
                    sum_d += d;
                    sum_dx += d * xh[i] as f64;
                }
            }
            let istd = cache.inv_std[g] as f64;
            let nf = n as f64;
            for ch in g * cpg..(g + 1) * cpg {
                let gamma = self.weight[ch];
                for i in ch * hw..(ch + 1) * hw {
                    let d = (dys[i] * gamma) as f64;
                    dxs[i] = (istd / nf * (nf * d - sum_d - xh[i] as f64 * sum_dx)) as f32;
                }
            }
        }
        dx
    }
}

impl Params<f32> for GroupNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

pub fn avg_pool2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        0.25 * (x[[ch, 2 * y, 2 * xx]]
            + x[[ch, 2 * y + 1, 2 * xx]]
            + x[[ch, 2 * y, 2 * xx + 1]]
            + x[[ch, 2 * y + 1, 2 * xx + 1]])
    })
}

pub fn upsample_nearest2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, xx)| x[[ch, y / 2, xx / 2]])
}

pub fn upsample_nearest2_backward(dy: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = dy.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, x)| {
        dy[[ch, 2 * y, 2 * x]]
            + dy[[ch, 2 * y + 1, 2 * x]]
            + dy[[ch, 2 * y, 2 * x + 1]]
            + dy[[ch, 2 * y + 1, 2 * x + 1]]
    })
}

pub fn avg_pool2_backward(dy: &Array3<f32>) -> Array3<f32> {
    upsample_nearest2(dy).mapv(|v| 0.25 * v)
}

/// Sinusoidal timestep embedding, cosine half first.
pub fn timestep_embedding(t: f32, dim: usize) -> Array1<f32> {
    let half = dim / 2;
    let mut out = Array1::<f32>::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.cos() as f32;
        out[half + i] = arg.sin() as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut impl Rng, d: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_fn(d, |_| rng.random_range(-1.0f32..1.0))
    }

    fn direct_conv(conv: &Conv2d, x: &Array3<f32>) -> Array3<f32> {
        let (cin, h, w) = x.dim();
        let (cout, _, k, _) = conv.weight.dim();
        let ho = (h + 2 * conv.padding - k) / conv.stride + 1;
        let wo = (w + 2 * conv.padding - k) / conv.stride + 1;
        Array3::from_shape_fn((cout, ho, wo), |(o, y, xx)| {
            let mut acc = conv.bias[o];
            for c in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * conv.stride + ky) as isize - conv.padding as isize;
                        let ix = (xx * conv.stride + kx) as isize - conv.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight[[o, c, ky, kx]] * x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let conv = Conv2d::new(&mut rng, 3, 4, k, stride);
            let x = rand3(&mut rng, (3, 6, 6));
            let got = conv.forward(&x);
            let want = direct_conv(&conv, &x);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    // f32 finite differences of a scalar loss sum(dy * f(x))
    fn check_grad(f: impl Fn(&Array3<f32>) -> Array3<f32>, x: &Array3<f32>, dy: &Array3<f32>, analytic: &Array3<f32>) {
        let h = 1e-2f32;
        for idx in [0usize, 3, 7, x.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let lp = (f(&xp) * dy).sum();
            let lm = (f(&xm) * dy).sum();
            let num = (lp - lm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((num - a).abs() < 2e-2 * (1.0 + a.abs()), "idx {idx}: {num} vs {a}");
        }
    }

    #[test]
    fn conv_and_groupnorm_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(&mut rng, 4, 3, 3, 2);
        let x = rand3(&mut rng, (4, 6, 6));
        let dy = rand3(&mut rng, (3, 3, 3));
        let mut g = conv.zeroed();
        let dx = conv.backward(&x, &dy, &mut g);
        check_grad(|x| conv.forward(x), &x, &dy, &dx);

        let mut gn = GroupNorm::new(4, 2);
        gn.weight = Array1::from(vec![0.5, 1.5, -1.0, 2.0]);
        let dy = rand3(&mut rng, (4, 6, 6));
        let (_, cache) = gn.forward_train(&x);
        let mut gg = gn.zeroed();
        let dx = gn.backward(&cache, &dy, &mut gg);
        check_grad(|x| gn.forward(x), &x, &dy, &dx);
    }

    #[test]
    fn resampling_shapes() {
        let x = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| (c * 16 + y * 4 + x) as f32);
        let up = upsample_nearest2(&x);
        assert_eq!(up.dim(), (2, 8, 8));
        assert_eq!(upsample_nearest2_backward(&up), x.mapv(|v| 4.0 * v));
        assert_eq!(avg_pool2(&x)[[0, 0, 0]], 2.5);
    }
}
