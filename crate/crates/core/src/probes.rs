//! Trainable heads over frozen features.
//!
//! * [`PixelMlp`]: `D → 128 → ReLU → BN → 128 → ReLU → BN → 5` per-pixel classifier.
//! * [`SegmentationEnsemble`]: five `PixelMlp`s; prediction averages the members'
//!   softmax distributions and takes the argmax (lowest class index on ties).
//! * [`ClassifierHead`]: `512 → 64 → BN → ReLU → Dropout(0.5) → 32 → BN → ReLU →
//!   Dropout(0.25) → 1 → sigmoid`.
//!
//! Everything here is f64 so gradients can be checked against finite differences.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param, Result};
use crate::features::{ClassificationVector, PixelFeatureMap, CLS_DIM};
use crate::nn::{join, Params};

pub const NUM_CLASSES: usize = 5;
pub const ENSEMBLE_SIZE: usize = 5;
pub const PIXEL_HIDDEN: usize = 128;
pub const CLS_HIDDEN: [usize; 2] = [64, 32];
pub const CLS_DROPOUT: [f64; 2] = [0.5, 0.25];

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn new(rng: &mut impl Rng, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((dout, din), || rng.random_range(-bound..=bound)),
            bias: Array1::from_shape_simple_fn(dout, || rng.random_range(-bound..=bound)),
        }
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        Self {
            weight: Array2::zeros((dout, din)),
            bias: Array1::zeros(dout),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn backward(&self, x: &ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl Params<f64> for Dense {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

/// Batch normalization over the rows of an `N × F` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    mean: Array1<f64>,
    unbiased_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let inv = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        (x - &self.running_mean) * &(inv * &self.gamma) + &self.beta
    }

    pub fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, BatchNormCache) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).unwrap();
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = centered * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        let unbiased_var = if n > 1.0 { var * (n / (n - 1.0)) } else { var };
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                mean,
                unbiased_var,
            },
        )
    }

    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &cache.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &cache.unbiased_var * m;
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: &Array2<f64>, grad: &mut BatchNorm) -> Array2<f64> {
        let n = dy.nrows() as f64;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let sum_d = dxhat.sum_axis(Axis(0));
        let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut dx = dxhat * n - &sum_d - &(&cache.xhat * &sum_dx);
        dx *= &(&cache.inv_std / n);
        dx
    }
}

impl Params<f64> for BatchNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((join(prefix, "weight"), self.gamma.view().into_dyn()));
        out.push((join(prefix, "bias"), self.beta.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((join(prefix, "weight"), self.gamma.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.beta.view_mut().into_dyn()));
    }
}

/// Parameters plus non-trainable buffers, for serialization.
pub trait StateDict: Params<f64> {
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>);

    fn state(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        self.buffers("", &mut out);
        out
    }

    fn state_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        self.visit_state_mut("", &mut out);
        out
    }

    fn visit_state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>);
}

fn bn_buffers<'a>(bn: &'a BatchNorm, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
    out.push((join(prefix, "running_mean"), bn.running_mean.view().into_dyn()));
    out.push((join(prefix, "running_var"), bn.running_var.view().into_dyn()));
}

fn bn_state_mut<'a>(bn: &'a mut BatchNorm, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
    out.push((join(prefix, "weight"), bn.gamma.view_mut().into_dyn()));
    out.push((join(prefix, "bias"), bn.beta.view_mut().into_dyn()));
    out.push((join(prefix, "running_mean"), bn.running_mean.view_mut().into_dyn()));
    out.push((join(prefix, "running_var"), bn.running_var.view_mut().into_dyn()));
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    Zip::from(pre)
        .and(dy)
        .map_collect(|&p, &g| if p > 0.0 { g } else { 0.0 })
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

/// Mean multi-class cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[u8]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        loss -= row[y as usize].max(1e-300).ln();
        row[y as usize] -= 1.0;
    }
    grad /= n;
    (loss / n, grad)
}

/// Mean binary cross-entropy on logits and its gradient.
pub fn bce_with_logits(logits: &Array1<f64>, labels: &[f64]) -> (f64, Array1<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = Array1::from_iter(logits.iter().zip(labels).map(|(&z, &y)| {
        // log(1 + e^-|z|) + max(z, 0) - z·y
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        (sigmoid(z) - y) / n
    }));
    (loss / n, grad)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelMlp {
    pub dense1: Dense,
    pub bn1: BatchNorm,
    pub dense2: Dense,
    pub bn2: BatchNorm,
    pub dense3: Dense,
}

pub struct PixelMlpCache {
    pre1: Array2<f64>,
    bn1: BatchNormCache,
    h1: Array2<f64>,
    pre2: Array2<f64>,
    bn2: BatchNormCache,
    h2: Array2<f64>,
}

impl PixelMlp {
    pub fn new(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dense1: Dense::new(&mut rng, feature_dim, hidden),
            bn1: BatchNorm::new(hidden),
            dense2: Dense::new(&mut rng, hidden, hidden),
            bn2: BatchNorm::new(hidden),
            dense3: Dense::new(&mut rng, hidden, NUM_CLASSES),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.dense1.weight.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.dense1.weight.nrows()
    }

    pub fn forward_eval(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let h = self.bn1.forward_eval(&relu(&self.dense1.forward(x)));
        let h = self.bn2.forward_eval(&relu(&self.dense2.forward(&h.view())));
        self.dense3.forward(&h.view())
    }

    pub fn forward_train(&self, x: &ArrayView2<f64>) -> (Array2<f64>, PixelMlpCache) {
        let pre1 = self.dense1.forward(x);
        let (h1, bn1) = self.bn1.forward_train(&relu(&pre1));
        let pre2 = self.dense2.forward(&h1.view());
        let (h2, bn2) = self.bn2.forward_train(&relu(&pre2));
        let logits = self.dense3.forward(&h2.view());
        (
            logits,
            PixelMlpCache {
                pre1,
                bn1,
                h1,
                pre2,
                bn2,
                h2,
            },
        )
    }

    pub fn backward(&self, x: &ArrayView2<f64>, cache: &PixelMlpCache, dlogits: &Array2<f64>) -> PixelMlp {
        let mut g = self.zeroed();
        let dh2 = self.dense3.backward(&cache.h2.view(), dlogits, &mut g.dense3);
        let d = self.bn2.backward(&cache.bn2, &dh2, &mut g.bn2);
        let d = relu_backward(&cache.pre2, &d);
        let dh1 = self.dense2.backward(&cache.h1.view(), &d, &mut g.dense2);
        let d = self.bn1.backward(&cache.bn1, &dh1, &mut g.bn1);
        let d = relu_backward(&cache.pre1, &d);
        self.dense1.backward(x, &d, &mut g.dense1);
        g
    }

    /// Cross-entropy on a batch; returns the loss, gradients and the caches
    /// needed to update batch-norm running statistics.
    pub fn loss_grad(&self, x: &ArrayView2<f64>, labels: &[u8]) -> (f64, PixelMlp, PixelMlpCache) {
        let (logits, cache) = self.forward_train(x);
        let (loss, dlogits) = cross_entropy(&logits, labels);
        let g = self.backward(x, &cache, &dlogits);
        (loss, g, cache)
    }

    pub fn update_running(&mut self, cache: &PixelMlpCache) {
        self.bn1.update_running(&cache.bn1);
        self.bn2.update_running(&cache.bn2);
    }
}

impl Params<f64> for PixelMlp {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.dense1.visit(&join(prefix, "dense1"), out);
        self.bn1.visit(&join(prefix, "bn1"), out);
        self.dense2.visit(&join(prefix, "dense2"), out);
        self.bn2.visit(&join(prefix, "bn2"), out);
        self.dense3.visit(&join(prefix, "dense3"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        self.dense1.visit_mut(&join(prefix, "dense1"), out);
        self.bn1.visit_mut(&join(prefix, "bn1"), out);
        self.dense2.visit_mut(&join(prefix, "dense2"), out);
        self.bn2.visit_mut(&join(prefix, "bn2"), out);
        self.dense3.visit_mut(&join(prefix, "dense3"), out);
    }
}

impl StateDict for PixelMlp {
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        bn_buffers(&self.bn1, &join(prefix, "bn1"), out);
        bn_buffers(&self.bn2, &join(prefix, "bn2"), out);
    }
    fn visit_state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        self.dense1.visit_mut(&join(prefix, "dense1"), out);
        bn_state_mut(&mut self.bn1, &join(prefix, "bn1"), out);
        self.dense2.visit_mut(&join(prefix, "dense2"), out);
        bn_state_mut(&mut self.bn2, &join(prefix, "bn2"), out);
        self.dense3.visit_mut(&join(prefix, "dense3"), out);
    }
}

/// Per-pixel class indices `{0: background, 1: lesion, 2: skin, 3: marker, 4: ruler}`
/// with the averaged class distribution for every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    pub classes: ndarray::Array2<u8>,
    /// `H×W×5`
    pub probabilities: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationEnsemble {
    pub members: Vec<PixelMlp>,
    pub member_seeds: Vec<u64>,
}

const PREDICT_CHUNK: usize = 8192;

impl SegmentationEnsemble {
    pub fn new(feature_dim: usize, hidden: usize, member_seeds: &[u64]) -> Result<Self> {
        if member_seeds.len() != ENSEMBLE_SIZE {
            return param(format!(
                "ensemble needs {ENSEMBLE_SIZE} member seeds, got {}",
                member_seeds.len()
            ));
        }
        Ok(Self {
            members: member_seeds
                .iter()
                .map(|&s| PixelMlp::new(feature_dim, hidden, s))
                .collect(),
            member_seeds: member_seeds.to_vec(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.members[0].feature_dim()
    }

    /// Mean of the members' softmax outputs for a batch of pixel rows.
    pub fn predict_proba_rows(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut acc = Array2::<f64>::zeros((x.nrows(), NUM_CLASSES));
        for m in &self.members {
            acc += &softmax_rows(&m.forward_eval(x));
        }
        acc / self.members.len() as f64
    }

    pub fn predict(&self, features: &PixelFeatureMap) -> Result<SegmentationOutput> {
        if features.feature_dim() != self.feature_dim() {
            return param(format!(
                "feature dim {} does not match ensemble input {}",
                features.feature_dim(),
                self.feature_dim()
            ));
        }
        let (h, w) = (features.height(), features.width());
        let pix = features.pixels();
        let mut probs = Array2::<f64>::zeros((h * w, NUM_CLASSES));
        let mut start = 0;
        while start < h * w {
            let end = (start + PREDICT_CHUNK).min(h * w);
            let x = pix.slice(s![start..end, ..]).mapv(|v| v as f64);
            probs
                .slice_mut(s![start..end, ..])
                .assign(&self.predict_proba_rows(&x.view()));
            start = end;
        }
        let classes = Array1::from_iter(probs.rows().into_iter().map(|r| argmax_low(r.as_slice().unwrap())))
            .into_shape_with_order((h, w))
            .unwrap();
        Ok(SegmentationOutput {
            classes,
            probabilities: probs.into_shape_with_order((h, w, NUM_CLASSES)).unwrap(),
        })
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_low(v: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Batch statistics and dropout masks drawn from the given seed.
    Train { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub dense1: Dense,
    pub bn1: BatchNorm,
    pub dense2: Dense,
    pub bn2: BatchNorm,
    pub dense3: Dense,
}

/// Inverted-dropout keep masks (already scaled by `1/(1-p)`).
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub first: Array2<f64>,
    pub second: Array2<f64>,
}

impl DropoutMasks {
    pub fn sample(rng: &mut impl Rng, n: usize) -> Self {
        let mut draw = |width: usize, p: f64| {
            Array2::from_shape_simple_fn((n, width), || {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            })
        };
        let first = draw(CLS_HIDDEN[0], CLS_DROPOUT[0]);
        let second = draw(CLS_HIDDEN[1], CLS_DROPOUT[1]);
        Self { first, second }
    }

    pub fn ones(n: usize) -> Self {
        Self {
            first: Array2::ones((n, CLS_HIDDEN[0])),
            second: Array2::ones((n, CLS_HIDDEN[1])),
        }
    }
}

pub struct ClassifierCache {
    pre1: Array2<f64>,
    bn1: BatchNormCache,
    d1: Array2<f64>,
    pre2: Array2<f64>,
    bn2: BatchNormCache,
    d2: Array2<f64>,
}

impl ClassifierHead {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dense1: Dense::new(&mut rng, CLS_DIM, CLS_HIDDEN[0]),
            bn1: BatchNorm::new(CLS_HIDDEN[0]),
            dense2: Dense::new(&mut rng, CLS_HIDDEN[0], CLS_HIDDEN[1]),
            bn2: BatchNorm::new(CLS_HIDDEN[1]),
            dense3: Dense::new(&mut rng, CLS_HIDDEN[1], 1),
        }
    }

    pub fn zeros() -> Self {
        Self {
            dense1: Dense::zeros(CLS_DIM, CLS_HIDDEN[0]),
            bn1: BatchNorm::new(CLS_HIDDEN[0]),
            dense2: Dense::zeros(CLS_HIDDEN[0], CLS_HIDDEN[1]),
            bn2: BatchNorm::new(CLS_HIDDEN[1]),
            dense3: Dense::zeros(CLS_HIDDEN[1], 1),
        }
    }

    /// Eval-mode logits for an `N × 512` batch.
    pub fn logits_eval(&self, x: &ArrayView2<f64>) -> Array1<f64> {
        let h = relu(&self.bn1.forward_eval(&self.dense1.forward(x)));
        let h = relu(&self.bn2.forward_eval(&self.dense2.forward(&h.view())));
        self.dense3.forward(&h.view()).column(0).to_owned()
    }

    pub fn forward_train(&self, x: &ArrayView2<f64>, masks: &DropoutMasks) -> (Array1<f64>, ClassifierCache) {
        let pre1 = self.dense1.forward(x);
        let (b1, bn1) = self.bn1.forward_train(&pre1);
        let d1 = relu(&b1) * &masks.first;
        let pre2 = self.dense2.forward(&d1.view());
        let (b2, bn2) = self.bn2.forward_train(&pre2);
        let d2 = relu(&b2) * &masks.second;
        let logits = self.dense3.forward(&d2.view()).column(0).to_owned();
        // keep the BN outputs for the ReLU derivative
        let cache = ClassifierCache {
            pre1: b1,
            bn1,
            d1,
            pre2: b2,
            bn2,
            d2,
        };
        (logits, cache)
    }

    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        cache: &ClassifierCache,
        masks: &DropoutMasks,
        dlogits: &Array1<f64>,
    ) -> ClassifierHead {
        let mut g = self.zeroed();
        let dl = dlogits.view().insert_axis(Axis(1)).to_owned();
        let dd2 = self.dense3.backward(&cache.d2.view(), &dl, &mut g.dense3);
        let d = relu_backward(&cache.pre2, &(dd2 * &masks.second));
        let d = self.bn2.backward(&cache.bn2, &d, &mut g.bn2);
        let dd1 = self.dense2.backward(&cache.d1.view(), &d, &mut g.dense2);
        let d = relu_backward(&cache.pre1, &(dd1 * &masks.first));
        let d = self.bn1.backward(&cache.bn1, &d, &mut g.bn1);
        self.dense1.backward(x, &d, &mut g.dense1);
        g
    }

    /// Binary cross-entropy in training mode with the given dropout masks.
    pub fn loss_grad(
        &self,
        x: &ArrayView2<f64>,
        labels: &[f64],
        masks: &DropoutMasks,
    ) -> (f64, ClassifierHead, ClassifierCache) {
        let (logits, cache) = self.forward_train(x, masks);
        let (loss, dlogits) = bce_with_logits(&logits, labels);
        let g = self.backward(x, &cache, masks, &dlogits);
        (loss, g, cache)
    }

    pub fn update_running(&mut self, cache: &ClassifierCache) {
        self.bn1.update_running(&cache.bn1);
        self.bn2.update_running(&cache.bn2);
    }

    /// Malignancy probabilities for a batch.
    pub fn predict_batch(&self, x: &ArrayView2<f64>, mode: Mode) -> Result<Array1<f64>> {
        if x.ncols() != CLS_DIM {
            return param(format!("classifier input has {} features, expected {CLS_DIM}", x.ncols()));
        }
        let logits = match mode {
            Mode::Eval => self.logits_eval(x),
            Mode::Train { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let masks = DropoutMasks::sample(&mut rng, x.nrows());
                self.forward_train(x, &masks).0
            }
        };
        Ok(logits.mapv(sigmoid))
    }

    pub fn predict(&self, v: &ClassificationVector, mode: Mode) -> Result<f64> {
        if v.values.len() != CLS_DIM {
            return param(format!("classification vector has length {}, expected {CLS_DIM}", v.values.len()));
        }
        let x = Array2::from_shape_fn((1, CLS_DIM), |(_, j)| v.values[j] as f64);
        Ok(self.predict_batch(&x.view(), mode)?[0])
    }
}

impl Params<f64> for ClassifierHead {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.dense1.visit(&join(prefix, "dense1"), out);
        self.bn1.visit(&join(prefix, "bn1"), out);
        self.dense2.visit(&join(prefix, "dense2"), out);
        self.bn2.visit(&join(prefix, "bn2"), out);
        self.dense3.visit(&join(prefix, "dense3"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        self.dense1.visit_mut(&join(prefix, "dense1"), out);
        self.bn1.visit_mut(&join(prefix, "bn1"), out);
        self.dense2.visit_mut(&join(prefix, "dense2"), out);
        self.bn2.visit_mut(&join(prefix, "bn2"), out);
        self.dense3.visit_mut(&join(prefix, "dense3"), out);
    }
}

impl StateDict for ClassifierHead {
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        bn_buffers(&self.bn1, &join(prefix, "bn1"), out);
        bn_buffers(&self.bn2, &join(prefix, "bn2"), out);
    }
    fn visit_state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        self.dense1.visit_mut(&join(prefix, "dense1"), out);
        bn_state_mut(&mut self.bn1, &join(prefix, "bn1"), out);
        self.dense2.visit_mut(&join(prefix, "dense2"), out);
        bn_state_mut(&mut self.bn2, &join(prefix, "bn2"), out);
        self.dense3.visit_mut(&join(prefix, "dense3"), out);
    }
}

/// Largest relative discrepancy `|a − n| / max(|a| + |n|, floor)` between
/// analytic gradients and central differences over a set of coordinates.
/// Each coordinate is scored at `step`, `step / 10` and `step / 100` and keeps
/// its smallest error.
pub fn gradient_check<M, F>(model: &M, analytic: &M, loss: F, step: f64, coords: &[(usize, usize)]) -> f64
where
    M: Params<f64> + Clone,
    F: Fn(&M) -> f64,
{
    let grads = analytic.named_params();
    let mut worst = 0.0f64;
    for &(tensor, elem) in coords {
        let a = grads[tensor].1.iter().nth(elem).copied().unwrap();
        let shifted = |delta: f64| {
            let mut m = model.clone();
            let mut params = m.named_params_mut();
            *params[tensor].1.iter_mut().nth(elem).unwrap() += delta;
            drop(params);
            loss(&m)
        };
        let err = [step, step / 10.0, step / 100.0]
            .into_iter()
            .map(|h| {
                let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-7)
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(err);
    }
    worst
}

/// Deterministic sample of `(tensor, element)` coordinates covering every tensor.
pub fn sample_coords<M: Params<f64>>(model: &M, per_tensor: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .named_params()
        .iter()
        .enumerate()
        .flat_map(|(i, (_, p))| {
            let n = p.len();
            (0..per_tensor.min(n))
                .map(|_| (i, rng.random_range(0..n)))
                .collect::<Vec<_>>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BlockSpec;

    fn rand2(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_head_outputs_half() {
        let head = ClassifierHead::zeros();
        let v = ClassificationVector {
            values: vec![0.7; 512],
            provenance: BlockSpec::new(6, 100),
        };
        assert_eq!(head.predict(&v, Mode::Eval).unwrap(), 0.5);
        let head = ClassifierHead::new(3);
        let a = head.predict(&v, Mode::Eval).unwrap();
        assert_eq!(a, head.predict(&v, Mode::Eval).unwrap());
        assert!(a > 0.0 && a < 1.0);
        let short = ClassificationVector {
            values: vec![0.0; 100],
            provenance: BlockSpec::new(6, 100),
        };
        assert!(head.predict(&short, Mode::Eval).is_err());
    }

    #[test]
    fn single_active_feature_closed_form() {
        // one path: x[7] → unit 0 → unit 0 → output; eval BN with default stats
        let mut head = ClassifierHead::zeros();
        head.dense1.weight[[0, 7]] = 0.8;
        head.dense1.bias[0] = 0.1;
        head.dense2.weight[[0, 0]] = -1.5;
        head.dense2.bias[0] = 2.0;
        head.dense3.weight[[0, 0]] = 0.9;
        head.dense3.bias[0] = -0.3;
        let mut values = vec![0.0f32; 512];
        values[7] = 1.25;
        let v = ClassificationVector {
            values,
            provenance: BlockSpec::new(4, 0),
        };
        let bn = 1.0 / (1.0f64 + 1e-5).sqrt();
        let h1 = ((0.8 * 1.25 + 0.1) * bn).max(0.0);
        let h2 = ((-1.5 * h1 + 2.0) * bn).max(0.0);
        let z = 0.9 * h2 - 0.3;
        let want = 1.0 / (1.0 + (-z).exp());
        assert!((head.predict(&v, Mode::Eval).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = ClassifierHead::new(1);
        let x = rand2(&mut rng, 12, CLS_DIM);
        let labels: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let masks = DropoutMasks::sample(&mut rng, 12);
        let (_, g, _) = head.loss_grad(&x.view(), &labels, &masks);
        let coords = sample_coords(&head, 6, 2);
        let err = gradient_check(&head, &g, |m| m.loss_grad(&x.view(), &labels, &masks).0, 1e-4, &coords);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn pixel_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mlp = PixelMlp::new(7, 16, 4);
        let x = rand2(&mut rng, 20, 7);
        let labels: Vec<u8> = (0..20).map(|i| (i % 5) as u8).collect();
        let (_, g, _) = mlp.loss_grad(&x.view(), &labels);
        let coords = sample_coords(&mlp, 6, 3);
        let err = gradient_check(&mlp, &g, |m| m.loss_grad(&x.view(), &labels).0, 1e-4, &coords);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = PixelMlp::new(6, 8, 1);
        let x = rand2(&mut rng, 16, 6);
        let labels: Vec<u8> = (0..16).map(|i| (i % 5) as u8).collect();
        let (_, mut g, _) = mlp.loss_grad(&x.view(), &labels);
        let coords = sample_coords(&mlp, 4, 3);
        let (t, e) = coords[0];
        *g.named_params_mut()[t].1.iter_mut().nth(e).unwrap() *= 1.5;
        let err = gradient_check(&mlp, &g, |m| m.loss_grad(&x.view(), &labels).0, 1e-4, &coords);
        assert!(err > 0.1, "relative error {err}");
    }

    #[test]
    fn identical_members_equal_single_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ens = SegmentationEnsemble::new(6, 8, &[5; 5]).unwrap();
        let x = rand2(&mut rng, 10, 6);
        let single = softmax_rows(&ens.members[0].forward_eval(&x.view()));
        let avg = ens.predict_proba_rows(&x.view());
        for (a, b) in avg.iter().zip(single.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in avg.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_built_two_pixel_argmax() {
        // members: dense3 reads bn2 output; make every hidden unit pass-through
        let mut ens = SegmentationEnsemble::new(2, 2, &[0, 1, 2, 3, 4]).unwrap();
        for m in ens.members.iter_mut() {
            m.dense1.weight = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
            m.dense1.bias.fill(0.0);
            m.dense2.weight = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
            m.dense2.bias.fill(0.0);
            m.dense3.weight = ndarray::arr2(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [-1.0, -1.0]]);
            m.dense3.bias.fill(0.0);
        }
        let pixels = [[2.0f32, 0.5], [0.1, 3.0]];
        let data = Array3::from_shape_fn((1, 2, 2), |(_, x, f)| pixels[x][f]);
        let fm = PixelFeatureMap {
            data,
            provenance: vec![BlockSpec::new(6, 100)],
        };
        let out = ens.predict(&fm).unwrap();
        // scalar oracle
        let bn = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (x, p) in pixels.iter().enumerate() {
            let h: Vec<f64> = p.iter().map(|&v| ((v as f64).max(0.0) * bn).max(0.0) * bn).collect();
            let logits = [0.0, h[0], h[1], 0.0, -h[0] - h[1]];
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            assert_eq!(out.classes[[0, x]], argmax_low(&probs));
            for c in 0..5 {
                assert!((out.probabilities[[0, x, c]] - probs[c]).abs() < 1e-12);
            }
        }
        assert_eq!(out.classes[[0, 0]], 1);
        assert_eq!(out.classes[[0, 1]], 2);
        let wrong = PixelFeatureMap {
            data: Array3::zeros((1, 1, 3)),
            provenance: vec![],
        };
        assert!(ens.predict(&wrong).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(argmax_low(&[0.2, 0.4, 0.4, 0.0, 0.0]), 1);
        assert_eq!(argmax_low(&[0.2; 5]), 0);
        assert_eq!(argmax_low(&[0.1, 0.1, 0.1, 0.35, 0.35]), 3);
    }

    #[test]
    fn eval_is_pure_and_train_uses_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let head = ClassifierHead::new(2);
        let x = rand2(&mut rng, 4, CLS_DIM);
        let a = head.predict_batch(&x.view(), Mode::Eval).unwrap();
        assert_eq!(a, head.predict_batch(&x.view(), Mode::Eval).unwrap());
        let t1 = head.predict_batch(&x.view(), Mode::Train { seed: 1 }).unwrap();
        let t2 = head.predict_batch(&x.view(), Mode::Train { seed: 2 }).unwrap();
        assert_eq!(t1, head.predict_batch(&x.view(), Mode::Train { seed: 1 }).unwrap());
        assert_ne!(t1, t2);
    }

    #[test]
    fn state_covers_buffers() {
        let mut head = ClassifierHead::new(0);
        let names: Vec<String> = head.state().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"bn2.running_var".to_string()));
        assert_eq!(names.len(), head.state_mut().len());
    }
}
