//! Head training over frozen-backbone features.
//!
//! Classification features are computed once per sample with a fixed noise
//! draw (see [`epsilon_seed`]) and reused for every epoch. The classifier
//! trains full-batch: the batch is the whole training subset. Segmentation
//! members train on shuffled pixel minibatches. Both stop early on validation
//! loss and return the best-validation weights.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BlockSpec};
use crate::datasets::{SampleRecord, Subset};
use crate::error::{Error, Result};
use crate::features::{pool_to_512, segmentation_features, stack_vectors, ClassificationVector};
use crate::head_io::{Head, HeadCheckpoint};
use crate::nn::Params;
use crate::optim::Adam;
use crate::probes::{
    bce_with_logits, cross_entropy, sigmoid, ClassifierHead, DropoutMasks, PixelMlp, SegmentationEnsemble,
    ENSEMBLE_SIZE, PIXEL_HIDDEN,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub subset: Subset,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_subset(Subset::P5)
    }
}

impl TrainConfig {
    pub fn for_subset(subset: Subset) -> Self {
        Self {
            subset,
            batch_size: subset.size(),
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            max_epochs: 500,
            patience: 20,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size != self.subset.size() {
            problems.push(format!(
                "batch_size {} does not match the {} subset size {}",
                self.batch_size,
                self.subset,
                self.subset.size()
            ));
        }
        if !(self.learning_rate > 0.0) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.weight_decay != 1e-5 {
            problems.push(format!("weight_decay is fixed at 1e-5, got {}", self.weight_decay));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegOptions {
    pub blocks: Vec<BlockSpec>,
    pub member_seeds: Vec<u64>,
    pub hidden: usize,
    pub pixel_batch: usize,
    /// Random subsample of training pixels; `0` keeps all of them.
    pub max_train_pixels: usize,
    pub max_val_pixels: usize,
    /// Side of the per-pixel feature grid; `0` means the backbone input resolution.
    pub feature_resolution: usize,
}

impl Default for SegOptions {
    fn default() -> Self {
        Self {
            blocks: vec![BlockSpec::new(6, 100), BlockSpec::new(8, 100)],
            member_seeds: vec![11, 12, 13, 14, 15],
            hidden: PIXEL_HIDDEN,
            pixel_batch: 1024,
            max_train_pixels: 0,
            max_val_pixels: 20_000,
            feature_resolution: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub member: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Best-validation epoch per member (a single entry for the classifier).
    pub best_epochs: Vec<usize>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["member", "epoch", "train_loss", "val_loss", "train_accuracy", "val_accuracy", "best"])?;
        for e in &self.epochs {
            let best = self.best_epochs.get(e.member) == Some(&e.epoch);
            w.write_record([
                e.member.to_string(),
                e.epoch.to_string(),
                format!("{:.9}", e.train_loss),
                format!("{:.9}", e.val_loss),
                format!("{:.6}", e.train_accuracy),
                format!("{:.6}", e.val_accuracy),
                (best as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stable per-sample noise seed: depends only on the run seed and sample id.
pub fn epsilon_seed(run_seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Pooled 512-vectors for every requested block at one timestep, one forward
/// pass per sample. Returns `[block][sample]`.
pub fn classification_features(
    backbone: &Backbone,
    samples: &[&SampleRecord],
    blocks: &[usize],
    timestep: usize,
    run_seed: u64,
) -> Result<Vec<Vec<ClassificationVector>>> {
    let res = backbone.descriptor().input_resolution;
    let specs: Vec<BlockSpec> = blocks.iter().map(|&b| BlockSpec::new(b, timestep)).collect();
    let per_sample = samples
        .par_iter()
        .map(|r| {
            let x = r.load_image(res)?;
            let acts = backbone.collect_activations(&x, &specs, epsilon_seed(run_seed, &r.id))?;
            acts.iter().map(pool_to_512).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..blocks.len())
        .map(|b| per_sample.iter().map(|v| v[b].clone()).collect())
        .collect())
}

fn labels_of(samples: &[&SampleRecord]) -> Vec<f64> {
    samples.iter().map(|r| r.malignant as u8 as f64).collect()
}

/// Mean BCE and accuracy at 0.5 in eval mode.
pub fn classifier_loss_accuracy(head: &ClassifierHead, x: &ArrayView2<f64>, labels: &[f64]) -> (f64, f64) {
    if labels.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let logits = head.logits_eval(x);
    let (loss, _) = bce_with_logits(&logits, labels);
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(&z, &y)| (sigmoid(z) >= 0.5) == (y >= 0.5))
        .count();
    (loss, correct as f64 / labels.len() as f64)
}

/// Trains a classifier head on precomputed `N × 512` features.
pub fn fit_classifier(
    train_x: &Array2<f64>,
    train_y: &[f64],
    val_x: &Array2<f64>,
    val_y: &[f64],
    config: &TrainConfig,
) -> Result<(ClassifierHead, History)> {
    config.validate()?;
    if train_x.nrows() != config.batch_size {
        return Err(Error::Config(format!(
            "training set has {} samples but batch_size is {}",
            train_x.nrows(),
            config.batch_size
        )));
    }
    let mut head = ClassifierHead::new(config.seed);
    let mut opt = Adam::new(config.learning_rate, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d40f);
    let monitor = |h: &ClassifierHead| {
        let (tl, ta) = classifier_loss_accuracy(h, &train_x.view(), train_y);
        let (vl, va) = classifier_loss_accuracy(h, &val_x.view(), val_y);
        EpochRecord {
            member: 0,
            epoch: 0,
            train_loss: tl,
            val_loss: vl,
            train_accuracy: ta,
            val_accuracy: va,
        }
    };
    let mut history = History::default();
    history.epochs.push(monitor(&head));
    let score = |e: &EpochRecord| if val_y.is_empty() { e.train_loss } else { e.val_loss };
    let mut best = (score(&history.epochs[0]), 0usize, head.clone());
    for epoch in 1..=config.max_epochs {
        let masks = DropoutMasks::sample(&mut rng, train_x.nrows());
        let (_, grad, cache) = head.loss_grad(&train_x.view(), train_y, &masks);
        head.update_running(&cache);
        opt.step(
            head.named_params_mut().into_iter().map(|(_, p)| p).collect(),
            grad.named_params().into_iter().map(|(_, g)| g).collect(),
        );
        let mut rec = monitor(&head);
        rec.epoch = epoch;
        history.epochs.push(rec);
        if score(&rec) < best.0 {
            best = (score(&rec), epoch, head.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    history.best_epochs = vec![best.1];
    Ok((best.2, history))
}

/// Extracts pooled features for `spec` and trains a classifier.
pub fn train_classifier(
    backbone: &Backbone,
    spec: BlockSpec,
    train: &[&SampleRecord],
    val: &[&SampleRecord],
    config: &TrainConfig,
) -> Result<(ClassifierHead, History)> {
    config.validate()?;
    backbone.descriptor().check_spec(spec)?;
    if train.len() != config.batch_size {
        return Err(Error::Config(format!(
            "subset has {} samples but batch_size is {}",
            train.len(),
            config.batch_size
        )));
    }
    let feats = |s: &[&SampleRecord]| -> Result<Array2<f64>> {
        let v = classification_features(backbone, s, &[spec.block], spec.timestep, config.seed)?;
        Ok(stack_vectors(&v[0]))
    };
    fit_classifier(&feats(train)?, &labels_of(train), &feats(val)?, &labels_of(val), config)
}

/// Per-pixel features and labels of a set of masked samples, `(N·H·W) × D`.
#[derive(Debug, Clone)]
pub struct PixelSet {
    pub x: Array2<f64>,
    pub y: Vec<u8>,
}

impl PixelSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn subsample(self, cap: usize, rng: &mut ChaCha8Rng) -> Self {
        if cap == 0 || self.len() <= cap {
            return self;
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.truncate(cap);
        idx.sort_unstable();
        Self {
            x: self.x.select(Axis(0), &idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

pub fn feature_resolution(backbone: &Backbone, opts: &SegOptions) -> usize {
    if opts.feature_resolution == 0 {
        backbone.descriptor().input_resolution
    } else {
        opts.feature_resolution
    }
}

pub fn pixel_features(
    backbone: &Backbone,
    samples: &[&SampleRecord],
    opts: &SegOptions,
    run_seed: u64,
) -> Result<PixelSet> {
    let res = backbone.descriptor().input_resolution;
    let out = feature_resolution(backbone, opts);
    let parts = samples
        .par_iter()
        .map(|r| {
            if r.mask_path.is_none() {
                return Err(Error::Data {
                    id: r.id.clone(),
                    reason: "segmentation sample has no mask".into(),
                });
            }
            let mask = r.load_mask(out)?;
            let x = r.load_image(res)?;
            let fm = segmentation_features(
                &backbone.collect_activations(&x, &opts.blocks, epsilon_seed(run_seed, &r.id))?,
                out,
            )?;
            Ok((fm.pixels().mapv(|v| v as f64), mask.into_iter().collect::<Vec<u8>>()))
        })
        .collect::<Result<Vec<_>>>()?;
    let d = parts.first().map_or(0, |p| p.0.ncols());
    let views: Vec<_> = parts.iter().map(|p| p.0.view()).collect();
    let x = if views.is_empty() {
        Array2::zeros((0, d))
    } else {
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Param(e.to_string()))?
    };
    Ok(PixelSet {
        x,
        y: parts.into_iter().flat_map(|p| p.1).collect(),
    })
}

fn pixel_loss_accuracy(m: &PixelMlp, set: &PixelSet) -> (f64, f64) {
    if set.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for start in (0..set.len()).step_by(8192) {
        let end = (start + 8192).min(set.len());
        let logits = m.forward_eval(&set.x.slice(s![start..end, ..]));
        let (l, _) = cross_entropy(&logits, &set.y[start..end]);
        loss += l * (end - start) as f64;
        for (row, &y) in logits.rows().into_iter().zip(&set.y[start..end]) {
            correct += (crate::probes::argmax_low(row.as_slice().unwrap()) == y) as usize;
        }
    }
    (loss / set.len() as f64, correct as f64 / set.len() as f64)
}

fn fit_member(
    index: usize,
    seed: u64,
    train: &PixelSet,
    val: &PixelSet,
    config: &TrainConfig,
    opts: &SegOptions,
) -> (PixelMlp, Vec<EpochRecord>, usize) {
    let mut m = PixelMlp::new(train.x.ncols(), opts.hidden, seed);
    let mut opt = Adam::new(config.learning_rate, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = opts.pixel_batch.max(2);
    let record = |m: &PixelMlp, epoch: usize, train_loss: Option<f64>| {
        let (tl, ta) = pixel_loss_accuracy(m, train);
        let (vl, va) = pixel_loss_accuracy(m, val);
        EpochRecord {
            member: index,
            epoch,
            train_loss: train_loss.unwrap_or(tl),
            val_loss: vl,
            train_accuracy: ta,
            val_accuracy: va,
        }
    };
    let mut epochs = vec![record(&m, 0, None)];
    let score = |e: &EpochRecord| if val.is_empty() { e.train_loss } else { e.val_loss };
    let mut best = (score(&epochs[0]), 0usize, m.clone());
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch) {
            // a single-row batch has no batch statistics
            if chunk.len() < 2 {
                continue;
            }
            let x = train.x.select(Axis(0), chunk);
            let y: Vec<u8> = chunk.iter().map(|&i| train.y[i]).collect();
            let (loss, grad, cache) = m.loss_grad(&x.view(), &y);
            m.update_running(&cache);
            opt.step(
                m.named_params_mut().into_iter().map(|(_, p)| p).collect(),
                grad.named_params().into_iter().map(|(_, g)| g).collect(),
            );
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let rec = record(&m, epoch, Some(loss_sum / seen.max(1) as f64));
        epochs.push(rec);
        if score(&rec) < best.0 {
            best = (score(&rec), epoch, m.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    (best.2, epochs, best.1)
}

/// Trains the five-member ensemble on precomputed pixel sets.
pub fn fit_segmentation(
    train: PixelSet,
    val: PixelSet,
    config: &TrainConfig,
    opts: &SegOptions,
) -> Result<(SegmentationEnsemble, History)> {
    if opts.member_seeds.len() != ENSEMBLE_SIZE {
        return Err(Error::Config(format!(
            "member_seeds must list {ENSEMBLE_SIZE} seeds, got {}",
            opts.member_seeds.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::Config("no training pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train = train.subsample(opts.max_train_pixels, &mut rng);
    let val = val.subsample(opts.max_val_pixels, &mut rng);
    let fitted: Vec<_> = opts
        .member_seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| fit_member(i, seed, &train, &val, config, opts))
        .collect();
    let mut history = History::default();
    let mut members = Vec::with_capacity(ENSEMBLE_SIZE);
    for (m, epochs, best) in fitted {
        members.push(m);
        history.epochs.extend(epochs);
        history.best_epochs.push(best);
    }
    Ok((
        SegmentationEnsemble {
            members,
            member_seeds: opts.member_seeds.clone(),
        },
        history,
    ))
}

/// Extracts per-pixel features for the block specs in `opts` and trains the ensemble.
pub fn train_segmentation(
    backbone: &Backbone,
    train: &[&SampleRecord],
    val: &[&SampleRecord],
    config: &TrainConfig,
    opts: &SegOptions,
) -> Result<(SegmentationEnsemble, History)> {
    if opts.blocks.is_empty() {
        return Err(Error::Config("segmentation needs at least one block".into()));
    }
    for b in &opts.blocks {
        backbone.descriptor().check_spec(*b)?;
    }
    let train_set = pixel_features(backbone, train, opts, config.seed)?;
    let val_set = pixel_features(backbone, val, opts, config.seed)?;
    fit_segmentation(train_set, val_set, config, opts)
}

/// Writes `config.toml`-style snapshot text, `history.csv` and `head.bin` into `dir`.
pub fn save_run(dir: &Path, snapshot: &str, history: &History, checkpoint: &HeadCheckpoint) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), snapshot)?;
    history.write_csv(&dir.join("history.csv"))?;
    checkpoint.save(&dir.join("head.bin"))?;
    Ok(())
}

pub fn classifier_checkpoint(head: ClassifierHead, spec: BlockSpec) -> HeadCheckpoint {
    HeadCheckpoint {
        head: Head::Classifier(head),
        provenance: vec![spec],
    }
}

pub fn segmentation_checkpoint(ens: SegmentationEnsemble, blocks: &[BlockSpec]) -> HeadCheckpoint {
    HeadCheckpoint {
        head: Head::Segmentation(ens),
        provenance: blocks.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::CLS_DIM;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let x = Array2::from_shape_fn((n, CLS_DIM), |(i, j)| {
            let shift = if j < 8 { 2.0 * y[i] - 1.0 } else { 0.0 };
            shift + rng.random_range(-0.5..0.5)
        });
        (x, y)
    }

    #[test]
    fn batch_must_match_subset() {
        let mut c = TrainConfig::for_subset(Subset::P5);
        assert!(c.validate().is_ok());
        c.batch_size = 60;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("30"), "{err}");
        let c = TrainConfig::for_subset(Subset::P20);
        assert_eq!(c.batch_size, 120);
        let (x, y) = separable(20, 0);
        assert!(matches!(
            fit_classifier(&x, &y, &x, &y, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (x, y) = separable(30, 1);
        let c = TrainConfig {
            max_epochs: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let (head, hist) = fit_classifier(&x, &y, &x, &y, &c).unwrap();
        assert_eq!(head, ClassifierHead::new(4));
        assert_eq!(hist.epochs.len(), 1);
    }

    #[test]
    fn classifier_learns_and_keeps_best() {
        let (x, y) = separable(30, 2);
        let (vx, vy) = separable(30, 3);
        let c = TrainConfig {
            seed: 5,
            ..TrainConfig::default()
        };
        let (head, hist) = fit_classifier(&x, &y, &vx, &vy, &c).unwrap();
        let best = hist.best_epochs[0];
        let min_val = hist.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(hist.epochs[best].val_loss, min_val);
        let (tl, ta) = classifier_loss_accuracy(&head, &x.view(), &y);
        assert!(tl < hist.epochs[0].train_loss);
        assert!(ta >= 0.95);
        let (again, hist2) = fit_classifier(&x, &y, &vx, &vy, &c).unwrap();
        assert_eq!(again, head);
        assert_eq!(hist2, hist);
    }

    #[test]
    fn identical_member_seeds_give_identical_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 300;
        let y: Vec<u8> = (0..n).map(|i| (i % 5) as u8).collect();
        let x = Array2::from_shape_fn((n, 6), |(i, j)| (j == y[i] as usize) as u8 as f64 + rng.random_range(-0.3..0.3));
        let opts = SegOptions {
            member_seeds: vec![9; 5],
            hidden: 16,
            pixel_batch: 64,
            ..SegOptions::default()
        };
        let c = TrainConfig {
            max_epochs: 15,
            ..TrainConfig::default()
        };
        let set = || PixelSet { x: x.clone(), y: y.clone() };
        let (ens, hist) = fit_segmentation(set(), set(), &c, &opts).unwrap();
        assert!(ens.members.iter().all(|m| *m == ens.members[0]));
        let last = hist.epochs.iter().filter(|e| e.member == 0).last().unwrap();
        assert!(last.train_accuracy > 0.9, "{last:?}");
    }

    #[test]
    fn epsilon_seed_is_stable_and_distinct() {
        assert_eq!(epsilon_seed(1, "a"), epsilon_seed(1, "a"));
        assert_ne!(epsilon_seed(1, "a"), epsilon_seed(2, "a"));
        assert_ne!(epsilon_seed(1, "a"), epsilon_seed(1, "b"));
    }

    #[test]
    fn sample_without_mask_is_named() {
        let backbone = Backbone::toy(32, 8, 0).unwrap();
        let mut rec = crate::datasets::ddi_shaped_records().remove(3);
        rec.mask_path = None;
        let err = pixel_features(&backbone, &[&rec], &SegOptions::default(), 0).unwrap_err();
        assert!(err.to_string().contains(&rec.id), "{err}");
    }

    #[test]
    fn history_csv_has_best_marker() {
        let (x, y) = separable(30, 8);
        let c = TrainConfig {
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let (_, hist) = fit_classifier(&x, &y, &x, &y, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        hist.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("member,epoch,train_loss"));
        assert_eq!(text.lines().filter(|l| l.ends_with(",1")).count(), 1);
    }
}
