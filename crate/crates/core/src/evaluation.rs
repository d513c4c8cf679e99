//! Metrics, skin-tone stratification, the block × timestep ablation harness and
//! K-means diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BlockSpec, DecoderActivation};
use crate::datasets::{select, SampleRecord, Split, Subset, SubsetPlan, ToneBin, CLASS_NAMES};
use crate::error::{param, Error, Result};
use crate::features::{segmentation_features, stack_vectors};
use crate::probes::{ClassifierHead, Mode, SegmentationEnsemble, NUM_CLASSES};
use crate::training::{classification_features, epsilon_seed, fit_classifier, SegOptions, TrainConfig};

/// Per-class intersection / prediction / truth pixel counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub intersection: [u64; NUM_CLASSES],
    pub predicted: [u64; NUM_CLASSES],
    pub truth: [u64; NUM_CLASSES],
}

impl Confusion {
    pub fn from_maps(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<Self> {
        if pred.dim() != truth.dim() {
            return param(format!("prediction shape {:?} != truth shape {:?}", pred.dim(), truth.dim()));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            let (p, t) = (p as usize, t as usize);
            if p >= NUM_CLASSES || t >= NUM_CLASSES {
                return param(format!("class index {} out of range", p.max(t)));
            }
            c.predicted[p] += 1;
            c.truth[t] += 1;
            if p == t {
                c.intersection[p] += 1;
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Confusion) {
        for k in 0..NUM_CLASSES {
            self.intersection[k] += other.intersection[k];
            self.predicted[k] += other.predicted[k];
            self.truth[k] += other.truth[k];
        }
    }

    pub fn iou(&self) -> IouReport {
        let per_class: [Option<f64>; NUM_CLASSES] = std::array::from_fn(|k| {
            let union = self.predicted[k] + self.truth[k] - self.intersection[k];
            (union > 0).then(|| self.intersection[k] as f64 / union as f64)
        });
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        IouReport {
            per_class,
            mean: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` when the class is absent from both maps.
    pub per_class: [Option<f64>; NUM_CLASSES],
    /// Mean over the defined classes.
    pub mean: Option<f64>,
}

impl IouReport {
    pub fn lesion(&self) -> Option<f64> {
        self.per_class[crate::datasets::LESION as usize]
    }
}

pub fn compute_iou(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<IouReport> {
    Ok(Confusion::from_maps(pred, truth)?.iou())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRule {
    /// Maximizes TPR − FPR.
    #[default]
    Youden,
    /// Maximizes accuracy.
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    pub threshold: f64,
    pub accuracy: f64,
    pub f1: f64,
    /// `(false-positive rate, true-positive rate)` from `(0,0)` to `(1,1)`.
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Counts {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

impl Counts {
    fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Counts { tp: 0, fp: 0, tn: 0, fn_: 0 };
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.tn + self.fp + self.fn_) as f64
    }

    fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }
}

/// Accuracy and F1 of the rule `score ≥ threshold`.
pub fn accuracy_f1_at(scores: &[f64], labels: &[bool], threshold: f64) -> Option<(f64, f64)> {
    if scores.is_empty() {
        return None;
    }
    let c = Counts::at(scores, labels, threshold);
    Some((c.accuracy(), c.f1()))
}

/// Rank-based AUC (ties count one half), ROC curve and the best threshold over
/// the observed scores (predict positive when `score ≥ threshold`; among equal
/// objective values the highest threshold wins).
pub fn compute_roc_auc(scores: &[f64], labels: &[bool], rule: ThresholdRule) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return param(format!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return param(format!("score {s} is not a number"));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // walk thresholds from high to low, one group of equal scores at a time
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area2 = 0u128; // twice the trapezoid area in count units
    let mut curve = vec![(0.0, 0.0)];
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += ((fp - fp0) * (tp + tp0)) as u128;
        curve.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        let objective = match rule {
            ThresholdRule::Youden => tp as f64 / pos as f64 - fp as f64 / neg as f64,
            ThresholdRule::Accuracy => (tp + neg - fp) as f64,
        };
        if best.is_none_or(|(b, _)| objective > b) {
            best = Some((objective, s));
        }
    }
    let auc = area2 as f64 / (2.0 * pos as f64 * neg as f64);
    let threshold = best.unwrap().1;
    let c = Counts::at(scores, labels, threshold);
    Ok(RocResult {
        auc,
        threshold,
        accuracy: c.accuracy(),
        f1: c.f1(),
        curve,
    })
}

/// One evaluated sample. Classification fields and segmentation counts are
/// independent; either may be absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub tone_bin: ToneBin,
    pub malignant: Option<bool>,
    pub score: Option<f64>,
    pub confusion: Option<Confusion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub samples: usize,
    pub iou: Option<IouReport>,
    /// `None` when the group holds a single class.
    pub auc: Option<f64>,
    /// Threshold used for the `*_best` fields (the overall best threshold).
    pub threshold: Option<f64>,
    pub accuracy_best: Option<f64>,
    pub f1_best: Option<f64>,
    pub accuracy_half: Option<f64>,
    pub f1_half: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: GroupMetrics,
    /// `None` marks a bin without samples.
    pub per_tone: BTreeMap<ToneBin, Option<GroupMetrics>>,
    pub rule: ThresholdRule,
    #[serde(skip)]
    pub roc: Option<RocResult>,
}

fn group_metrics(results: &[&SampleResult], threshold: Option<f64>) -> GroupMetrics {
    let mut conf: Option<Confusion> = None;
    for r in results {
        if let Some(c) = &r.confusion {
            conf.get_or_insert_with(Confusion::default).merge(c);
        }
    }
    let (scores, labels): (Vec<f64>, Vec<bool>) = results
        .iter()
        .filter_map(|r| Some((r.score?, r.malignant?)))
        .unzip();
    let auc = compute_roc_auc(&scores, &labels, ThresholdRule::Youden).ok().map(|r| r.auc);
    let best = threshold.and_then(|t| accuracy_f1_at(&scores, &labels, t));
    let half = accuracy_f1_at(&scores, &labels, 0.5);
    GroupMetrics {
        samples: results.len(),
        iou: conf.map(|c| c.iou()),
        auc,
        threshold: best.and(threshold),
        accuracy_best: best.map(|b| b.0),
        f1_best: best.map(|b| b.1),
        accuracy_half: half.map(|b| b.0),
        f1_half: half.map(|b| b.1),
    }
}

/// Overall and per-tone metrics. The best threshold is chosen once on the full
/// set and applied to every bin.
pub fn stratify_report(results: &[SampleResult], rule: ThresholdRule) -> MetricsReport {
    let (scores, labels): (Vec<f64>, Vec<bool>) = results
        .iter()
        .filter_map(|r| Some((r.score?, r.malignant?)))
        .unzip();
    let roc = compute_roc_auc(&scores, &labels, rule).ok();
    let threshold = roc.as_ref().map(|r| r.threshold);
    let all: Vec<&SampleResult> = results.iter().collect();
    let per_tone = ToneBin::ALL
        .into_iter()
        .map(|t| {
            let group: Vec<&SampleResult> = results.iter().filter(|r| r.tone_bin == t).collect();
            (t, (!group.is_empty()).then(|| group_metrics(&group, threshold)))
        })
        .collect();
    MetricsReport {
        overall: group_metrics(&all, threshold),
        per_tone,
        rule,
        roc,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,samples,auc,threshold,accuracy_best,f1_best,accuracy_0.5,f1_0.5,mean_iou");
        for name in CLASS_NAMES {
            write!(out, ",iou_{name}").unwrap();
        }
        out.push('\n');
        let mut row = |name: &str, g: Option<&GroupMetrics>| {
            let Some(g) = g else {
                out.push_str(name);
                out.push_str(",0");
                for _ in 0..(7 + NUM_CLASSES) {
                    out.push_str(",absent");
                }
                out.push('\n');
                return;
            };
            write!(
                out,
                "{name},{},{},{},{},{},{},{},{}",
                g.samples,
                cell(g.auc),
                cell(g.threshold),
                cell(g.accuracy_best),
                cell(g.f1_best),
                cell(g.accuracy_half),
                cell(g.f1_half),
                cell(g.iou.and_then(|i| i.mean)),
            )
            .unwrap();
            for k in 0..NUM_CLASSES {
                write!(out, ",{}", cell(g.iou.and_then(|i| i.per_class[k]))).unwrap();
            }
            out.push('\n');
        };
        row("all", Some(&self.overall));
        for (t, g) in &self.per_tone {
            row(t.label(), g.as_ref());
        }
        out
    }
}

/// Scores every sample with the classifier head (eval mode).
pub fn evaluate_classifier(
    backbone: &Backbone,
    head: &ClassifierHead,
    spec: BlockSpec,
    samples: &[&SampleRecord],
    run_seed: u64,
) -> Result<Vec<SampleResult>> {
    let feats = classification_features(backbone, samples, &[spec.block], spec.timestep, run_seed)?;
    let probs = head.predict_batch(&stack_vectors(&feats[0]).view(), Mode::Eval)?;
    Ok(samples
        .iter()
        .zip(probs.iter())
        .map(|(r, &p)| SampleResult {
            id: r.id.clone(),
            tone_bin: r.tone_bin,
            malignant: Some(r.malignant),
            score: Some(p),
            confusion: None,
        })
        .collect())
}

/// Segments every masked sample and records its confusion counts.
pub fn evaluate_segmentation(
    backbone: &Backbone,
    ensemble: &SegmentationEnsemble,
    opts: &SegOptions,
    samples: &[&SampleRecord],
    run_seed: u64,
) -> Result<Vec<SampleResult>> {
    let res = backbone.descriptor().input_resolution;
    let out = crate::training::feature_resolution(backbone, opts);
    samples
        .par_iter()
        .map(|r| {
            let truth = r.load_mask(out)?;
            let acts = backbone.collect_activations(&r.load_image(res)?, &opts.blocks, epsilon_seed(run_seed, &r.id))?;
            let pred = ensemble.predict(&segmentation_features(&acts, out)?)?;
            Ok(SampleResult {
                id: r.id.clone(),
                tone_bin: r.tone_bin,
                malignant: Some(r.malignant),
                score: None,
                confusion: Some(Confusion::from_maps(&pred.classes, &truth)?),
            })
        })
        .collect()
}

/// The ablation timestep axis: 0, 50, …, 1000.
pub fn ablation_timesteps() -> Vec<usize> {
    (0..=1000).step_by(50).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub blocks: Vec<usize>,
    /// Columns to evaluate; must be drawn from [`ablation_timesteps`].
    pub timesteps: Vec<usize>,
    pub subsets: Vec<Subset>,
    pub eval_split: Split,
    pub workers: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            blocks: (1..=18).collect(),
            timesteps: ablation_timesteps(),
            subsets: Subset::ALL.to_vec(),
            eval_split: Split::Test,
            workers: 1,
        }
    }
}

/// Accuracy (at 0.5) per (block, timestep) cell for one training subset. Always
/// 21 columns; cells that were not requested or failed are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub subset: Subset,
    pub blocks: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub auc: Vec<Vec<Option<f64>>>,
    pub seed: u64,
    pub weights_fingerprint: String,
}

impl AblationGrid {
    pub fn best_cell(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in self.accuracy.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    if best.is_none_or(|b| v > b.2) {
                        best = Some((self.blocks[i], self.timesteps[j], v));
                    }
                }
            }
        }
        best
    }

    fn table(&self, grid: &[Vec<Option<f64>>]) -> String {
        let mut out = String::from("block");
        for t in &self.timesteps {
            write!(out, ",t{t}").unwrap();
        }
        out.push('\n');
        for (b, row) in self.blocks.iter().zip(grid) {
            write!(out, "{b}").unwrap();
            for v in row {
                out.push(',');
                out.push_str(&v.map_or_else(String::new, |x| format!("{x:.6}")));
            }
            out.push('\n');
        }
        out
    }

    pub fn accuracy_csv(&self) -> String {
        self.table(&self.accuracy)
    }

    pub fn auc_csv(&self) -> String {
        self.table(&self.auc)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = self.subset.percent();
        std::fs::write(dir.join(format!("ablation_s{p}_accuracy.csv")), self.accuracy_csv())?;
        std::fs::write(dir.join(format!("ablation_s{p}_auc.csv")), self.auc_csv())?;
        std::fs::write(dir.join(format!("ablation_s{p}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Trains and evaluates one classifier per (block, timestep, subset) cell.
/// Features for a timestep come from one forward pass per sample. Cell
/// failures are logged and left empty.
pub fn run_ablation(
    backbone: &Backbone,
    records: &[SampleRecord],
    plan: &SubsetPlan,
    config: &AblationConfig,
    train: &TrainConfig,
) -> Result<Vec<AblationGrid>> {
    let axis = ablation_timesteps();
    if let Some(t) = config.timesteps.iter().find(|t| !axis.contains(t)) {
        return Err(Error::Config(format!("timestep {t} is not on the 0..=1000 step 50 axis")));
    }
    if config.subsets.is_empty() || config.blocks.is_empty() {
        return Err(Error::Config("ablation needs at least one block and one subset".into()));
    }
    for &b in &config.blocks {
        backbone.descriptor().block(b)?;
    }
    let largest = *config.subsets.iter().max().unwrap();
    let train_ids = plan.subset(largest);
    let val = select(records, &plan.validation)?;
    let eval = select(records, plan.split(config.eval_split, largest))?;
    let train_all = select(records, train_ids)?;
    let position: BTreeMap<&str, usize> = train_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut grids: Vec<AblationGrid> = config
        .subsets
        .iter()
        .map(|&s| AblationGrid {
            subset: s,
            blocks: config.blocks.clone(),
            timesteps: axis.clone(),
            accuracy: vec![vec![None; axis.len()]; config.blocks.len()],
            auc: vec![vec![None; axis.len()]; config.blocks.len()],
            seed: train.seed,
            weights_fingerprint: backbone.descriptor().weights_fingerprint.clone(),
        })
        .collect();

    let usable: Vec<usize> = config
        .blocks
        .iter()
        .copied()
        .filter(|&b| {
            let g = backbone.descriptor().block(b).unwrap();
            let ok = g.channels * g.height * g.width >= crate::features::CLS_DIM;
            if !ok {
                warn!("block {b} is too small to pool to 512; its cells stay empty");
            }
            ok
        })
        .collect();

    for &t in &config.timesteps {
        let col = axis.iter().position(|&x| x == t).unwrap();
        let feats = pool.install(|| -> Result<_> {
            Ok((
                classification_features(backbone, &train_all, &usable, t, train.seed)?,
                classification_features(backbone, &val, &usable, t, train.seed)?,
                classification_features(backbone, &eval, &usable, t, train.seed)?,
            ))
        });
        let (ftrain, fval, feval) = match feats {
            Ok(f) => f,
            Err(e) => {
                warn!("timestep {t}: feature extraction failed: {e}");
                continue;
            }
        };
        let jobs: Vec<(usize, usize)> = (0..usable.len())
            .flat_map(|bi| (0..config.subsets.len()).map(move |si| (bi, si)))
            .collect();
        let outcomes: Vec<Result<(f64, Option<f64>)>> = pool.install(|| {
            jobs.par_iter()
                .map(|&(bi, si)| {
                    let subset = config.subsets[si];
                    let ids = plan.subset(subset);
                    let rows: Vec<usize> = ids.iter().map(|id| position[id.as_str()]).collect();
                    let x = stack_vectors(&ftrain[bi]).select(Axis(0), &rows);
                    let y: Vec<f64> = rows.iter().map(|&i| train_all[i].malignant as u8 as f64).collect();
                    let vy: Vec<f64> = val.iter().map(|r| r.malignant as u8 as f64).collect();
                    let cfg = TrainConfig {
                        subset,
                        batch_size: subset.size(),
                        ..train.clone()
                    };
                    let (head, _) = fit_classifier(&x, &y, &stack_vectors(&fval[bi]), &vy, &cfg)?;
                    let probs = head.predict_batch(&stack_vectors(&feval[bi]).view(), Mode::Eval)?;
                    let labels: Vec<bool> = eval.iter().map(|r| r.malignant).collect();
                    let scores = probs.to_vec();
                    let (acc, _) = accuracy_f1_at(&scores, &labels, 0.5)
                        .ok_or_else(|| Error::Config("empty evaluation split".into()))?;
                    let auc = compute_roc_auc(&scores, &labels, ThresholdRule::Youden).ok().map(|r| r.auc);
                    Ok((acc, auc))
                })
                .collect()
        });
        for (&(bi, si), outcome) in jobs.iter().zip(outcomes) {
            let row = config.blocks.iter().position(|&b| b == usable[bi]).unwrap();
            match outcome {
                Ok((acc, auc)) => {
                    grids[si].accuracy[row][col] = Some(acc);
                    grids[si].auc[row][col] = auc;
                }
                Err(e) => warn!("cell block {} t {t} subset {}: {e}", usable[bi], config.subsets[si]),
            }
        }
    }
    Ok(grids)
}

/// Lloyd's K-means over the per-pixel channel vectors of an activation.
/// The first centroid is a seeded random pixel; each further centroid is the
/// pixel farthest from the chosen ones. Stops after 300 iterations or when no
/// centroid moves by more than 1e-4. Returns an `H×W` cluster map.
pub fn kmeans_blocks(act: &DecoderActivation, k: usize, seed: u64) -> Result<Array2<usize>> {
    let (c, h, w) = act.data.dim();
    let n = h * w;
    if k < 2 {
        return param(format!("K must be at least 2, got {k}"));
    }
    if n < k {
        return param(format!("{n} pixels cannot form {k} clusters"));
    }
    let points = Array2::from_shape_fn((n, c), |(i, ch)| act.data[[ch, i / w, i % w]] as f64);
    let labels = lloyd(&points, k, seed, 300, 1e-4);
    Ok(Array2::from_shape_vec((h, w), labels).unwrap())
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lloyd(points: &Array2<f64>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Vec<usize> {
    let n = points.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::<f64>::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut nearest = vec![f64::INFINITY; n];
    for j in 1..k {
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centroids.row(j - 1)));
        }
        let far = (0..n).fold(0, |b, i| if nearest[i] > nearest[b] { i } else { b });
        centroids.row_mut(j).assign(&points.row(far));
    }
    let mut labels = vec![0usize; n];
    for _ in 0..max_iter {
        for (i, l) in labels.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for j in 0..k {
                let d = sq_dist(points.row(i), centroids.row(j));
                if d < best.0 {
                    best = (d, j);
                }
            }
            *l = best.1;
        }
        let mut next = centroids.clone();
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut row = sums.row_mut(l);
            row += &points.row(i);
        }
        for j in 0..k {
            if counts[j] > 0 {
                next.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            }
        }
        let shift = (0..k)
            .map(|j| sq_dist(next.row(j), centroids.row(j)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    labels
}
