//! Run-directory artifacts derived from persisted per-sample predictions.
//!
//! Training and evaluation write `predictions_<split>.csv`; every table and plot
//! is then rendered from those files alone, so re-rendering a run directory
//! reproduces them byte for byte.

use std::path::{Path, PathBuf};

use image::Rgb;
use serde::{Deserialize, Serialize};

use crate::datasets::ToneBin;
use crate::error::{Error, Result};
use crate::evaluation::{compute_roc_auc, stratify_report, AblationGrid, Confusion, SampleResult, ThresholdRule};
use crate::plots;
use crate::probes::NUM_CLASSES;

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    tone_bin: ToneBin,
    malignant: Option<u8>,
    score: Option<f64>,
    counts: Option<String>,
}

fn encode_counts(c: &Confusion) -> String {
    c.intersection
        .iter()
        .chain(&c.predicted)
        .chain(&c.truth)
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

fn decode_counts(s: &str) -> Result<Confusion> {
    let v = s
        .split_whitespace()
        .map(|x| x.parse::<u64>().map_err(|e| Error::Param(format!("bad count {x:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != 3 * NUM_CLASSES {
        return Err(Error::Param(format!("expected {} counts, found {}", 3 * NUM_CLASSES, v.len())));
    }
    let take = |k: usize| std::array::from_fn(|i| v[k * NUM_CLASSES + i]);
    Ok(Confusion {
        intersection: take(0),
        predicted: take(1),
        truth: take(2),
    })
}

pub fn write_predictions(path: &Path, results: &[SampleResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        w.serialize(Row {
            id: r.id.clone(),
            tone_bin: r.tone_bin,
            malignant: r.malignant.map(u8::from),
            score: r.score,
            counts: r.confusion.as_ref().map(encode_counts),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<SampleResult>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok(SampleResult {
                id: row.id,
                tone_bin: row.tone_bin,
                malignant: row.malignant.map(|m| m == 1),
                score: row.score,
                confusion: row.counts.as_deref().map(decode_counts).transpose()?,
            })
        })
        .collect()
}

fn split_of(file: &Path) -> Option<String> {
    let name = file.file_name()?.to_str()?;
    Some(name.strip_prefix("predictions_")?.strip_suffix(".csv")?.to_string())
}

fn sorted_files(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(&keep))
        .collect();
    v.sort();
    Ok(v)
}

/// Renders metrics tables and plots for one predictions file.
pub fn render_split(dir: &Path, split: &str, results: &[SampleResult], rule: ThresholdRule) -> Result<Vec<PathBuf>> {
    let report = stratify_report(results, rule);
    let mut written = Vec::new();
    let metrics = dir.join(format!("metrics_{split}.csv"));
    std::fs::write(&metrics, report.to_csv())?;
    written.push(metrics);

    if results.iter().any(|r| r.score.is_some()) {
        let curve_of = |keep: &dyn Fn(&SampleResult) -> bool| {
            let (s, l): (Vec<f64>, Vec<bool>) = results
                .iter()
                .filter(|r| keep(r))
                .filter_map(|r| Some((r.score?, r.malignant?)))
                .unzip();
            compute_roc_auc(&s, &l, rule).map(|r| r.curve).unwrap_or_default()
        };
        let mut curves = vec![(curve_of(&|_| true), Rgb([0, 0, 0]))];
        for (i, t) in ToneBin::ALL.into_iter().enumerate() {
            curves.push((curve_of(&|r| r.tone_bin == t), plots::GROUP_COLORS[i + 1]));
        }
        let refs: Vec<(&[(f64, f64)], Rgb<u8>)> = curves.iter().map(|(c, col)| (c.as_slice(), *col)).collect();
        let p = dir.join(format!("roc_{split}.png"));
        plots::roc_plot(&refs, 256).save(&p)?;
        written.push(p);
    }
    if report.overall.iou.is_some() {
        let mut groups = vec![report.overall.iou];
        groups.extend(report.per_tone.values().map(|g| g.as_ref().and_then(|g| g.iou)));
        let p = dir.join(format!("iou_{split}.png"));
        plots::iou_bars(&groups, 160).save(&p)?;
        written.push(p);
    }
    Ok(written)
}

/// Regenerates every derived artifact in a run directory from its
/// `predictions_*.csv` and `ablation_s*.json` files.
pub fn render_run_dir(dir: &Path, rule: ThresholdRule) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut written = Vec::new();
    for p in sorted_files(dir, |n| n.starts_with("predictions_") && n.ends_with(".csv"))? {
        let split = split_of(&p).unwrap();
        written.extend(render_split(dir, &split, &read_predictions(&p)?, rule)?);
    }
    for p in sorted_files(dir, |n| n.starts_with("ablation_s") && n.ends_with(".json"))? {
        let grid: AblationGrid = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
        written.extend(render_grid(dir, &grid)?);
    }
    Ok(written)
}

pub fn render_grid(dir: &Path, grid: &AblationGrid) -> Result<Vec<PathBuf>> {
    grid.write(dir)?;
    let s = grid.subset.percent();
    let p = dir.join(format!("ablation_s{s}.png"));
    plots::heatmap(grid, 12, 0.0, 1.0).save(&p)?;
    Ok(vec![
        dir.join(format!("ablation_s{s}_accuracy.csv")),
        dir.join(format!("ablation_s{s}_auc.csv")),
        dir.join(format!("ablation_s{s}.json")),
        p,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn results() -> Vec<SampleResult> {
        (0..9)
            .map(|i| {
                let pred = Array2::from_shape_fn((3, 3), |(y, x)| ((x + y + i) % 5) as u8);
                let truth = Array2::from_shape_fn((3, 3), |(y, x)| ((x * y + i) % 5) as u8);
                SampleResult {
                    id: format!("s{i}"),
                    tone_bin: ToneBin::ALL[i % 3],
                    malignant: Some(i % 2 == 0),
                    score: Some(i as f64 / 9.0 + 0.013_579_246_8),
                    confusion: Some(Confusion::from_maps(&pred, &truth).unwrap()),
                }
            })
            .collect()
    }

    #[test]
    fn predictions_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("predictions_test.csv");
        write_predictions(&p, &results()).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), results());
    }

    #[test]
    fn rerender_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        write_predictions(&dir.path().join("predictions_test.csv"), &results()).unwrap();
        let files = render_run_dir(dir.path(), ThresholdRule::Youden).unwrap();
        assert_eq!(files.len(), 3);
        let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
        render_run_dir(dir.path(), ThresholdRule::Youden).unwrap();
        let second: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn missing_run_dir() {
        assert!(matches!(
            render_run_dir(Path::new("/nonexistent/run"), ThresholdRule::Youden),
            Err(Error::MissingArtifact(_))
        ));
    }
}
