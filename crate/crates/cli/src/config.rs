use std::path::{Path, PathBuf};

use diffprobe::backbone::DenoiseTraining;
use diffprobe::datasets::{Split, Subset};
use diffprobe::evaluation::{ablation_timesteps, AblationConfig, ThresholdRule};
use diffprobe::training::{SegOptions, TrainConfig};
use diffprobe::BlockSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneSource {
    #[default]
    Toy,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub kind: BackboneSource,
    pub resolution: usize,
    pub base_channels: usize,
    pub seed: u64,
    pub denoise_steps: usize,
    pub denoise_batch: usize,
    pub denoise_learning_rate: f32,
    pub denoise_seed: u64,
    /// Trained toy weights are stored here and reused when present.
    pub cache: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub expect_resolution: Option<usize>,
    pub expect_blocks: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            kind: BackboneSource::Toy,
            resolution: 64,
            base_channels: 8,
            seed: 0,
            denoise_steps: 0,
            denoise_batch: 4,
            denoise_learning_rate: 2e-4,
            denoise_seed: 0,
            cache: None,
            checkpoint: None,
            expect_resolution: Some(256),
            expect_blocks: 18,
        }
    }
}

impl BackboneSection {
    pub fn denoise(&self) -> DenoiseTraining {
        DenoiseTraining {
            steps: self.denoise_steps,
            batch_size: self.denoise_batch,
            learning_rate: self.denoise_learning_rate,
            seed: self.denoise_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub metadata: PathBuf,
    pub plan: Option<PathBuf>,
    pub plan_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            metadata: PathBuf::from("metadata.csv"),
            plan: None,
            plan_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub subset: u32,
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            subset: 5,
            batch_size: None,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub block: usize,
    pub timestep: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self { block: 6, timestep: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegSection {
    pub blocks: Vec<usize>,
    pub timestep: usize,
    pub member_seeds: Vec<u64>,
    pub hidden: usize,
    pub pixel_batch: usize,
    pub max_train_pixels: usize,
    pub max_val_pixels: usize,
    pub feature_resolution: usize,
    /// Use only the first N samples of the training subset; 0 uses all.
    pub train_samples: usize,
}

impl Default for SegSection {
    fn default() -> Self {
        let o = SegOptions::default();
        Self {
            blocks: o.blocks.iter().map(|b| b.block).collect(),
            timestep: 100,
            member_seeds: o.member_seeds,
            hidden: o.hidden,
            pixel_batch: o.pixel_batch,
            max_train_pixels: o.max_train_pixels,
            max_val_pixels: o.max_val_pixels,
            feature_resolution: o.feature_resolution,
            train_samples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold_rule: ThresholdRule,
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold_rule: ThresholdRule::Youden,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub blocks: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub subsets: Vec<u32>,
    pub workers: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        let a = AblationConfig::default();
        Self {
            blocks: a.blocks,
            timesteps: a.timesteps,
            subsets: a.subsets.iter().map(|s| s.percent()).collect(),
            workers: a.workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_dir: Option<PathBuf>,
    pub backbone: BackboneSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub classifier: ClassifierSection,
    pub segmentation: SegSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every problem in the document, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let b = &self.backbone;
        match b.kind {
            BackboneSource::Toy => {
                if b.resolution < 32 || !b.resolution.is_power_of_two() {
                    p.push(format!("backbone.resolution must be a power of two >= 32, got {}", b.resolution));
                }
                if b.base_channels == 0 || b.base_channels % 8 != 0 {
                    p.push(format!("backbone.base_channels must be a positive multiple of 8, got {}", b.base_channels));
                }
            }
            BackboneSource::Checkpoint => {
                if b.checkpoint.is_none() {
                    p.push("backbone.checkpoint is required when backbone.kind = \"checkpoint\"".into());
                }
            }
        }
        if self.data.root.is_none() {
            p.push("data.root is not set (config, --data-root or DIFFPROBE_DATA_ROOT)".into());
        }
        match Subset::from_percent(self.train.subset) {
            Ok(s) => {
                if let Some(bs) = self.train.batch_size {
                    if bs != s.size() {
                        p.push(format!("train.batch_size {bs} does not match the {s} subset size {}", s.size()));
                    }
                }
            }
            Err(e) => p.push(format!("train.subset: {e}")),
        }
        if self.train.weight_decay != 1e-5 {
            p.push(format!("train.weight_decay is fixed at 1e-5, got {}", self.train.weight_decay));
        }
        if !(self.train.learning_rate > 0.0) {
            p.push(format!("train.learning_rate must be positive, got {}", self.train.learning_rate));
        }
        if self.segmentation.blocks.is_empty() {
            p.push("segmentation.blocks is empty".into());
        }
        if self.segmentation.member_seeds.len() != 5 {
            p.push(format!(
                "segmentation.member_seeds must list 5 seeds, got {}",
                self.segmentation.member_seeds.len()
            ));
        }
        if self.segmentation.timestep > 1000 || self.classifier.timestep > 1000 {
            p.push("timesteps must lie in 0..=1000".into());
        }
        let axis = ablation_timesteps();
        for t in &self.ablation.timesteps {
            if !axis.contains(t) {
                p.push(format!("ablation.timesteps: {t} is not on the 0..=1000 step 50 axis"));
            }
        }
        for s in &self.ablation.subsets {
            if Subset::from_percent(*s).is_err() {
                p.push(format!("ablation.subsets: {s} is not one of 5, 10, 15, 20"));
            }
        }
        p
    }

    pub fn train_config(&self) -> TrainConfig {
        let subset = Subset::from_percent(self.train.subset).unwrap_or(Subset::P5);
        TrainConfig {
            subset,
            batch_size: self.train.batch_size.unwrap_or(subset.size()),
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            seed: self.train.seed,
        }
    }

    pub fn seg_options(&self) -> SegOptions {
        let s = &self.segmentation;
        SegOptions {
            blocks: s.blocks.iter().map(|&b| BlockSpec::new(b, s.timestep)).collect(),
            member_seeds: s.member_seeds.clone(),
            hidden: s.hidden,
            pixel_batch: s.pixel_batch,
            max_train_pixels: s.max_train_pixels,
            max_val_pixels: s.max_val_pixels,
            feature_resolution: s.feature_resolution,
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            blocks: self.ablation.blocks.clone(),
            timesteps: self.ablation.timesteps.clone(),
            subsets: self
                .ablation
                .subsets
                .iter()
                .filter_map(|&s| Subset::from_percent(s).ok())
                .collect(),
            eval_split: self.eval.split,
            workers: self.ablation.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlr = 3").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1").is_err());
    }

    #[test]
    fn all_problems_are_listed() {
        let cfg: RunConfig = toml::from_str(
            "[train]\nsubset = 7\nweight_decay = 0.1\n[segmentation]\nmember_seeds = [1]\n[ablation]\ntimesteps = [25]",
        )
        .unwrap();
        let p = cfg.problems();
        assert_eq!(p.len(), 5, "{p:?}");
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.data.root = Some("/data".into());
        let back: RunConfig = toml::from_str(&cfg.snapshot()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.problems().is_empty());
    }
}
