mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use diffprobe::checkpoint::{load_pretrained_backbone, save_backbone, ExpectedGeometry};
use diffprobe::datasets::{
    draw_subset_plan, generate_synthetic_corpus, load_corpus, load_rgb, select, SampleRecord, Split, Subset,
    SubsetPlan, SynthOptions,
};
use diffprobe::evaluation::{
    evaluate_classifier, evaluate_segmentation, kmeans_blocks, run_ablation, stratify_report, SampleResult,
    ThresholdRule,
};
use diffprobe::head_io::{Head, HeadCheckpoint};
use diffprobe::training::{
    classifier_checkpoint, epsilon_seed, save_run, segmentation_checkpoint, train_classifier, train_segmentation,
};
use diffprobe::{plots, reports, Backbone, BlockSpec};

use config::{BackboneSource, RunConfig};

/// Usage or configuration problem; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "diffprobe", version, about = "Probe frozen diffusion UNet decoder features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic lesion corpus with masks and metadata.csv
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_per_cell: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw the nested training subsets and the held-out splits
    Plan {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the malignancy classifier on one block and timestep
    TrainCls {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        timestep: Option<usize>,
    },
    /// Train the five-member pixel segmentation ensemble
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
        #[arg(long)]
        timestep: Option<usize>,
    },
    /// Sweep classifier accuracy over blocks and timesteps
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        subsets: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        timesteps: Option<Vec<usize>>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Cluster the channel vectors of one activation map
    Kmeans {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        block: usize,
        #[arg(long)]
        timestep: usize,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved head on a split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Re-render tables and plots from the predictions in a run directory
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_parser = parse_rule, default_value = "youden")]
        threshold_rule: ThresholdRule,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "DIFFPROBE_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    subset: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pretrained backbone in safetensors form
    #[arg(long)]
    backbone_checkpoint: Option<PathBuf>,
    #[arg(long)]
    denoise_steps: Option<usize>,
    #[arg(long, value_parser = parse_rule)]
    threshold_rule: Option<ThresholdRule>,
}

fn parse_rule(s: &str) -> Result<ThresholdRule, String> {
    match s {
        "youden" => Ok(ThresholdRule::Youden),
        "accuracy" => Ok(ThresholdRule::Accuracy),
        _ => Err(format!("unknown threshold rule {s:?} (youden, accuracy)")),
    }
}

impl Common {
    fn resolve(&self, default_run: &str) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(usage)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.data_root {
            cfg.data.root = Some(v.clone());
        }
        if let Some(v) = &self.run_dir {
            cfg.run_dir = Some(v.clone());
        }
        cfg.run_dir.get_or_insert_with(|| Path::new("runs").join(default_run));
        if let Some(v) = &self.plan {
            cfg.data.plan = Some(v.clone());
        }
        if let Some(v) = self.subset {
            cfg.train.subset = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = &self.backbone_checkpoint {
            cfg.backbone.kind = BackboneSource::Checkpoint;
            cfg.backbone.checkpoint = Some(v.clone());
        }
        if let Some(v) = self.denoise_steps {
            cfg.backbone.denoise_steps = v;
        }
        if let Some(v) = self.threshold_rule {
            cfg.eval.threshold_rule = v;
        }
        Ok(cfg)
    }
}

fn check(cfg: &RunConfig) -> anyhow::Result<()> {
    let problems = cfg.problems();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(usage(format!("invalid configuration:\n  {}", problems.join("\n  "))))
    }
}

/// Loaded corpus, plan and backbone for a configured run.
struct Session {
    cfg: RunConfig,
    run_dir: PathBuf,
    records: Vec<SampleRecord>,
    plan: SubsetPlan,
    backbone: Backbone,
}

impl Session {
    fn open(cfg: RunConfig) -> anyhow::Result<Self> {
        check(&cfg)?;
        let root = cfg.data.root.clone().unwrap();
        let metadata = root.join(&cfg.data.metadata);
        let records = load_corpus(&metadata, &root)?;
        let plan = match &cfg.data.plan {
            Some(p) => SubsetPlan::load(p)?,
            None => draw_subset_plan(&records, cfg.data.plan_seed)?,
        };
        let run_dir = cfg.run_dir.clone().unwrap();
        std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
        plan.save(&run_dir.join("plan.json"))?;
        let backbone = build_backbone(&cfg, &records, &plan)?;
        log::info!("backbone weights {}", backbone.current_fingerprint());
        Ok(Self {
            cfg,
            run_dir,
            records,
            plan,
            backbone,
        })
    }

    fn samples(&self, split: Split, subset: Subset) -> anyhow::Result<Vec<&SampleRecord>> {
        Ok(select(&self.records, self.plan.split(split, subset))?)
    }

    fn write_snapshot(&self) -> anyhow::Result<()> {
        std::fs::write(self.run_dir.join("config.toml"), self.cfg.snapshot())?;
        Ok(())
    }

    fn publish(&self, split: Split, results: &[SampleResult]) -> anyhow::Result<()> {
        let name = split_name(split);
        reports::write_predictions(&self.run_dir.join(format!("predictions_{name}.csv")), results)?;
        reports::render_split(&self.run_dir, name, results, self.cfg.eval.threshold_rule)?;
        let report = stratify_report(results, self.cfg.eval.threshold_rule);
        print!("{}", report.to_csv());
        Ok(())
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
        Split::Remainder => "remainder",
    }
}

fn build_backbone(cfg: &RunConfig, records: &[SampleRecord], plan: &SubsetPlan) -> anyhow::Result<Backbone> {
    let b = &cfg.backbone;
    if b.kind == BackboneSource::Checkpoint {
        let expected = ExpectedGeometry {
            input_resolution: b.expect_resolution,
            decoder_block_count: b.expect_blocks,
        };
        return Ok(load_pretrained_backbone(b.checkpoint.as_ref().unwrap(), &expected)?);
    }
    let toy = Backbone::toy(b.resolution, b.base_channels, b.seed)?;
    if b.denoise_steps == 0 {
        return Ok(toy);
    }
    let expected = ExpectedGeometry {
        input_resolution: Some(b.resolution),
        decoder_block_count: toy.descriptor().decoder_block_count,
    };
    if let Some(cache) = b.cache.as_ref().filter(|c| c.exists()) {
        log::info!("reusing denoise-trained backbone {}", cache.display());
        return Ok(load_pretrained_backbone(cache, &expected)?);
    }
    let pool = select(records, plan.subset(Subset::P20))?;
    let images = pool
        .iter()
        .map(|r| r.load_image(b.resolution))
        .collect::<diffprobe::Result<Vec<_>>>()?;
    log::info!("denoise training on {} images for {} steps", images.len(), b.denoise_steps);
    let (trained, losses) = toy.train_toy(&images, &b.denoise())?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("denoise loss {first:.4} -> {last:.4}");
    }
    if let Some(cache) = &b.cache {
        if let Some(parent) = cache.parent() {
            std::fs::create_dir_all(parent)?;
        }
        save_backbone(&trained, cache)?;
    }
    Ok(trained)
}

fn with_masks<'a>(samples: Vec<&'a SampleRecord>) -> Vec<&'a SampleRecord> {
    samples.into_iter().filter(|r| r.mask_path.is_some()).collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthData {
            out,
            n_per_cell,
            resolution,
            seed,
        } => {
            let opts = SynthOptions {
                n_per_cell,
                resolution,
                seed,
            };
            let records = generate_synthetic_corpus(&out, &opts)?;
            println!("wrote {} samples to {}", records.len(), out.display());
        }
        Command::Plan {
            metadata,
            root,
            seed,
            out,
        } => {
            let root = root
                .or_else(|| metadata.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            let records = load_corpus(&metadata, &root)?;
            let plan = draw_subset_plan(&records, seed)?;
            plan.save(&out)?;
            for s in Subset::ALL {
                println!("{s}: {}", plan.subset(s).len());
            }
            println!("validation: {}", plan.validation.len());
            println!("test: {}", plan.test.len());
            println!("remainder: {}", plan.remainder.len());
        }
        Command::TrainCls {
            common,
            block,
            timestep,
        } => {
            let mut cfg = common.resolve("train-cls")?;
            if let Some(v) = block {
                cfg.classifier.block = v;
            }
            if let Some(v) = timestep {
                cfg.classifier.timestep = v;
            }
            let s = Session::open(cfg)?;
            let tc = s.cfg.train_config();
            let spec = BlockSpec::new(s.cfg.classifier.block, s.cfg.classifier.timestep);
            let train = s.samples(Split::Train, tc.subset)?;
            let val = s.samples(Split::Validation, tc.subset)?;
            let (head, history) = train_classifier(&s.backbone, spec, &train, &val, &tc)?;
            save_run(&s.run_dir, &s.cfg.snapshot(), &history, &classifier_checkpoint(head.clone(), spec))?;
            let split = s.cfg.eval.split;
            let eval = s.samples(split, tc.subset)?;
            let results = evaluate_classifier(&s.backbone, &head, spec, &eval, tc.seed)?;
            s.publish(split, &results)?;
        }
        Command::TrainSeg {
            common,
            blocks,
            timestep,
        } => {
            let mut cfg = common.resolve("train-seg")?;
            if let Some(v) = blocks {
                cfg.segmentation.blocks = v;
            }
            if let Some(v) = timestep {
                cfg.segmentation.timestep = v;
            }
            let s = Session::open(cfg)?;
            let tc = s.cfg.train_config();
            let opts = s.cfg.seg_options();
            let mut train = with_masks(s.samples(Split::Train, tc.subset)?);
            if s.cfg.segmentation.train_samples > 0 {
                train.truncate(s.cfg.segmentation.train_samples);
            }
            let val = with_masks(s.samples(Split::Validation, tc.subset)?);
            if train.is_empty() {
                bail!("no masked samples in the training subset");
            }
            let (ens, history) = train_segmentation(&s.backbone, &train, &val, &tc, &opts)?;
            save_run(&s.run_dir, &s.cfg.snapshot(), &history, &segmentation_checkpoint(ens.clone(), &opts.blocks))?;
            let split = s.cfg.eval.split;
            let eval = with_masks(s.samples(split, tc.subset)?);
            let results = evaluate_segmentation(&s.backbone, &ens, &opts, &eval, tc.seed)?;
            s.publish(split, &results)?;
        }
        Command::Ablate {
            common,
            blocks,
            subsets,
            timesteps,
            workers,
        } => {
            let mut cfg = common.resolve("ablate")?;
            if let Some(v) = blocks {
                cfg.ablation.blocks = v;
            }
            if let Some(v) = subsets {
                cfg.ablation.subsets = v;
            }
            if let Some(v) = timesteps {
                cfg.ablation.timesteps = v;
            }
            if let Some(v) = workers {
                cfg.ablation.workers = v;
            }
            let s = Session::open(cfg)?;
            s.write_snapshot()?;
            let grids = run_ablation(
                &s.backbone,
                &s.records,
                &s.plan,
                &s.cfg.ablation_config(),
                &s.cfg.train_config(),
            )?;
            for g in &grids {
                reports::render_grid(&s.run_dir, g)?;
                match g.best_cell() {
                    Some((b, t, v)) => println!("{}: best block {b} at t={t} (accuracy {v:.3})", g.subset),
                    None => println!("{}: no cell evaluated", g.subset),
                }
            }
        }
        Command::Kmeans {
            common,
            block,
            timestep,
            image,
            k,
            out,
        } => {
            let cfg = common.resolve("kmeans")?;
            let mut problems: Vec<String> = cfg
                .problems()
                .into_iter()
                .filter(|p| !p.starts_with("data.root"))
                .collect();
            if k < 2 {
                problems.push(format!("--k must be at least 2, got {k}"));
            }
            if !problems.is_empty() {
                return Err(usage(format!("invalid configuration:\n  {}", problems.join("\n  "))));
            }
            let backbone = match cfg.backbone.kind {
                BackboneSource::Checkpoint => load_pretrained_backbone(
                    cfg.backbone.checkpoint.as_ref().unwrap(),
                    &ExpectedGeometry {
                        input_resolution: cfg.backbone.expect_resolution,
                        decoder_block_count: cfg.backbone.expect_blocks,
                    },
                )?,
                BackboneSource::Toy => Backbone::toy(cfg.backbone.resolution, cfg.backbone.base_channels, cfg.backbone.seed)?,
            };
            let x = load_rgb(&image, backbone.descriptor().input_resolution)?;
            let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let acts = backbone.collect_activations(&x, &[BlockSpec::new(block, timestep)], epsilon_seed(cfg.train.seed, stem))?;
            let map = kmeans_blocks(&acts[0], k, cfg.train.seed)?;
            let run_dir = cfg.run_dir.unwrap();
            let out = out.unwrap_or_else(|| run_dir.join(format!("kmeans_{stem}_b{block}_t{timestep}_k{k}.png")));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let scale = (backbone.descriptor().input_resolution / map.ncols().max(1)).max(1) as u32;
            plots::cluster_image(&map, scale).save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let ckpt = HeadCheckpoint::load(&checkpoint)?;
            let mut cfg = common.resolve("eval")?;
            if let Some(v) = split {
                cfg.eval.split = v;
            }
            let s = Session::open(cfg)?;
            let tc = s.cfg.train_config();
            let split = s.cfg.eval.split;
            let eval = s.samples(split, tc.subset)?;
            let results = match &ckpt.head {
                Head::Classifier(head) => {
                    let spec = *ckpt.provenance.first().ok_or_else(|| anyhow!("classifier checkpoint has no block spec"))?;
                    evaluate_classifier(&s.backbone, head, spec, &eval, tc.seed)?
                }
                Head::Segmentation(ens) => {
                    let mut opts = s.cfg.seg_options();
                    opts.blocks = ckpt.provenance.clone();
                    evaluate_segmentation(&s.backbone, ens, &opts, &with_masks(eval), tc.seed)?
                }
            };
            s.publish(split, &results)?;
        }
        Command::Report {
            run_dir,
            threshold_rule,
        } => {
            for p in reports::render_run_dir(&run_dir, threshold_rule)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<diffprobe::Error>() {
        Some(diffprobe::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
