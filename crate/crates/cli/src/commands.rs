//! Subcommand bodies. Each returns an error instead of exiting so the binary
//! decides the exit code in one place.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use flatland::landscape::{loss_slice_1d, loss_slice_2d, sample_direction, sharpness, slice_csv, slice_svg, ModelLoss, Normalization, SliceMeta};
use flatland::model::{build_model, Mode, Model};
use flatland::pipeline::eval::{accuracy_from, predict_probs, tta_predict, write_lodo_csv, DfpLearner};
use flatland::pipeline::train::{train_stage, write_metrics_csv, Registries, RunContext, StageReport};
use flatland::pipeline::{
    generate_synthetic_domains, leave_one_domain_out_eval, split_domains, to_batch, validate_plans, AugmentPipeline, Split,
    SyntheticDomainDataset,
};
use flatland::rng::{stream, Purpose};

use crate::config::{LoadedConfig, RunConfig};

/// Written next to every stage checkpoint so later commands know the
/// resolution the weights were trained at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageInfo {
    pub stage_index: usize,
    pub loss_mode: String,
    pub resolution: usize,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STAGE_INFO_FILE: &str = "stage.json";

#[derive(Debug, Serialize)]
struct StageSummary {
    stage_index: usize,
    loss_mode: String,
    resolution: usize,
    epochs: usize,
    end: String,
    final_train_loss: f64,
    val_acc: f64,
    checkpoint: PathBuf,
    metrics: PathBuf,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    config_path: PathBuf,
    config_sha256: String,
    seed: u64,
    stages: Vec<StageSummary>,
    elapsed_seconds: f64,
}

fn dataset_and_split(cfg: &RunConfig) -> Result<(SyntheticDomainDataset, Split)> {
    let data = generate_synthetic_domains(&cfg.dataset, cfg.seed)?;
    let split = split_domains(&data, &cfg.split.held_out_domains, cfg.split.val_fraction, cfg.seed)?;
    Ok((data, split))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    model.save(BufWriter::new(f))?;
    let back = load_checkpoint(path)?;
    let same = back.store.len() == model.store.len()
        && back
            .store
            .iter()
            .zip(model.store.iter())
            .all(|(a, b)| a.name == b.name && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure!(same, "checkpoint {} did not read back identically", path.display());
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let f = fs::File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    Model::load(std::io::BufReader::new(f)).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn stage_info_for(checkpoint: &Path) -> Result<Option<StageInfo>> {
    let p = checkpoint.with_file_name(STAGE_INFO_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p)?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?))
}

fn check_compatible(model: &Model<f32>, cfg: &RunConfig, resolution: usize) -> Result<()> {
    ensure!(
        model.spec.num_classes == cfg.dataset.num_classes,
        "checkpoint has {} classes but the dataset has {}",
        model.spec.num_classes,
        cfg.dataset.num_classes
    );
    ensure!(model.spec.in_channels == 3, "checkpoint expects {} input channels, images have 3", model.spec.in_channels);
    model.spec.check_resolution(resolution)?;
    Ok(())
}

/// Label for output files derived from the checkpoint location, e.g.
/// `runs/x/stage4/model.ckpt` becomes `stage4`.
fn checkpoint_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let parent = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str());
    let raw = match parent {
        Some(p) if stem == "model" => p.to_string(),
        Some(p) => format!("{p}_{stem}"),
        None => stem.to_string(),
    };
    raw.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub struct TrainArgs<'a> {
    pub config: &'a LoadedConfig,
    pub stages: Option<Vec<usize>>,
    pub init: Option<PathBuf>,
}

pub fn cmd_train(args: TrainArgs<'_>) -> Result<()> {
    let started = Instant::now();
    let cfg = &args.config.config;
    let plans: Vec<_> = match &args.stages {
        None => cfg.stages.clone(),
        Some(wanted) => {
            for k in wanted {
                ensure!(cfg.stages.iter().any(|p| p.stage_index == *k), "--stages: stage {k} is not configured");
            }
            cfg.stages.iter().filter(|p| wanted.contains(&p.stage_index)).cloned().collect()
        }
    };
    validate_plans(&plans)?;
    let first_configured = cfg.stages.iter().map(|p| p.stage_index).min().unwrap_or(1);
    let mut model = match &args.init {
        Some(path) => {
            let mut m = load_checkpoint(path)?;
            ensure!(m.spec == cfg.model, "--init checkpoint was built for a different model spec");
            m.set_mode(Mode::Train)?;
            m
        }
        None => {
            if plans[0].stage_index != first_configured {
                bail!(
                    "--stages starts at stage {} which continues from stage {}; pass --init <checkpoint>",
                    plans[0].stage_index,
                    plans[0].stage_index - 1
                );
            }
            build_model::<f32>(&cfg.model, &cfg.shakedrop, cfg.seed)?
        }
    };

    let (data, split) = dataset_and_split(cfg)?;
    let run = RunContext {
        data: &data,
        split: &split,
        seed: cfg.seed,
        distill: cfg.distill.clone(),
        augment: cfg.augment.clone(),
        registries: Registries::default(),
    };
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let mut summaries = Vec::new();
    for plan in &plans {
        let report: StageReport = train_stage(&mut model, plan, &run).with_context(|| format!("stage {}", plan.stage_index))?;
        let dir = cfg.output_dir.join(format!("stage{}", plan.stage_index));
        fs::create_dir_all(&dir)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        let metrics = dir.join("metrics.csv");
        save_checkpoint(&report.checkpoint, &ckpt)?;
        write_metrics_csv(BufWriter::new(fs::File::create(&metrics)?), &report.metrics)?;
        write_json(
            &dir.join(STAGE_INFO_FILE),
            &StageInfo {
                stage_index: plan.stage_index,
                loss_mode: plan.loss_mode.to_string(),
                resolution: plan.resolution,
            },
        )?;
        println!(
            "stage {} ({}, {} px): {} epochs, final train loss {:.5}, val acc {:.4}",
            report.stage_index, report.loss_mode, report.resolution, report.epochs, report.final_train_loss, report.val_acc
        );
        summaries.push(StageSummary {
            stage_index: report.stage_index,
            loss_mode: report.loss_mode.to_string(),
            resolution: report.resolution,
            epochs: report.epochs,
            end: format!("{:?}", report.end).to_lowercase(),
            final_train_loss: report.final_train_loss,
            val_acc: report.val_acc,
            checkpoint: ckpt,
            metrics,
        });
    }
    write_json(
        &cfg.output_dir.join("manifest.json"),
        &Manifest {
            tool: "flatland",
            version: env!("CARGO_PKG_VERSION"),
            config_path: args.config.path.clone(),
            config_sha256: args.config.sha256.clone(),
            seed: cfg.seed,
            stages: summaries,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

pub struct EvalArgs<'a> {
    pub config: &'a LoadedConfig,
    pub checkpoint: Option<PathBuf>,
    pub tta: Option<i64>,
    pub resolution: Option<usize>,
    pub lodo: bool,
}

/// Plain and TTA accuracy of one checkpoint on the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub plain_accuracy: f64,
    pub tta_accuracy: f64,
    pub tta_epochs: i64,
    pub resolution: usize,
}

pub fn evaluate_checkpoint(cfg: &RunConfig, checkpoint: &Path, tta: Option<i64>, resolution: Option<usize>) -> Result<EvalResult> {
    let model = load_checkpoint(checkpoint)?;
    let info = stage_info_for(checkpoint)?;
    let resolution = resolution.or(info.as_ref().map(|i| i.resolution)).unwrap_or(model.spec.input_resolution);
    check_compatible(&model, cfg, resolution)?;
    let (data, split) = dataset_and_split(cfg)?;
    ensure!(!split.test.is_empty(), "the test split is empty; set split.held_out_domains");
    let images = data.render_all(&split.test, resolution);
    let labels: Vec<usize> = split.test.iter().map(|&i| data.label(i)).collect();
    let plan = info
        .as_ref()
        .and_then(|i| cfg.stages.iter().find(|p| p.stage_index == i.stage_index))
        .unwrap_or(&cfg.stages[0]);
    let augs = AugmentPipeline::build(&plan.augmentations, &cfg.augment, &Registries::default().augmentations)?;
    let tta_epochs = tta.unwrap_or(cfg.eval.tta_epochs as i64);
    let plain = accuracy_from(&predict_probs(&model, &images)?, &labels);
    let tta_probs = tta_predict(&model, &images, tta_epochs, &augs, cfg.seed)?;
    Ok(EvalResult {
        plain_accuracy: plain,
        tta_accuracy: accuracy_from(&tta_probs, &labels),
        tta_epochs,
        resolution,
    })
}

pub fn cmd_eval(args: EvalArgs<'_>) -> Result<()> {
    let cfg = &args.config.config;
    let out = cfg.output_dir.join("eval");
    fs::create_dir_all(&out)?;
    if args.lodo {
        ensure!(cfg.dataset.num_domains >= 2, "leave-one-domain-out needs at least two domains");
        let (data, _) = dataset_and_split(cfg)?;
        let mut learner = DfpLearner {
            spec: cfg.model.clone(),
            shakedrop: cfg.shakedrop.clone(),
            plans: cfg.stages.clone(),
            distill: cfg.distill.clone(),
            augment: cfg.augment.clone(),
            tta_epochs: args.tta.unwrap_or(cfg.eval.tta_epochs as i64).try_into().context("--tta must be nonnegative")?,
        };
        let report = leave_one_domain_out_eval(&mut learner, &data, cfg.split.val_fraction, cfg.seed)?;
        let path = out.join("lodo.csv");
        write_lodo_csv(BufWriter::new(fs::File::create(&path)?), &report)?;
        println!("held_out_domain,accuracy");
        for r in &report.rows {
            println!("{},{:.4}", r.held_out_domain, r.accuracy);
        }
        println!("average,{:.4}", report.average);
        return Ok(());
    }
    let Some(ckpt) = args.checkpoint.as_deref() else {
        bail!("eval needs --checkpoint unless --lodo is given");
    };
    let r = evaluate_checkpoint(cfg, ckpt, args.tta, args.resolution)?;
    let path = out.join(format!("{}.csv", checkpoint_label(ckpt)));
    fs::write(
        &path,
        format!(
            "metric,value\nplain_accuracy,{}\ntta_accuracy,{}\ntta_epochs,{}\nresolution,{}\n",
            r.plain_accuracy, r.tta_accuracy, r.tta_epochs, r.resolution
        ),
    )?;
    println!("plain accuracy {:.4}", r.plain_accuracy);
    println!("tta accuracy {:.4} ({} copies)", r.tta_accuracy, r.tta_epochs);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SliceMode {
    #[value(name = "1d")]
    OneD,
    #[value(name = "2d")]
    TwoD,
}

pub struct LandscapeArgs<'a> {
    pub config: &'a LoadedConfig,
    pub checkpoint: PathBuf,
    pub mode: SliceMode,
    pub r: Option<f64>,
    pub steps: Option<usize>,
    pub normalization: Option<Normalization>,
    pub resolution: Option<usize>,
}

/// Returns the sharpness that was printed.
pub fn cmd_landscape(args: LandscapeArgs<'_>) -> Result<f64> {
    let cfg = &args.config.config;
    let lc = &cfg.landscape;
    let mut model = load_checkpoint(&args.checkpoint)?;
    let info = stage_info_for(&args.checkpoint)?;
    let resolution = args.resolution.or(info.map(|i| i.resolution)).unwrap_or(model.spec.input_resolution);
    check_compatible(&model, cfg, resolution)?;
    let (data, split) = dataset_and_split(cfg)?;
    let mut pool = split.train.clone();
    pool.shuffle(&mut stream(cfg.seed, Purpose::Eval, 0, 0));
    pool.truncate(lc.eval_samples);
    ensure!(!pool.is_empty(), "the training split is empty");
    let images = to_batch(&data.render_all(&pool, resolution))?;
    let labels: Vec<usize> = pool.iter().map(|&i| data.label(i)).collect();

    let r = args.r.unwrap_or(lc.r);
    let normalization = args.normalization.unwrap_or(lc.normalization);
    let d1 = sample_direction(&model.store, normalization, &mut stream(cfg.seed, Purpose::Direction, 0, 0))?;
    let (slice, tag) = match args.mode {
        SliceMode::OneD => {
            let steps = args.steps.unwrap_or(lc.steps_1d);
            let mut surface = ModelLoss::new(&mut model, images, labels)?;
            (loss_slice_1d(&mut surface, &d1, r, steps)?, "1d")
        }
        SliceMode::TwoD => {
            let steps = args.steps.unwrap_or(lc.steps_2d);
            let d2 = sample_direction(&model.store, normalization, &mut stream(cfg.seed, Purpose::Direction, 1, 0))?;
            let mut surface = ModelLoss::new(&mut model, images, labels)?;
            (loss_slice_2d(&mut surface, &d1, &d2, r, steps)?, "2d")
        }
    };
    let meta = SliceMeta {
        normalization,
        seed: cfg.seed,
        split: "train".into(),
    };
    let out = cfg.output_dir.join("landscape");
    fs::create_dir_all(&out)?;
    let base = format!("{}_{tag}", checkpoint_label(&args.checkpoint));
    fs::write(out.join(format!("{base}.csv")), slice_csv(&slice, &meta))?;
    if lc.svg {
        fs::write(out.join(format!("{base}.svg")), slice_svg(&slice))?;
    }
    let s = sharpness(&slice, lc.radius_fraction)?;
    println!("base loss {}", slice.base_loss);
    println!("sharpness {s}");
    Ok(s)
}

pub fn cmd_gen_data(config: &LoadedConfig, resolution: Option<usize>) -> Result<PathBuf> {
    let cfg = &config.config;
    let (data, split) = dataset_and_split(cfg)?;
    let size = resolution.unwrap_or(cfg.model.input_resolution);
    ensure!(size > 0, "--resolution must be positive");
    let dir = cfg.output_dir.join("data");
    data.export(&dir, size, &split)?;
    println!("wrote {} samples at {size} px to {}", data.len(), dir.display());
    Ok(dir)
}
