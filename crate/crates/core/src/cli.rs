//! Command-line entry points: dataset generation, training, evaluation,
//! single-clip inference, and the ablation matrices. Exit codes: 0 on
//! success, 2 on configuration errors, 3 on runtime failures.

use crate::config::{ConfigError, ExperimentConfig};
use crate::model::Model;
use crate::report::{
    evaluate_clips, render_depth_error_heatmap, render_dvpq_grid, write_loss_curve, MetricReport,
};
use crate::synthgen::{load_clip, load_manifest, write_dataset, ClipSample, DatasetEntry, Manifest, SceneSpec};
use crate::train::{train, EpochStats};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dvps", about = "Depth-aware video panoptic segmentation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset described by the config.
    GenData(CommonArgs),
    /// Train a model on the train split and report validation metrics.
    Train(CommonArgs),
    /// Evaluate a checkpoint on a split; writes predictions, reports, and figures.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Run inference over one clip directory and write predictions.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation matrix (interaction | depth-weight | stages | hybrid).
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

#[derive(clap::Args)]
pub struct CommonArgs {
    /// Config file (flat key = value); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override config keys: --set key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] crate::synthgen::SynthError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error(transparent)]
    Fuse(#[from] crate::fuse::FuseError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 3,
        }
    }
}

pub fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Per-clip scene specs plus split assignment for a config.
pub fn dataset_entries(cfg: &ExperimentConfig) -> Vec<DatasetEntry> {
    let template = cfg.scene_template();
    let n = cfg.clips;
    let n_train = ((1.0 - cfg.val_fraction) * n as f64).round() as usize;
    (0..n)
        .map(|i| DatasetEntry {
            spec: SceneSpec {
                seed: cfg.seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15),
                ..template.clone()
            },
            split: if i < n_train { "train".into() } else { "val".into() },
        })
        .collect()
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Manifest, CliError> {
    let entries = dataset_entries(cfg);
    let manifest = write_dataset(&entries, Path::new(&cfg.data_root))?;
    println!(
        "wrote {} clips ({} train / {} val) under {}",
        manifest.clips.len(),
        manifest.split("train").count(),
        manifest.split("val").count(),
        cfg.data_root
    );
    Ok(manifest)
}

pub fn load_split(root: &Path, manifest: &Manifest, split: &str) -> Result<Vec<(String, ClipSample)>, CliError> {
    let mut out = Vec::new();
    for mc in manifest.split(split) {
        let clip = load_clip(&root.join(&mc.split).join(&mc.id), mc.frames)?;
        out.push((mc.id.clone(), clip));
    }
    Ok(out)
}

pub struct TrainOutput {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub report: MetricReport,
}

/// Train on the train split, checkpoint every epoch, and evaluate the val
/// split at the end. Writes the resolved config, loss curve, checkpoint,
/// reports, and figures under `out.dir`.
pub fn cmd_train(cfg: &ExperimentConfig, quiet: bool) -> Result<TrainOutput, CliError> {
    let root = Path::new(&cfg.data_root);
    let manifest = load_manifest(root)?;
    let train_clips = load_split(root, &manifest, "train")?;
    let clips: Vec<ClipSample> = train_clips.into_iter().map(|(_, c)| c).collect();
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.resolved"), cfg.to_text())?;

    let mut model = Model::new(cfg.model_config(), cfg.seed);
    let weights = cfg.loss_weights();
    let settings = cfg.train_settings();
    let ckpt_last = out_dir.join("model_last.ckpt");
    let history = train(&mut model, &clips, &weights, &settings, |s, m| {
        if !quiet {
            let terms: Vec<String> = s
                .stage_terms
                .iter()
                .enumerate()
                .map(|(i, t)| format!("s{i}[d {:.2} m {:.2} c {:.2}]", t.depth, t.mask, t.cls))
                .collect();
            println!(
                "epoch {:>3}  loss {:.4}  lr {:.2e}  track {:.3}  {}",
                s.epoch,
                s.mean_loss,
                s.lr,
                s.track_term,
                terms.join(" ")
            );
        }
        let _ = m.save(&ckpt_last);
    })?;
    model.save(out_dir.join("model.ckpt").as_path())?;
    write_loss_curve(&history, &out_dir.join("loss_curve.csv"))?;

    let val_clips = load_split(root, &manifest, "val")?;
    let report = evaluate_clips(
        &model,
        &val_clips,
        &cfg.eval_k,
        &cfg.eval_lambda,
        &cfg.fuse_thresholds(),
        cfg.momentum,
        cfg.evict_after,
        None,
        &cfg.hash(),
    )?;
    std::fs::write(out_dir.join("val_report.txt"), report.text_table())?;
    std::fs::write(out_dir.join("val_report.kv"), report.key_values())?;
    if !quiet {
        println!("{}", report.text_table());
    }
    Ok(TrainOutput { model, history, report })
}

/// Evaluate a checkpoint on a split; writes predictions mirroring the
/// dataset format plus the report files and figures.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: &str,
) -> Result<MetricReport, CliError> {
    let root = Path::new(&cfg.data_root);
    let manifest = load_manifest(root)?;
    let clips = load_split(root, &manifest, split)?;
    let model = Model::load(checkpoint, cfg.model_config())?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let pred_root = out_dir.join("predictions").join(split);
    std::fs::create_dir_all(&pred_root)?;
    let report = evaluate_clips(
        &model,
        &clips,
        &cfg.eval_k,
        &cfg.eval_lambda,
        &cfg.fuse_thresholds(),
        cfg.momentum,
        cfg.evict_after,
        Some(&pred_root),
        &cfg.hash(),
    )?;
    std::fs::write(out_dir.join(format!("{split}_report.txt")), report.text_table())?;
    std::fs::write(out_dir.join(format!("{split}_report.kv")), report.key_values())?;
    render_dvpq_grid(&report, &out_dir.join("dvpq_grid.png"))?;
    if let Some((_, clip)) = clips.first() {
        let mut memory = crate::tracker::TrackMemory::new(cfg.momentum, cfg.evict_after);
        let r = crate::fuse::infer_frame(
            &model,
            &clip.image_f64(0),
            &mut memory,
            0,
            &cfg.fuse_thresholds(),
        )?;
        render_depth_error_heatmap(&r.depth, &clip.depth_map(0), &out_dir.join("depth_error.png"))?;
    }
    println!("{}", report.text_table());
    Ok(report)
}

pub fn cmd_infer(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    clip_dir: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let model = Model::load(checkpoint, cfg.model_config())?;
    // frame count: probe frame_<t>.img files
    let mut frames = 0;
    while clip_dir.join(format!("frame_{frames}.img")).exists() {
        frames += 1;
    }
    if frames == 0 {
        return Err(CliError::Usage(format!(
            "no frame_<t>.img files under {}",
            clip_dir.display()
        )));
    }
    let clip = load_clip(clip_dir, frames)?;
    std::fs::create_dir_all(out)?;
    let mut memory = crate::tracker::TrackMemory::new(cfg.momentum, cfg.evict_after);
    for t in 0..frames {
        let r = crate::fuse::infer_frame(
            &model,
            &clip.image_f64(t),
            &mut memory,
            t,
            &cfg.fuse_thresholds(),
        )?;
        crate::synthgen::write_pan(&out.join(format!("panoptic_{t}.pan")), &r.class, &r.instance)?;
        crate::synthgen::write_dpt(&out.join(format!("depth_{t}.dpt")), &r.depth)?;
    }
    println!("wrote {frames} frames of predictions to {}", out.display());
    Ok(())
}

// ---- ablations -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    /// Per-seed (PQ, abs_rel) pairs.
    pub runs: Vec<(f64, f64)>,
}

impl AblationRow {
    pub fn median_pq(&self) -> f64 {
        median(self.runs.iter().map(|r| r.0))
    }

    pub fn median_abs_rel(&self) -> f64 {
        median(self.runs.iter().map(|r| r.1))
    }
}

pub fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.is_empty() {
        return f64::NAN;
    }
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Variants of one ablation grid as config transforms.
pub fn grid_variants(grid: &str) -> Result<Vec<(String, Vec<(String, String)>)>, CliError> {
    let v = |pairs: &[(&str, &str)]| {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect::<Vec<_>>()
    };
    Ok(match grid {
        "interaction" => vec![
            ("full".into(), v(&[])),
            ("no-linking".into(), v(&[("model.query_linking", "false")])),
            ("no-dense-init".into(), v(&[("model.dense_init", "false")])),
            (
                "neither".into(),
                v(&[("model.query_linking", "false"), ("model.dense_init", "false")]),
            ),
        ],
        "depth-weight" => vec![
            ("w0.1".into(), v(&[("loss.depth", "0.1")])),
            ("w1".into(), v(&[("loss.depth", "1")])),
            ("w5".into(), v(&[("loss.depth", "5")])),
            ("w10".into(), v(&[("loss.depth", "10")])),
        ],
        "stages" => vec![
            ("s1".into(), v(&[("model.stages", "1")])),
            ("s2".into(), v(&[("model.stages", "2")])),
            ("s3".into(), v(&[("model.stages", "3")])),
        ],
        "hybrid" => vec![
            ("full".into(), v(&[])),
            ("hybrid".into(), v(&[("model.instance_depth", "false")])),
        ],
        other => {
            return Err(CliError::Usage(format!(
                "unknown grid '{other}' (expected interaction | depth-weight | stages | hybrid)"
            )))
        }
    })
}

/// Train + evaluate one configuration for several seeds, in memory (clips
/// are generated directly, nothing touches the dataset on disk).
pub fn run_variant(
    base: &ExperimentConfig,
    overrides: &[(String, String)],
    seeds: usize,
    label: &str,
    quiet: bool,
) -> Result<AblationRow, CliError> {
    let mut cfg = base.clone();
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let entries = dataset_entries(&cfg);
    let train_clips: Vec<ClipSample> = entries
        .iter()
        .filter(|e| e.split == "train")
        .map(|e| crate::synthgen::generate_clip(&e.spec))
        .collect::<Result<_, _>>()?;
    let val_clips: Vec<(String, ClipSample)> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == "val")
        .map(|(i, e)| Ok((format!("clip_{i:05}"), crate::synthgen::generate_clip(&e.spec)?)))
        .collect::<Result<_, crate::synthgen::SynthError>>()?;
    let mut runs = Vec::with_capacity(seeds);
    for s in 0..seeds {
        let mut model = Model::new(cfg.model_config(), cfg.seed + 1000 * (s as u64 + 1));
        let settings = crate::train::TrainSettings {
            seed: cfg.seed + 17 * (s as u64 + 1),
            ..cfg.train_settings()
        };
        train(&mut model, &train_clips, &cfg.loss_weights(), &settings, |_, _| {})?;
        let report = evaluate_clips(
            &model,
            &val_clips,
            &[1],
            &[f64::INFINITY],
            &cfg.fuse_thresholds(),
            cfg.momentum,
            cfg.evict_after,
            None,
            &cfg.hash(),
        )?;
        if !quiet {
            println!(
                "  {label} seed {s}: PQ {:.1} abs_rel {:.4}",
                report.pq * 100.0,
                report.abs_rel
            );
        }
        runs.push((report.pq * 100.0, report.abs_rel));
    }
    Ok(AblationRow { label: label.to_string(), runs })
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    grid: &str,
    seeds: usize,
) -> Result<Vec<AblationRow>, CliError> {
    let variants = grid_variants(grid)?;
    let mut rows = Vec::new();
    for (label, overrides) in &variants {
        println!("ablation {grid}: {label}");
        rows.push(run_variant(cfg, overrides, seeds, label, false)?);
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut table = format!("{:<16}{:>10}{:>12}\n", "variant", "PQ", "abs rel");
    for row in &rows {
        table.push_str(&format!(
            "{:<16}{:>10.1}{:>12.4}\n",
            row.label,
            row.median_pq(),
            row.median_abs_rel()
        ));
    }
    std::fs::write(out_dir.join(format!("ablation_{grid}.txt")), &table)?;
    println!("{table}");
    Ok(rows)
}

/// Top-level dispatch; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result: Result<(), CliError> = (|| {
        match cli.command {
            Command::GenData(common) => {
                let cfg = resolve_config(&common)?;
                cmd_gen_data(&cfg)?;
            }
            Command::Train(common) => {
                let cfg = resolve_config(&common)?;
                cmd_train(&cfg, false)?;
            }
            Command::Eval { common, checkpoint, split } => {
                let cfg = resolve_config(&common)?;
                cmd_eval(&cfg, &checkpoint, &split)?;
            }
            Command::Infer { common, checkpoint, clip, out } => {
                let cfg = resolve_config(&common)?;
                cmd_infer(&cfg, &checkpoint, &clip, &out)?;
            }
            Command::Ablate { common, grid, seeds } => {
                let cfg = resolve_config(&common)?;
                cmd_ablate(&cfg, &grid, seeds)?;
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
