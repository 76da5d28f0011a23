//! Command-line front end: `gen-data`, `train`, `eval`, `cam`, `rmse`.
//!
//! Settings come from built-in defaults, then `SANLAB_SEED` (seed only),
//! then an optional flat `key = value` config file, then command-line
//! flags. Every command writes `run-meta.json` with the resolved settings.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Map, Value};

use crate::analysis::{
    cam_csv, cam_pgm, cam_stability, compute_cam, evaluate_ap, evaluate_model, rmse_csv, rmse_report,
    rmse_summary, rmse_summary_csv,
};
use crate::backbone::cam_scale_sweep;
use crate::checkpoint;
use crate::detector::{DetectOptions, Detection, InitMode};
use crate::error::{Error, Result};
use crate::kernels::PoolMode;
use crate::san::ScalePartitionScheme;
use crate::synth::{generate_dataset, read_ppm, read_split, scale_statistics, statistics_csv, write_split, DatasetConfig};
use crate::train::{log_csv, train, SanMode, TrainingConfig};

/// Every setting a command may need. Field names are the config keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub num_train: usize,
    pub num_test: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub noise_amplitude: f64,
    pub base_lr: f64,
    pub lr_decay_step: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub rois_per_image: usize,
    pub positive_fraction: f64,
    pub san: SanMode,
    pub init: InitMode,
    pub san_pool: PoolMode,
    pub san_samples: usize,
    pub san_loss_weight: f64,
    pub partitions: usize,
    pub ref_scale: usize,
    /// Partition boundaries as side lengths in pixels (areas are squares).
    pub boundaries: Vec<f64>,
    pub check_blocking: bool,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub rmse_scales: Vec<usize>,
    pub rmse_context: f64,
    pub cam_scales: Vec<usize>,
    pub cam_k: usize,
    pub normalize_rois: bool,
    /// Explicitly set keys (file or flags), used to reject contradictory
    /// switch combinations.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DatasetConfig::default();
        let t = TrainingConfig::default();
        Self {
            seed: 0,
            num_train: 200,
            num_test: 50,
            image_size: d.image_size,
            num_classes: d.num_classes,
            scale_min: d.scale_range.0,
            scale_max: d.scale_range.1,
            objects_min: d.objects_per_image.0,
            objects_max: d.objects_per_image.1,
            noise_amplitude: d.noise_amplitude,
            base_lr: t.base_lr,
            lr_decay_step: t.lr_decay_step,
            lr_decay_factor: t.lr_decay_factor,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            iterations: t.iterations,
            rois_per_image: t.rois_per_image,
            positive_fraction: t.positive_fraction,
            san: t.san,
            init: t.init,
            san_pool: t.pool_mode,
            san_samples: t.san_samples,
            san_loss_weight: t.san_loss_weight,
            partitions: 3,
            ref_scale: 48,
            boundaries: vec![24.0, 48.0],
            check_blocking: false,
            nms_iou: 0.3,
            score_threshold: 0.01,
            rmse_scales: vec![12, 20, 32, 44, 56, 72],
            rmse_context: 3.0,
            cam_scales: vec![16, 24, 32, 48, 64, 96],
            cam_k: 10,
            normalize_rois: false,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "num_train" => self.num_train = parse(key, v)?,
            "num_test" => self.num_test = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "scale_min" => self.scale_min = parse(key, v)?,
            "scale_max" => self.scale_max = parse(key, v)?,
            "objects_min" => self.objects_min = parse(key, v)?,
            "objects_max" => self.objects_max = parse(key, v)?,
            "noise_amplitude" => self.noise_amplitude = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "lr_decay_step" => self.lr_decay_step = parse(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "rois_per_image" => self.rois_per_image = parse(key, v)?,
            "positive_fraction" => self.positive_fraction = parse(key, v)?,
            "san" => self.san = v.trim().parse()?,
            "init" => self.init = v.trim().parse()?,
            "san_pool" => {
                self.san_pool = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad pooling mode `{v}` (avg, max)")))?
            }
            "san_samples" => self.san_samples = parse(key, v)?,
            "san_loss_weight" => self.san_loss_weight = parse(key, v)?,
            "partitions" => self.partitions = parse(key, v)?,
            "ref_scale" => self.ref_scale = parse(key, v)?,
            "boundaries" => self.boundaries = parse_list(key, v)?,
            "check_blocking" => self.check_blocking = parse_bool(key, v)?,
            "nms_iou" => self.nms_iou = parse(key, v)?,
            "score_threshold" => self.score_threshold = parse(key, v)?,
            "rmse_scales" => self.rmse_scales = parse_list(key, v)?,
            "rmse_context" => self.rmse_context = parse(key, v)?,
            "cam_scales" => self.cam_scales = parse_list(key, v)?,
            "cam_k" => self.cam_k = parse(key, v)?,
            "normalize_rois" => self.normalize_rois = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Resolved settings as JSON, keyed by config key.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("seed", json!(self.seed));
        put("num_train", json!(self.num_train));
        put("num_test", json!(self.num_test));
        put("image_size", json!(self.image_size));
        put("num_classes", json!(self.num_classes));
        put("scale_min", json!(self.scale_min));
        put("scale_max", json!(self.scale_max));
        put("objects_min", json!(self.objects_min));
        put("objects_max", json!(self.objects_max));
        put("noise_amplitude", json!(self.noise_amplitude));
        put("base_lr", json!(self.base_lr));
        put("lr_decay_step", json!(self.lr_decay_step));
        put("lr_decay_factor", json!(self.lr_decay_factor));
        put("momentum", json!(self.momentum));
        put("weight_decay", json!(self.weight_decay));
        put("iterations", json!(self.iterations));
        put("rois_per_image", json!(self.rois_per_image));
        put("positive_fraction", json!(self.positive_fraction));
        put("san", json!(self.san.to_string()));
        put("init", json!(self.init.to_string()));
        put("san_pool", json!(self.san_pool.to_string()));
        put("san_samples", json!(self.san_samples));
        put("san_loss_weight", json!(self.san_loss_weight));
        put("partitions", json!(self.partitions));
        put("ref_scale", json!(self.ref_scale));
        put("boundaries", json!(self.boundaries));
        put("check_blocking", json!(self.check_blocking));
        put("nms_iou", json!(self.nms_iou));
        put("score_threshold", json!(self.score_threshold));
        put("rmse_scales", json!(self.rmse_scales));
        put("rmse_context", json!(self.rmse_context));
        put("cam_scales", json!(self.cam_scales));
        put("cam_k", json!(self.cam_k));
        put("normalize_rois", json!(self.normalize_rois));
        Value::Object(m)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn dataset(&self, split_test: bool) -> DatasetConfig {
        DatasetConfig {
            num_images: if split_test { self.num_test } else { self.num_train },
            image_size: self.image_size,
            num_classes: self.num_classes,
            scale_range: (self.scale_min, self.scale_max),
            objects_per_image: (self.objects_min, self.objects_max),
            noise_amplitude: self.noise_amplitude,
            seed: self.seed,
            first_id: if split_test { self.num_train } else { 0 },
        }
    }

    /// Partition scheme from `ref_scale`, `partitions` and `boundaries`.
    /// When only `partitions` is given, boundary sides are
    /// `ref_scale · 2^(j − (n − 2))`, so three partitions split at half and
    /// at the reference scale.
    pub fn scheme(&self) -> Result<ScalePartitionScheme> {
        if self.partitions == 0 {
            return Err(Error::Config("partitions must be >= 1".into()));
        }
        let sides = if self.explicit.contains("boundaries") {
            if self.explicit.contains("partitions") && self.partitions != self.boundaries.len() + 1 {
                return Err(Error::Config(format!(
                    "{} boundaries give {} partitions, but partitions = {}",
                    self.boundaries.len(),
                    self.boundaries.len() + 1,
                    self.partitions
                )));
            }
            self.boundaries.clone()
        } else if self.explicit.contains("partitions") || self.explicit.contains("ref_scale") {
            let n = self.partitions as i32;
            (0..n - 1)
                .map(|j| self.ref_scale as f64 * 2f64.powi(j - (n - 2)))
                .collect()
        } else {
            self.boundaries.clone()
        };
        ScalePartitionScheme::from_sides(self.ref_scale, &sides)
    }

    pub fn training(&self) -> Result<TrainingConfig> {
        let san_keys = ["init", "partitions", "boundaries", "ref_scale", "san_samples", "san_loss_weight"];
        if self.san == SanMode::Off {
            if let Some(k) = san_keys.iter().find(|k| self.explicit.contains(**k)) {
                return Err(Error::Config(format!("`{k}` has no effect with san = off")));
            }
        }
        if self.san == SanMode::NoLoss {
            if let Some(k) = ["san_samples", "san_loss_weight"].iter().find(|k| self.explicit.contains(**k)) {
                return Err(Error::Config(format!("`{k}` has no effect with san = no-loss")));
            }
        }
        let cfg = TrainingConfig {
            base_lr: self.base_lr,
            lr_decay_step: self.lr_decay_step,
            lr_decay_factor: self.lr_decay_factor,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            iterations: self.iterations,
            rois_per_image: self.rois_per_image,
            positive_fraction: self.positive_fraction,
            san_samples: self.san_samples,
            san_loss_weight: self.san_loss_weight,
            pool_mode: self.san_pool,
            scheme: self.scheme()?,
            init: self.init,
            san: self.san,
            num_classes: self.num_classes,
            seed: self.seed,
            check_blocking: self.check_blocking,
            ..TrainingConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn detect_options(&self) -> DetectOptions {
        DetectOptions {
            nms_iou: self.nms_iou,
            score_threshold: self.score_threshold as f32,
            ..DetectOptions::default()
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sanlab", version, about = "Scale-aware feature correction on a synthetic detection task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (falls back to SANLAB_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub san: Option<String>,
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long = "san-pool")]
    pub san_pool: Option<String>,
    #[arg(long = "san-samples")]
    pub san_samples: Option<String>,
    #[arg(long)]
    pub partitions: Option<String>,
    #[arg(long = "ref-scale")]
    pub ref_scale: Option<String>,
    /// Comma-separated boundary side lengths in pixels.
    #[arg(long)]
    pub boundaries: Option<String>,
    #[arg(long)]
    pub iterations: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    /// Verify every step that the scale-aware loss leaves backbone
    /// gradients unchanged.
    #[arg(long = "check-blocking")]
    pub check_blocking: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic train/test splits and their scale statistics.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector on `<data>/train`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Average precision on `<data>/test`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Debug: score the ground truth itself instead of running the model.
        #[arg(long = "oracle-detections")]
        oracle_detections: bool,
    },
    /// Channel activation matrix of one image over a scale sweep.
    Cam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated square sizes.
        #[arg(long)]
        scales: Option<String>,
        #[arg(long)]
        k: Option<String>,
        /// Resize each scaled image to the reference scale before the backbone.
        #[arg(long = "normalize-rois")]
        normalize_rois: bool,
    },
    /// Feature RMSE against the reference scale, with and without SAN.
    Rmse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scales: Option<String>,
    },
}

fn resolve(common: &Common, flags: &[(&str, Option<&String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(s) = std::env::var("SANLAB_SEED") {
        cfg.seed = parse("SANLAB_SEED", &s)?;
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_file_text(&text)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{what} {} not found", path.display())));
    }
    Ok(())
}

/// Input paths are left out so the file only depends on settings.
fn write_meta(dir: &Path, command: &str, cfg: &RunConfig, extra: Value) -> Result<()> {
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.to_json(),
        "inputs": extra,
    });
    fs::write(dir.join("run-meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = resolve(&common, &[])?;
            let out = out_dir(&common)?;
            let train_cfg = cfg.dataset(false);
            let test_cfg = cfg.dataset(true);
            train_cfg.validate()?;
            let train_set = generate_dataset(&train_cfg)?;
            let test_set = generate_dataset(&test_cfg)?;
            write_split(&out.join("train"), &train_set)?;
            write_split(&out.join("test"), &test_set)?;
            let anns: Vec<_> = train_set.iter().flat_map(|s| s.annotations.iter().copied()).collect();
            let stats_csv = if anns.is_empty() {
                statistics_csv(
                    &(1..=cfg.num_classes)
                        .map(|k| crate::synth::ClassStats {
                            class_id: k,
                            count: 0,
                            median_area: f64::NAN,
                            std_area: f64::NAN,
                        })
                        .collect::<Vec<_>>(),
                )
            } else {
                statistics_csv(&scale_statistics(&anns, cfg.num_classes)?)
            };
            fs::write(out.join("scale_stats.csv"), stats_csv)?;
            write_meta(&out, "gen-data", &cfg, json!({}))?;
            info!("wrote {} train and {} test images to {}", train_set.len(), test_set.len(), out.display());
        }
        Command::Train { common, data, flags } => {
            let cfg = resolve(
                &common,
                &[
                    ("san", flags.san.as_ref()),
                    ("init", flags.init.as_ref()),
                    ("san_pool", flags.san_pool.as_ref()),
                    ("san_samples", flags.san_samples.as_ref()),
                    ("partitions", flags.partitions.as_ref()),
                    ("ref_scale", flags.ref_scale.as_ref()),
                    ("boundaries", flags.boundaries.as_ref()),
                    ("iterations", flags.iterations.as_ref()),
                    ("base_lr", flags.lr.as_ref()),
                ],
            )?;
            let mut cfg = cfg;
            if flags.check_blocking {
                cfg.set("check_blocking", "true")?;
            }
            let tcfg = cfg.training()?;
            require_file(&data.join("train").join(crate::synth::MANIFEST), "training manifest")?;
            let out = out_dir(&common)?;
            let samples = read_split(&data.join("train"))?;
            let outcome = train(&samples, &tcfg, |r| {
                if r.iter % 100 == 0 {
                    info!(
                        "iter {} l_cls {:.4} l_reg {:.4} l_san {:.4} lr {}",
                        r.iter, r.l_cls, r.l_reg, r.l_san, r.lr
                    );
                }
            })?;
            checkpoint::save(&out.join("checkpoint.bin"), &outcome.model)?;
            fs::write(out.join("train_log.csv"), log_csv(&outcome.log))?;
            write_meta(&out, "train", &cfg, json!({}))?;
            info!("checkpoint written to {}", out.join("checkpoint.bin").display());
        }
        Command::Eval {
            common,
            checkpoint: ckpt,
            data,
            oracle_detections,
        } => {
            let cfg = resolve(&common, &[])?;
            require_file(&ckpt, "checkpoint")?;
            require_file(&data.join("test").join(crate::synth::MANIFEST), "test manifest")?;
            let out = out_dir(&common)?;
            let model = checkpoint::load(&ckpt)?;
            let samples = read_split(&data.join("test"))?;
            if samples.is_empty() {
                return Err(Error::Config("test split is empty".into()));
            }
            let report = if oracle_detections {
                let gts: Vec<_> = samples.iter().flat_map(|s| s.annotations.iter().copied()).collect();
                let dets: Vec<Detection> = gts
                    .iter()
                    .map(|a| Detection {
                        roi: a.roi,
                        class_id: a.class_id,
                        score: 1.0,
                    })
                    .collect();
                evaluate_ap(&dets, &gts, model.num_classes(), 0.5)
            } else {
                evaluate_model(&model, &samples, cfg.seed, &cfg.detect_options())?
            };
            let text = serde_json::to_string_pretty(&report)? + "\n";
            fs::write(out.join("metrics.json"), &text)?;
            write_meta(
                &out,
                "eval",
                &cfg,
                json!({ "oracle_detections": oracle_detections }),
            )?;
            print!("{text}");
        }
        Command::Cam {
            common,
            checkpoint: ckpt,
            image,
            scales,
            k,
            normalize_rois,
        } => {
            let mut cfg = resolve(&common, &[("cam_scales", scales.as_ref()), ("cam_k", k.as_ref())])?;
            if normalize_rois {
                cfg.set("normalize_rois", "true")?;
            }
            if cfg.cam_scales.is_empty() {
                return Err(Error::Config("no CAM scales given".into()));
            }
            require_file(&ckpt, "checkpoint")?;
            require_file(&image, "image")?;
            let out = out_dir(&common)?;
            let model = checkpoint::load(&ckpt)?;
            let img = read_ppm(&image, 0)?;
            let ref_scale = model.san.as_ref().map_or(cfg.ref_scale, |s| s.scheme.ref_scale);
            let sweep = cam_scale_sweep(&img, &model.backbone, &cfg.cam_scales, cfg.normalize_rois.then_some(ref_scale))?;
            for w in &sweep.warnings {
                log::warn!("{w}");
            }
            let vectors: Vec<(usize, Vec<f64>)> = sweep
                .vectors
                .iter()
                .map(|(s, v)| (*s, v.iter().map(|&x| x as f64).collect()))
                .collect();
            let cam = compute_cam(&vectors, cfg.cam_k)?;
            let stability = if cam.scales.len() >= 2 {
                Some(cam_stability(&cam, cfg.cam_k)?)
            } else {
                None
            };
            fs::write(out.join("cam.csv"), cam_csv(&cam))?;
            fs::write(out.join("cam.pgm"), cam_pgm(&cam, 8, false))?;
            let summary = json!({
                "stability": stability,
                "normalized": cfg.normalize_rois,
                "scales": cam.scales,
                "warnings": sweep.warnings,
            });
            fs::write(out.join("cam.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
            write_meta(&out, "cam", &cfg, json!({}))?;
            match stability {
                Some(s) => println!("stability {s}"),
                None => println!("stability n/a (single scale)"),
            }
        }
        Command::Rmse {
            common,
            checkpoint: ckpt,
            data,
            scales,
        } => {
            let cfg = resolve(&common, &[("rmse_scales", scales.as_ref())])?;
            require_file(&ckpt, "checkpoint")?;
            require_file(&data.join("test").join(crate::synth::MANIFEST), "test manifest")?;
            let out = out_dir(&common)?;
            let model = checkpoint::load(&ckpt)?;
            let samples = read_split(&data.join("test"))?;
            let rows = rmse_report(&model, &samples, &cfg.rmse_scales, cfg.rmse_context as f32)?;
            let summary = rmse_summary(&rows, model.num_classes());
            fs::write(out.join("rmse.csv"), rmse_csv(&rows))?;
            fs::write(out.join("rmse_summary.csv"), rmse_summary_csv(&summary))?;
            write_meta(&out, "rmse", &cfg, json!({}))?;
            for c in &summary {
                println!(
                    "class {} mean rmse without {:.5} with {:.5}",
                    c.class_id, c.mean_without, c.mean_with
                );
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let mut c = RunConfig::default();
        c.apply_file_text("# comment\niterations = 5  # trailing\n\nsan = no-loss\nboundaries = 10,20\n")
            .unwrap();
        assert_eq!(c.iterations, 5);
        assert_eq!(c.san, SanMode::NoLoss);
        assert_eq!(c.boundaries, vec![10.0, 20.0]);
        assert!(c.apply_file_text("bogus = 1").is_err());
        assert!(c.apply_file_text("iterations 5").is_err());
    }

    #[test]
    fn scheme_from_partitions() {
        let mut c = RunConfig::default();
        assert_eq!(c.scheme().unwrap(), ScalePartitionScheme::toy());
        c.set("partitions", "1").unwrap();
        assert_eq!(c.scheme().unwrap().num_partitions(), 1);
        c.set("partitions", "3").unwrap();
        assert_eq!(c.scheme().unwrap(), ScalePartitionScheme::toy());
        c.set("boundaries", "30").unwrap();
        assert!(c.scheme().is_err());
    }

    #[test]
    fn contradictory_switches_rejected() {
        let mut c = RunConfig::default();
        c.set("san", "off").unwrap();
        c.set("init", "gaussian").unwrap();
        assert!(c.training().is_err());
        let mut c = RunConfig::default();
        c.set("san", "no-loss").unwrap();
        c.set("san_samples", "8").unwrap();
        assert!(c.training().is_err());
    }
}
