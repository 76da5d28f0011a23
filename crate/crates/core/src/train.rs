//! Multi-task loss, RoI sampling and the SGD training loop.

use rand::seq::index;
use rand::seq::SliceRandom;

use crate::autograd::{Graph, Var};
use crate::backbone::{extract_reference_feature, Image};
use crate::detector::{stack_references, Detector, InitMode};
use crate::error::{invalid, Error, Result};
use crate::head::{assign_roi_labels, RoiLabel, REG_STDS};
use crate::kernels::PoolMode;
use crate::optim::{sgd_step, SgdConfig};
use crate::rng::{stream_rng, streams, Rng};
use crate::roi::RoI;
use crate::san::ScalePartitionScheme;
use crate::synth::{make_proposals, Sample};
use crate::tensor::{Scalar, Tensor};

/// Which parts of the scale-aware machinery are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SanMode {
    /// No SAN at all (baseline detector).
    Off,
    /// SAN in the detection path, trained only by the detection losses.
    NoLoss,
    /// SAN plus the scale-aware loss.
    Full,
}

impl std::str::FromStr for SanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "no-loss" => Ok(Self::NoLoss),
            "full" => Ok(Self::Full),
            _ => Err(invalid("san", format!("unknown mode `{s}` (off, no-loss, full)"))),
        }
    }
}

impl std::fmt::Display for SanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::NoLoss => "no-loss",
            Self::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub base_lr: f64,
    pub lr_decay_step: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub images_per_batch: usize,
    pub rois_per_image: usize,
    /// Upper bound on the positive share of sampled RoIs.
    pub positive_fraction: f64,
    pub pos_iou: f64,
    pub jitter_per_object: usize,
    pub jitter: f32,
    pub negatives_per_image: usize,
    /// RoIs per mini-batch that enter the scale-aware loss.
    pub san_samples: usize,
    pub san_loss_weight: f64,
    pub pool_mode: PoolMode,
    pub scheme: ScalePartitionScheme,
    pub init: InitMode,
    pub san: SanMode,
    pub num_classes: usize,
    pub seed: u64,
    /// Verify on every step that the scale-aware loss leaves the backbone
    /// gradients untouched.
    pub check_blocking: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.02,
            lr_decay_step: 1500,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            iterations: 2000,
            images_per_batch: 2,
            rois_per_image: 32,
            positive_fraction: 0.25,
            pos_iou: 0.5,
            jitter_per_object: 8,
            jitter: 0.25,
            negatives_per_image: 24,
            san_samples: 16,
            san_loss_weight: 1.0,
            pool_mode: PoolMode::Avg,
            scheme: ScalePartitionScheme::toy(),
            init: InitMode::Identity,
            san: SanMode::Full,
            num_classes: 3,
            seed: 0,
            check_blocking: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.base_lr > 0.0) || !(self.lr_decay_factor > 0.0) {
            return bad("learning rate and decay factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        if self.images_per_batch == 0 || self.rois_per_image == 0 || self.lr_decay_step == 0 {
            return bad("images_per_batch, rois_per_image and lr_decay_step must be positive".into());
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return bad("positive_fraction must be in (0, 1]".into());
        }
        if !(self.pos_iou > 0.0 && self.pos_iou < 1.0) {
            return bad("pos_iou must be in (0, 1)".into());
        }
        if self.san_samples > self.images_per_batch * self.rois_per_image {
            return bad(format!(
                "san_samples {} exceeds the {} RoIs of a mini-batch",
                self.san_samples,
                self.images_per_batch * self.rois_per_image
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.san_loss_weight < 0.0 {
            return bad("san_loss_weight must be >= 0".into());
        }
        Ok(())
    }

    /// Step decay: `base_lr · factor^(iter / decay_step)`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.base_lr * self.lr_decay_factor.powi((iter / self.lr_decay_step) as i32)
    }

    /// The detector this configuration trains, at initialization.
    pub fn init_model(&self) -> Result<Detector> {
        let san = match self.san {
            SanMode::Off => None,
            _ => Some((self.scheme.clone(), self.init)),
        };
        Detector::new(self.num_classes, san, self.pool_mode, self.seed)
    }
}

/// Uniform sample of `min(n, len)` items without replacement, in their
/// original order.
pub fn sample_san_rois<X: Clone>(items: &[X], n: usize, rng: &mut Rng) -> Vec<X> {
    if n >= items.len() {
        return items.to_vec();
    }
    let mut idx = index::sample(rng, items.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Loss terms as graph nodes. `total = detection + weight · san`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub reg: Var,
    pub san: Var,
    pub detection: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub cls: f64,
    pub reg: f64,
    pub san: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossValues {
            cls: v(self.cls),
            reg: v(self.reg),
            san: v(self.san),
            total: v(self.total),
        }
    }
}

/// `L_cls + [u ≥ 1]·L_reg + weight·L_san`.
///
/// `logits` is `N×(K+1)`, `deltas` `N×4K` (predicting targets divided by
/// [`REG_STDS`]). Classification is the mean cross-entropy; regression
/// sums smooth-L1 over the four coordinates of each foreground RoI's own
/// class and divides by `N`, so background rows contribute nothing. `san`
/// is the already-averaged scale-aware loss, or `None` when disabled.
pub fn multi_task_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    deltas: Var,
    labels: &[RoiLabel],
    san: Option<Var>,
    san_weight: f64,
) -> Result<LossVars> {
    let n = labels.len();
    let classes: Vec<usize> = labels.iter().map(|l| l.class).collect();
    let cls = g.softmax_cross_entropy(logits, &classes)?;
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i].class >= 1).collect();
    let reg = if pos.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        let rows = g.select_batch(deltas, &pos)?;
        let cols: Vec<Vec<usize>> = pos
            .iter()
            .map(|&i| {
                let u = labels[i].class;
                (4 * (u - 1)..4 * u).collect()
            })
            .collect();
        let pred = g.gather_cols(rows, &cols)?;
        let target = Tensor::new(
            vec![pos.len(), 4],
            pos.iter()
                .flat_map(|&i| {
                    let t = labels[i].target.to_array();
                    (0..4).map(move |j| T::lit((t[j] / REG_STDS[j]) as f64))
                })
                .collect(),
        )?;
        let target = g.constant(target);
        let diff = g.sub(pred, target)?;
        let l = g.smooth_l1(diff);
        let s = g.sum(l);
        g.scale(s, T::one() / T::from_usize(n).unwrap())
    };
    let san = match san {
        Some(s) => s,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    let detection = g.add(cls, reg)?;
    let weighted = g.scale(san, T::lit(san_weight));
    let total = g.add(detection, weighted)?;
    Ok(LossVars {
        cls,
        reg,
        san,
        detection,
        total,
    })
}

/// One image's share of a mini-batch.
#[derive(Clone, Debug)]
pub struct StepInput<'a> {
    pub image: &'a Image,
    pub rois: Vec<RoI>,
    pub labels: Vec<RoiLabel>,
}

pub struct StepGraph<T: Scalar> {
    pub graph: Graph<T>,
    pub losses: LossVars,
    /// Parameter handles in [`Detector::params`] order.
    pub vars: Vec<Var>,
    pub partitions: Vec<usize>,
}

/// Builds the full training graph for one mini-batch. `san_pick` indexes
/// into the concatenated RoIs of all inputs and selects the RoIs that
/// enter the scale-aware loss; it is ignored unless `san_loss` is set and
/// the model has SAN.
pub fn build_step_graph<T: Scalar>(
    model: &Detector<T>,
    inputs: &[StepInput],
    san_pick: &[usize],
    san_loss: bool,
    san_weight: f64,
) -> Result<StepGraph<T>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let batch: Vec<(&Image, &[RoI])> = inputs.iter().map(|s| (s.image, s.rois.as_slice())).collect();
    let fw = bound.forward(&mut g, &batch)?;
    let labels: Vec<RoiLabel> = inputs.iter().flat_map(|s| s.labels.iter().copied()).collect();

    let san_term = match (&bound.san, &model.san) {
        (Some(san), Some(module)) if san_loss && !san_pick.is_empty() => {
            let located: Vec<(&Image, RoI)> = inputs
                .iter()
                .flat_map(|s| s.rois.iter().map(move |r| (s.image, *r)))
                .collect();
            let refs = san_pick
                .iter()
                .map(|&i| {
                    let (img, roi) = located
                        .get(i)
                        .ok_or_else(|| invalid("san sample", format!("RoI index {i} out of range")))?;
                    extract_reference_feature(img, roi, module.scheme.ref_scale, &model.backbone)
                })
                .collect::<Result<Vec<_>>>()?;
            let r_tilde = stack_references(&refs)?;
            let feats = g.select_batch(fw.pooled, san_pick)?;
            let parts: Vec<usize> = san_pick.iter().map(|&i| fw.partitions[i]).collect();
            let l = san.loss_branch(&mut g, feats, &parts, &r_tilde)?;
            Some(g.scale(l, T::one() / T::from_usize(san_pick.len()).unwrap()))
        }
        _ => None,
    };
    let losses = multi_task_loss(&mut g, fw.logits, fw.deltas, &labels, san_term, san_weight)?;
    Ok(StepGraph {
        graph: g,
        losses,
        vars: bound.vars,
        partitions: fw.partitions,
    })
}

/// Proposals for one training image (ground truths, jittered copies,
/// random negatives), labelled and subsampled to at most
/// `rois_per_image` with a capped positive share.
pub fn sample_training_rois(sample: &Sample, cfg: &TrainingConfig, rng: &mut Rng) -> Result<(Vec<RoI>, Vec<RoiLabel>)> {
    let img = &sample.image;
    let mut rois: Vec<RoI> = sample.annotations.iter().map(|a| a.roi).collect();
    rois.extend(make_proposals(
        &sample.annotations,
        cfg.jitter_per_object,
        cfg.negatives_per_image,
        cfg.jitter,
        (img.width(), img.height()),
        img.id,
        rng,
    ));
    let gts: Vec<(RoI, usize)> = sample.annotations.iter().map(|a| (a.roi, a.class_id)).collect();
    let labels = assign_roi_labels(&rois, &gts, cfg.pos_iou)?;
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..rois.len()).partition(|&i| labels[i].class > 0);
    pos.shuffle(rng);
    neg.shuffle(rng);
    let max_pos = ((cfg.rois_per_image as f64 * cfg.positive_fraction).floor() as usize).max(1);
    pos.truncate(max_pos.min(cfg.rois_per_image));
    neg.truncate(cfg.rois_per_image - pos.len());
    let mut keep: Vec<usize> = pos.into_iter().chain(neg).collect();
    keep.sort_unstable();
    Ok((keep.iter().map(|&i| rois[i]).collect(), keep.iter().map(|&i| labels[i]).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_san: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "iter,l_cls,l_reg,l_san,lr";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.iter, r.l_cls, r.l_reg, r.l_san, r.lr));
    }
    s
}

pub struct TrainOutcome {
    pub model: Detector,
    pub log: Vec<LogRow>,
}

/// Backbone gradients of the total and of the detection-only loss must be
/// bitwise equal; anything else means the scale-aware loss leaked below
/// the sub-networks.
pub fn check_gradient_blocking<T: Scalar>(step: &StepGraph<T>, model: &Detector<T>) -> Result<()> {
    let full = step.graph.backward(step.losses.total)?;
    let det = step.graph.backward(step.losses.detection)?;
    let n_backbone = model.backbone.params().len();
    // f32 → f64 is exact, so this compares the original bit patterns.
    let bits = |x: T| x.to_f64().unwrap_or(f64::NAN).to_bits();
    for ((name, _), &v) in model.params().iter().zip(&step.vars).take(n_backbone) {
        let a = full.get_or_zeros(v);
        let b = det.get_or_zeros(v);
        if a.iter().zip(&b).any(|(x, y)| bits(*x) != bits(*y)) {
            return Err(invalid(
                "gradient blocking",
                format!("scale-aware loss reached backbone parameter {name}"),
            ));
        }
    }
    Ok(())
}

/// Runs `cfg.iterations` SGD steps over `samples` and returns the trained
/// model with one log row per step. `on_step` sees each row as it is
/// produced.
pub fn train(samples: &[Sample], cfg: &TrainingConfig, mut on_step: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(invalid("train", "empty dataset"));
    }
    if let Some(bad) = samples
        .iter()
        .flat_map(|s| &s.annotations)
        .find(|a| a.class_id == 0 || a.class_id > cfg.num_classes)
    {
        return Err(Error::LabelOutOfRange {
            label: bad.class_id,
            classes: cfg.num_classes,
        });
    }
    let mut model = cfg.init_model()?;
    let mut order_rng = stream_rng(cfg.seed, streams::TRAIN_ORDER);
    let mut roi_rng = stream_rng(cfg.seed, streams::TRAIN_ROIS);
    let mut san_rng = stream_rng(cfg.seed, streams::SAN_SAMPLES);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.iterations);
    let san_loss = cfg.san == SanMode::Full;

    for iter in 0..cfg.iterations {
        let mut picked = Vec::with_capacity(cfg.images_per_batch);
        while picked.len() < cfg.images_per_batch {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut order_rng);
            }
            picked.push(order.pop().expect("refilled above"));
        }
        let mut inputs = Vec::with_capacity(picked.len());
        for &i in &picked {
            let (rois, labels) = sample_training_rois(&samples[i], cfg, &mut roi_rng)?;
            inputs.push(StepInput {
                image: &samples[i].image,
                rois,
                labels,
            });
        }
        let total_rois: usize = inputs.iter().map(|s| s.rois.len()).sum();
        let all: Vec<usize> = (0..total_rois).collect();
        let san_pick = if san_loss {
            sample_san_rois(&all, cfg.san_samples, &mut san_rng)
        } else {
            Vec::new()
        };

        let step = build_step_graph(&model, &inputs, &san_pick, san_loss, cfg.san_loss_weight)?;
        let values = step.losses.values(&step.graph);
        if ![values.cls, values.reg, values.san, values.total].iter().all(|v| v.is_finite()) {
            let ids: Vec<usize> = picked.iter().map(|&i| samples[i].image.id).collect();
            return Err(Error::NonFiniteLoss {
                iter,
                detail: format!(
                    "l_cls={} l_reg={} l_san={} images={ids:?} rois={total_rois} san_pick={san_pick:?}",
                    values.cls, values.reg, values.san
                ),
            });
        }
        if cfg.check_blocking && san_loss {
            check_gradient_blocking(&step, &model)?;
        }
        let grads = step.graph.backward(step.losses.total)?;
        let lr = cfg.lr_at(iter);
        let mut params = model.params_mut();
        for ((_, p), &v) in params.iter_mut().zip(&step.vars) {
            p.tensor.grad = Some(grads.get_or_zeros(v));
        }
        let mut named: Vec<(&str, &mut crate::tensor::Parameter<f32>)> =
            params.iter_mut().map(|(n, p)| (n.as_str(), &mut **p)).collect();
        sgd_step(
            &mut named,
            SgdConfig {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            },
        )?;
        let row = LogRow {
            iter,
            l_cls: values.cls,
            l_reg: values.reg,
            l_san: values.san,
            lr,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(TrainOutcome { model, log })
}
