//! The full detector: backbone, RoI pooling, optional scale-aware
//! correction fused into the pooled features, and the detection head.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BoundBackbone, Image, FEAT_CHANNELS, POOL_OUT};
use crate::error::{invalid, Result};
use crate::head::{decode_regression, BoundHead, DetectionHead, RegressionTarget, REG_STDS};
use crate::kernels::{softmax_rows, PoolMode};
use crate::rng::{stream_rng, streams};
use crate::roi::RoI;
use crate::san::{fuse, partition_index, BoundSan, SanModule, ScalePartitionScheme};
use crate::tensor::{Parameter, Scalar, Tensor};

/// Initialization of the scale-aware sub-networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Identity,
    Gaussian,
    /// Identity kernels and a trainable fusion scale starting at 0, so the
    /// detector starts out computing exactly the baseline function.
    IdentityZeroFusion,
}

impl std::str::FromStr for InitMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "gaussian" => Ok(Self::Gaussian),
            "identity-zero-fusion" => Ok(Self::IdentityZeroFusion),
            _ => Err(invalid(
                "init",
                format!("unknown init `{s}` (identity, gaussian, identity-zero-fusion)"),
            )),
        }
    }
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Gaussian => "gaussian",
            Self::IdentityZeroFusion => "identity-zero-fusion",
        })
    }
}

pub const GAUSSIAN_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Detector<T: Scalar = f32> {
    pub backbone: Backbone<T>,
    pub san: Option<SanModule<T>>,
    /// Trainable scale on the SAN feature before fusion, when present.
    pub fusion_alpha: Option<Parameter<T>>,
    pub head: DetectionHead<T>,
    pub pool_mode: PoolMode,
}

impl<T: Scalar> Detector<T> {
    /// Seeded detector; `san = None` builds the baseline without any SAN
    /// state. Each component draws from its own random stream, so the
    /// backbone and head are the same with or without SAN.
    pub fn new(
        num_classes: usize,
        san: Option<(ScalePartitionScheme, InitMode)>,
        pool_mode: PoolMode,
        seed: u64,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(invalid("detector", "need at least one object class"));
        }
        let backbone = Backbone::new(seed);
        let mut head_rng = stream_rng(seed, streams::HEAD_INIT);
        let head = DetectionHead::new(FEAT_CHANNELS, num_classes, &mut head_rng);
        let (san, fusion_alpha) = match san {
            None => (None, None),
            Some((scheme, init)) => {
                let mut m = SanModule::new(scheme, FEAT_CHANNELS);
                let mut alpha = None;
                match init {
                    InitMode::Identity => m.init_identity(),
                    InitMode::Gaussian => m.init_gaussian(GAUSSIAN_INIT_STD, seed)?,
                    InitMode::IdentityZeroFusion => {
                        m.init_identity();
                        alpha = Some(Parameter::zeros(vec![1]));
                    }
                }
                (Some(m), alpha)
            }
        };
        Ok(Self {
            backbone,
            san,
            fusion_alpha,
            head,
            pool_mode,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Named parameters in a fixed order: backbone, SAN, fusion scale, head.
    pub fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = self.backbone.params();
        if let Some(s) = &self.san {
            out.extend(s.params());
        }
        if let Some(a) = &self.fusion_alpha {
            out.push(("fusion.alpha".into(), a));
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = self.backbone.params_mut();
        if let Some(s) = &mut self.san {
            out.extend(s.params_mut());
        }
        if let Some(a) = &mut self.fusion_alpha {
            out.push(("fusion.alpha".into(), a));
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundDetector {
        let backbone = self.backbone.bind(g, trainable);
        let san = self.san.as_ref().map(|s| s.bind(g, trainable));
        let alpha = self.fusion_alpha.as_ref().map(|a| g.param(a, trainable));
        let head = self.head.bind(g, trainable);
        let mut vars = Vec::new();
        for l in &backbone.layers {
            vars.extend([l.w, l.b]);
        }
        if let Some(s) = &san {
            for l in &s.subnets {
                vars.extend([l.w, l.b]);
            }
        }
        vars.extend(alpha);
        vars.extend([head.cls.w, head.cls.b, head.reg.w, head.reg.b]);
        BoundDetector {
            backbone,
            san,
            alpha,
            head,
            scheme: self.san.as_ref().map(|s| s.scheme.clone()),
            pool_mode: self.pool_mode,
            vars,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector {
            backbone: self.backbone.cast(),
            san: self.san.as_ref().map(SanModule::cast),
            fusion_alpha: self.fusion_alpha.as_ref().map(Parameter::cast),
            head: self.head.cast(),
            pool_mode: self.pool_mode,
        }
    }

    /// Class scores and regression deltas for `rois` on one image.
    pub fn score_rois(&self, img: &Image, rois: &[RoI]) -> Result<(Vec<T>, Vec<T>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let f = bound.forward(&mut g, &[(img, rois)])?;
        let probs = softmax_rows(g.value(f.logits).data(), self.num_classes() + 1);
        Ok((probs, g.value(f.deltas).data().to_vec()))
    }

    /// Scores every proposal, decodes one box per foreground class, and
    /// keeps the survivors of per-class non-maximum suppression.
    pub fn detect(&self, img: &Image, proposals: &[RoI], opts: &DetectOptions) -> Result<Vec<Detection>> {
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let k = self.num_classes();
        let (probs, deltas) = self.score_rois(img, proposals)?;
        let mut out = Vec::new();
        for class in 1..=k {
            let mut cands: Vec<Detection> = Vec::new();
            for (i, roi) in proposals.iter().enumerate() {
                let score = probs[i * (k + 1) + class].to_f32().unwrap_or(0.0);
                if !(score >= opts.score_threshold) {
                    continue;
                }
                let d = &deltas[i * 4 * k + 4 * (class - 1)..i * 4 * k + 4 * class];
                let t = RegressionTarget::from_array(std::array::from_fn(|j| {
                    d[j].to_f32().unwrap_or(0.0) * REG_STDS[j]
                }));
                let b = decode_regression(&t, roi).clipped(img.width(), img.height());
                if b.is_valid() {
                    cands.push(Detection {
                        roi: b,
                        class_id: class,
                        score,
                    });
                }
            }
            out.extend(nms(cands, opts.nms_iou));
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.truncate(opts.max_detections);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub roi: RoI,
    pub class_id: usize,
    pub score: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectOptions {
    pub nms_iou: f64,
    pub score_threshold: f32,
    pub max_detections: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            nms_iou: 0.3,
            score_threshold: 0.01,
            max_detections: 100,
        }
    }
}

/// Greedy non-maximum suppression; equal scores keep the earlier box.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    // Stable sort keeps input order among equal scores.
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.iter().all(|k| k.roi.iou(&d.roi) <= iou) {
            keep.push(d);
        }
    }
    keep
}

/// Detector parameters bound into one graph.
#[derive(Clone, Debug)]
pub struct BoundDetector {
    pub backbone: BoundBackbone,
    pub san: Option<BoundSan>,
    pub alpha: Option<Var>,
    pub head: BoundHead,
    pub scheme: Option<ScalePartitionScheme>,
    pub pool_mode: PoolMode,
    /// Parameter handles in [`Detector::params`] order.
    pub vars: Vec<Var>,
}

/// Graph handles of one forward pass over a batch of RoIs.
#[derive(Clone, Debug)]
pub struct RoiForward {
    /// `N×C×7×7` pooled features before any correction.
    pub pooled: Var,
    /// Features entering the head (fused when SAN is present).
    pub fused: Var,
    pub logits: Var,
    pub deltas: Var,
    /// Partition of each RoI (empty without SAN).
    pub partitions: Vec<usize>,
}

impl BoundDetector {
    /// Pools every image's RoIs from its own feature map and runs the
    /// detection path on the concatenated batch.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, batch: &[(&Image, &[RoI])]) -> Result<RoiForward> {
        let mut pooled_parts = Vec::new();
        let mut all = Vec::new();
        for (img, rois) in batch {
            if rois.is_empty() {
                continue;
            }
            let x = g.constant(img.pixels.cast());
            let feat = self.backbone.forward(g, x)?;
            let (_, _, h, w) = g.value(feat).dims4()?;
            let regions = rois
                .iter()
                .map(|r| r.to_cells(self.backbone.total_stride, h, w))
                .collect::<Result<Vec<_>>>()?;
            pooled_parts.push(g.roi_pool(feat, &regions, POOL_OUT, self.pool_mode)?);
            all.extend_from_slice(rois);
        }
        if all.is_empty() {
            return Err(invalid("detector forward", "no RoIs in batch"));
        }
        let pooled = if pooled_parts.len() == 1 {
            pooled_parts[0]
        } else {
            g.concat_batch(&pooled_parts)?
        };
        let (fused, partitions) = match (&self.san, &self.scheme) {
            (Some(san), Some(scheme)) => {
                let parts: Vec<usize> = all.iter().map(|r| partition_index(r, scheme)).collect();
                let corrected = san.forward_partitioned(g, pooled, &parts)?;
                (fuse(g, pooled, corrected, self.alpha)?, parts)
            }
            _ => (pooled, Vec::new()),
        };
        let (logits, deltas) = self.head.forward(g, fused)?;
        Ok(RoiForward {
            pooled,
            fused,
            logits,
            deltas,
            partitions,
        })
    }
}

/// Stacks `1×C×1×1` reference features into `N×C×1×1`.
pub fn stack_references<T: Scalar>(refs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let c = refs.first().map_or(0, |t| t.len());
    let mut data = Vec::with_capacity(refs.len() * c);
    for r in refs {
        if r.len() != c {
            return Err(invalid("stack_references", "mixed channel counts"));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![refs.len(), c, 1, 1], data)
}
