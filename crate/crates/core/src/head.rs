//! Classification/regression head, box parameterization and RoI labelling.

use crate::autograd::{Graph, Var};
use crate::backbone::{BoundConv, ConvLayer};
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::roi::RoI;
use crate::tensor::{Parameter, Scalar};

/// Scale applied to regression targets before the loss, so the head
/// predicts `t / REG_STDS`.
pub const REG_STDS: [f32; 4] = [0.1, 0.1, 0.2, 0.2];

/// Box-regression deltas in center/size form; `tw`, `th` are log-ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegressionTarget {
    pub tx: f32,
    pub ty: f32,
    pub tw: f32,
    pub th: f32,
}

impl RegressionTarget {
    pub fn to_array(self) -> [f32; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f32; 4]) -> Self {
        Self {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

pub fn encode_regression(roi: &RoI, gt: &RoI) -> Result<RegressionTarget> {
    if !(roi.width() > 0.0 && roi.height() > 0.0) {
        return Err(invalid("encode_regression", format!("zero-size roi {roi:?}")));
    }
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(invalid("encode_regression", format!("zero-size ground truth {gt:?}")));
    }
    let (rx, ry) = roi.center();
    let (gx, gy) = gt.center();
    Ok(RegressionTarget {
        tx: (gx - rx) / roi.width(),
        ty: (gy - ry) / roi.height(),
        tw: (gt.width() / roi.width()).ln(),
        th: (gt.height() / roi.height()).ln(),
    })
}

pub fn decode_regression(t: &RegressionTarget, roi: &RoI) -> RoI {
    let (rx, ry) = roi.center();
    let (rw, rh) = (roi.width(), roi.height());
    let cx = rx + t.tx * rw;
    let cy = ry + t.ty * rh;
    let w = rw * t.tw.exp();
    let h = rh * t.th.exp();
    RoI {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
        image_id: roi.image_id,
    }
}

/// Label of a RoI: class (0 = background) and regression target towards
/// its matched ground truth (zeros for background).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiLabel {
    pub class: usize,
    pub target: RegressionTarget,
}

/// Assigns each RoI the class of its max-IoU ground truth when that IoU is
/// at least `pos_iou` (ties go to the lower ground-truth index), background
/// otherwise.
pub fn assign_roi_labels(
    rois: &[RoI],
    gts: &[(RoI, usize)],
    pos_iou: f64,
) -> Result<Vec<RoiLabel>> {
    if !(pos_iou > 0.0 && pos_iou < 1.0) {
        return Err(invalid("assign_roi_labels", format!("IoU threshold {pos_iou} not in (0, 1)")));
    }
    rois.iter()
        .map(|roi| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (gt, _)) in gts.iter().enumerate() {
                let iou = roi.iou(gt);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, iou)) if iou >= pos_iou => Ok(RoiLabel {
                    class: gts[j].1,
                    target: encode_regression(roi, &gts[j].0)?,
                }),
                _ => Ok(RoiLabel {
                    class: 0,
                    target: RegressionTarget::default(),
                }),
            }
        })
        .collect()
}

/// 1×1 convolutions to `K+1` class scores and `4K` box deltas, each
/// followed by global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead<T: Scalar = f32> {
    pub cls: ConvLayer<T>,
    pub reg: ConvLayer<T>,
}

impl<T: Scalar> DetectionHead<T> {
    pub fn new(channels: usize, num_classes: usize, rng: &mut Rng) -> Self {
        let mut cls = ConvLayer::gaussian(num_classes + 1, channels, 1, 1, 0.01, rng);
        let mut reg = ConvLayer::gaussian(4 * num_classes, channels, 1, 1, 0.001, rng);
        for l in [&mut cls, &mut reg] {
            l.pad_mode = crate::kernels::PadMode::Zero;
        }
        Self { cls, reg }
    }

    pub fn num_classes(&self) -> usize {
        self.cls.w.shape()[0] - 1
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundHead {
        BoundHead {
            cls: self.cls.bind(g, trainable),
            reg: self.reg.bind(g, trainable),
        }
    }

    pub fn params(&self) -> Vec<(String, &Parameter<T>)> {
        vec![
            ("head.cls.w".into(), &self.cls.w),
            ("head.cls.b".into(), &self.cls.b),
            ("head.reg.w".into(), &self.reg.w),
            ("head.reg.b".into(), &self.reg.b),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        vec![
            ("head.cls.w".into(), &mut self.cls.w),
            ("head.cls.b".into(), &mut self.cls.b),
            ("head.reg.w".into(), &mut self.reg.w),
            ("head.reg.b".into(), &mut self.reg.b),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> DetectionHead<U> {
        DetectionHead {
            cls: self.cls.cast(),
            reg: self.reg.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub cls: BoundConv,
    pub reg: BoundConv,
}

impl BoundHead {
    /// `N×C×h×w` pooled features → (`N×(K+1)` logits, `N×4K` deltas).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, feats: Var) -> Result<(Var, Var)> {
        let n = g.value(feats).shape()[0];
        let c = self.cls.apply(g, feats)?;
        let c = g.global_avg_pool(c)?;
        let m = g.value(c).len() / n.max(1);
        let logits = g.reshape(c, vec![n, m])?;
        let r = self.reg.apply(g, feats)?;
        let r = g.global_avg_pool(r)?;
        let m = g.value(r).len() / n.max(1);
        let deltas = g.reshape(r, vec![n, m])?;
        Ok((logits, deltas))
    }
}
