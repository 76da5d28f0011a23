//! Measurement tools: channel activation matrices across scales, feature
//! RMSE against the reference scale with and without SAN, and VOC-style
//! average precision.

use serde::Serialize;

use crate::backbone::{backbone_forward, extract_reference_feature, roi_pool, Image};
use crate::detector::{DetectOptions, Detection, Detector};
use crate::error::{invalid, shape_err, Result};
use crate::kernels::bilinear_resize;
use crate::roi::RoI;
use crate::san::{partition_index, SanModule};
use crate::rng::{stream_rng, streams};
use crate::synth::{make_proposals, Annotation, Sample};
use crate::tensor::{Scalar, Tensor};

/// Activations of the dominant channels (rows) at each scale (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct CamMatrix {
    pub scales: Vec<usize>,
    pub channel_ids: Vec<usize>,
    /// `values[row][col]`: channel `channel_ids[row]` at `scales[col]`.
    pub values: Vec<Vec<f64>>,
}

/// Indices of the `k` largest entries, largest first; equal values keep
/// the lower index first.
pub fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Union (first-seen order) of every scale's top-`k` channels, with the
/// raw activations of those channels at all scales.
pub fn compute_cam(vectors: &[(usize, Vec<f64>)], k: usize) -> Result<CamMatrix> {
    let Some((_, first)) = vectors.first() else {
        return Err(invalid("compute_cam", "no channel vectors"));
    };
    if k == 0 {
        return Err(invalid("compute_cam", "k must be >= 1"));
    }
    let c = first.len();
    if let Some((s, v)) = vectors.iter().find(|(_, v)| v.len() != c) {
        return Err(shape_err("compute_cam", format!("{c} channels"), format!("{} at scale {s}", v.len())));
    }
    let mut channel_ids = Vec::new();
    for (_, v) in vectors {
        for ch in top_k(v, k) {
            if !channel_ids.contains(&ch) {
                channel_ids.push(ch);
            }
        }
    }
    let values = channel_ids
        .iter()
        .map(|&ch| vectors.iter().map(|(_, v)| v[ch]).collect())
        .collect();
    Ok(CamMatrix {
        scales: vectors.iter().map(|(s, _)| *s).collect(),
        channel_ids,
        values,
    })
}

/// Mean pairwise Jaccard similarity of the per-scale top-`k` channel
/// sets, recomputed from the matrix columns.
pub fn cam_stability(cam: &CamMatrix, k: usize) -> Result<f64> {
    let n = cam.scales.len();
    if n < 2 {
        return Err(invalid("cam_stability", "need at least two scales"));
    }
    let sets: Vec<Vec<usize>> = (0..n)
        .map(|col| {
            let mut idx: Vec<usize> = (0..cam.channel_ids.len()).collect();
            idx.sort_by(|&a, &b| {
                cam.values[b][col]
                    .total_cmp(&cam.values[a][col])
                    .then(cam.channel_ids[a].cmp(&cam.channel_ids[b]))
            });
            idx.truncate(k);
            let mut s: Vec<usize> = idx.into_iter().map(|r| cam.channel_ids[r]).collect();
            s.sort_unstable();
            s
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let inter = sets[i].iter().filter(|c| sets[j].contains(c)).count();
            let union = sets[i].len() + sets[j].len() - inter;
            total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn cam_csv(cam: &CamMatrix) -> String {
    let mut s = String::from("channel");
    for sc in &cam.scales {
        s.push_str(&format!(",{sc}"));
    }
    s.push('\n');
    for (ch, row) in cam.channel_ids.iter().zip(&cam.values) {
        s.push_str(&ch.to_string());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Binary PGM heatmap of the matrix, `block×block` pixels per cell, min-max
/// normalized over the whole matrix (or per column when `per_column`).
/// Brighter means larger activation.
pub fn cam_pgm(cam: &CamMatrix, block: usize, per_column: bool) -> Vec<u8> {
    let rows = cam.channel_ids.len();
    let cols = cam.scales.len();
    let range = |vals: &mut dyn Iterator<Item = f64>| {
        vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let global = range(&mut cam.values.iter().flatten().copied());
    let col_ranges: Vec<(f64, f64)> =
        (0..cols).map(|c| range(&mut cam.values.iter().map(|r| r[c]))).collect();
    let level = |r: usize, c: usize| -> u8 {
        let (lo, hi) = if per_column { col_ranges[c] } else { global };
        let v = cam.values[r][c];
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else if v > 0.0 {
            255
        } else {
            0
        }
    };
    let (w, h) = (cols * block, rows * block);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(level(y / block, x / block));
        }
    }
    out
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(shape_err(
            "rmse",
            format!("{:?}", b.shape()),
            format!("{:?}", a.shape()),
        ));
    }
    Ok(())
}

/// `sqrt(mean_c (z_s − z_s0)²)` over channel vectors.
pub fn rmse_without_san<T: Scalar>(z_s: &Tensor<T>, z_s0: &Tensor<T>) -> Result<f64> {
    check_pair(z_s, z_s0)?;
    let n = z_s.len() as f64;
    let ss: f64 = z_s
        .data()
        .iter()
        .zip(z_s0.data())
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            d * d
        })
        .sum();
    Ok((ss / n).sqrt())
}

/// Same as [`rmse_without_san`] after correcting `z_s` with sub-network `i`.
pub fn rmse_with_san<T: Scalar>(z_s: &Tensor<T>, z_s0: &Tensor<T>, san: &SanModule<T>, i: usize) -> Result<f64> {
    check_pair(z_s, z_s0)?;
    let c = z_s.len();
    let corrected = san.forward(&z_s.detached().reshape(vec![1, c, 1, 1])?, i)?;
    rmse_without_san(&corrected.reshape(z_s.shape().to_vec())?, z_s0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApReport {
    /// AP of classes `1..=K`; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth.
    pub map: f64,
}

/// Area under the all-points interpolated precision-recall curve.
fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        rec.push(hits as f64 / n_gt as f64);
        prec.push(hits as f64 / (i + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum()
}

/// Per-class AP with greedy matching: detections are visited by descending
/// score (equal scores in input order); each is a true positive when its
/// best-overlapping ground truth of the same class and image has IoU ≥
/// `iou_thresh` and is still unmatched.
pub fn evaluate_ap(dets: &[Detection], gts: &[Annotation], num_classes: usize, iou_thresh: f64) -> ApReport {
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 1..=num_classes {
        let cls_gts: Vec<&Annotation> = gts.iter().filter(|a| a.class_id == class).collect();
        if cls_gts.is_empty() {
            per_class.push(None);
            continue;
        }
        let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == class).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let mut matched = vec![false; cls_gts.len()];
        let tp: Vec<bool> = order
            .iter()
            .map(|&i| {
                let d = &dets[i];
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in cls_gts.iter().enumerate() {
                    if g.roi.image_id != d.roi.image_id {
                        continue;
                    }
                    let iou = d.roi.iou(&g.roi);
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                match best {
                    Some((j, iou)) if iou >= iou_thresh && !matched[j] => {
                        matched[j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        per_class.push(Some(average_precision(&tp, cls_gts.len())));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    ApReport { per_class, map }
}

/// Proposals used at evaluation time: jittered copies of each object plus
/// random boxes, from a stream derived from the seed and the image id.
pub fn eval_proposals(sample: &Sample, seed: u64) -> Vec<RoI> {
    let img = &sample.image;
    let mut rng = stream_rng(seed, streams::EVAL_PROPOSALS + ((img.id as u64) << 8));
    make_proposals(&sample.annotations, 8, 32, 0.25, (img.width(), img.height()), img.id, &mut rng)
}

/// Runs the detector over every sample and scores the detections.
pub fn evaluate_model(model: &Detector, samples: &[Sample], seed: u64, opts: &DetectOptions) -> Result<ApReport> {
    if samples.is_empty() {
        return Err(invalid("evaluate", "empty test split"));
    }
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in samples {
        dets.extend(model.detect(&s.image, &eval_proposals(s, seed), opts)?);
        gts.extend_from_slice(&s.annotations);
    }
    Ok(evaluate_ap(&dets, &gts, model.num_classes(), 0.5))
}

/// The object under `roi` re-rendered so that its longer side measures
/// `scale` pixels: a context window of `context ×` the object size around
/// it (clamped to the image) is cropped and resized. Returns the resized
/// window and the object's box inside it.
pub fn render_at_scale(img: &Image, roi: &RoI, scale: usize, context: f32) -> Result<(Image, RoI)> {
    let side = roi.width().max(roi.height());
    let (cx, cy) = roi.center();
    let half = 0.5 * context.max(1.0) * side;
    let window = RoI {
        x1: (cx - half).floor().max(0.0),
        y1: (cy - half).floor().max(0.0),
        x2: (cx + half).ceil().min(img.width() as f32),
        y2: (cy + half).ceil().min(img.height() as f32),
        image_id: img.id,
    };
    let crop = img.crop(&window);
    let (_, _, ch, cw) = crop.dims4()?;
    let f = scale as f32 / side;
    let nh = ((ch as f32 * f).round() as usize).max(8);
    let nw = ((cw as f32 * f).round() as usize).max(8);
    let (fx, fy) = (nw as f32 / cw as f32, nh as f32 / ch as f32);
    let resized = bilinear_resize(&crop, nh, nw);
    let moved = RoI::new(
        (roi.x1 - window.x1) * fx,
        (roi.y1 - window.y1) * fy,
        (roi.x2 - window.x1) * fx,
        (roi.y2 - window.y1) * fy,
        img.id,
    )?;
    Ok((Image::new(resized, img.id)?, moved))
}

/// GAP of the RoI-pooled feature of `roi`, as a `1×C×1×1` tensor.
pub fn pooled_feature(model: &Detector, img: &Image, roi: &RoI) -> Result<Tensor<f32>> {
    let feat = backbone_forward(img, &model.backbone)?;
    let p = roi_pool(&feat, roi, crate::backbone::POOL_OUT, model.pool_mode, model.backbone.total_stride)?;
    let (_, c, h, w) = p.dims4()?;
    let v: Vec<f32> = p
        .data()
        .chunks(h * w)
        .map(|ch| ch.iter().sum::<f32>() / (h * w) as f32)
        .collect();
    Tensor::new(vec![1, c, 1, 1], v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RmseRow {
    pub sample_id: usize,
    pub class_id: usize,
    pub scale: usize,
    pub rmse_without: f64,
    pub rmse_with: f64,
}

pub const RMSE_HEADER: &str = "sample_id,class_id,scale,rmse_without,rmse_with";

/// For every annotation (numbered in order as `sample_id`) and scale:
/// `z_s` is the pooled feature of the object rendered at that scale,
/// `z_s0` the reference-scale feature of the tight crop, and the
/// sub-network of the rendered box's partition provides the corrected
/// value. Without SAN both columns are equal.
pub fn rmse_report(model: &Detector, samples: &[Sample], scales: &[usize], context: f32) -> Result<Vec<RmseRow>> {
    if scales.is_empty() {
        return Err(invalid("rmse_report", "no scales"));
    }
    let ref_scale = model.san.as_ref().map_or(48, |s| s.scheme.ref_scale);
    let mut rows = Vec::new();
    let mut sample_id = 0;
    for s in samples {
        for a in &s.annotations {
            let z0 = extract_reference_feature(&s.image, &a.roi, ref_scale, &model.backbone)?;
            for &scale in scales {
                let (img, roi) = render_at_scale(&s.image, &a.roi, scale, context)?;
                let z = pooled_feature(model, &img, &roi)?;
                let without = rmse_without_san(&z, &z0)?;
                let with = match &model.san {
                    Some(san) => rmse_with_san(&z, &z0, san, partition_index(&roi, &san.scheme))?,
                    None => without,
                };
                rows.push(RmseRow {
                    sample_id,
                    class_id: a.class_id,
                    scale,
                    rmse_without: without,
                    rmse_with: with,
                });
            }
            sample_id += 1;
        }
    }
    Ok(rows)
}

pub fn rmse_csv(rows: &[RmseRow]) -> String {
    let mut s = format!("{RMSE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sample_id, r.class_id, r.scale, r.rmse_without, r.rmse_with
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RmseClassSummary {
    pub class_id: usize,
    pub count: usize,
    pub mean_without: f64,
    pub std_without: f64,
    pub mean_with: f64,
    pub std_with: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Per-class mean and population standard deviation of both columns, for
/// classes that have rows.
pub fn rmse_summary(rows: &[RmseRow], num_classes: usize) -> Vec<RmseClassSummary> {
    (1..=num_classes)
        .filter_map(|k| {
            let without: Vec<f64> = rows.iter().filter(|r| r.class_id == k).map(|r| r.rmse_without).collect();
            if without.is_empty() {
                return None;
            }
            let with: Vec<f64> = rows.iter().filter(|r| r.class_id == k).map(|r| r.rmse_with).collect();
            let (mean_without, std_without) = mean_std(&without);
            let (mean_with, std_with) = mean_std(&with);
            Some(RmseClassSummary {
                class_id: k,
                count: without.len(),
                mean_without,
                std_without,
                mean_with,
                std_with,
            })
        })
        .collect()
}

pub fn rmse_summary_csv(summary: &[RmseClassSummary]) -> String {
    let mut s = String::from("class_id,count,mean_rmse_without,std_rmse_without,mean_rmse_with,std_rmse_with\n");
    for c in summary {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.class_id, c.count, c.mean_without, c.std_without, c.mean_with, c.std_with
        ));
    }
    s
}
