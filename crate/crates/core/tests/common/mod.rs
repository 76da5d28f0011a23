//! Shared test support: finite-difference gradient checks, brute-force
//! reference implementations and the contract checks used both by the
//! integration tests and by the acceptance runner.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sanlab::analysis::CamMatrix;
use sanlab::detector::{Detection, Detector, InitMode};
use sanlab::kernels::CellRegion;
use sanlab::synth::{generate_dataset, Annotation, DatasetConfig, Sample};
use sanlab::train::{build_step_graph, sample_training_rois, StepGraph, StepInput, TrainingConfig};
use sanlab::{Graph, PadMode, PoolMode, RoI, ScalePartitionScheme, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;
/// Step for the end-to-end check. Thousands of ReLU pre-activations sit
/// downstream of every weight, so a 1e-3 step routinely carries one across
/// its kink; 1e-5 keeps the central difference on one linear piece while
/// rounding noise stays near 1e-11.
pub const COMPOSITE_FD_STEP: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

/// Uniform values whose magnitude is at least `margin` (kink exclusion
/// around zero).
pub fn away_from_zero(shape: &[usize], margin: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.random_range(margin..1.5);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.02 apart, so a finite-difference step never
/// changes which element wins a max.
pub fn well_separated(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.02 - n as f64 * 0.01).collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).unwrap()
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

fn probe(g: &mut Graph<f64>, y: Var, targets: &Tensor<f64>) -> Var {
    let t = g.constant(targets.clone());
    let d = g.sub(y, t).unwrap();
    let l = g.smooth_l1(d);
    g.sum(l)
}

/// Max relative error between the analytic gradient of `analytic` and a
/// central difference of `numeric` (usually the same function), over every
/// element of every input. The output is reduced to a scalar through
/// `sum(smooth_l1(y − t))` with fixed targets placed away from the
/// smooth-L1 kink, so every output element gets a distinct weight.
pub fn grad_check_with(inputs: &[Tensor<f64>], analytic: &Build, numeric: &Build, r: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let y = analytic(&mut g, &vars);
    let y_val = g.value(y).clone();
    let targets = Tensor::from_fn(y_val.shape().to_vec(), |i| {
        let m = if r.random::<bool>() {
            r.random_range(0.1..0.9)
        } else {
            r.random_range(1.1..1.9)
        };
        y_val.data()[i] - if r.random::<bool>() { m } else { -m }
    });
    let loss = probe(&mut g, y, &targets);
    let grads = g.backward(loss).unwrap();

    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let y = numeric(&mut g, &vars);
        let l = probe(&mut g, y, &targets);
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let a = grads.get_or_zeros(*v);
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + FD_STEP;
            let plus = eval(&work);
            work[k].data_mut()[i] = x - FD_STEP;
            let minus = eval(&work);
            work[k].data_mut()[i] = x;
            worst = worst.max(rel_err(a[i], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    worst
}

pub fn grad_check(inputs: &[Tensor<f64>], f: &Build, r: &mut ChaCha8Rng) -> f64 {
    grad_check_with(inputs, f, f, r)
}

fn conv_case(seed: u64, x: [usize; 4], k: [usize; 2], stride: usize, pad: usize, mode: PadMode) -> f64 {
    let mut r = rng(seed);
    let xs = uniform(&x, -1.0, 1.0, &mut r);
    let w = uniform(&[k[0], x[1], k[1], k[1]], -0.5, 0.5, &mut r);
    let b = uniform(&[k[0]], -0.5, 0.5, &mut r);
    grad_check(
        &[xs, w, b],
        &|g, v| g.conv2d_padded(v[0], v[1], v[2], stride, pad, mode).unwrap(),
        &mut r,
    )
}

/// One finite-difference case per differentiable op, each returning the
/// worst relative error for a seed.
pub fn gradient_cases() -> Vec<(&'static str, Box<dyn Fn(u64) -> f64>)> {
    vec![
        ("conv2d zero-pad 3x3", Box::new(|s| conv_case(s, [2, 3, 5, 5], [4, 3], 1, 1, PadMode::Zero))),
        (
            "conv2d replicate-pad stride 2",
            Box::new(|s| conv_case(s, [1, 3, 7, 6], [5, 3], 2, 1, PadMode::Replicate)),
        ),
        ("conv2d 1x1", Box::new(|s| conv_case(s, [3, 4, 3, 2], [2, 1], 1, 0, PadMode::Zero))),
        (
            "relu",
            Box::new(|s| {
                let mut r = rng(s);
                let x = away_from_zero(&[2, 3, 4, 4], 0.05, &mut r);
                grad_check(&[x], &|g, v| g.relu(v[0]), &mut r)
            }),
        ),
        (
            "global_avg_pool",
            Box::new(|s| {
                let mut r = rng(s);
                let x = uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut r);
                grad_check(&[x], &|g, v| g.global_avg_pool(v[0]).unwrap(), &mut r)
            }),
        ),
        (
            "add",
            Box::new(|s| {
                let mut r = rng(s);
                let (a, b) = (uniform(&[3, 4], -1.0, 1.0, &mut r), uniform(&[3, 4], -1.0, 1.0, &mut r));
                grad_check(&[a, b], &|g, v| g.add(v[0], v[1]).unwrap(), &mut r)
            }),
        ),
        (
            "sub",
            Box::new(|s| {
                let mut r = rng(s);
                let (a, b) = (uniform(&[3, 4], -1.0, 1.0, &mut r), uniform(&[3, 4], -1.0, 1.0, &mut r));
                grad_check(&[a, b], &|g, v| g.sub(v[0], v[1]).unwrap(), &mut r)
            }),
        ),
        (
            "scale",
            Box::new(|s| {
                let mut r = rng(s);
                let c = r.random_range(-2.0..2.0);
                let a = uniform(&[2, 5], -1.0, 1.0, &mut r);
                grad_check(&[a], &move |g, v| g.scale(v[0], c), &mut r)
            }),
        ),
        (
            "mul_scalar",
            Box::new(|s| {
                let mut r = rng(s);
                let a = uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r);
                let k = uniform(&[1], -2.0, 2.0, &mut r);
                grad_check(&[a, k], &|g, v| g.mul_scalar(v[0], v[1]).unwrap(), &mut r)
            }),
        ),
        (
            "sum",
            Box::new(|s| {
                let mut r = rng(s);
                let a = uniform(&[3, 2, 2], -1.0, 1.0, &mut r);
                grad_check(&[a], &|g, v| g.sum(v[0]), &mut r)
            }),
        ),
        (
            "smooth_l1",
            Box::new(|s| {
                let mut r = rng(s);
                // Avoid |x| near 1, where the quadratic and linear pieces meet.
                let x = Tensor::from_fn(vec![4, 5], |_| {
                    let m = if r.random::<bool>() {
                        r.random_range(0.0..0.95)
                    } else {
                        r.random_range(1.05..3.0)
                    };
                    if r.random::<bool>() {
                        m
                    } else {
                        -m
                    }
                });
                grad_check(&[x], &|g, v| g.smooth_l1(v[0]), &mut r)
            }),
        ),
        (
            "softmax_cross_entropy",
            Box::new(|s| {
                let mut r = rng(s);
                let x = uniform(&[5, 4], -3.0, 3.0, &mut r);
                let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
                grad_check(&[x], &move |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap(), &mut r)
            }),
        ),
        (
            "reshape",
            Box::new(|s| {
                let mut r = rng(s);
                let x = uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r);
                grad_check(&[x], &|g, v| g.reshape(v[0], vec![6, 4]).unwrap(), &mut r)
            }),
        ),
        (
            "select_batch",
            Box::new(|s| {
                let mut r = rng(s);
                let x = uniform(&[4, 2, 2, 2], -1.0, 1.0, &mut r);
                let idx: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
                grad_check(&[x], &move |g, v| g.select_batch(v[0], &idx).unwrap(), &mut r)
            }),
        ),
        (
            "concat_batch",
            Box::new(|s| {
                let mut r = rng(s);
                let a = uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r);
                let b = uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut r);
                grad_check(&[a, b], &|g, v| g.concat_batch(&[v[0], v[1], v[0]]).unwrap(), &mut r)
            }),
        ),
        (
            "gather_cols",
            Box::new(|s| {
                let mut r = rng(s);
                let x = uniform(&[3, 8], -1.0, 1.0, &mut r);
                let cols: Vec<Vec<usize>> = (0..3)
                    .map(|_| {
                        let c = 4 * r.random_range(0..2);
                        (c..c + 4).collect()
                    })
                    .collect();
                grad_check(&[x], &move |g, v| g.gather_cols(v[0], &cols).unwrap(), &mut r)
            }),
        ),
        ("roi_pool avg", Box::new(|s| roi_pool_case(s, PoolMode::Avg))),
        ("roi_pool max", Box::new(|s| roi_pool_case(s, PoolMode::Max))),
        (
            "detach",
            Box::new(|s| {
                // Gradient flows through the first argument only: compare
                // against the same function with the detached copy frozen.
                let mut r = rng(s);
                let x = uniform(&[2, 3], -1.0, 1.0, &mut r);
                let frozen = x.clone();
                grad_check_with(
                    &[x],
                    &|g, v| {
                        let d = g.detach(v[0]);
                        let y = g.scale(d, 3.0);
                        g.add(v[0], y).unwrap()
                    },
                    &move |g, v| {
                        let d = g.constant(frozen.clone());
                        let y = g.scale(d, 3.0);
                        g.add(v[0], y).unwrap()
                    },
                    &mut r,
                )
            }),
        ),
    ]
}

pub fn random_region(h: usize, w: usize, r: &mut ChaCha8Rng) -> CellRegion {
    let x0 = r.random_range(0..w);
    let y0 = r.random_range(0..h);
    CellRegion {
        x0,
        x1: r.random_range(x0 + 1..=w),
        y0,
        y1: r.random_range(y0 + 1..=h),
    }
}

fn roi_pool_case(seed: u64, mode: PoolMode) -> f64 {
    let mut r = rng(seed);
    let (c, h, w) = (2, 6, 7);
    let x = well_separated(&[1, c, h, w], &mut r);
    let regions: Vec<CellRegion> = (0..3).map(|_| random_region(h, w, &mut r)).collect();
    let out = r.random_range(1..4);
    grad_check(&[x], &move |g, v| g.roi_pool(v[0], &regions, out, mode).unwrap(), &mut r)
}

/// Small detector in double precision with every bias moved off zero, so
/// no ReLU sits exactly on its kink.
pub fn composite_model(seed: u64) -> Detector<f64> {
    let mut m = Detector::<f64>::new(3, Some((ScalePartitionScheme::toy(), InitMode::Gaussian)), PoolMode::Avg, seed)
        .unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    for (name, p) in m.params_mut() {
        if name.ends_with(".b") {
            for v in p.data_mut() {
                *v = r.random_range(-0.1..0.1);
            }
        }
    }
    m
}

pub fn composite_samples(seed: u64) -> Vec<Sample> {
    generate_dataset(&DatasetConfig {
        num_images: 2,
        image_size: 40,
        scale_range: (10.0, 30.0),
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn composite_step(model: &Detector<f64>, samples: &[Sample], seed: u64) -> (StepGraph<f64>, usize) {
    let cfg = TrainingConfig {
        rois_per_image: 6,
        ..TrainingConfig::default()
    };
    let mut r = sanlab::rng::stream_rng(seed, 99);
    let inputs: Vec<StepInput> = samples
        .iter()
        .map(|s| {
            let (rois, labels) = sample_training_rois(s, &cfg, &mut r).unwrap();
            StepInput {
                image: &s.image,
                rois,
                labels,
            }
        })
        .collect();
    let n: usize = inputs.iter().map(|s| s.rois.len()).sum();
    let pick: Vec<usize> = (0..n).step_by(3).collect();
    (build_step_graph(model, &inputs, &pick, true, 1.0).unwrap(), model.backbone.params().len())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CompositeReport {
    pub worst: f64,
    pub checked: usize,
    /// Entries resampled because the two step sizes disagreed.
    pub kinks: usize,
}

/// End-to-end check on a full training graph (backbone, RoI pooling,
/// SAN split-correct-merge, fusion, head, multi-task loss and the
/// scale-aware loss). Non-backbone parameters are checked against the
/// total loss; backbone parameters against the detection loss, since the
/// scale-aware branch is deliberately cut off from the backbone.
///
/// Each entry is differenced at `h` and `h/2`. On a single linear piece of
/// every ReLU the two agree to ~1e-10; when they do not, a kink lies in
/// the stencil and the entry is replaced by another one. A wrong analytic
/// gradient disagrees with both estimates, so this cannot hide it.
pub fn composite_loss_error(seed: u64) -> CompositeReport {
    let model = composite_model(seed);
    let samples = composite_samples(seed);
    let (step, n_backbone) = composite_step(&model, &samples, seed);
    let grad_total = step.graph.backward(step.losses.total).unwrap();
    let grad_det = step.graph.backward(step.losses.detection).unwrap();
    let mut r = rng(seed ^ 0xfd);
    let mut report = CompositeReport::default();
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (pi, name) in names.iter().enumerate() {
        let backbone = pi < n_backbone;
        let a = if backbone {
            grad_det.get_or_zeros(step.vars[pi])
        } else {
            grad_total.get_or_zeros(step.vars[pi])
        };
        let len = a.len();
        let mut done = 0;
        let mut tries = 0;
        while done < 3.min(len) && tries < 12 {
            tries += 1;
            let i = r.random_range(0..len);
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut ps = m.params_mut();
                ps[pi].1.data_mut()[i] += delta;
                drop(ps);
                let (s, _) = composite_step(&m, &samples, seed);
                let v = if backbone { s.losses.detection } else { s.losses.total };
                s.graph.value(v).item()
            };
            let central = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
            let (n1, n2) = (central(COMPOSITE_FD_STEP), central(COMPOSITE_FD_STEP / 2.0));
            if rel_err(n1, n2) > FD_TOL / 10.0 {
                report.kinks += 1;
                continue;
            }
            let e = rel_err(a[i], n1);
            if e > FD_TOL {
                eprintln!("composite seed {seed}: {name}[{i}] analytic {} numeric {n1}", a[i]);
            }
            report.worst = report.worst.max(e);
            report.checked += 1;
            done += 1;
        }
    }
    report
}

/// Direct per-bin scan of a `1×C×h×w` map for one RoI: box → cells by
/// floor/ceil of the stride-scaled corners, bins by integer floor/ceil
/// division with at least one cell each.
pub fn brute_roi_pool(feat: &Tensor<f64>, roi: &RoI, out: usize, mode: PoolMode, stride: usize) -> Vec<f64> {
    let s = feat.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let cell_lo = |v: f32, n: usize| ((v / stride as f32).floor().max(0.0) as usize).min(n);
    let cell_hi = |v: f32, n: usize| ((v / stride as f32).ceil().max(0.0) as usize).min(n);
    let (x0, x1) = (cell_lo(roi.x1, w), cell_hi(roi.x2, w));
    let (y0, y1) = (cell_lo(roi.y1, h), cell_hi(roi.y2, h));
    let bins = |lo: usize, hi: usize, b: usize| {
        let len = hi - lo;
        let a = b * len / out;
        let e = ((b + 1) * len).div_ceil(out).max(a + 1).min(len);
        (lo + a, lo + e)
    };
    let mut res = Vec::new();
    for ch in 0..c {
        for by in 0..out {
            for bx in 0..out {
                let (ya, yb) = bins(y0, y1, by);
                let (xa, xb) = bins(x0, x1, bx);
                let mut vals = Vec::new();
                for y in ya..yb {
                    for x in xa..xb {
                        vals.push(feat.data()[(ch * h + y) * w + x]);
                    }
                }
                res.push(match mode {
                    PoolMode::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                    PoolMode::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
    }
    res
}

/// Reference CAM: repeated max extraction per scale, then a union built
/// with a seen-set.
pub fn brute_cam(vectors: &[(usize, Vec<f64>)], k: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut ids = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (_, v) in vectors {
        let mut taken = vec![false; v.len()];
        for _ in 0..k.min(v.len()) {
            let mut best: Option<usize> = None;
            for (i, &x) in v.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                if best.is_none_or(|b| x > v[b]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            if seen.insert(b) {
                ids.push(b);
            }
        }
    }
    let values = ids.iter().map(|&i| vectors.iter().map(|(_, v)| v[i]).collect()).collect();
    (ids, values)
}

pub fn cam_matches(cam: &CamMatrix, vectors: &[(usize, Vec<f64>)], k: usize) -> bool {
    let (ids, values) = brute_cam(vectors, k);
    cam.channel_ids == ids && cam.values == values && cam.scales == vectors.iter().map(|(s, _)| *s).collect::<Vec<_>>()
}

pub fn brute_rmse(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += (a[i] - b[i]).powi(2);
    }
    (acc / a.len() as f64).sqrt()
}

/// AP by enumerating precision at every true positive: each recovered
/// object contributes `1/n_gt` times the best precision reachable at that
/// recall or later.
pub fn brute_ap(dets: &[Detection], gts: &[Annotation], class: usize, thresh: f64) -> Option<f64> {
    let g: Vec<&Annotation> = gts.iter().filter(|a| a.class_id == class).collect();
    if g.is_empty() {
        return None;
    }
    let mut d: Vec<(usize, &Detection)> = dets.iter().enumerate().filter(|(_, d)| d.class_id == class).collect();
    // Stable sort keeps input order among equal scores.
    d.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let mut used = vec![false; g.len()];
    let mut hits = Vec::new();
    for (_, det) in &d {
        let mut best = -1.0;
        let mut best_j = None;
        for (j, gt) in g.iter().enumerate() {
            if gt.roi.image_id == det.roi.image_id {
                let o = det.roi.iou(&gt.roi);
                if o > best {
                    best = o;
                    best_j = Some(j);
                }
            }
        }
        let tp = match best_j {
            Some(j) if best >= thresh && !used[j] => {
                used[j] = true;
                true
            }
            _ => false,
        };
        hits.push(tp);
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|i| hits[..=i].iter().filter(|&&t| t).count() as f64 / (i + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for i in 0..hits.len() {
        if hits[i] {
            let best = precision[i..].iter().cloned().fold(0.0, f64::max);
            ap += best / g.len() as f64;
        }
    }
    Some(ap)
}

/// Small random detection problem: a few images with boxes on a coarse
/// grid (so IoU ties and exact thresholds occur), detections derived from
/// ground truths or placed at random, scores drawn from a few levels.
pub fn random_ap_instance(seed: u64, classes: usize) -> (Vec<Detection>, Vec<Annotation>) {
    let mut r = rng(seed);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    let grid = |r: &mut ChaCha8Rng| r.random_range(0..8) as f32 * 4.0;
    for img in 0..r.random_range(1..4) {
        for _ in 0..r.random_range(0..4) {
            let (x, y) = (grid(&mut r), grid(&mut r));
            let s = 4.0 * r.random_range(2..6) as f32;
            gts.push(Annotation {
                roi: RoI::new(x, y, x + s, y + s, img).unwrap(),
                class_id: r.random_range(1..=classes),
            });
        }
    }
    for _ in 0..r.random_range(0..12) {
        let roi = if !gts.is_empty() && r.random::<f64>() < 0.6 {
            let a = gts[r.random_range(0..gts.len())];
            let dx = 4.0 * r.random_range(-1..=1) as f32;
            RoI::new(a.roi.x1 + dx, a.roi.y1, a.roi.x2 + dx, a.roi.y2, a.roi.image_id).unwrap()
        } else {
            let (x, y) = (grid(&mut r), grid(&mut r));
            RoI::new(x, y, x + 12.0, y + 12.0, r.random_range(0..3)).unwrap()
        };
        dets.push(Detection {
            roi,
            class_id: r.random_range(1..=classes),
            score: r.random_range(1..5) as f32 * 0.2,
        });
    }
    (dets, gts)
}

// ---- SAN contract checks ----

pub fn small_dataset(seed: u64, n: usize) -> Vec<Sample> {
    generate_dataset(&DatasetConfig {
        num_images: n,
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

/// Nonnegative `N×C×h×w` features with a share of exact zeros.
pub fn nonneg_features(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| {
        if r.random::<f64>() < 0.3 {
            0.0
        } else {
            r.random_range(0.0f32..4.0)
        }
    })
}

pub fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Identity-initialized sub-networks return nonnegative input bit for bit.
pub fn identity_forward_is_exact(seed: u64) -> bool {
    let mut r = rng(seed);
    let mut san = sanlab::SanModule::<f32>::new(ScalePartitionScheme::toy(), 32);
    san.init_identity();
    let x = nonneg_features(&[1, 32, 7, 7], &mut r);
    (0..3).all(|i| bits(&san.forward(&x, i).unwrap()) == bits(&x))
}

pub fn identity_rmse_is_exact(seed: u64) -> bool {
    let mut r = rng(seed);
    let mut san = sanlab::SanModule::<f32>::new(ScalePartitionScheme::toy(), 32);
    san.init_identity();
    let z = nonneg_features(&[1, 32, 1, 1], &mut r);
    let z0 = nonneg_features(&[1, 32, 1, 1], &mut r);
    let without = sanlab::analysis::rmse_without_san(&z, &z0).unwrap();
    (0..3).all(|i| sanlab::analysis::rmse_with_san(&z, &z0, &san, i).unwrap().to_bits() == without.to_bits())
}

pub fn training_batch<'a>(samples: &'a [Sample], cfg: &TrainingConfig, seed: u64) -> (Vec<StepInput<'a>>, Vec<usize>) {
    let mut r = sanlab::rng::stream_rng(seed, 77);
    let inputs: Vec<StepInput> = samples
        .iter()
        .take(cfg.images_per_batch)
        .map(|s| {
            let (rois, labels) = sample_training_rois(s, cfg, &mut r).unwrap();
            StepInput {
                image: &s.image,
                rois,
                labels,
            }
        })
        .collect();
    let n: usize = inputs.iter().map(|s| s.rois.len()).sum();
    let all: Vec<usize> = (0..n).collect();
    let pick = sanlab::train::sample_san_rois(&all, cfg.san_samples, &mut r);
    (inputs, pick)
}

/// At identity initialization the scale-aware loss equals the discrepancy
/// between the GAP of the raw pooled features and the references, built
/// here without any SAN.
pub fn step0_loss_is_raw_discrepancy(seed: u64) -> bool {
    let samples = small_dataset(seed, 2);
    let cfg = TrainingConfig {
        seed,
        ..TrainingConfig::default()
    };
    let model = cfg.init_model().unwrap();
    let (inputs, pick) = training_batch(&samples, &cfg, seed);
    let step = build_step_graph(&model, &inputs, &pick, true, 1.0).unwrap();
    let l_san = step.graph.value(step.losses.san).item();

    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let batch: Vec<(&sanlab::Image, &[RoI])> = inputs.iter().map(|s| (s.image, s.rois.as_slice())).collect();
    let fw = bound.forward(&mut g, &batch).unwrap();
    let located: Vec<(&sanlab::Image, RoI)> = inputs
        .iter()
        .flat_map(|s| s.rois.iter().map(move |r| (s.image, *r)))
        .collect();
    let refs: Vec<Tensor<f32>> = pick
        .iter()
        .map(|&i| sanlab::backbone::extract_reference_feature(located[i].0, &located[i].1, 48, &model.backbone).unwrap())
        .collect();
    let r_tilde = sanlab::detector::stack_references(&refs).unwrap();
    let feats = g.select_batch(fw.pooled, &pick).unwrap();
    let gap = g.global_avg_pool(feats).unwrap();
    let t = g.constant(r_tilde);
    let d = g.sub(gap, t).unwrap();
    let l = g.smooth_l1(d);
    let s = g.sum(l);
    let raw = g.scale(s, 1.0 / pick.len() as f32);
    l_san.to_bits() == g.value(raw).item().to_bits()
}

#[derive(Clone, Copy, Debug)]
pub struct BlockingReport {
    pub backbone_identical: bool,
    pub san_differs: bool,
}

/// Compares gradients of the total loss and of the detection-only loss on
/// one seeded batch, for a model trained `iters` steps first.
pub fn blocking_step(samples: &[Sample], iters: usize) -> BlockingReport {
    let cfg = TrainingConfig {
        iterations: iters,
        seed: iters as u64,
        ..TrainingConfig::default()
    };
    let model = sanlab::train::train(samples, &cfg, |_| {}).unwrap().model;
    let (inputs, pick) = training_batch(samples, &cfg, 1000 + iters as u64);
    let step = build_step_graph(&model, &inputs, &pick, true, 1.0).unwrap();
    let full = step.graph.backward(step.losses.total).unwrap();
    let det = step.graph.backward(step.losses.detection).unwrap();
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut report = BlockingReport {
        backbone_identical: true,
        san_differs: false,
    };
    for (name, &v) in names.iter().zip(&step.vars) {
        let a: Vec<u32> = full.get_or_zeros(v).iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = det.get_or_zeros(v).iter().map(|x| x.to_bits()).collect();
        if name.starts_with("backbone.") && a != b {
            report.backbone_identical = false;
        }
        if name.starts_with("san.") && a != b {
            report.san_differs = true;
        }
    }
    report
}

/// Partition-grouped SAN forward equals correcting each row on its own.
pub fn split_merge_matches_rowwise(seed: u64) -> bool {
    let mut r = rng(seed);
    let mut san = sanlab::SanModule::<f32>::new(ScalePartitionScheme::toy(), 8);
    san.init_gaussian(0.5, seed).unwrap();
    let n = r.random_range(1..9);
    let x = Tensor::from_fn(vec![n, 8, 2, 2], |_| r.random_range(-1.0f32..1.0));
    let parts: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    let mut g = Graph::new();
    let bound = san.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = bound.forward_partitioned(&mut g, xv, &parts).unwrap();
    let got = g.value(y).data().to_vec();
    let per = 8 * 4;
    (0..n).all(|i| {
        let row = Tensor::new(vec![1, 8, 2, 2], x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        let want = san.forward(&row, parts[i]).unwrap();
        bits(&want) == got[i * per..(i + 1) * per].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    })
}

// ---- partition oracle ----

/// Explicit interval table `(lo, hi]` with the last interval unbounded,
/// scanned linearly.
pub fn interval_scan(scheme: &ScalePartitionScheme, area: f64) -> usize {
    let mut lo = 0.0;
    let mut table = Vec::new();
    for &b in &scheme.boundaries {
        table.push((lo, b));
        lo = b;
    }
    table.push((lo, f64::INFINITY));
    table
        .iter()
        .position(|&(lo, hi)| area > lo && area <= hi)
        .unwrap_or(0)
}

// ---- oracle instances ----

pub fn roi_pool_instance(seed: u64) -> bool {
    let mut r = rng(seed);
    let (c, h, w) = (r.random_range(1..4), r.random_range(1..9), r.random_range(1..9));
    let stride = [1, 2, 4, 8][r.random_range(0..4)];
    // A few repeated levels so max pooling sees ties.
    let feat = Tensor::from_fn(vec![1, c, h, w], |_| r.random_range(0..6) as f64 * 0.5 - 1.0);
    let (iw, ih) = ((w * stride) as f32, (h * stride) as f32);
    let x1 = r.random_range(0.0..iw - 0.5);
    let y1 = r.random_range(0.0..ih - 0.5);
    let roi = RoI::new(x1, y1, r.random_range(x1 + 0.5..=iw), r.random_range(y1 + 0.5..=ih), 0).unwrap();
    let out = r.random_range(1..8);
    [PoolMode::Avg, PoolMode::Max].iter().all(|&mode| {
        let got = sanlab::backbone::roi_pool(&feat, &roi, out, mode, stride).unwrap();
        got.data() == brute_roi_pool(&feat, &roi, out, mode, stride).as_slice()
    })
}

pub fn cam_instance(seed: u64) -> bool {
    let mut r = rng(seed);
    let c = r.random_range(1..12);
    let k = r.random_range(1..=c + 1);
    let vectors: Vec<(usize, Vec<f64>)> = (0..r.random_range(1..6))
        .map(|i| (8 * (i + 1), (0..c).map(|_| r.random_range(0..5) as f64).collect()))
        .collect();
    let cam = sanlab::analysis::compute_cam(&vectors, k).unwrap();
    cam_matches(&cam, &vectors, k)
}

pub fn rmse_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(1..40);
    let a: Vec<f64> = (0..c).map(|_| r.random_range(-3.0..3.0)).collect();
    let b: Vec<f64> = (0..c).map(|_| r.random_range(-3.0..3.0)).collect();
    let ta = Tensor::new(vec![1, c, 1, 1], a.clone()).unwrap();
    let tb = Tensor::new(vec![1, c, 1, 1], b.clone()).unwrap();
    (sanlab::analysis::rmse_without_san(&ta, &tb).unwrap() - brute_rmse(&a, &b)).abs()
}

pub fn ap_instance(seed: u64) -> f64 {
    let (dets, gts) = random_ap_instance(seed, 3);
    let rep = sanlab::analysis::evaluate_ap(&dets, &gts, 3, 0.5);
    let mut worst = 0.0f64;
    for k in 1..=3 {
        match (rep.per_class[k - 1], brute_ap(&dets, &gts, k, 0.5)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => return f64::INFINITY,
        }
    }
    worst
}
