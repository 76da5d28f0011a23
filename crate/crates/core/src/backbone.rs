//! Convolutional backbone and the two feature pathways: RoI pooling on the
//! whole-image feature map, and scale-normalized patches that produce
//! reference features.

use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::kernels::{bilinear_resize, PadMode, PoolMode};
use crate::rng::{stream_rng, streams, Rng};
use crate::roi::RoI;
use crate::tensor::{Parameter, Scalar, Tensor};

/// Output channel count of the backbone, shared by SAN and the head.
pub const FEAT_CHANNELS: usize = 32;
/// Side of the pooled RoI grid.
pub const POOL_OUT: usize = 7;

/// An RGB image, `1×3×H×W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Tensor<f32>,
    pub id: usize,
}

impl Image {
    pub fn new(pixels: Tensor<f32>, id: usize) -> Result<Self> {
        let (n, c, _, _) = pixels.dims4()?;
        if n != 1 || c != 3 {
            return Err(invalid("image", format!("expected 1x3xHxW, got {:?}", pixels.shape())));
        }
        Ok(Self { pixels, id })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    /// Pixel crop `[floor(x1), ceil(x2)) × [floor(y1), ceil(y2))`, clamped
    /// to the image, at least one pixel in each direction.
    pub fn crop(&self, roi: &RoI) -> Tensor<f32> {
        let (h, w) = (self.height(), self.width());
        let span = |lo: f32, hi: f32, n: usize| {
            let a = (lo.floor().max(0.0) as usize).min(n - 1);
            let b = (hi.ceil().max(0.0) as usize).clamp(a + 1, n);
            (a, b)
        };
        let (x0, x1) = span(roi.x1, roi.x2, w);
        let (y0, y1) = span(roi.y1, roi.y2, h);
        let (cw, ch) = (x1 - x0, y1 - y0);
        let src = self.pixels.data();
        let mut out = Vec::with_capacity(3 * cw * ch);
        for c in 0..3 {
            for y in y0..y1 {
                let row = c * h * w + y * w;
                out.extend_from_slice(&src[row + x0..row + x1]);
            }
        }
        Tensor::new(vec![1, 3, ch, cw], out).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Scalar = f32> {
    pub w: Parameter<T>,
    pub b: Parameter<T>,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl<T: Scalar> ConvLayer<T> {
    /// Gaussian kernel with the given std, zero bias.
    pub fn gaussian(
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = Tensor::from_fn(vec![out_c, in_c, k, k], |_| T::lit(normal.sample(rng)));
        Self {
            w: Parameter::new(w),
            b: Parameter::zeros(vec![out_c]),
            stride,
            pad: k / 2,
            pad_mode: PadMode::Replicate,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundConv {
        BoundConv {
            w: g.param(&self.w, trainable),
            b: g.param(&self.b, trainable),
            stride: self.stride,
            pad: self.pad,
            pad_mode: self.pad_mode,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            w: self.w.cast(),
            b: self.b.cast(),
            stride: self.stride,
            pad: self.pad,
            pad_mode: self.pad_mode,
        }
    }
}

/// A convolution whose parameters live in a particular graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl BoundConv {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.conv2d_padded(x, self.w, self.b, self.stride, self.pad, self.pad_mode)
    }
}

/// Three 3×3 stride-2 conv+ReLU blocks (16→32→32 channels) and a 1×1
/// feature-extraction layer, all followed by ReLU. Total stride 8.
/// Padding replicates edge pixels, so a constant image produces a
/// constant feature map at every input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Scalar = f32> {
    pub layers: Vec<ConvLayer<T>>,
    pub total_stride: usize,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream_rng(seed, streams::BACKBONE_INIT);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let layers = vec![
            ConvLayer::gaussian(16, 3, 3, 2, he(27), &mut rng),
            ConvLayer::gaussian(32, 16, 3, 2, he(144), &mut rng),
            ConvLayer::gaussian(32, 32, 3, 2, he(288), &mut rng),
            ConvLayer::gaussian(FEAT_CHANNELS, 32, 1, 1, he(32), &mut rng),
        ];
        Self {
            total_stride: layers.iter().map(|l| l.stride).product(),
            layers,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundBackbone {
        BoundBackbone {
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
            total_stride: self.total_stride,
        }
    }

    pub fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("backbone.{i}.w"), &l.w));
            out.push((format!("backbone.{i}.b"), &l.b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.w"), &mut l.w));
            out.push((format!("backbone.{i}.b"), &mut l.b));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            layers: self.layers.iter().map(ConvLayer::cast).collect(),
            total_stride: self.total_stride,
        }
    }

    pub fn feat_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.shape()[0])
    }
}

#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub layers: Vec<BoundConv>,
    pub total_stride: usize,
}

impl BoundBackbone {
    /// `1×3×H×W` pixels → `1×C_feat×ceil(H/8)×ceil(W/8)` features.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, pixels: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(pixels).dims4()?;
        if h < self.total_stride || w < self.total_stride {
            return Err(Error::ImageTooSmall {
                h,
                w,
                stride: self.total_stride,
            });
        }
        let mut x = pixels;
        for layer in &self.layers {
            let y = layer.apply(g, x)?;
            x = g.relu(y);
        }
        Ok(x)
    }
}

/// Runs the backbone on an image outside of any training graph.
pub fn backbone_forward<T: Scalar>(img: &Image, bb: &Backbone<T>) -> Result<Tensor<T>> {
    forward_pixels(&img.pixels.cast(), bb)
}

fn forward_pixels<T: Scalar>(pixels: &Tensor<T>, bb: &Backbone<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = bb.bind(&mut g, false);
    let x = g.constant(pixels.detached());
    let f = bound.forward(&mut g, x)?;
    Ok(g.value(f).detached())
}

fn gap_vector<T: Scalar>(pixels: &Tensor<T>, bb: &Backbone<T>) -> Result<Vec<T>> {
    let f = forward_pixels(pixels, bb)?;
    let (_, c, h, w) = f.dims4()?;
    let n = T::from_usize(h * w).unwrap();
    Ok(f.data()
        .chunks(h * w)
        .take(c)
        .map(|p| p.iter().copied().sum::<T>() / n)
        .collect())
}

/// Pools one RoI from a `1×C×h×w` feature map to `1×C×out×out`.
pub fn roi_pool<T: Scalar>(
    feat: &Tensor<T>,
    roi: &RoI,
    out: usize,
    mode: PoolMode,
    stride: usize,
) -> Result<Tensor<T>> {
    let (_, _, h, w) = feat.dims4()?;
    let region = roi.to_cells(stride, h, w)?;
    let mut g = Graph::new();
    let x = g.constant(feat.detached());
    let y = g.roi_pool(x, &[region], out, mode)?;
    Ok(g.value(y).detached())
}

/// Channel-wise feature of the scale-normalized patch under `roi`: crop,
/// resize to `ref_scale × ref_scale`, backbone, global average pool.
/// Result is `1×C×1×1` and never requires grad.
pub fn extract_reference_feature<T: Scalar>(
    img: &Image,
    roi: &RoI,
    ref_scale: usize,
    bb: &Backbone<T>,
) -> Result<Tensor<T>> {
    if !roi.is_valid() || !roi.intersects_image(img.width(), img.height()) {
        return Err(invalid("extract_reference_feature", format!("roi {roi:?} outside image")));
    }
    let patch = bilinear_resize(&img.crop(roi), ref_scale, ref_scale).cast::<T>();
    let v = gap_vector(&patch, bb)?;
    let c = v.len();
    Tensor::new(vec![1, c, 1, 1], v)
}

/// Channel vectors of an image swept over square sizes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScaleSweep<T = f32> {
    pub vectors: Vec<(usize, Vec<T>)>,
    pub warnings: Vec<String>,
}

/// For each scale `s`: resize to `s×s`, optionally resize again to
/// `normalize_to × normalize_to` (scale normalization), run the backbone
/// and global-average-pool. Scales below the backbone stride are skipped
/// with a warning.
pub fn cam_scale_sweep<T: Scalar>(
    img: &Image,
    bb: &Backbone<T>,
    scales: &[usize],
    normalize_to: Option<usize>,
) -> Result<ScaleSweep<T>> {
    let mut sweep = ScaleSweep {
        vectors: Vec::new(),
        warnings: Vec::new(),
    };
    let pixels = img.pixels.cast::<T>();
    for &s in scales {
        if s < bb.total_stride {
            sweep
                .warnings
                .push(format!("scale {s} below backbone stride {}, skipped", bb.total_stride));
            continue;
        }
        let mut x = bilinear_resize(&pixels, s, s);
        if let Some(n) = normalize_to {
            x = bilinear_resize(&x, n, n);
        }
        sweep.vectors.push((s, gap_vector(&x, bb)?));
    }
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, f: impl Fn(usize) -> f32) -> Image {
        Image::new(Tensor::from_fn(vec![1, 3, h, w], f), 0).unwrap()
    }

    #[test]
    fn feature_map_geometry() {
        let bb = Backbone::<f32>::new(1);
        assert_eq!(bb.total_stride, 8);
        let f = backbone_forward(&image(96, 96, |_| 0.3), &bb).unwrap();
        assert_eq!(f.shape(), &[1, FEAT_CHANNELS, 12, 12]);
        let f = backbone_forward(&image(20, 17, |_| 0.3), &bb).unwrap();
        assert_eq!(f.shape(), &[1, FEAT_CHANNELS, 3, 3]);
        assert!(matches!(
            backbone_forward(&image(7, 40, |_| 0.3), &bb),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let bb = Backbone::<f32>::new(3);
        let f = backbone_forward(&image(32, 32, |_| 0.0), &bb).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_replay_identical() {
        let img = image(48, 40, |i| ((i * 7919) % 101) as f32 / 100.0);
        let a = backbone_forward(&img, &Backbone::<f32>::new(9)).unwrap();
        let b = backbone_forward(&img, &Backbone::<f32>::new(9)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn reference_feature_of_full_image_at_ref_scale() {
        let bb = Backbone::<f32>::new(4);
        let img = image(48, 48, |i| ((i * 31) % 17) as f32 / 17.0);
        let roi = RoI::new(0., 0., 48., 48., 0).unwrap();
        let r = extract_reference_feature(&img, &roi, 48, &bb).unwrap();
        assert_eq!(r.shape(), &[1, FEAT_CHANNELS, 1, 1]);
        assert!(!r.requires_grad);
        let f = backbone_forward(&img, &bb).unwrap();
        let direct: Vec<f32> = f.data().chunks(36).map(|p| p.iter().sum::<f32>() / 36.0).collect();
        assert_eq!(r.data(), &direct[..]);
    }

    #[test]
    fn reference_feature_constant_image_is_crop_invariant() {
        let bb = Backbone::<f32>::new(5);
        let img = image(64, 64, |_| 0.6);
        let a = RoI::new(3., 5., 20., 40., 0).unwrap();
        let b = RoI::new(30., 1., 63., 22., 0).unwrap();
        let ra = extract_reference_feature(&img, &a, 32, &bb).unwrap();
        let rb = extract_reference_feature(&img, &b, 32, &bb).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn sweep_skips_tiny_scales_and_matches_direct_forward() {
        let bb = Backbone::<f32>::new(6);
        let img = image(40, 40, |i| ((i * 13) % 29) as f32 / 29.0);
        let sweep = cam_scale_sweep(&img, &bb, &[4, 40], None).unwrap();
        assert_eq!(sweep.warnings.len(), 1);
        assert_eq!(sweep.vectors.len(), 1);
        let f = backbone_forward(&img, &bb).unwrap();
        let direct: Vec<f32> = f.data().chunks(25).map(|p| p.iter().sum::<f32>() / 25.0).collect();
        for (a, b) in sweep.vectors[0].1.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn sweep_of_constant_image_is_scale_invariant() {
        let bb = Backbone::<f32>::new(7);
        let img = image(48, 48, |_| 0.25);
        let sweep = cam_scale_sweep(&img, &bb, &[16, 24, 48, 64, 96], None).unwrap();
        let first = &sweep.vectors[0].1;
        assert_eq!(first.len(), FEAT_CHANNELS);
        for (_, v) in &sweep.vectors {
            for (a, b) in v.iter().zip(first) {
                // GAP of a constant plane may round differently per size.
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}
