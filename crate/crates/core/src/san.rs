//! Scale-aware correction: RoIs are partitioned by area, each partition has
//! its own 1×1 channel-mixing sub-network followed by ReLU, and the
//! corrected feature is summed with the original one.
//!
//! During training the same sub-networks are applied a second time in a
//! loss branch whose input is detached, so the scale-aware loss updates
//! only the sub-network weights and never the layers below them.

use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::backbone::{BoundConv, ConvLayer};
use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::PadMode;
use crate::rng::{stream_rng, streams};
use crate::roi::RoI;
use crate::tensor::{Parameter, Scalar, Tensor};

/// Reference scale plus area thresholds. A threshold belongs to the
/// interval below it: `(0, b0], (b0, b1], …, (b_{n-2}, ∞)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePartitionScheme {
    pub ref_scale: usize,
    pub boundaries: Vec<f64>,
}

impl ScalePartitionScheme {
    pub fn new(ref_scale: usize, boundaries: Vec<f64>) -> Result<Self> {
        if ref_scale == 0 {
            return Err(invalid("partition scheme", "reference scale must be positive"));
        }
        if boundaries.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(invalid("partition scheme", "boundaries must be finite and > 0"));
        }
        if boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("partition scheme", "boundaries must be strictly increasing"));
        }
        Ok(Self {
            ref_scale,
            boundaries,
        })
    }

    /// Builds a scheme from boundary side lengths (areas are their squares).
    pub fn from_sides(ref_scale: usize, sides: &[f64]) -> Result<Self> {
        Self::new(ref_scale, sides.iter().map(|s| s * s).collect())
    }

    /// `(0², 160²], (160², 288²], (288², ∞)` at 224².
    pub fn voc() -> Self {
        Self::from_sides(224, &[160.0, 288.0]).unwrap()
    }

    /// `(0², 64²], (64², 192²], (192², ∞)` at 128².
    pub fn coco() -> Self {
        Self::from_sides(128, &[64.0, 192.0]).unwrap()
    }

    /// Synthetic-data preset: `(0², 24²], (24², 48²], (48², ∞)` at 48².
    pub fn toy() -> Self {
        Self::from_sides(48, &[24.0, 48.0]).unwrap()
    }

    pub fn num_partitions(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn index_for_area(&self, area: f64) -> usize {
        self.boundaries.iter().take_while(|&&b| area > b).count()
    }
}

/// Sub-network index for a RoI, by its area in input-image pixels².
pub fn partition_index(roi: &RoI, scheme: &ScalePartitionScheme) -> usize {
    scheme.index_for_area(roi.area())
}

/// One 1×1 square channel mix, `f_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SanSubNetwork<T: Scalar = f32> {
    pub conv: ConvLayer<T>,
}

impl<T: Scalar> SanSubNetwork<T> {
    fn zeros(channels: usize) -> Self {
        Self {
            conv: ConvLayer {
                w: Parameter::zeros(vec![channels, channels, 1, 1]),
                b: Parameter::zeros(vec![channels]),
                stride: 1,
                pad: 0,
                pad_mode: PadMode::Zero,
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.w.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SanInit {
    Identity,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SanModule<T: Scalar = f32> {
    pub scheme: ScalePartitionScheme,
    pub subnets: Vec<SanSubNetwork<T>>,
}

impl<T: Scalar> SanModule<T> {
    /// Zero-initialized module with one sub-network per partition.
    pub fn new(scheme: ScalePartitionScheme, channels: usize) -> Self {
        let subnets = (0..scheme.num_partitions())
            .map(|_| SanSubNetwork::zeros(channels))
            .collect();
        Self { scheme, subnets }
    }

    pub fn channels(&self) -> usize {
        self.subnets.first().map_or(0, SanSubNetwork::channels)
    }

    /// Every kernel becomes the identity channel mix, biases zero.
    pub fn init_identity(&mut self) {
        for s in &mut self.subnets {
            let c = s.channels();
            let w = s.conv.w.data_mut();
            w.fill(T::zero());
            for i in 0..c {
                w[i * c + i] = T::one();
            }
            s.conv.b.data_mut().fill(T::zero());
        }
        self.reset_momentum();
    }

    /// Kernels drawn from `N(0, std²)`, biases zero. `std == 0` gives
    /// all-zero kernels.
    pub fn init_gaussian(&mut self, std: f64, seed: u64) -> Result<()> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(invalid("init_gaussian", format!("std must be >= 0, got {std}")));
        }
        let mut rng = stream_rng(seed, streams::SAN_INIT);
        for s in &mut self.subnets {
            if std == 0.0 {
                s.conv.w.data_mut().fill(T::zero());
            } else {
                let normal = Normal::new(0.0, std).expect("finite std");
                for v in s.conv.w.data_mut() {
                    *v = T::lit(normal.sample(&mut rng));
                }
            }
            s.conv.b.data_mut().fill(T::zero());
        }
        self.reset_momentum();
        Ok(())
    }

    fn reset_momentum(&mut self) {
        for s in &mut self.subnets {
            s.conv.w.momentum.fill(T::zero());
            s.conv.b.momentum.fill(T::zero());
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundSan {
        BoundSan {
            subnets: self.subnets.iter().map(|s| s.conv.bind(g, trainable)).collect(),
        }
    }

    pub fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.subnets.iter().enumerate() {
            out.push((format!("san.{i}.w"), &s.conv.w));
            out.push((format!("san.{i}.b"), &s.conv.b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.subnets.iter_mut().enumerate() {
            out.push((format!("san.{i}.w"), &mut s.conv.w));
            out.push((format!("san.{i}.b"), &mut s.conv.b));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> SanModule<U> {
        SanModule {
            scheme: self.scheme.clone(),
            subnets: self
                .subnets
                .iter()
                .map(|s| SanSubNetwork {
                    conv: s.conv.cast(),
                })
                .collect(),
        }
    }

    /// `relu(conv1x1(feat))` with sub-network `i`, outside of training.
    pub fn forward(&self, feat: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(feat.detached());
        let y = bound.forward(&mut g, x, i)?;
        Ok(g.value(y).detached())
    }
}

/// SAN parameters bound into a graph. Both the detection path and the
/// loss branch use the same handles, which is what shares the weights.
#[derive(Clone, Debug)]
pub struct BoundSan {
    pub subnets: Vec<BoundConv>,
}

impl BoundSan {
    fn subnet(&self, i: usize) -> Result<&BoundConv> {
        self.subnets.get(i).ok_or(Error::PartitionOutOfRange {
            index: i,
            count: self.subnets.len(),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, feat: Var, i: usize) -> Result<Var> {
        let sub = self.subnet(i)?;
        let (_, c, _, _) = g.value(feat).dims4()?;
        let expected = g.value(sub.w).shape()[1];
        if c != expected {
            return Err(shape_err("san_forward", format!("{expected} channels"), c));
        }
        let y = sub.apply(g, feat)?;
        Ok(g.relu(y))
    }

    /// Split a batch by partition, correct each group with its own
    /// sub-network, and merge back into the original order.
    pub fn forward_partitioned<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        feats: Var,
        partitions: &[usize],
    ) -> Result<Var> {
        let n = g.value(feats).shape()[0];
        if partitions.len() != n {
            return Err(shape_err("san_forward", format!("{n} partition ids"), partitions.len()));
        }
        let mut order = Vec::with_capacity(n);
        let mut parts = Vec::new();
        for p in 0..self.subnets.len() {
            let idx: Vec<usize> = (0..n).filter(|&i| partitions[i] == p).collect();
            if idx.is_empty() {
                continue;
            }
            let sel = g.select_batch(feats, &idx)?;
            parts.push(self.forward(g, sel, p)?);
            order.extend(idx);
        }
        if let Some(&bad) = partitions.iter().find(|&&p| p >= self.subnets.len()) {
            return Err(Error::PartitionOutOfRange {
                index: bad,
                count: self.subnets.len(),
            });
        }
        let merged = g.concat_batch(&parts)?;
        let mut position = vec![0; n];
        for (row, &orig) in order.iter().enumerate() {
            position[orig] = row;
        }
        g.select_batch(merged, &position)
    }

    /// Scale-aware loss for one or more RoIs: the RoI features are detached
    /// at entry, corrected by their sub-networks, global-average-pooled and
    /// compared with the reference features by summed smooth-L1.
    pub fn loss_branch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        feats: Var,
        partitions: &[usize],
        r_tilde: &Tensor<T>,
    ) -> Result<Var> {
        let (n, c, _, _) = g.value(feats).dims4()?;
        if r_tilde.shape() != [n, c, 1, 1] {
            return Err(shape_err(
                "san_loss_branch",
                format!("reference of shape [{n}, {c}, 1, 1]"),
                format!("{:?}", r_tilde.shape()),
            ));
        }
        let blocked = g.detach(feats);
        let corrected = self.forward_partitioned(g, blocked, partitions)?;
        let r = g.global_avg_pool(corrected)?;
        let target = g.constant(r_tilde.detached());
        let diff = g.sub(r, target)?;
        let l = g.smooth_l1(diff);
        Ok(g.sum(l))
    }
}

/// Element-wise sum of the original feature and the SAN feature, with an
/// optional (trainable) scale on the SAN feature.
pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    original: Var,
    san_out: Var,
    alpha: Option<Var>,
) -> Result<Var> {
    let s = match alpha {
        Some(a) => g.mul_scalar(san_out, a)?,
        None => san_out,
    };
    g.add(original, s)
}

/// Single-RoI scale-aware loss; see [`BoundSan::loss_branch`].
pub fn san_loss_branch<T: Scalar>(
    g: &mut Graph<T>,
    feat_roi: Var,
    i: usize,
    san: &BoundSan,
    r_tilde: &Tensor<T>,
) -> Result<Var> {
    san.loss_branch(g, feat_roi, &[i], r_tilde)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roi_with_area(side: f32) -> RoI {
        RoI::new(0.0, 0.0, side, side, 0).unwrap()
    }

    #[test]
    fn voc_partition_examples() {
        let s = ScalePartitionScheme::voc();
        assert_eq!(partition_index(&roi_with_area(120.0), &s), 0);
        assert_eq!(partition_index(&roi_with_area(160.0), &s), 0);
        assert_eq!(partition_index(&roi_with_area(300.0), &s), 2);
    }

    #[test]
    fn scheme_validation() {
        assert!(ScalePartitionScheme::new(48, vec![10.0, 10.0]).is_err());
        assert!(ScalePartitionScheme::new(48, vec![-1.0]).is_err());
        let single = ScalePartitionScheme::new(48, vec![]).unwrap();
        assert_eq!(single.num_partitions(), 1);
        assert_eq!(single.index_for_area(1e12), 0);
    }

    fn feat(shape: [usize; 4], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), f)
    }

    #[test]
    fn identity_init_is_relu() {
        let mut m = SanModule::<f64>::new(ScalePartitionScheme::toy(), 4);
        m.init_identity();
        let x = feat([1, 4, 2, 3], |i| i as f64 * 0.37 - 2.0);
        for i in 0..3 {
            let y = m.forward(&x, i).unwrap();
            let relu: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
            assert_eq!(y.data(), &relu[..]);
        }
        let nonneg = feat([1, 4, 2, 2], |i| i as f64 * 0.5);
        assert_eq!(m.forward(&nonneg, 1).unwrap().data(), nonneg.data());
    }

    #[test]
    fn identity_fuse_doubles_nonnegative_features() {
        let mut m = SanModule::<f32>::new(ScalePartitionScheme::toy(), 3);
        m.init_identity();
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        let x = g.constant(Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f32 * 0.1));
        let s = b.forward(&mut g, x, 0).unwrap();
        let f = fuse(&mut g, x, s, None).unwrap();
        let doubled: Vec<f32> = g.value(x).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.value(f).data(), &doubled[..]);
        let zero = g.constant(Tensor::zeros(vec![1, 3, 2, 2]));
        let f0 = fuse(&mut g, x, zero, None).unwrap();
        assert_eq!(g.value(f0).data(), g.value(x).data());
    }

    #[test]
    fn gaussian_init_replays_and_zero_std_is_zero() {
        let mut a = SanModule::<f32>::new(ScalePartitionScheme::toy(), 32);
        let mut b = a.clone();
        a.init_gaussian(0.1, 42).unwrap();
        b.init_gaussian(0.1, 42).unwrap();
        assert_eq!(a, b);
        let all: Vec<f64> = a
            .subnets
            .iter()
            .flat_map(|s| s.conv.w.data().iter().map(|&v| v as f64))
            .collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.01, "empirical std {std}");

        a.init_gaussian(0.0, 1).unwrap();
        let x = Tensor::from_fn(vec![1, 32, 2, 2], |i| i as f32);
        assert!(a.forward(&x, 2).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.init_gaussian(-1.0, 1).is_err());
    }

    #[test]
    fn forward_is_position_wise() {
        let mut m = SanModule::<f64>::new(ScalePartitionScheme::toy(), 5);
        m.init_gaussian(0.5, 3).unwrap();
        let x = feat([1, 5, 3, 3], |i| (i as f64 * 0.61).sin());
        let y = m.forward(&x, 1).unwrap();
        let mut x2 = x.clone();
        // Perturb every channel at position (1, 2).
        for c in 0..5 {
            x2.data_mut()[c * 9 + 5] += 0.7;
        }
        let y2 = m.forward(&x2, 1).unwrap();
        for c in 0..5 {
            for p in 0..9 {
                if p != 5 {
                    assert_eq!(y.data()[c * 9 + p], y2.data()[c * 9 + p]);
                }
            }
        }
    }

    #[test]
    fn forward_errors() {
        let m = SanModule::<f64>::new(ScalePartitionScheme::toy(), 4);
        let x = feat([1, 4, 1, 1], |_| 1.0);
        assert!(matches!(m.forward(&x, 3), Err(Error::PartitionOutOfRange { .. })));
        let wrong = feat([1, 3, 1, 1], |_| 1.0);
        assert!(m.forward(&wrong, 0).is_err());
    }

    #[test]
    fn loss_branch_values() {
        let mut m = SanModule::<f64>::new(ScalePartitionScheme::toy(), 6);
        m.init_identity();
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        let x = g.constant(feat([1, 6, 2, 2], |_| 1.0));
        let same = Tensor::full(vec![1, 6, 1, 1], 1.0);
        let l = san_loss_branch(&mut g, x, 0, &b, &same).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let off = Tensor::full(vec![1, 6, 1, 1], 0.5);
        let l = san_loss_branch(&mut g, x, 0, &b, &off).unwrap();
        assert_eq!(g.value(l).item(), 0.125 * 6.0);
    }
}
