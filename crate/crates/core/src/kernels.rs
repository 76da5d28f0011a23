//! Raw forward/backward kernels operating on flat slices.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1, stride-1, unpadded convolution is a plain channel mix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// How out-of-range taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Clamp to the nearest edge pixel.
    Replicate,
}

impl ConvGeom {
    /// Maps a padded coordinate to a source index, or `None` for a zero tap.
    #[inline]
    fn src(&self, i: isize, len: usize) -> Option<usize> {
        if i >= 0 && i < len as isize {
            Some(i as usize)
        } else if self.pad_mode == PadMode::Replicate {
            Some(i.clamp(0, len as isize - 1) as usize)
        } else {
            None
        }
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (Ho·Wo)` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.src(iy, g.h) else {
                        out_row.fill(T::zero());
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = g.src(ix, g.w).map_or(T::zero(), |ix| src[ix]);
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let Some(iy) = g.src(iy, g.h) else { continue };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if let Some(ix) = g.src(ix, g.w) {
                            dst[ix] = dst[ix] + src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution over a batch. Returns the output and, when
/// `keep_cols` is set, the unfolded inputs for the backward pass.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    b: &[T],
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let (in_len, p, patch) = (g.c * g.h * g.w, g.positions(), g.patch());
    let mut out = vec![T::zero(); n * g.k * p];
    let mut kept = Vec::new();
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * p }];
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let oi = &mut out[i * g.k * p..(i + 1) * g.k * p];
        for (kk, row) in oi.chunks_mut(p).enumerate() {
            row.fill(b[kk]);
        }
        if g.is_pointwise() {
            T::gemm(g.k, patch, p, w, false, xi, false, T::one(), oi);
        } else {
            im2col(xi, g, &mut cols);
            T::gemm(g.k, patch, p, w, false, &cols, false, T::one(), oi);
            if keep_cols {
                kept.extend_from_slice(&cols);
            }
        }
    }
    (out, kept)
}

/// Accumulates gradients of a batched convolution. Any of the three
/// gradient sinks may be absent.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    cols: &[T],
    g: &ConvGeom,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (in_len, p, patch) = (g.c * g.h * g.w, g.positions(), g.patch());
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * p }];
    let mut local_cols = Vec::new();
    for i in 0..n {
        let di = &dout[i * g.k * p..(i + 1) * g.k * p];
        let ci: &[T] = if g.is_pointwise() {
            &x[i * in_len..(i + 1) * in_len]
        } else if !cols.is_empty() {
            &cols[i * patch * p..(i + 1) * patch * p]
        } else {
            local_cols.resize(patch * p, T::zero());
            im2col(&x[i * in_len..(i + 1) * in_len], g, &mut local_cols);
            &local_cols
        };
        if let Some(dw) = dw.as_deref_mut() {
            T::gemm(g.k, p, patch, di, false, ci, true, T::one(), dw);
        }
        if let Some(db) = db.as_deref_mut() {
            for (kk, row) in di.chunks(p).enumerate() {
                db[kk] = db[kk] + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxi = &mut dx[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(patch, g.k, p, w, true, di, false, T::one(), dxi);
            } else {
                T::gemm(patch, g.k, p, w, true, di, false, T::zero(), &mut dcols);
                col2im_add(&dcols, g, dxi);
            }
        }
    }
}

/// Cell-index region of a RoI on a feature map: `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRegion {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl CellRegion {
    /// Cell span `[start, end)` of bin `bin` out of `out` along an axis of
    /// `len` cells starting at `origin`.
    pub fn bin_span(origin: usize, len: usize, bin: usize, out: usize) -> (usize, usize) {
        let start = ((bin * len) as f64 / out as f64).floor() as usize;
        let mut end = (((bin + 1) * len) as f64 / out as f64).ceil() as usize;
        if end <= start {
            end = start + 1;
        }
        (origin + start, origin + end.min(len))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Avg,
    Max,
}

impl std::str::FromStr for PoolMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg" | "ave" | "average" => Ok(Self::Avg),
            "max" => Ok(Self::Max),
            other => Err(format!("unknown pooling mode `{other}` (expected avg|max)")),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Avg => "avg",
            Self::Max => "max",
        })
    }
}

/// Pools every region of a single `C×h×w` map into `out×out` bins.
/// For max pooling, also returns the winning flat index (within the map)
/// for every output element.
pub(crate) fn roi_pool_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    regions: &[CellRegion],
    out: usize,
    mode: PoolMode,
) -> (Vec<T>, Vec<usize>) {
    let per = c * out * out;
    let mut y = vec![T::zero(); regions.len() * per];
    let mut arg = if mode == PoolMode::Max {
        vec![0usize; y.len()]
    } else {
        Vec::new()
    };
    for (r, reg) in regions.iter().enumerate() {
        for by in 0..out {
            let (ys, ye) = CellRegion::bin_span(reg.y0, reg.y1 - reg.y0, by, out);
            for bx in 0..out {
                let (xs, xe) = CellRegion::bin_span(reg.x0, reg.x1 - reg.x0, bx, out);
                let count = T::from_usize((ye - ys) * (xe - xs)).unwrap();
                for ch in 0..c {
                    let plane = ch * h * w;
                    let o = r * per + ch * out * out + by * out + bx;
                    match mode {
                        PoolMode::Avg => {
                            let mut s = T::zero();
                            for yy in ys..ye {
                                for xx in xs..xe {
                                    s = s + x[plane + yy * w + xx];
                                }
                            }
                            y[o] = s / count;
                        }
                        PoolMode::Max => {
                            let mut best = plane + ys * w + xs;
                            for yy in ys..ye {
                                for xx in xs..xe {
                                    let idx = plane + yy * w + xx;
                                    if x[idx] > x[best] {
                                        best = idx;
                                    }
                                }
                            }
                            y[o] = x[best];
                            arg[o] = best;
                        }
                    }
                }
            }
        }
    }
    (y, arg)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn roi_pool_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    regions: &[CellRegion],
    out: usize,
    mode: PoolMode,
    arg: &[usize],
    dx: &mut [T],
) {
    if mode == PoolMode::Max {
        for (o, &g) in dy.iter().enumerate() {
            dx[arg[o]] = dx[arg[o]] + g;
        }
        return;
    }
    let per = c * out * out;
    for (r, reg) in regions.iter().enumerate() {
        for by in 0..out {
            let (ys, ye) = CellRegion::bin_span(reg.y0, reg.y1 - reg.y0, by, out);
            for bx in 0..out {
                let (xs, xe) = CellRegion::bin_span(reg.x0, reg.x1 - reg.x0, bx, out);
                let count = T::from_usize((ye - ys) * (xe - xs)).unwrap();
                for ch in 0..c {
                    let g = dy[r * per + ch * out * out + by * out + bx] / count;
                    let plane = ch * h * w;
                    for yy in ys..ye {
                        for xx in xs..xe {
                            let idx = plane + yy * w + xx;
                            dx[idx] = dx[idx] + g;
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear resampling of every `H×W` plane to `out_h×out_w`, sampling at
/// `(i + 0.5)·H/out_h − 0.5` (half-pixel centers), clamped to the border.
/// Forward-only.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("bilinear_resize expects N×C×H×W");
    assert!(h >= 1 && w >= 1 && out_h >= 1 && out_w >= 1);
    if h == out_h && w == out_w {
        return x.detached();
    }
    let taps = |len: usize, out: usize| -> Vec<(usize, usize, T)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(len - 1);
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, T::lit(src - i0 as f64))
            })
            .collect()
    };
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in src.chunks(h * w) {
        for &(y0, y1, fy) in &ty {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &tx {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out).unwrap()
}

/// Row-wise numerically stable softmax of an `n × m` matrix.
pub(crate) fn softmax_rows<T: Scalar>(logits: &[T], m: usize) -> Vec<T> {
    let mut p = logits.to_vec();
    for row in p.chunks_mut(m) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_spans_cover_region() {
        for len in 1..20 {
            let mut covered = vec![false; len];
            for b in 0..7 {
                let (s, e) = CellRegion::bin_span(0, len, b, 7);
                assert!(e > s && e <= len);
                covered[s..e].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c));
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::<f64>::from_fn(vec![1, 2, 3, 5], |i| i as f64 * 0.5);
        assert_eq!(bilinear_resize(&x, 3, 5), x);
        let c = Tensor::<f64>::full(vec![1, 1, 4, 3], 0.7);
        let r = bilinear_resize(&c, 9, 2);
        assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
}
