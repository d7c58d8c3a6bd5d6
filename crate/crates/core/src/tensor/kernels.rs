//! Slice-level CPU kernels.
//!
//! Every reduction here runs in a fixed order that does not depend on how
//! the surrounding loops are blocked, so results are bitwise reproducible.
//! Convolution goes through im2col + GEMM; [`conv2d_naive`] is the direct
//! nested-loop reference kept for testing.

use crate::error::{Error, Result};

/// Shape bookkeeping for a 2-D cross-correlation over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: (usize, usize, usize),
        weight: (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (in_ch, height, width) = input;
        let (out_ch, w_in, kernel_h, kernel_w) = weight;
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if w_in != in_ch {
            return Err(Error::shape(
                "conv2d",
                format!("axis C_in: input has {in_ch} channels, weight expects {w_in}"),
            ));
        }
        let out_extent = |extent: usize, k: usize, axis: &str| -> Result<usize> {
            let padded = extent + 2 * pad;
            if padded < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("axis {axis}: kernel {k} exceeds padded extent {padded}"),
                ));
            }
            if (padded - k) % stride != 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!("axis {axis}: ({padded} - {k}) not divisible by stride {stride}"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let out_h = out_extent(height, kernel_h, "H")?;
        let out_w = out_extent(width, kernel_w, "W")?;
        Ok(Self {
            in_ch,
            height,
            width,
            out_ch,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Rows of the im2col matrix: `C_in * kH * kW`.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel_h * self.kernel_w
    }

    /// Columns of the im2col matrix: `H' * W'`.
    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when the input itself already is its im2col matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls input patches into a `[C*kH*kW, H'*W']` matrix.
pub fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane = g.out_plane();
    let mut cols = vec![0.0; g.patch_len() * plane];
    let mut row = 0;
    for c in 0..g.in_ch {
        let channel = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &channel[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Scatter-adds an im2col-shaped gradient back onto the input layout.
pub fn col2im_add(cols: &[f64], g: &ConvGeometry, input_grad: &mut [f64]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_ch {
        let channel = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut channel[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Each output accumulates over `k` in ascending order.
pub fn gemm_nn(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let mut rows = c.chunks_exact_mut(n);
    let mut i = 0;
    // Four output rows at a time so each row of `b` is streamed once per block.
    while i + 4 <= m {
        let (c0, c1, c2, c3) = (
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
        );
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let (a0, a1, a2, a3) = (
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            );
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for crow in rows {
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], crow);
        }
        i += 1;
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `[k×m]` and `b` is `[k×n]`.
pub fn gemm_tn(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let mut rows = c.chunks_exact_mut(n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, c1, c2, c3) = (
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
        );
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let arow = &a[p * m + i..p * m + i + 4];
            let (a0, a1, a2, a3) = (arow[0], arow[1], arow[2], arow[3]);
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for crow in rows {
        for p in 0..k {
            axpy(a[p * m + i], &b[p * n..(p + 1) * n], crow);
        }
        i += 1;
    }
}

/// `c[m×n] += a · bᵀ` where `a` is `[m×k]` and `b` is stored `[n×k]`.
pub fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four interleaved partial sums combined in a fixed order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for (ca, cb) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0;
    for idx in chunks * 4..a.len() {
        tail += a[idx] * b[idx];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Sum with the same lane structure as [`dot`].
pub fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in a.chunks_exact(4) {
        for l in 0..4 {
            acc[l] += c[l];
        }
    }
    let mut tail = 0.0;
    for &v in &a[chunks * 4..] {
        tail += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// im2col + GEMM forward. Returns the output and, for pointwise-free
/// geometries, the im2col matrix needed by the weight gradient.
pub fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    g: &ConvGeometry,
    keep_cols: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let plane = g.out_plane();
    let mut out = vec![0.0; g.out_ch * plane];
    for (row, &b) in out.chunks_exact_mut(plane).zip(bias) {
        row.fill(b);
    }
    if g.is_pointwise() {
        gemm_nn(g.out_ch, plane, g.in_ch, weight, input, &mut out);
        return (out, None);
    }
    let cols = im2col(input, g);
    gemm_nn(g.out_ch, plane, g.patch_len(), weight, &cols, &mut out);
    (out, keep_cols.then_some(cols))
}

/// Gradients of a convolution given the upstream gradient.
///
/// `cols` must be the im2col matrix of `input` (ignored for pointwise
/// geometries, where `input` is used directly). Returns `(d_input, d_weight,
/// d_bias)`, each only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    cols: Option<&[f64]>,
    weight: &[f64],
    g: &ConvGeometry,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let d_bias = want_bias.then(|| grad_out.chunks_exact(plane).map(sum).collect());
    let d_weight = want_weight.then(|| {
        let mut dw = vec![0.0; g.out_ch * patch];
        let owned;
        let cols = match (g.is_pointwise(), cols) {
            (true, _) => input,
            (false, Some(c)) => c,
            (false, None) => {
                owned = im2col(input, g);
                &owned
            }
        };
        gemm_nt(g.out_ch, patch, plane, grad_out, cols, &mut dw);
        dw
    });
    let d_input = want_input.then(|| {
        if g.is_pointwise() {
            let mut dx = vec![0.0; g.in_ch * plane];
            gemm_tn(g.in_ch, plane, g.out_ch, weight, grad_out, &mut dx);
            dx
        } else {
            let mut dcols = vec![0.0; patch * plane];
            gemm_tn(patch, plane, g.out_ch, weight, grad_out, &mut dcols);
            let mut dx = vec![0.0; g.in_ch * g.height * g.width];
            col2im_add(&dcols, g, &mut dx);
            dx
        }
    });
    (d_input, d_weight, d_bias)
}

/// Direct nested-loop cross-correlation; the in-repo reference for the
/// im2col path.
pub fn conv2d_naive(input: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.out_ch * g.out_plane()];
    for o in 0..g.out_ch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = bias[o];
                for c in 0..g.in_ch {
                    for ky in 0..g.kernel_h {
                        for kx in 0..g.kernel_w {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize
                            {
                                continue;
                            }
                            let wv = weight
                                [((o * g.in_ch + c) * g.kernel_h + ky) * g.kernel_w + kx];
                            let xv = input[(c * g.height + iy as usize) * g.width + ix as usize];
                            acc += wv * xv;
                        }
                    }
                }
                out[(o * g.out_h + oy) * g.out_w + ox] = acc;
            }
        }
    }
    out
}

/// Geometry of a max-pool window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(dims: (usize, usize, usize), kernel: usize, stride: usize) -> Result<Self> {
        let (channels, height, width) = dims;
        if kernel == 0 {
            return Err(Error::invalid("maxpool2d", "empty window"));
        }
        if stride == 0 {
            return Err(Error::invalid("maxpool2d", "stride must be >= 1"));
        }
        let out = |extent: usize, axis: &str| -> Result<usize> {
            if extent < kernel || (extent - kernel) % stride != 0 {
                return Err(Error::shape(
                    "maxpool2d",
                    format!("axis {axis}: extent {extent} incompatible with window {kernel}/stride {stride}"),
                ));
            }
            Ok((extent - kernel) / stride + 1)
        };
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            out_h: out(height, "H")?,
            out_w: out(width, "W")?,
        })
    }
}

/// Windowed max. Returns values and, per output cell, the flat input index
/// of the first maximum in row-major window order.
pub fn maxpool_forward(input: &[f64], g: &PoolGeometry) -> (Vec<f64>, Vec<usize>) {
    let n = g.channels * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for c in 0..g.channels {
        let base = c * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best_idx = base + (oy * g.stride) * g.width + ox * g.stride;
                let mut best = input[best_idx];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let idx = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

/// Per-axis source taps for align-corners-false bilinear resampling.
#[derive(Debug, Clone)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(extent: usize, factor: usize) -> Self {
        let n = extent * factor;
        let mut lo = Vec::with_capacity(n);
        let mut hi = Vec::with_capacity(n);
        let mut frac = Vec::with_capacity(n);
        let scale = 1.0 / factor as f64;
        for d in 0..n {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

pub fn upsample_forward(
    input: &[f64],
    dims: (usize, usize, usize),
    rows: &AxisTaps,
    cols: &AxisTaps,
) -> Vec<f64> {
    let (c, h, w) = dims;
    let (oh, ow) = (rows.lo.len(), cols.lo.len());
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

pub fn upsample_backward(
    grad_out: &[f64],
    dims: (usize, usize, usize),
    rows: &AxisTaps,
    cols: &AxisTaps,
) -> Vec<f64> {
    let (c, h, w) = dims;
    let (oh, ow) = (rows.lo.len(), cols.lo.len());
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let g = go[oy * ow + ox];
                let gt = g * (1.0 - fy);
                let gb = g * fy;
                plane[y0 * w + x0] += gt * (1.0 - fx);
                plane[y0 * w + x1] += gt * fx;
                plane[y1 * w + x0] += gb * (1.0 - fx);
                plane[y1 * w + x1] += gb * fx;
            }
        }
    }
    dx
}
