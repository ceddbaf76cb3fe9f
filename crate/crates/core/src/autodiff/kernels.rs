//! Raw forward/backward kernels on row-major slices.
//!
//! Shapes are validated by the graph layer before these are called.

#![allow(clippy::too_many_arguments)]

/// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, with explicit
/// row/column strides so transposed views need no copy.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * a_rs + (k - 1) * a_cs);
    assert!(k == 0 || b.len() > (k - 1) * b_rs + (n - 1) * b_cs);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output position `o` and kernel offset `kk`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds one `(C, H, W)` image into a `(C·k·k, Ho·Wo)` column matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.source(oy, ky, g.height) {
                        None => line.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = g.source(ox, kx, g.width).map_or(0.0, |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let hw = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.width) {
                            plane[iy * g.width + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    batch: usize,
    out_channels: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let hw = g.col_cols();
    let rows = g.col_rows();
    let mut out = vec![0.0; batch * out_channels * hw];
    let mut cols = vec![0.0; rows * hw];
    for b in 0..batch {
        im2col(&input[b * in_len..(b + 1) * in_len], g, &mut cols);
        let dst = &mut out[b * out_channels * hw..(b + 1) * out_channels * hw];
        for (o, chunk) in dst.chunks_mut(hw).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(out_channels, rows, hw, kernel, rows, 1, &cols, hw, 1, 1.0, dst);
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; each is `None` if not requested.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    upstream: &[f64],
    batch: usize,
    out_channels: usize,
    g: &ConvGeom,
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_len = g.channels * g.height * g.width;
    let hw = g.col_cols();
    let rows = g.col_rows();
    let mut d_input = want[0].then(|| vec![0.0; input.len()]);
    let mut d_kernel = want[1].then(|| vec![0.0; kernel.len()]);
    let d_bias = want[2].then(|| {
        let mut db = vec![0.0; out_channels];
        for b in 0..batch {
            let up = &upstream[b * out_channels * hw..(b + 1) * out_channels * hw];
            for (o, chunk) in up.chunks(hw).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        db
    });
    if d_input.is_none() && d_kernel.is_none() {
        return (None, None, d_bias);
    }
    let mut cols = vec![0.0; rows * hw];
    for b in 0..batch {
        let up = &upstream[b * out_channels * hw..(b + 1) * out_channels * hw];
        if let Some(dk) = d_kernel.as_mut() {
            im2col(&input[b * in_len..(b + 1) * in_len], g, &mut cols);
            // dK += dY · colsᵀ
            gemm(out_channels, hw, rows, up, hw, 1, &cols, 1, hw, 1.0, dk);
        }
        if let Some(dx) = d_input.as_mut() {
            // dcols = Kᵀ · dY
            gemm(rows, out_channels, hw, kernel, 1, rows, up, hw, 1, 0.0, &mut cols);
            col2im(&cols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (d_input, d_kernel, d_bias)
}

/// Max pooling without padding. Returns outputs and, per output cell, the
/// flat input index that produced it. Ties go to the first element in
/// row-major window order.
pub(crate) fn maxpool_forward(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut argmax = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if input[idx] > input[best] || (input[idx].is_nan() && !input[best].is_nan()) {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// Softmax along the middle axis of an `(outer, axis, inner)` view.
pub(crate) fn softmax_forward(x: &[f64], outer: usize, axis: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis + a) * inner + i;
            let max = (0..axis).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..axis {
                let e = (x[at(a)] - max).exp();
                y[at(a)] = e;
                total += e;
            }
            for a in 0..axis {
                y[at(a)] /= total;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(
    y: &[f64],
    dy: &[f64],
    outer: usize,
    axis: usize,
    inner: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis + a) * inner + i;
            let dot: f64 = (0..axis).map(|a| dy[at(a)] * y[at(a)]).sum();
            for a in 0..axis {
                dx[at(a)] = y[at(a)] * (dy[at(a)] - dot);
            }
        }
    }
    dx
}

/// Added to ‖s‖² before the square root in squash, so squash(0) = 0 stays
/// differentiable.
pub const SQUASH_EPS: f64 = 1e-12;

/// `squash(s) = ‖s‖²/(1+‖s‖²) · s/√(‖s‖²+ε)` over contiguous vectors of length `dim`.
pub(crate) fn squash_forward(x: &[f64], dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (src, dst) in x.chunks(dim).zip(y.chunks_mut(dim)) {
        let q: f64 = src.iter().map(|v| v * v).sum();
        let factor = q / ((1.0 + q) * (q + SQUASH_EPS).sqrt());
        for (d, s) in dst.iter_mut().zip(src) {
            *d = factor * s;
        }
    }
    y
}

pub(crate) fn squash_backward(x: &[f64], dy: &[f64], dim: usize) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for ((src, up), dst) in x.chunks(dim).zip(dy.chunks(dim)).zip(dx.chunks_mut(dim)) {
        let q: f64 = src.iter().map(|v| v * v).sum();
        let r = (q + SQUASH_EPS).sqrt();
        let f = q / ((1.0 + q) * r);
        // df/dq, written without a 1/q term so it is finite at q = 0.
        let df = 1.0 / ((1.0 + q) * r)
            - q / ((1.0 + q) * (1.0 + q) * r)
            - q / (2.0 * (1.0 + q) * r * r * r);
        let g_dot_s: f64 = up.iter().zip(src).map(|(g, s)| g * s).sum();
        for ((d, g), s) in dst.iter_mut().zip(up).zip(src) {
            *d = f * g + 2.0 * df * g_dot_s * s;
        }
    }
    dx
}
