//! Raw buffer kernels behind the graph ops.

/// `c = a·b + beta·c` for row-major operands, with optional transposition of
/// the stored `a` (`k x m`) or `b` (`n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub ksize: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.ksize * self.ksize
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[C,H,W]` image into a `[C·k·k, Ho·Wo]` column matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let cols = g.col_cols();
    let k = g.ksize;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let cols = g.col_cols();
    let k = g.ksize;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    batch: usize,
    kernel: &[f64],
    filters: usize,
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_sz = g.channels * g.height * g.width;
    let out_sz = filters * g.col_cols();
    let mut out = vec![0.0; batch * out_sz];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        im2col(&input[b * in_sz..(b + 1) * in_sz], g, &mut col);
        let dst = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (f, chunk) in dst.chunks_mut(g.col_cols()).enumerate() {
                chunk.fill(bias[f]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            filters,
            g.col_rows(),
            g.col_cols(),
            kernel,
            false,
            &col,
            false,
            dst,
            beta,
        );
    }
    out
}

/// Accumulates input, kernel, and bias gradients for a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    batch: usize,
    kernel: &[f64],
    filters: usize,
    g: &ConvGeom,
    upstream: &[f64],
    d_input: Option<&mut [f64]>,
    d_kernel: Option<&mut [f64]>,
    d_bias: Option<&mut [f64]>,
) {
    let in_sz = g.channels * g.height * g.width;
    let out_sz = filters * g.col_cols();
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    if let Some(db) = d_bias {
        for b in 0..batch {
            let up = &upstream[b * out_sz..(b + 1) * out_sz];
            for (f, chunk) in up.chunks(g.col_cols()).enumerate() {
                db[f] += chunk.iter().sum::<f64>();
            }
        }
    }
    if let Some(dk) = d_kernel {
        for b in 0..batch {
            im2col(&input[b * in_sz..(b + 1) * in_sz], g, &mut col);
            let up = &upstream[b * out_sz..(b + 1) * out_sz];
            // dK[F, CKK] += up[F, HW] · col[CKK, HW]^T
            gemm(
                filters,
                g.col_cols(),
                g.col_rows(),
                up,
                false,
                &col,
                true,
                dk,
                1.0,
            );
        }
    }
    if let Some(di) = d_input {
        for b in 0..batch {
            let up = &upstream[b * out_sz..(b + 1) * out_sz];
            // dcol[CKK, HW] = K[F, CKK]^T · up[F, HW]
            gemm(
                g.col_rows(),
                filters,
                g.col_cols(),
                kernel,
                true,
                up,
                false,
                &mut col,
                0.0,
            );
            col2im_add(&col, g, &mut di[b * in_sz..(b + 1) * in_sz]);
        }
    }
}

/// 2x2 max pooling over `[N, H, W]` planes; returns values and flat argmax
/// indices into the input.
pub(crate) fn maxpool2(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2x upsampling over `[N, H, W]` planes.
pub(crate) fn upsample2(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            let src = &input[p * h * w + (oy / 2) * w..p * h * w + (oy / 2 + 1) * w];
            let dst = &mut out[p * oh * ow + oy * ow..p * oh * ow + (oy + 1) * ow];
            for (ox, v) in dst.iter_mut().enumerate() {
                *v = src[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(upstream: &[f64], planes: usize, h: usize, w: usize, d_input: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                d_input[p * h * w + (oy / 2) * w + ox / 2] += upstream[p * oh * ow + oy * ow + ox];
            }
        }
    }
}
