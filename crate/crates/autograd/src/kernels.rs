//! Dense f64 kernels behind the differentiable primitives.
//!
//! All buffers are row-major. Matrix products go through `matrixmultiply`,
//! which is deterministic for a fixed problem size (the reduction order does
//! not depend on thread scheduling because we never enable its threading).

/// `c = a · b + beta · c` where `a` is `m×k` and `b` is `k×n`.
///
/// `trans_a` / `trans_b` mean the stored buffer holds the transpose
/// (`k×m` resp. `n×k`), so no explicit transposition is materialized.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above,
    // and `c` does not alias `a` or `b` (distinct borrows).
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

/// Geometry of a 2-d convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one sample `x` (`[cin, h, w]`) into columns `[patch, positions]`.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatters columns back into one sample of `dx`,
/// accumulating.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution without bias. Returns NCHW output.
///
/// Samples are unfolded one at a time into a single reused buffer, which
/// stays cache-resident, and each product lands directly in that sample's
/// `[cout, positions]` output block.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let p = g.positions();
    let in_len = g.cin * g.h * g.w;
    let mut cols = vec![0.0; g.patch() * p];
    let mut out = vec![0.0; g.batch * g.cout * p];
    for b in 0..g.batch {
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
        let dst = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        gemm(g.cout, g.patch(), p, w, false, &cols, false, 0.0, dst);
    }
    out
}

/// Backward convolution: returns `(dx, dw)` for the requested sides.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let p = g.positions();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut cols = vec![0.0; g.patch() * p];
    let mut dw = want_dw.then(|| vec![0.0; g.cout * g.patch()]);
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    for b in 0..g.batch {
        let db = &dout[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
            gemm(g.cout, p, g.patch(), db, false, &cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(g.patch(), g.cout, p, w, true, db, false, 0.0, &mut cols);
            col2im(g, &cols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Non-overlapping `k×k` average pooling of NCHW data with `planes = N·C`.
pub fn avg_pool(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * ho * wo];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for i in 0..k {
                    let row = &src[(oy * k + i) * w + ox * k..(oy * k + i) * w + ox * k + k];
                    s += row.iter().sum::<f64>();
                }
                dst[oy * wo + ox] = s * inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(
    dout: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let src = &dout[pl * ho * wo..(pl + 1) * ho * wo];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / k) * wo + x / k] * inv;
            }
        }
    }
    dx
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
