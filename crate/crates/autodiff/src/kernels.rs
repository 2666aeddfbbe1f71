//! Dense kernels behind the tape: GEMM wrappers and im2col convolution.
//!
//! Convolution uses "same" zero padding `k / 2` and an odd square kernel,
//! so the output extent is `ceil(extent / stride)`. Every reduction runs in
//! a fixed order and results are bitwise reproducible.

/// `c = alpha * a · b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller's slices cover every index addressed by the
    // given extents and strides (checked by the debug assertions of the
    // callers and by slice lengths computed from the same shapes).
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

/// Row-major `[m, k] x [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && b.len() == k * n);
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut c);
    c
}

/// Gradients of `c = a · b` given `dc`.
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    // da = dc · bᵀ
    let mut da = vec![0.0; m * k];
    gemm(
        m,
        n,
        k,
        dc,
        (n as isize, 1),
        b,
        (1, n as isize),
        0.0,
        &mut da,
    );
    // db = aᵀ · dc
    let mut db = vec![0.0; k * n];
    gemm(
        k,
        m,
        n,
        a,
        (1, k as isize),
        dc,
        (n as isize, 1),
        0.0,
        &mut db,
    );
    (da, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn h_out(&self) -> usize {
        self.h.div_ceil(self.stride)
    }

    pub fn w_out(&self) -> usize {
        self.w.div_ceil(self.stride)
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn spatial_out(&self) -> usize {
        self.h_out() * self.w_out()
    }
}

/// Output positions `o` in `0..n_out` whose input index `o·s + off` lies
/// in `0..n_in`, as a half-open range.
fn valid_range(n_in: usize, n_out: usize, s: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { (-off) as usize }.div_ceil(s);
    let hi = if n_in as isize - off <= 0 {
        0
    } else {
        ((n_in as isize - off) as usize).div_ceil(s)
    };
    (lo.min(n_out), hi.min(n_out).max(lo.min(n_out)))
}

/// Unfolds one batch item `[c_in, h, w]` into `[c_in·k·k, h_out·w_out]`.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (ho, wo, pad, k, s) = (g.h_out(), g.w_out(), g.pad() as isize, g.k, g.stride);
    let so = ho * wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (y0, y1) = valid_range(g.h, ho, s, ky as isize - pad);
            for kx in 0..k {
                let off = kx as isize - pad;
                let (x0, x1) = valid_range(g.w, wo, s, off);
                let row = &mut cols[((c * k + ky) * k + kx) * so..][..so];
                row[..y0 * wo].fill(0.0);
                row[y1 * wo..].fill(0.0);
                for oy in y0..y1 {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    dst[..x0].fill(0.0);
                    dst[x1..].fill(0.0);
                    if x0 == x1 {
                        continue;
                    }
                    let start = (x0 * s) as isize + off;
                    if s == 1 {
                        dst[x0..x1]
                            .copy_from_slice(&src[start as usize..start as usize + (x1 - x0)]);
                    } else {
                        for (d, v) in dst[x0..x1]
                            .iter_mut()
                            .zip(src[start as usize..].iter().step_by(s))
                        {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adds the columns back onto the `[c_in, h, w]` image they came from.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (ho, wo, pad, k, s) = (g.h_out(), g.w_out(), g.pad() as isize, g.k, g.stride);
    let so = ho * wo;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (y0, y1) = valid_range(g.h, ho, s, ky as isize - pad);
            for kx in 0..k {
                let off = kx as isize - pad;
                let (x0, x1) = valid_range(g.w, wo, s, off);
                let row = &cols[((c * k + ky) * k + kx) * so..][..so];
                if x0 == x1 {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * wo + x0..oy * wo + x1];
                    let start = ((x0 * s) as isize + off) as usize;
                    if s == 1 {
                        dst[start..start + src.len()]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    } else {
                        for (d, v) in dst[start..].iter_mut().step_by(s).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `x: [B, C_in, H, W]`, `w: [C_out, C_in, k, k]` -> `[B, C_out, H_out, W_out]`.
pub fn conv2d(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (patch, so) = (g.patch(), g.spatial_out());
    let mut out = vec![0.0; g.batch * g.c_out * so];
    let mut cols = vec![0.0; patch * so];
    let per_in = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        im2col(g, &x[b * per_in..(b + 1) * per_in], &mut cols);
        let dst = &mut out[b * g.c_out * so..(b + 1) * g.c_out * so];
        gemm(
            g.c_out,
            patch,
            so,
            w,
            (patch as isize, 1),
            &cols,
            (so as isize, 1),
            0.0,
            dst,
        );
    }
    out
}

/// Returns `(dx, dw)` for the convolution above.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (patch, so) = (g.patch(), g.spatial_out());
    let per_in = g.c_in * g.h * g.w;
    let mut dw = vec![0.0; g.c_out * patch];
    let mut dx = if need_dx {
        vec![0.0; g.batch * per_in]
    } else {
        Vec::new()
    };
    let mut cols = vec![0.0; patch * so];
    let mut dcols = vec![0.0; patch * so];
    for b in 0..g.batch {
        let xb = &x[b * per_in..(b + 1) * per_in];
        let db = &dout[b * g.c_out * so..(b + 1) * g.c_out * so];
        im2col(g, xb, &mut cols);
        // dw += dout_b · colsᵀ
        gemm(
            g.c_out,
            so,
            patch,
            db,
            (so as isize, 1),
            &cols,
            (1, so as isize),
            1.0,
            &mut dw,
        );
        if need_dx {
            // dcols = wᵀ · dout_b
            gemm(
                patch,
                g.c_out,
                so,
                w,
                (1, patch as isize),
                db,
                (so as isize, 1),
                0.0,
                &mut dcols,
            );
            col2im(g, &dcols, &mut dx[b * per_in..(b + 1) * per_in]);
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_matmul() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn valid_ranges() {
        // 5 inputs, stride 2, offset -1: o=0 -> -1 (out), o=1 -> 1, o=2 -> 3
        assert_eq!(valid_range(5, 3, 2, -1), (1, 3));
        assert_eq!(valid_range(4, 2, 2, 1), (0, 2));
        assert_eq!(valid_range(4, 4, 1, 1), (0, 3));
        assert_eq!(valid_range(1, 1, 1, -2), (1, 1));
        assert_eq!(valid_range(1, 1, 1, 2), (0, 0));
    }

    #[test]
    fn stride_two_shape() {
        let g = ConvGeom {
            batch: 1,
            c_in: 1,
            h: 5,
            w: 4,
            c_out: 1,
            k: 3,
            stride: 2,
        };
        assert_eq!((g.h_out(), g.w_out()), (3, 2));
    }
}
