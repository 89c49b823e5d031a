//! Dense numeric kernels behind the tape operations.

/// `C = A * B + beta * C` where `A` is `m x k` and `B` is `k x n`.
///
/// When `a_t` is set, `a` holds `A^T` (row-major `k x m`); likewise `b_t`
/// means `b` holds `B^T` (row-major `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index reachable from the strides.
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

/// Sliding-window geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output positions `o` whose tap `kk` lands inside `0..len`.
    fn valid(&self, kk: usize, len: usize, out: usize) -> (usize, usize) {
        // o * stride + kk - pad in [0, len)
        let lo = if kk >= self.pad {
            0
        } else {
            (self.pad - kk).div_ceil(self.stride)
        };
        let hi = if len + self.pad > kk {
            ((len + self.pad - kk - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*k*k, Ho*Wo]` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &Window, cols: &mut [f64]) {
    let plane = g.h * g.w;
    let ncols = g.cols();
    for c in 0..g.channels {
        let xc = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid(kx, g.w, g.wo);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                dst.fill(0.0);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        out[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            out[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back into `[C, H, W]`,
/// accumulating into `x`.
pub(crate) fn col2im(cols: &[f64], g: &Window, x: &mut [f64]) {
    let plane = g.h * g.w;
    let ncols = g.cols();
    for c in 0..g.channels {
        let xc = &mut x[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid(kx, g.w, g.wo);
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut xc[iy * g.w..(iy + 1) * g.w];
                    let inp = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.stride + kx - g.pad] += inp[ox];
                    }
                }
            }
        }
    }
}

/// Row-wise softmax of a `rows x cols` matrix, in place.
pub(crate) fn softmax_rows(m: &mut [f64], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
