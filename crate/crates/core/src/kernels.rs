//! Low-level numeric kernels shared by the autograd ops.

use crate::real::Real;

/// `c = a · b + beta · c` for row/column-strided `a` (m×k) and `b` (k×n);
/// `c` is dense row-major m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    (rsa, csa): (usize, usize),
    b: &[R],
    (rsb, csb): (usize, usize),
    c: &mut [R],
    beta: R,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, pad: usize) -> Self {
        assert!(height + 2 * pad >= kernel && width + 2 * pad >= kernel, "kernel larger than padded input");
        Self {
            channels,
            height,
            width,
            kernel,
            pad,
            out_h: height + 2 * pad - kernel + 1,
            out_w: width + 2 * pad - kernel + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid output column range for kernel column `kx`.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.width + self.pad).saturating_sub(kx).min(self.out_w);
        (lo, hi.max(lo))
    }
}

pub(crate) fn im2col<R: Real>(x: &[R], g: &ConvGeom, col: &mut [R]) {
    let n = g.col_cols();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                let (xlo, xhi) = g.x_range(kx);
                for oy in 0..g.out_h {
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.height {
                        d.fill(R::zero());
                        continue;
                    }
                    let s = &src[(iy - g.pad) * g.width..(iy - g.pad + 1) * g.width];
                    d[..xlo].fill(R::zero());
                    d[xhi..].fill(R::zero());
                    if xhi > xlo {
                        let ix0 = xlo + kx - g.pad;
                        d[xlo..xhi].copy_from_slice(&s[ix0..ix0 + (xhi - xlo)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `x`.
pub(crate) fn col2im<R: Real>(col: &[R], g: &ConvGeom, x: &mut [R]) {
    let n = g.col_cols();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let dst = &mut x[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * n..(row + 1) * n];
                let (xlo, xhi) = g.x_range(kx);
                if xhi <= xlo {
                    continue;
                }
                for oy in 0..g.out_h {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.height {
                        continue;
                    }
                    let s = &src[oy * g.out_w + xlo..oy * g.out_w + xhi];
                    let ix0 = xlo + kx - g.pad;
                    let d = &mut dst[(iy - g.pad) * g.width + ix0..(iy - g.pad) * g.width + ix0 + s.len()];
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv += *sv;
                    }
                }
            }
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

/// Row-major strides of `shape` viewed inside `out`, zero along broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out.len();
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer: usize = out[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd.saturating_sub(1)];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * inner;
        for j in 0..inner {
            f(base + j, oa + j * ia, ob + j * ib);
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], g: &ConvGeom, w: &[f32], o: usize) -> Vec<f32> {
        let mut out = vec![0.0; o * g.out_h * g.out_w];
        for oc in 0..o {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..g.channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = oy as isize + ky as isize - g.pad as isize;
                                let ix = ox as isize + kx as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * w[((oc * g.channels + c) * g.kernel + ky) * g.kernel + kx];
                            }
                        }
                    }
                    out[(oc * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_naive_convolution() {
        let g = ConvGeom::new(2, 5, 4, 3, 1);
        let x: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..3 * 18).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut col = vec![0.0; g.col_rows() * g.col_cols()];
        im2col(&x, &g, &mut col);
        let mut out = vec![0.0; 3 * g.col_cols()];
        gemm(3, g.col_rows(), g.col_cols(), &w, (g.col_rows(), 1), &col, (g.col_cols(), 1), &mut out, 0.0);
        let reference = naive_conv(&x, &g, &w, 3);
        for (a, b) in out.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(3, 4, 6, 3, 1);
        let x: Vec<f32> = (0..72).map(|i| ((i * 7 % 11) as f32) - 5.0).collect();
        let c: Vec<f32> = (0..g.col_rows() * g.col_cols()).map(|i| ((i * 5 % 13) as f32) - 6.0).collect();
        let mut col = vec![0.0; c.len()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-6);
    }

    #[test]
    fn broadcast_offsets() {
        let out = broadcast_shape(&[2, 1, 3], &[1, 4, 1]);
        assert_eq!(out, vec![2, 4, 3]);
        let sa = broadcast_strides(&[2, 1, 3], &out);
        let sb = broadcast_strides(&[1, 4, 1], &out);
        let mut seen = Vec::new();
        for_each_broadcast(&out, &sa, &sb, |i, a, b| seen.push((i, a, b)));
        assert_eq!(seen.len(), 24);
        assert_eq!(seen[5], (5, 2, 1));
        assert_eq!(seen[23], (23, 5, 3));
    }
}
