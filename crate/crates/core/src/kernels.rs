//! Raw slice kernels behind the tape ops. No shape checks here; callers
//! validate dimensions first.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    /// Output index range along one axis for which `out + tap - pad` lands
    /// inside `[0, size)`.
    #[inline]
    fn valid(size: usize, out: usize, tap: usize, pad: usize) -> (usize, usize) {
        let lo = pad as isize - tap as isize;
        let hi = size as isize + pad as isize - tap as isize;
        let lo = lo.max(0) as usize;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// Unfolds `x` into a `(c_in·k·k) × (n·ho·wo)` patch matrix; padding
/// taps stay zero.
fn im2col<T: Real>(g: ConvGeom, x: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane_out = ho * wo;
    let cols = g.n * plane_out;
    let mut col = vec![T::zero(); g.c_in * g.k * g.k * cols];
    for i in 0..g.c_in {
        for ky in 0..g.k {
            let (y0, y1) = ConvGeom::valid(g.h, ho, ky, g.pad);
            for kx in 0..g.k {
                let (x0, x1) = ConvGeom::valid(g.w, wo, kx, g.pad);
                if x1 <= x0 {
                    continue;
                }
                let q = (i * g.k + ky) * g.k + kx;
                let shift = x0 + kx - g.pad;
                for b in 0..g.n {
                    let in_plane = &x[(b * g.c_in + i) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut col[q * cols + b * plane_out..][..plane_out];
                    for y in y0..y1 {
                        let iy = y + ky - g.pad;
                        dst[y * wo + x0..y * wo + x1]
                            .copy_from_slice(&in_plane[iy * g.w + shift..][..x1 - x0]);
                    }
                }
            }
        }
    }
    col
}

/// Adds a patch-matrix gradient back onto the input layout.
fn col2im<T: Real>(g: ConvGeom, col: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane_out = ho * wo;
    let cols = g.n * plane_out;
    for i in 0..g.c_in {
        for ky in 0..g.k {
            let (y0, y1) = ConvGeom::valid(g.h, ho, ky, g.pad);
            for kx in 0..g.k {
                let (x0, x1) = ConvGeom::valid(g.w, wo, kx, g.pad);
                if x1 <= x0 {
                    continue;
                }
                let q = (i * g.k + ky) * g.k + kx;
                let shift = x0 + kx - g.pad;
                for b in 0..g.n {
                    let plane = &mut dx[(b * g.c_in + i) * g.h * g.w..][..g.h * g.w];
                    let src = &col[q * cols + b * plane_out..][..plane_out];
                    for y in y0..y1 {
                        let iy = y + ky - g.pad;
                        let drow = &mut plane[iy * g.w + shift..][..x1 - x0];
                        for (d, &s) in drow.iter_mut().zip(&src[y * wo + x0..y * wo + x1]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn conv2d_forward<T: Real>(
    g: ConvGeom,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let plane_out = g.out_h() * g.out_w();
    let cols = g.n * plane_out;
    let q = g.c_in * g.k * g.k;
    let col = im2col(g, x);
    let mut prod = vec![T::zero(); g.c_out * cols];
    matmul(kernel, &col, g.c_out, q, cols, &mut prod);
    for o in 0..g.c_out {
        let init = bias.map_or(T::zero(), |bs| bs[o]);
        for b in 0..g.n {
            let src = &prod[o * cols + b * plane_out..][..plane_out];
            let dst = &mut out[(b * g.c_out + o) * plane_out..][..plane_out];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + init;
            }
        }
    }
}

/// Accumulates input, kernel and bias gradients for a conv2d given the
/// upstream gradient `gout`.
pub(crate) fn conv2d_backward<T: Real>(
    g: ConvGeom,
    x: &[T],
    kernel: &[T],
    gout: &[T],
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let plane_out = g.out_h() * g.out_w();
    let cols = g.n * plane_out;
    let q = g.c_in * g.k * g.k;
    let mut gmat = vec![T::zero(); g.c_out * cols];
    for o in 0..g.c_out {
        for b in 0..g.n {
            gmat[o * cols + b * plane_out..][..plane_out]
                .copy_from_slice(&gout[(b * g.c_out + o) * plane_out..][..plane_out]);
        }
    }
    if let Some(db) = db {
        for o in 0..g.c_out {
            db[o] += gmat[o * cols..(o + 1) * cols].iter().copied().sum::<T>();
        }
    }
    if let Some(dk) = dk {
        let col = im2col(g, x);
        for o in 0..g.c_out {
            let grow = &gmat[o * cols..(o + 1) * cols];
            for p in 0..q {
                dk[o * q + p] += dot(grow, &col[p * cols..(p + 1) * cols]);
            }
        }
    }
    if let Some(dx) = dx {
        let mut dcol = vec![T::zero(); q * cols];
        for o in 0..g.c_out {
            let grow = &gmat[o * cols..(o + 1) * cols];
            for p in 0..q {
                let kv = kernel[o * q + p];
                for (d, &gv) in dcol[p * cols..(p + 1) * cols].iter_mut().zip(grow) {
                    *d += kv * gv;
                }
            }
        }
        col2im(g, &dcol, dx);
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

/// `da[m×k] += g[m×n] · bᵀ`
pub(crate) fn matmul_grad_a<T: Real>(
    g: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    da: &mut [T],
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `db[k×n] += aᵀ · g[m×n]`
pub(crate) fn matmul_grad_b<T: Real>(
    a: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    db: &mut [T],
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let drow = &mut db[p * n..(p + 1) * n];
            for (dv, &gv) in drow.iter_mut().zip(grow) {
                *dv += av * gv;
            }
        }
    }
}

/// Overflow-safe `ln(1 + e^x)`.
#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `sigmoid` kept strictly inside (0, 1) at the working precision.
#[inline]
pub(crate) fn sigmoid_open<T: Real>(x: T) -> T {
    let top = T::one() - T::epsilon() / T::lit(2.0);
    sigmoid(x).max(T::min_positive_value()).min(top)
}

/// Row-wise stable softmax over the last axis of length `k`.
pub(crate) fn softmax_rows<T: Real>(x: &[T], k: usize, out: &mut [T]) {
    for (xr, or) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in or.iter_mut() {
            *o /= total;
        }
    }
}

pub(crate) fn log_softmax_rows<T: Real>(x: &[T], k: usize, out: &mut [T]) {
    for (xr, or) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = xr.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_handles_padding_edges() {
        // 5 wide, 3 tap kernel, pad 1 → output 5 wide
        assert_eq!(ConvGeom::valid(5, 5, 0, 1), (1, 5));
        assert_eq!(ConvGeom::valid(5, 5, 1, 1), (0, 5));
        assert_eq!(ConvGeom::valid(5, 5, 2, 1), (0, 4));
        // 1 wide with pad 1: only the centre tap reads real data
        assert_eq!(ConvGeom::valid(1, 1, 0, 1), (1, 1));
        assert_eq!(ConvGeom::valid(1, 1, 1, 1), (0, 1));
        assert_eq!(ConvGeom::valid(1, 1, 2, 1), (0, 0));
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert!((softplus(50.0f32) - 50.0).abs() < 1e-6);
        assert!(softplus(-100.0f32) >= 0.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
