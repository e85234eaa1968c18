//! Raw kernels shared by the forward and backward passes.

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// 1×1, stride 1, no padding: the input already is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
    fn valid_range(&self, k: usize, input: usize, out: usize) -> (usize, usize) {
        // input index = o * stride + k - pad must lie in [0, input)
        let lo = if self.pad > k { (self.pad - k).div_ceil(self.stride) } else { 0 };
        let hi = if input + self.pad > k {
            ((input + self.pad - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo.min(out), hi.max(lo.min(out)))
    }
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, Ho*Wo]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            let (rlo, rhi) = g.valid_range(ki, g.height, oh);
            for kj in 0..g.kernel_w {
                let (clo, chi) = g.valid_range(kj, g.width, ow);
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                dst.fill(T::zero());
                for r in rlo..rhi {
                    let ir = r * g.stride + ki - g.pad;
                    let src_row = &plane[ir * g.width..(ir + 1) * g.width];
                    let out_row = &mut dst[r * ow..(r + 1) * ow];
                    if g.stride == 1 {
                        let start = clo + kj - g.pad;
                        out_row[clo..chi].copy_from_slice(&src_row[start..start + (chi - clo)]);
                    } else {
                        for cc in clo..chi {
                            out_row[cc] = src_row[cc * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[C*kh*kw, Ho*Wo]` into `[C, H, W]`.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            let (rlo, rhi) = g.valid_range(ki, g.height, oh);
            for kj in 0..g.kernel_w {
                let (clo, chi) = g.valid_range(kj, g.width, ow);
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for r in rlo..rhi {
                    let ir = r * g.stride + ki - g.pad;
                    let dst_row = &mut plane[ir * g.width..(ir + 1) * g.width];
                    let src_row = &src[r * ow..(r + 1) * ow];
                    for (cc, &v) in src_row.iter().enumerate().take(chi).skip(clo) {
                        let ic = cc * g.stride + kj - g.pad;
                        dst_row[ic] = dst_row[ic] + v;
                    }
                }
            }
        }
    }
}

/// Two-tap interpolation weights along one axis, half-pixel centers
/// (`align_corners = false`).
#[derive(Clone, Debug)]
pub(crate) struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl Taps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut w_hi = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, w_hi }
    }
}

pub(crate) fn bilinear_plane<T: Scalar>(
    src: &[T],
    in_w: usize,
    ty: &Taps,
    tx: &Taps,
    dst: &mut [T],
) {
    let ow = tx.lo.len();
    let wx: Vec<T> = tx.w_hi.iter().map(|&w| T::from_f64(w)).collect();
    for (o_r, out_row) in dst.chunks_exact_mut(ow).enumerate() {
        let wy = T::from_f64(ty.w_hi[o_r]);
        let r0 = &src[ty.lo[o_r] * in_w..(ty.lo[o_r] + 1) * in_w];
        let r1 = &src[ty.hi[o_r] * in_w..(ty.hi[o_r] + 1) * in_w];
        for (o_c, out) in out_row.iter_mut().enumerate() {
            let (c0, c1, w) = (tx.lo[o_c], tx.hi[o_c], wx[o_c]);
            let top = r0[c0] + (r0[c1] - r0[c0]) * w;
            let bottom = r1[c0] + (r1[c1] - r1[c0]) * w;
            *out = top + (bottom - top) * wy;
        }
    }
}

pub(crate) fn bilinear_plane_adjoint<T: Scalar>(
    grad_out: &[T],
    in_w: usize,
    ty: &Taps,
    tx: &Taps,
    grad_in: &mut [T],
) {
    let ow = tx.lo.len();
    let one = T::one();
    for (o_r, g_row) in grad_out.chunks_exact(ow).enumerate() {
        let wy = T::from_f64(ty.w_hi[o_r]);
        let (r0, r1) = (ty.lo[o_r] * in_w, ty.hi[o_r] * in_w);
        for (o_c, &g) in g_row.iter().enumerate() {
            let wx = T::from_f64(tx.w_hi[o_c]);
            let (c0, c1) = (tx.lo[o_c], tx.hi[o_c]);
            let top = g * (one - wy);
            let bottom = g * wy;
            grad_in[r0 + c0] = grad_in[r0 + c0] + top * (one - wx);
            grad_in[r0 + c1] = grad_in[r0 + c1] + top * wx;
            grad_in[r1 + c0] = grad_in[r1 + c0] + bottom * (one - wx);
            grad_in[r1 + c1] = grad_in[r1 + c1] + bottom * wx;
        }
    }
}

/// Numerically stable `ln(sigmoid(x))`.
pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
