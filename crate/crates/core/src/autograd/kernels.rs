//! Raw loops behind the tape ops. All image tensors are NCHW, row-major.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kh) / self.stride + 1,
            (self.width + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[C, H, W]` into columns `[C·kh·kw, Ho·Wo]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for c in 0..g.channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_line = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.width as isize { T::zero() } else { src_line[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `dx` (accumulating).
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for c in 0..g.channels {
        let dst = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_line = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_line[ix as usize] = dst_line[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let k = g.patch();
    let in_sz = g.channels * g.height * g.width;
    let out_sz = out_channels * plane;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * plane] };
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let cols_ref: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        T::gemm(out_channels, k, plane, w, (k, 1), cols_ref, (plane, 1), T::zero(), ob, (plane, 1));
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                for v in &mut ob[o * plane..(o + 1) * plane] {
                    *v = *v + bv;
                }
            }
        }
    }
}

/// Gradients of a convolution. Each output buffer is only touched when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    out_channels: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let k = g.patch();
    let in_sz = g.channels * g.height * g.width;
    let out_sz = out_channels * plane;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
    let mut dcols = if pointwise || dx.is_none() { Vec::new() } else { vec![T::zero(); k * plane] };
    for b in 0..batch {
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        if let Some(db) = db.as_deref_mut() {
            for o in 0..out_channels {
                let s: T = dyb[o * plane..(o + 1) * plane].iter().copied().sum();
                db[o] = db[o] + s;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let cols_ref: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW[O, K] += dY[O, P] · cols[K, P]^T
            T::gemm(out_channels, plane, k, dyb, (plane, 1), cols_ref, (1, plane), T::one(), dw, (k, 1));
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if pointwise {
                T::gemm(k, out_channels, plane, w, (1, k), dyb, (plane, 1), T::one(), dxb, (plane, 1));
            } else {
                T::gemm(k, out_channels, plane, w, (1, k), dyb, (plane, 1), T::zero(), &mut dcols, (plane, 1));
                col2im(&dcols, g, dxb);
            }
        }
    }
}

pub fn leaky_relu<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * slope
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
