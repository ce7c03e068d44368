//! Minimal NHWC convolution and affine layers with hand-written backward passes.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, Array4, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point element type of network parameters and activations.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of(x: f64) -> Self;
    fn get(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn of(x: f64) -> Self {
        x as f32
    }
    fn get(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn of(x: f64) -> Self {
        x
    }
    fn get(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// `y = x·W + b`. Convolutions use the same parameters on im2col rows, with
/// `W` laid out as `(ky, kx, c_in) × c_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Normal init with standard deviation `sqrt(gain / fan_in)`; zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        });
        Dense {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Parameter gradients and the input gradient for upstream `dy`.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, need_dx: bool) -> (Dense<T>, Option<Array2<T>>) {
        let grad = Dense {
            weight: x.t().dot(dy),
            bias: dy.sum_axis(Axis(0)),
        };
        let dx = need_dx.then(|| dy.dot(&self.weight.t()));
        (grad, dx)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zeroes `grad` where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(grad: &mut Array2<T>, out: &Array2<T>) {
    ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfolds an NHWC batch into rows of receptive fields, one row per output
/// pixel, columns ordered `(ky, kx, c)`. Returns the matrix and the output
/// spatial size.
pub fn im2col<T: Scalar>(x: &Array4<T>, g: ConvGeom) -> (Array2<T>, usize, usize) {
    let (b, h, w, c) = x.dim();
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let ncol = k * k * c;
    let mut cols = Array2::<T>::zeros((b * ho * wo, ncol));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("fresh array");
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                let base = row * ncol;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let dst = base + (ky * k + kx) * c;
                        cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input grid.
pub fn col2im<T: Scalar>(cols: &Array2<T>, input_dim: (usize, usize, usize, usize), g: ConvGeom) -> Array4<T> {
    let (b, h, w, c) = input_dim;
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let ncol = k * k * c;
    let mut x = Array4::<T>::zeros(input_dim);
    let xs = x.as_slice_mut().expect("fresh array");
    let cs = cols.as_slice().expect("contiguous columns");
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                let base = row * ncol;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let src = base + (ky * k + kx) * c;
                        for (d, s) in xs[dst..dst + c].iter_mut().zip(&cs[src..src + c]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Taps of a 1-D bilinear resize from `in_len` to `out_len` samples
/// (half-pixel centres, edge clamped): `(i0, i1, w0, w1)` per output sample.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            let w1 = if i1 == i0 { 0.0 } else { w1 };
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}
