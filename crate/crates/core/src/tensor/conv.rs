use super::{Real, Shape, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on every side; output size equals input size.
    SameZero,
    /// No padding; output shrinks by `k - 1` in each dimension.
    Valid,
}

/// Convolution weights of shape `(c_out, c_in, k, k)` with odd `k`, plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    weights: Tensor<T>,
    bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w {
            return shape_err(format!("kernel must be square, got {}x{}", s.h, s.w));
        }
        if s.h % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd, got {}",
                s.h
            )));
        }
        if bias.len() != s.n {
            return shape_err(format!("bias length {} != c_out {}", bias.len(), s.n));
        }
        if !weights.all_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("non-finite kernel weights".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(Shape::new(c_out, c_in, k, k)),
            vec![T::zero(); c_out],
        )
    }

    /// Kernel with a single 1 at the centre tap of every diagonal `(o, o)` slice.
    pub fn delta(channels: usize, k: usize) -> Result<Self> {
        let mut kern = Self::zeros(channels, channels, k)?;
        let c = k / 2;
        for o in 0..channels {
            kern.weights.set(o, o, c, c, T::one());
        }
        Ok(kern)
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape().c
    }

    pub fn k(&self) -> usize {
        self.weights.shape().h
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    pub fn into_parts(self) -> (Tensor<T>, Vec<T>) {
        (self.weights, self.bias)
    }

    pub fn cast<U: Real>(&self) -> ConvKernel<U> {
        ConvKernel {
            weights: self.weights.cast(),
            bias: self
                .bias
                .iter()
                .map(|&b| U::from(b).expect("finite cast"))
                .collect(),
        }
    }
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

struct Geometry {
    out_h: usize,
    out_w: usize,
    /// Input row/col offset of tap 0: `in = out + tap - pad`.
    pad: usize,
}

fn geometry<T: Real>(input: Shape, kernel: &ConvKernel<T>, padding: Padding) -> Result<Geometry> {
    let k = kernel.k();
    if input.c != kernel.c_in() {
        return shape_err(format!(
            "input has {} channels, kernel expects {}",
            input.c,
            kernel.c_in()
        ));
    }
    match padding {
        Padding::SameZero => Ok(Geometry {
            out_h: input.h,
            out_w: input.w,
            pad: k / 2,
        }),
        Padding::Valid => {
            if k > input.h || k > input.w {
                return shape_err(format!(
                    "valid convolution with k={k} on {}x{} input",
                    input.h, input.w
                ));
            }
            Ok(Geometry {
                out_h: input.h - k + 1,
                out_w: input.w - k + 1,
                pad: 0,
            })
        }
    }
}

/// Range of output indices `o` for which `o + tap - pad` lands inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (in_len + pad).saturating_sub(tap).min(out_len);
    (lo, hi.max(lo))
}

/// Stride-1 2D cross-correlation (the usual deep-learning "convolution").
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>, padding: Padding) -> Result<Tensor<T>> {
    let s = input.shape();
    let g = geometry(s, kernel, padding)?;
    let k = kernel.k();
    let c_out = kernel.c_out();
    let out_shape = Shape::new(s.n, c_out, g.out_h, g.out_w);
    let mut out = Tensor::zeros(out_shape);
    let w = kernel.weights();

    for n in 0..s.n {
        for o in 0..c_out {
            let b = kernel.bias()[o];
            let out_plane = out.plane_mut(n, o);
            out_plane.iter_mut().for_each(|v| *v = b);
            for i in 0..s.c {
                let in_plane = input.plane(n, i);
                for dy in 0..k {
                    let (y0, y1) = valid_range(g.out_h, s.h, dy, g.pad);
                    for dx in 0..k {
                        let wt = w.get(o, i, dy, dx);
                        if wt == T::zero() {
                            continue;
                        }
                        let (x0, x1) = valid_range(g.out_w, s.w, dx, g.pad);
                        for y in y0..y1 {
                            let sy = y + dy - g.pad;
                            let src = &in_plane[sy * s.w + x0 + dx - g.pad..sy * s.w + x1 + dx - g.pad];
                            let dst = &mut out_plane[y * g.out_w + x0..y * g.out_w + x1];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += wt * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact analytic gradients of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Tensor<T>,
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let g = geometry(s, kernel, padding)?;
    let k = kernel.k();
    let c_out = kernel.c_out();
    let expected = Shape::new(s.n, c_out, g.out_h, g.out_w);
    if grad_out.shape() != expected {
        return shape_err(format!(
            "grad_out shape {} does not match forward output {expected}",
            grad_out.shape()
        ));
    }
    let w = kernel.weights();
    let mut grad_in = Tensor::zeros(s);
    let mut grad_w = Tensor::zeros(w.shape());
    let mut grad_b = vec![T::zero(); c_out];

    for n in 0..s.n {
        for o in 0..c_out {
            let go = grad_out.plane(n, o);
            grad_b[o] += go.iter().copied().sum::<T>();
            for i in 0..s.c {
                let in_plane = input.plane(n, i);
                for dy in 0..k {
                    let (y0, y1) = valid_range(g.out_h, s.h, dy, g.pad);
                    for dx in 0..k {
                        let (x0, x1) = valid_range(g.out_w, s.w, dx, g.pad);
                        let wt = w.get(o, i, dy, dx);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = y + dy - g.pad;
                            let src = sy * s.w + x0 + dx - g.pad;
                            let go_row = &go[y * g.out_w + x0..y * g.out_w + x1];
                            let in_row = &in_plane[src..src + x1 - x0];
                            acc += go_row.iter().zip(in_row).map(|(&a, &b)| a * b).sum::<T>();
                        }
                        let wi = grad_w.index(o, i, dy, dx);
                        grad_w.data_mut()[wi] += acc;

                        if wt == T::zero() {
                            continue;
                        }
                        let gi_plane = grad_in.plane_mut(n, i);
                        for y in y0..y1 {
                            let sy = y + dy - g.pad;
                            let src = sy * s.w + x0 + dx - g.pad;
                            let go_row = &go[y * g.out_w + x0..y * g.out_w + x1];
                            let gi_row = &mut gi_plane[src..src + x1 - x0];
                            for (d, &v) in gi_row.iter_mut().zip(go_row) {
                                *d += wt * v;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}
