//! Rotated kernel fusion: one trainable kernel applied at `N` orientations and summed.
//!
//! The `N` rotated kernels are views of a single base kernel. Because convolution
//! is linear in the kernel, the branch sum collapses into one fused kernel
//! `sum_n rot(theta_n, W)`, which is what inference runs.

use crate::error::{Error, Result};
use crate::geometry::{rotate_image, rotate_kernel, KernelInterp, RotationAngle};
use crate::tensor::{conv2d, conv2d_backward, ConvKernel, Padding, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RkfLayer<T> {
    base: ConvKernel<T>,
    n_rotations: usize,
}

/// Gradients of an RKF layer; `base` is shaped like the trainable kernel.
#[derive(Debug, Clone)]
pub struct RkfGrads<T> {
    pub input: Tensor<T>,
    pub base: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> RkfLayer<T> {
    pub fn new(base: ConvKernel<T>, n_rotations: usize) -> Result<Self> {
        if n_rotations == 0 {
            return Err(Error::InvalidArgument("RKF needs at least one rotation".into()));
        }
        Ok(Self { base, n_rotations })
    }

    pub fn base(&self) -> &ConvKernel<T> {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut ConvKernel<T> {
        &mut self.base
    }

    pub fn n_rotations(&self) -> usize {
        self.n_rotations
    }

    /// Tap permutation for `N` in {1, 2, 4}, bilinear resampling otherwise.
    pub fn interp(&self) -> KernelInterp {
        if 4 % self.n_rotations == 0 {
            KernelInterp::Exact90
        } else {
            KernelInterp::Bilinear
        }
    }

    pub fn angle(&self, n: usize) -> RotationAngle {
        RotationAngle::from_index(n, self.n_rotations).expect("n_rotations >= 1")
    }

    /// The `N` branch kernels. Only branch 0 carries the bias, so it is added once.
    pub fn rotated_kernels(&self) -> Result<Vec<ConvKernel<T>>> {
        (0..self.n_rotations)
            .map(|n| {
                let (w, bias) = rotate_kernel(&self.base, self.angle(n), self.interp())?.into_parts();
                let bias = if n == 0 { bias } else { vec![T::zero(); bias.len()] };
                ConvKernel::new(w, bias)
            })
            .collect()
    }

    /// Collapses the branches into a single kernel carrying the original bias.
    pub fn reparameterize(&self) -> Result<ConvKernel<T>> {
        let mut fused = Tensor::zeros(self.base.weights().shape());
        for kern in self.rotated_kernels()? {
            fused.add_assign(kern.weights())?;
        }
        ConvKernel::new(fused, self.base.bias().to_vec())
    }

    /// Multi-branch forward: the sum of `N` rotated-kernel convolutions plus one bias.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut branches = self.rotated_kernels()?.into_iter();
        let first = branches.next().expect("at least one branch");
        let mut out = conv2d(input, &first, Padding::SameZero)?;
        for kern in branches {
            out.add_assign(&conv2d(input, &kern, Padding::SameZero)?)?;
        }
        Ok(out)
    }

    /// Backward pass. Every branch sees the same weight gradient `G`, so
    /// `dL/dW = sum_n rot(-theta_n, G)`; the input gradient uses the fused kernel.
    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<RkfGrads<T>> {
        let fused = self.reparameterize()?;
        let g = conv2d_backward(input, &fused, grad_out, Padding::SameZero)?;
        let base = self.pull_back_weight_grad(g.weights)?;
        Ok(RkfGrads {
            input: g.input,
            base,
            bias: g.bias,
        })
    }

    /// Maps a gradient w.r.t. the fused kernel onto the base kernel.
    pub fn pull_back_weight_grad(&self, fused_grad: Tensor<T>) -> Result<Tensor<T>> {
        let shape = fused_grad.shape();
        let as_kernel = ConvKernel::new(fused_grad, vec![T::zero(); shape.n])?;
        let mut acc = Tensor::zeros(shape);
        for n in 0..self.n_rotations {
            let back = match self.interp() {
                KernelInterp::Exact90 => {
                    rotate_kernel(&as_kernel, self.angle(n).inverse(), KernelInterp::Exact90)?
                        .into_parts()
                        .0
                }
                // bilinear resampling is not orthogonal; the chain rule needs its transpose
                KernelInterp::Bilinear => bilinear_rotation_adjoint(as_kernel.weights(), self.angle(n)),
            };
            acc.add_assign(&back)?;
        }
        Ok(acc)
    }

    pub fn cast<U: Real>(&self) -> RkfLayer<U> {
        RkfLayer {
            base: self.base.cast(),
            n_rotations: self.n_rotations,
        }
    }
}

/// Transpose of bilinear kernel rotation applied to `grad`.
fn bilinear_rotation_adjoint<T: Real>(grad: &Tensor<T>, angle: RotationAngle) -> Tensor<T> {
    let s = grad.shape();
    let k = s.h;
    let centre = (k / 2) as f64;
    let (cos, sin) = angle.cos_sin();
    let mut out = Tensor::zeros(s);
    for r in 0..k {
        for c in 0..k {
            let (dx, dy) = (c as f64 - centre, r as f64 - centre);
            let sx = cos * dx - sin * dy + centre;
            let sy = sin * dx + cos * dy + centre;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let wgt = wx * wy;
                    let (xi, yi) = (x0 + ox, y0 + oy);
                    if wgt == 0.0 || xi < 0.0 || yi < 0.0 || xi >= k as f64 || yi >= k as f64 {
                        continue;
                    }
                    let wgt = crate::tensor::real::<T>(wgt);
                    for o in 0..s.n {
                        for i in 0..s.c {
                            let idx = out.index(o, i, yi as usize, xi as usize);
                            out.data_mut()[idx] += wgt * grad.get(o, i, r, c);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Max interior deviation `|f(rot x) - rot f(x)|` for a quarter-turn rotation.
///
/// `crop_margin` pixels are dropped on every side of the output to exclude
/// zero-padding boundary effects. The output may have a different resolution
/// than the input (pooling); rotation is applied about each map's own centre.
pub fn check_equivariance<T: Real>(
    forward: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    input: &Tensor<T>,
    angle: RotationAngle,
    crop_margin: usize,
) -> Result<T> {
    let s = input.shape();
    if s.h != s.w {
        return Err(Error::InvalidArgument("equivariance check needs a square input".into()));
    }
    if angle.quarter_turns().is_none() {
        return Err(Error::InvalidArgument("equivariance check needs a quarter-turn angle".into()));
    }
    let (rotated_in, _) = rotate_image(input, angle);
    let lhs = forward(&rotated_in)?;
    let (rhs, _) = rotate_image(&forward(input)?, angle);
    let os = lhs.shape();
    if 2 * crop_margin >= os.h || 2 * crop_margin >= os.w {
        return Err(Error::InvalidArgument(format!(
            "crop margin {crop_margin} leaves no interior in {}x{}",
            os.h, os.w
        )));
    }
    let mut worst = T::zero();
    for n in 0..os.n {
        for c in 0..os.c {
            for y in crop_margin..os.h - crop_margin {
                for x in crop_margin..os.w - crop_margin {
                    worst = worst.max((lhs.get(n, c, y, x) - rhs.get(n, c, y, x)).abs());
                }
            }
        }
    }
    Ok(worst)
}
