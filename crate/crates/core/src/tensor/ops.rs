use super::{real, Real, Shape, Tensor};
use crate::error::{shape_err, Error, Result};

pub fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of [`relu`]; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Backward of [`sigmoid`] expressed through its output.
pub fn sigmoid_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(grad_out, |s, g| g * s * (T::one() - s))
}

/// `bound * tanh(v / bound)`: identity near zero, smoothly limited to `(-bound, bound)`.
pub fn soft_clamp<T: Real>(t: &Tensor<T>, bound: T) -> Tensor<T> {
    t.map(|v| bound * (v / bound).tanh())
}

/// Backward of [`soft_clamp`] expressed through its input.
pub fn soft_clamp_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>, bound: T) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |v, g| {
        let t = (v / bound).tanh();
        g * (T::one() - t * t)
    })
}

/// Divides each channel vector at `(n, y, x)` by `max(‖v‖₂, eps)`.
pub fn l2_normalize_channels<T: Real>(t: &Tensor<T>, eps: T) -> Tensor<T> {
    let s = t.shape();
    let p = s.plane();
    let mut out = t.clone();
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let mut sq = T::zero();
            for c in 0..s.c {
                let v = t.data()[base + c * p + i];
                sq += v * v;
            }
            let denom = sq.sqrt().max(eps);
            for c in 0..s.c {
                out.data_mut()[base + c * p + i] = t.data()[base + c * p + i] / denom;
            }
        }
    }
    out
}

pub fn l2_normalize_channels_backward<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    input.check_same_shape(grad_out)?;
    let s = input.shape();
    let p = s.plane();
    let mut grad = Tensor::zeros(s);
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let at = |c: usize| base + c * p + i;
            let mut sq = T::zero();
            for c in 0..s.c {
                let v = input.data()[at(c)];
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm >= eps {
                // y = v / |v|;  dv = (g - y (y . g)) / |v|
                let mut dot = T::zero();
                for c in 0..s.c {
                    dot += input.data()[at(c)] * grad_out.data()[at(c)];
                }
                dot = dot / norm;
                for c in 0..s.c {
                    let y = input.data()[at(c)] / norm;
                    grad.data_mut()[at(c)] = (grad_out.data()[at(c)] - y * dot) / norm;
                }
            } else {
                for c in 0..s.c {
                    grad.data_mut()[at(c)] = grad_out.data()[at(c)] / eps;
                }
            }
        }
    }
    Ok(grad)
}

/// Neighbour indices and weights for bilinear interpolation at `(x, y)`.
#[derive(Debug, Clone, Copy)]
struct Bilinear {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> Result<Bilinear> {
    let in_range = x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0;
    if !in_range || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return Err(Error::OutOfBounds { x, y, w, h });
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    Ok(Bilinear {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        fx: x - x0 as f64,
        fy: y - y0 as f64,
    })
}

/// Samples every channel of batch element `n` at sub-pixel points `(x, y)`.
pub fn bilinear_sample<T: Real>(t: &Tensor<T>, n: usize, points: &[(f64, f64)]) -> Result<Vec<Vec<T>>> {
    let s = t.shape();
    if n >= s.n {
        return shape_err(format!("batch index {n} out of range for {s}"));
    }
    points
        .iter()
        .map(|&(x, y)| {
            let b = bilinear_taps(x, y, s.w, s.h)?;
            let (fx, fy) = (real::<T>(b.fx), real::<T>(b.fy));
            let one = T::one();
            Ok((0..s.c)
                .map(|c| {
                    let p = t.plane(n, c);
                    let v00 = p[b.y0 * s.w + b.x0];
                    let v01 = p[b.y0 * s.w + b.x1];
                    let v10 = p[b.y1 * s.w + b.x0];
                    let v11 = p[b.y1 * s.w + b.x1];
                    (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11)
                })
                .collect())
        })
        .collect()
}

/// Scatters per-point channel gradients back onto a tensor of `shape` (batch element `n`).
pub fn bilinear_sample_backward<T: Real>(
    shape: Shape,
    n: usize,
    points: &[(f64, f64)],
    grads: &[Vec<T>],
) -> Result<Tensor<T>> {
    if points.len() != grads.len() {
        return shape_err(format!("{} points but {} gradients", points.len(), grads.len()));
    }
    let mut out = Tensor::zeros(shape);
    for (&(x, y), g) in points.iter().zip(grads) {
        if g.len() != shape.c {
            return shape_err(format!("gradient of length {} for {} channels", g.len(), shape.c));
        }
        let b = bilinear_taps(x, y, shape.w, shape.h)?;
        let (fx, fy) = (real::<T>(b.fx), real::<T>(b.fy));
        let one = T::one();
        for (c, &gc) in g.iter().enumerate() {
            let p = out.plane_mut(n, c);
            p[b.y0 * shape.w + b.x0] += gc * (one - fy) * (one - fx);
            p[b.y0 * shape.w + b.x1] += gc * (one - fy) * fx;
            p[b.y1 * shape.w + b.x0] += gc * fy * (one - fx);
            p[b.y1 * shape.w + b.x1] += gc * fy * fx;
        }
    }
    Ok(out)
}

/// Rearranges `r x r` blocks of a single-channel map into `r²` channels.
///
/// Block ordering is row-major inside each block:
/// `out[n, dy * r + dx, Y, X] = s[n, 0, Y * r + dy, X * r + dx]`.
pub fn space_to_depth<T: Real>(s: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let sh = s.shape();
    if sh.c != 1 {
        return shape_err(format!("space_to_depth expects one channel, got {}", sh.c));
    }
    if r == 0 || sh.h % r != 0 || sh.w % r != 0 {
        return shape_err(format!("{}x{} not divisible by {r}", sh.h, sh.w));
    }
    let out_shape = Shape::new(sh.n, r * r, sh.h / r, sh.w / r);
    Ok(Tensor::from_fn(out_shape, |n, k, y, x| {
        s.get(n, 0, y * r + k / r, x * r + k % r)
    }))
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Real>(t: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let sh = t.shape();
    if r == 0 || sh.c != r * r {
        return shape_err(format!("depth_to_space expects {} channels, got {}", r * r, sh.c));
    }
    let out_shape = Shape::new(sh.n, 1, sh.h * r, sh.w * r);
    Ok(Tensor::from_fn(out_shape, |n, _, y, x| {
        t.get(n, (y % r) * r + x % r, y / r, x / r)
    }))
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return shape_err(format!("avg_pool2 needs even dims, got {}x{}", s.h, s.w));
    }
    let quarter = real::<T>(0.25);
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h / 2 {
                let r0 = &src[2 * y * s.w..(2 * y + 1) * s.w];
                let r1 = &src[(2 * y + 1) * s.w..(2 * y + 2) * s.w];
                for x in 0..s.w / 2 {
                    dst[y * (s.w / 2) + x] =
                        (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Real>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let go = grad_out.shape();
    if input_shape.h != go.h * 2 || input_shape.w != go.w * 2 || input_shape.n != go.n || input_shape.c != go.c
    {
        return shape_err(format!("pool grad {go} does not match input {input_shape}"));
    }
    let quarter = real::<T>(0.25);
    Ok(Tensor::from_fn(input_shape, |n, c, y, x| {
        grad_out.get(n, c, y / 2, x / 2) * quarter
    }))
}
