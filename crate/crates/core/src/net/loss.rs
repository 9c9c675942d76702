//! Score-weighted ranking loss over ground-truth correspondences.

use crate::error::{shape_err, Error, Result};
use crate::geometry::PointPair;
use crate::tensor::{bilinear_sample, bilinear_sample_backward, real, Real, Shape, Tensor};

use super::{FeatureOutput, NORM_EPS};

/// Hinge margin on unit descriptors (distances live in `[0, 2]`).
pub const DEFAULT_MARGIN: f64 = 1.0;
/// Negatives closer than this many pixels to the positive are ignored.
pub const DEFAULT_SAFE_RADIUS: f64 = 16.0;

/// Maps an image coordinate onto the `1/r` descriptor grid.
///
/// Descriptor cell `X` summarizes the `r x r` block whose centre is
/// `r X + (r - 1) / 2`; the result is clamped into the map.
pub fn desc_map_coord(p: (f64, f64), r: usize, desc_w: usize, desc_h: usize) -> (f64, f64) {
    let r = r as f64;
    let off = (r - 1.0) / 2.0;
    (
        ((p.0 - off) / r).clamp(0.0, (desc_w - 1) as f64),
        ((p.1 - off) / r).clamp(0.0, (desc_h - 1) as f64),
    )
}

/// Features sampled at correspondence pairs `(c, c')` of images A and B.
#[derive(Debug, Clone)]
pub struct CorrespondenceBatch<T> {
    pub coords: Vec<PointPair>,
    /// Re-normalized descriptors `f_c` (image A) and `f'_c` (image B).
    pub desc_a: Vec<Vec<T>>,
    pub desc_b: Vec<Vec<T>>,
    pub score_a: Vec<T>,
    pub score_b: Vec<T>,
    raw_a: Vec<Vec<T>>,
    raw_b: Vec<Vec<T>>,
    desc_shape: Shape,
    score_shape: Shape,
}

fn renormalize<T: Real>(v: &[T]) -> Vec<T> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(real(NORM_EPS));
    v.iter().map(|&x| x / n).collect()
}

fn renormalize_backward<T: Real>(v: &[T], g: &[T]) -> Vec<T> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let eps = real::<T>(NORM_EPS);
    if norm < eps {
        return g.iter().map(|&x| x / eps).collect();
    }
    let dot = v.iter().zip(g).map(|(&a, &b)| a * b).sum::<T>() / norm;
    v.iter().zip(g).map(|(&vi, &gi)| (gi - vi / norm * dot) / norm).collect()
}

/// Bilinearly samples descriptors (at `desc_map_coord`) and scores (at the pixel) for every pair.
pub fn sample_correspondence_features<T: Real>(
    out_a: &FeatureOutput<T>,
    out_b: &FeatureOutput<T>,
    coords: &[PointPair],
) -> Result<CorrespondenceBatch<T>> {
    if coords.is_empty() {
        return Err(Error::InvalidArgument("no correspondences to sample".into()));
    }
    let (ds, ss) = (out_a.desc.shape(), out_a.score.shape());
    if out_b.desc.shape() != ds || out_b.score.shape() != ss {
        return shape_err("feature outputs of A and B differ in shape");
    }
    let r = ss.w / ds.w;
    let to_desc = |p: (f64, f64)| desc_map_coord(p, r, ds.w, ds.h);
    let pa: Vec<_> = coords.iter().map(|c| c.0).collect();
    let pb: Vec<_> = coords.iter().map(|c| c.1).collect();
    let raw_a = bilinear_sample(&out_a.desc, 0, &pa.iter().map(|&p| to_desc(p)).collect::<Vec<_>>())?;
    let raw_b = bilinear_sample(&out_b.desc, 0, &pb.iter().map(|&p| to_desc(p)).collect::<Vec<_>>())?;
    let score_a = bilinear_sample(&out_a.score, 0, &pa)?.into_iter().map(|v| v[0]).collect();
    let score_b = bilinear_sample(&out_b.score, 0, &pb)?.into_iter().map(|v| v[0]).collect();
    Ok(CorrespondenceBatch {
        coords: coords.to_vec(),
        desc_a: raw_a.iter().map(|v| renormalize(v)).collect(),
        desc_b: raw_b.iter().map(|v| renormalize(v)).collect(),
        score_a,
        score_b,
        raw_a,
        raw_b,
        desc_shape: ds,
        score_shape: ss,
    })
}

/// Gradients w.r.t. the dense outputs of images A and B.
#[derive(Debug, Clone)]
pub struct FeatureGrads<T> {
    pub desc_a: Tensor<T>,
    pub desc_b: Tensor<T>,
    pub score_a: Tensor<T>,
    pub score_b: Tensor<T>,
}

impl<T: Real> CorrespondenceBatch<T> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Pushes per-pair gradients back through re-normalization and bilinear sampling.
    pub fn backward(&self, loss: &JointLoss<T>) -> Result<FeatureGrads<T>> {
        let r = self.score_shape.w / self.desc_shape.w;
        let (dw, dh) = (self.desc_shape.w, self.desc_shape.h);
        let to_desc = |p: (f64, f64)| desc_map_coord(p, r, dw, dh);
        let pa: Vec<_> = self.coords.iter().map(|c| c.0).collect();
        let pb: Vec<_> = self.coords.iter().map(|c| c.1).collect();
        let ga: Vec<_> = self.raw_a.iter().zip(&loss.grad_desc_a).map(|(v, g)| renormalize_backward(v, g)).collect();
        let gb: Vec<_> = self.raw_b.iter().zip(&loss.grad_desc_b).map(|(v, g)| renormalize_backward(v, g)).collect();
        let wrap = |g: &[T]| g.iter().map(|&v| vec![v]).collect::<Vec<_>>();
        Ok(FeatureGrads {
            desc_a: bilinear_sample_backward(
                self.desc_shape,
                0,
                &pa.iter().map(|&p| to_desc(p)).collect::<Vec<_>>(),
                &ga,
            )?,
            desc_b: bilinear_sample_backward(
                self.desc_shape,
                0,
                &pb.iter().map(|&p| to_desc(p)).collect::<Vec<_>>(),
                &gb,
            )?,
            score_a: bilinear_sample_backward(self.score_shape, 0, &pa, &wrap(&loss.grad_score_a))?,
            score_b: bilinear_sample_backward(self.score_shape, 0, &pb, &wrap(&loss.grad_score_b))?,
        })
    }
}

/// Value and per-pair gradients of [`joint_loss`].
#[derive(Debug, Clone)]
pub struct JointLoss<T> {
    pub value: T,
    /// `w_c = s_c s'_c / sum_q s_q s'_q`.
    pub weights: Vec<T>,
    /// Per-pair hinge values `M_c`.
    pub hinge: Vec<T>,
    pub grad_desc_a: Vec<Vec<T>>,
    pub grad_desc_b: Vec<Vec<T>>,
    pub grad_score_a: Vec<T>,
    pub grad_score_b: Vec<T>,
}

fn dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Adds `s * (a - b) / |a - b|` to `ga` and subtracts it from `gb`.
fn push_dist_grad<T: Real>(ga: &mut [T], gb: &mut [T], a: &[T], b: &[T], d: T, s: T) {
    if d <= real(1e-12) {
        return;
    }
    for i in 0..a.len() {
        let g = s * (a[i] - b[i]) / d;
        ga[i] += g;
        gb[i] -= g;
    }
}

/// Score-weighted hardest-negative triplet loss.
///
/// `L = sum_c w_c M_c` with `w_c = s_c s'_c / sum_q s_q s'_q` and
/// `M_c = max(0, margin + |f_c - f'_c| - min_{q != c} min(|f_c - f'_q|, |f_q - f'_c|))`.
///
/// A candidate `f'_q` (resp. `f_q`) only counts as a negative when its location in
/// image B (resp. A) is at least `safe_radius` pixels from `c'` (resp. `c`). Pairs
/// without any admissible negative get `M_c = 0`.
pub fn joint_loss<T: Real>(batch: &CorrespondenceBatch<T>, margin: f64, safe_radius: f64) -> Result<JointLoss<T>> {
    let m = batch.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("joint loss needs >= 2 pairs, got {m}")));
    }
    let (fa, fb) = (&batch.desc_a, &batch.desc_b);
    let d: Vec<Vec<T>> = fa.iter().map(|a| fb.iter().map(|b| dist(a, b)).collect()).collect();

    let products: Vec<T> = batch.score_a.iter().zip(&batch.score_b).map(|(&s, &t)| s * t).collect();
    let total: T = products.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::InvalidArgument("correspondence scores sum to zero".into()));
    }
    let weights: Vec<T> = products.iter().map(|&p| p / total).collect();

    let dim = fa[0].len();
    let mut grad_a = vec![vec![T::zero(); dim]; m];
    let mut grad_b = vec![vec![T::zero(); dim]; m];
    let mut hinge = vec![T::zero(); m];
    let margin = real::<T>(margin);

    for c in 0..m {
        // hardest negative: (distance, row-type?, q); row-type means |f_c - f'_q|
        let mut best: Option<(T, bool, usize)> = None;
        for q in (0..m).filter(|&q| q != c) {
            let far_b = far(batch.coords[c].1, batch.coords[q].1, safe_radius);
            let far_a = far(batch.coords[c].0, batch.coords[q].0, safe_radius);
            for (dq, row, ok) in [(d[c][q], true, far_b), (d[q][c], false, far_a)] {
                if ok && best.map_or(true, |(bd, _, _)| dq < bd) {
                    best = Some((dq, row, q));
                }
            }
        }
        let Some((neg, row, q)) = best else {
            continue;
        };
        let value = margin + d[c][c] - neg;
        if value <= T::zero() {
            continue;
        }
        hinge[c] = value;
        let w = weights[c];
        let (ga_c, gb_c) = two_mut(&mut grad_a, &mut grad_b, c, c);
        push_dist_grad(ga_c, gb_c, &fa[c], &fb[c], d[c][c], w);
        if row {
            let (ga_c, gb_q) = two_mut(&mut grad_a, &mut grad_b, c, q);
            push_dist_grad(ga_c, gb_q, &fa[c], &fb[q], neg, -w);
        } else {
            let (ga_q, gb_c) = two_mut(&mut grad_a, &mut grad_b, q, c);
            push_dist_grad(ga_q, gb_c, &fa[q], &fb[c], neg, -w);
        }
    }

    let value: T = weights.iter().zip(&hinge).map(|(&w, &h)| w * h).sum();
    // dL/da_q = (M_q - L) / S with a_q = s_q s'_q
    let grad_score_a = (0..m).map(|q| batch.score_b[q] * (hinge[q] - value) / total).collect();
    let grad_score_b = (0..m).map(|q| batch.score_a[q] * (hinge[q] - value) / total).collect();

    Ok(JointLoss {
        value,
        weights,
        hinge,
        grad_desc_a: grad_a,
        grad_desc_b: grad_b,
        grad_score_a,
        grad_score_b,
    })
}

fn far(p: (f64, f64), q: (f64, f64), radius: f64) -> bool {
    (p.0 - q.0).hypot(p.1 - q.1) >= radius
}

fn two_mut<'a, T>(a: &'a mut [Vec<T>], b: &'a mut [Vec<T>], i: usize, j: usize) -> (&'a mut [T], &'a mut [T]) {
    (&mut a[i], &mut b[j])
}
