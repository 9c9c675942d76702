//! Distillation losses and the two training loops (base training, teacher-to-student distillation).

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::geometry::{generate_correspondences, sample_homography, warp_image, AugmentConfig, ValidMask};
use crate::mofa::MofaTeacher;
use crate::net::{
    joint_loss, sample_correspondence_features, FeatureOutput, Layer, Model, ModelGrads, Sgd, DEFAULT_MARGIN, DEFAULT_SAFE_RADIUS,
};
use crate::tensor::{depth_to_space, real, space_to_depth, Real, Tensor};

/// Guard against division by a zero distance in the descriptor loss.
pub const DIST_EPS: f64 = 1e-8;
/// Floor inside the logarithm of the score loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Mean over locations of the per-location L2 distance between two descriptor maps.
///
/// Returns the value and its gradient w.r.t. `d_s`.
pub fn desc_distill_loss<T: Real>(d_s: &Tensor<T>, d_t: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    d_s.check_same_shape(d_t)?;
    let s = d_s.shape();
    let locations = s.n * s.h * s.w;
    if locations == 0 {
        return shape_err("descriptor maps are empty");
    }
    let inv = T::one() / real::<T>(locations as f64);
    let plane = s.h * s.w;
    let mut grad = Tensor::zeros(s);
    let mut total = T::zero();
    for n in 0..s.n {
        for i in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + i;
            let d2: T = (0..s.c).map(|c| (d_s.data()[idx(c)] - d_t.data()[idx(c)]).powi(2)).sum();
            let d = d2.sqrt();
            total += d;
            if d > real(DIST_EPS) {
                for c in 0..s.c {
                    grad.data_mut()[idx(c)] = (d_s.data()[idx(c)] - d_t.data()[idx(c)]) / d * inv;
                }
            }
        }
    }
    Ok((total * inv, grad))
}

fn softmax_blocks<T: Real>(blocks: &Tensor<T>) -> Tensor<T> {
    let s = blocks.shape();
    let plane = s.h * s.w;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for i in 0..plane {
            let idx = |k: usize| (n * s.c + k) * plane + i;
            let max = (0..s.c).map(|k| blocks.data()[idx(k)]).fold(T::neg_infinity(), T::max);
            let e: Vec<T> = (0..s.c).map(|k| (blocks.data()[idx(k)] - max).exp()).collect();
            let z: T = e.iter().copied().sum();
            for (k, v) in e.into_iter().enumerate() {
                out.data_mut()[idx(k)] = v / z;
            }
        }
    }
    out
}

/// Local cross-entropy between `r x r` block softmaxes of two score maps.
///
/// Both maps are rearranged to `r²` channels, soft-maxed over the channel axis, and
/// `-mean_locations sum_k P_t log max(P_s, 1e-12)` is returned with its gradient w.r.t. `s_s`.
pub fn score_distill_loss<T: Real>(s_s: &Tensor<T>, s_t: &Tensor<T>, r: usize) -> Result<(T, Tensor<T>)> {
    s_s.check_same_shape(s_t)?;
    if r == 0 {
        return Err(Error::InvalidArgument("block size must be >= 1".into()));
    }
    let p_s = softmax_blocks(&space_to_depth(s_s, r)?);
    let p_t = softmax_blocks(&space_to_depth(s_t, r)?);
    let s = p_s.shape();
    let plane = s.h * s.w;
    let locations = s.n * plane;
    let inv = T::one() / real::<T>(locations as f64);
    let floor = real::<T>(LOG_FLOOR);
    let mut grad = Tensor::zeros(s);
    let mut total = T::zero();
    for n in 0..s.n {
        for i in 0..plane {
            let idx = |k: usize| (n * s.c + k) * plane + i;
            // only unclamped terms carry gradient
            let mut active_mass = T::zero();
            for k in 0..s.c {
                let (ps, pt) = (p_s.data()[idx(k)], p_t.data()[idx(k)]);
                total -= pt * ps.max(floor).ln();
                if ps >= floor {
                    active_mass += pt;
                }
            }
            for k in 0..s.c {
                let (ps, pt) = (p_s.data()[idx(k)], p_t.data()[idx(k)]);
                let own = if ps >= floor { pt } else { T::zero() };
                grad.data_mut()[idx(k)] = (ps * active_mass - own) * inv;
            }
        }
    }
    Ok((total * inv, depth_to_space(&grad, r)?))
}

/// `L_dis = L_desc + lambda1 * L_score`.
pub fn total_distill_loss<T: Real>(desc: T, score: T, lambda1: f64) -> Result<T> {
    if !(lambda1 >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda1 must be >= 0, got {lambda1}")));
    }
    Ok(desc + real::<T>(lambda1) * score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Spacing of the correspondence grid on image A.
    pub grid_stride: usize,
    /// Minimum correspondences for a drawn pair to be used.
    pub min_pairs: usize,
    /// Redraws allowed before giving up on an iteration.
    pub max_retries: usize,
    pub margin: f64,
    /// Minimum pixel distance between a correspondence and its negatives.
    pub safe_radius: f64,
    /// Step multiplier for the score-head layer.
    pub score_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 0.003,
            momentum: 0.9,
            seed: 0,
            augment: AugmentConfig::default(),
            grid_stride: 8,
            min_pairs: 16,
            max_retries: 20,
            margin: DEFAULT_MARGIN,
            safe_radius: DEFAULT_SAFE_RADIUS,
            score_lr_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        if self.grid_stride == 0 || self.min_pairs < 2 {
            return Err(Error::InvalidArgument("grid_stride must be >= 1 and min_pairs >= 2".into()));
        }
        if !(self.lr > 0.0 && self.score_lr_scale > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if !(self.margin >= 0.0 && self.safe_radius >= 0.0) {
            return Err(Error::InvalidArgument("margin and safe_radius must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidArgument("distillation weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub l_ori: f64,
    pub l_desc: f64,
    pub l_score: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    pub wall_time: Duration,
}

impl TrainReport {
    /// `iteration,l_ori,l_desc,l_score,total` with shortest round-trip floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,l_ori,l_desc,l_score,total\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.iteration, r.l_ori, r.l_desc, r.l_score, r.total);
        }
        out
    }

    /// Mean `l_ori` over the first and last `frac` of iterations.
    pub fn head_tail_means(&self, frac: f64) -> Option<(f64, f64)> {
        let n = ((self.records.len() as f64 * frac).ceil() as usize).max(1);
        if self.records.len() < n {
            return None;
        }
        let mean = |rs: &[TrainRecord]| rs.iter().map(|r| r.l_ori).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.records[..n]), mean(&self.records[self.records.len() - n..])))
    }
}

/// One augmented training pair with its ground-truth correspondences.
struct DrawnPair<T> {
    a: Tensor<T>,
    b: Tensor<T>,
    coords: Vec<crate::geometry::PointPair>,
}

fn draw_pair<T: Real>(images: &[Tensor<T>], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<DrawnPair<T>> {
    let idx = rng.gen_range(0..images.len());
    let a = &images[idx];
    let s = a.shape();
    let mask_a = ValidMask::all_valid(s.h, s.w);
    for _ in 0..=cfg.max_retries {
        let h = sample_homography(&cfg.augment, rng.gen(), s.w, s.h)?;
        let (b, mask_b) = warp_image(a, &h);
        let coords = generate_correspondences(&h, cfg.grid_stride, &mask_a, &mask_b)?;
        if coords.len() >= cfg.min_pairs {
            return Ok(DrawnPair {
                a: a.clone(),
                b,
                coords,
            });
        }
    }
    Err(Error::NoCorrespondences(cfg.min_pairs))
}

/// Distillation terms for one image: values and gradients w.r.t. the student maps.
struct DistillTerms<T> {
    l_desc: T,
    l_score: T,
    grad_desc: Tensor<T>,
    grad_score: Tensor<T>,
}

/// Inverse logistic of a score map.
pub fn score_logits<T: Real>(score: &Tensor<T>) -> Tensor<T> {
    score.map(|s| s.ln() - (T::one() - s).ln())
}

/// Score distillation on the logits of two score maps; the gradient is w.r.t. the student score map.
pub fn score_logit_distill_loss<T: Real>(s_s: &Tensor<T>, s_t: &Tensor<T>, r: usize) -> Result<(T, Tensor<T>)> {
    let (l, g) = score_distill_loss(&score_logits(s_s), &score_logits(s_t), r)?;
    let g = g.zip_map(s_s, |g, s| g / (s * (T::one() - s)))?;
    Ok((l, g))
}

fn distill_terms<T: Real>(student: &FeatureOutput<T>, teacher: &FeatureOutput<T>, r: usize) -> Result<DistillTerms<T>> {
    let (l_desc, grad_desc) = desc_distill_loss(&student.desc, &teacher.desc)?;
    let (l_score, grad_score) = score_logit_distill_loss(&student.score, &teacher.score, r)?;
    Ok(DistillTerms {
        l_desc,
        l_score,
        grad_desc,
        grad_score,
    })
}

fn check_images<T: Real>(images: &[Tensor<T>]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    Ok(())
}

/// Trains with the ranking loss on randomly augmented pairs.
pub fn train_base<T: Real>(model: Model<T>, images: &[Tensor<T>], cfg: &TrainConfig) -> Result<(Model<T>, TrainReport)> {
    train_loop(model, images, cfg, None, DistillConfig::default())
}

/// Same loop as [`train_base`] plus teacher supervision on both images of every pair:
/// `L = L_ori + lambda2 * (L_desc + lambda1 * L_score)`, each distillation term averaged over the two images.
pub fn train_distilled<T: Real>(
    student: Model<T>,
    teacher: &MofaTeacher<T>,
    images: &[Tensor<T>],
    cfg: &TrainConfig,
    distill: DistillConfig,
) -> Result<(Model<T>, TrainReport)> {
    distill.validate()?;
    if teacher.model().config().r != student.config().r {
        return Err(Error::InvalidArgument(format!(
            "teacher r = {} but student r = {}",
            teacher.model().config().r,
            student.config().r
        )));
    }
    train_loop(student, images, cfg, Some(teacher), distill)
}

/// Per-layer SGD step sizes.
///
/// An RKF layer's fused kernel moves `N²` times further than a plain kernel under
/// the same step (the gradient is pulled back through `N` rotations and the update
/// pushed forward through `N` again), so RKF layers use `lr / N²`. The score head
/// additionally uses `lr * score_lr_scale`.
pub fn layer_learning_rates<T: Real>(model: &Model<T>, cfg: &TrainConfig) -> Vec<f64> {
    let n = model.layers().len();
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let mut lr = cfg.lr;
            if let Layer::Rkf(l) = layer {
                lr /= (l.n_rotations() * l.n_rotations()) as f64;
            }
            if i + 1 == n {
                lr *= cfg.score_lr_scale;
            }
            lr
        })
        .collect()
}

fn train_loop<T: Real>(
    mut model: Model<T>,
    images: &[Tensor<T>],
    cfg: &TrainConfig,
    teacher: Option<&MofaTeacher<T>>,
    distill: DistillConfig,
) -> Result<(Model<T>, TrainReport)> {
    cfg.validate()?;
    check_images(images)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::with_layer_rates(&model, layer_learning_rates(&model, cfg), cfg.momentum)?;
    let teacher = teacher.filter(|_| distill.lambda2 > 0.0);
    let r = model.config().r;
    let half = real::<T>(0.5);
    let mut records = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let pair = draw_pair(images, cfg, &mut rng)?;
        let (out_a, cache_a) = model.forward_train(&pair.a)?;
        let (out_b, cache_b) = model.forward_train(&pair.b)?;
        let batch = sample_correspondence_features(&out_a, &out_b, &pair.coords)?;
        let jl = joint_loss(&batch, cfg.margin, cfg.safe_radius)?;
        let mut fg = batch.backward(&jl)?;

        let (mut l_desc, mut l_score) = (T::zero(), T::zero());
        if let Some(teacher) = teacher {
            let ta = distill_terms(&out_a, &teacher.forward(&pair.a)?, r)?;
            let tb = distill_terms(&out_b, &teacher.forward(&pair.b)?, r)?;
            l_desc = (ta.l_desc + tb.l_desc) * half;
            l_score = (ta.l_score + tb.l_score) * half;
            let wd = real::<T>(distill.lambda2) * half;
            let ws = real::<T>(distill.lambda2 * distill.lambda1) * half;
            fg.desc_a.add_assign(&ta.grad_desc.scale(wd))?;
            fg.desc_b.add_assign(&tb.grad_desc.scale(wd))?;
            fg.score_a.add_assign(&ta.grad_score.scale(ws))?;
            fg.score_b.add_assign(&tb.grad_score.scale(ws))?;
        }

        let mut grads = model.backward(&cache_a, &out_a, Some(&fg.desc_a), Some(&fg.score_a))?;
        let gb: ModelGrads<T> = model.backward(&cache_b, &out_b, Some(&fg.desc_b), Some(&fg.score_b))?;
        grads.add_scaled(&gb, T::one())?;
        opt.step(&mut model, &grads)?;

        let l_dis = total_distill_loss(l_desc, l_score, distill.lambda1)?;
        let total = jl.value + real::<T>(distill.lambda2) * l_dis;
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        let rec = TrainRecord {
            iteration,
            l_ori: f(jl.value),
            l_desc: f(l_desc),
            l_score: f(l_score),
            total: f(total),
        };
        if !(rec.total.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss diverged at iteration {iteration}")));
        }
        records.push(rec);
    }
    Ok((
        model,
        TrainReport {
            records,
            wall_time: start.elapsed(),
        },
    ))
}
