//! Toy detect-and-describe network in a base and an RKF flavour.
//!
//! Architecture (all convolutions 3x3, stride 1, zero "same" padding):
//!
//! ```text
//! image ─ trunk: [conv + ReLU] x len(trunk) ─┬─ [avg_pool2 + conv + ReLU] x log2(r) ─ conv(→C) ─ L2 norm ─ desc
//!                                            └─ conv(→1) ─ b·tanh(z/b) ─ logistic ──────────────────────── score
//! ```
//!
//! `b` is [`SCORE_LOGIT_BOUND`].
//!
//! In the RKF variant every convolution with `k >= 3` is an [`RkfLayer`].

mod detect;
mod loss;
mod optim;

pub use detect::{detect_keypoints, Keypoint};
pub use loss::{
    desc_map_coord, joint_loss, sample_correspondence_features, CorrespondenceBatch, FeatureGrads,
    JointLoss, DEFAULT_MARGIN, DEFAULT_SAFE_RADIUS,
};
pub use optim::{momentum_step, Sgd};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::rkf::RkfLayer;
use crate::tensor::{
    avg_pool2, avg_pool2_backward, conv2d, conv2d_backward, l2_normalize_channels,
    l2_normalize_channels_backward, real, relu, relu_backward, sigmoid, sigmoid_backward, soft_clamp, soft_clamp_backward, ConvKernel,
    Padding, Real, Shape, Tensor,
};

/// Guard for descriptor normalization.
pub const NORM_EPS: f64 = 1e-8;
/// Score logits are soft-clamped to `(-bound, bound)` before the logistic.
pub const SCORE_LOGIT_BOUND: f64 = 6.0;

fn score_map<T: Real>(pre: &Tensor<T>) -> Tensor<T> {
    sigmoid(&soft_clamp(pre, real(SCORE_LOGIT_BOUND)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Base,
    Rkf { n_rotations: usize },
    /// An RKF model whose branches were collapsed into plain kernels.
    Fused { n_rotations: usize },
}

impl Variant {
    pub fn n_rotations(&self) -> usize {
        match *self {
            Variant::Base => 1,
            Variant::Rkf { n_rotations } | Variant::Fused { n_rotations } => n_rotations,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Rkf { .. } => "rkf",
            Variant::Fused { .. } => "rkf_fused",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Output channels of each trunk convolution.
    pub trunk: Vec<usize>,
    /// Channels of the descriptor-head stage convolutions.
    pub head: usize,
    /// Descriptor dimension `C`.
    pub desc_dim: usize,
    /// Descriptor downsampling rate; a power of two.
    pub r: usize,
    pub kernel: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunk: vec![16, 16],
            head: 16,
            desc_dim: 32,
            r: 4,
            kernel: 3,
            variant: Variant::Base,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn pool_stages(&self) -> usize {
        self.r.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || !self.r.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("r must be a power of two, got {}", self.r)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        if self.trunk.is_empty() || self.trunk.contains(&0) || self.head == 0 || self.desc_dim == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if self.variant.n_rotations() == 0 {
            return Err(Error::InvalidArgument("n_rotations must be >= 1".into()));
        }
        Ok(())
    }

    /// `(c_out, c_in)` of every convolution in declaration order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut c_in = 1;
        for &c in &self.trunk {
            dims.push((c, c_in));
            c_in = c;
        }
        let trunk_out = c_in;
        for _ in 0..self.pool_stages() {
            dims.push((self.head, c_in));
            c_in = self.head;
        }
        dims.push((self.desc_dim, c_in));
        dims.push((1, trunk_out));
        dims
    }

    /// Half-width, in input pixels, of the region that influences one score pixel.
    pub fn score_receptive_radius(&self) -> usize {
        (self.trunk.len() + 1) * (self.kernel / 2)
    }

    /// Conservative half-width, in input pixels, of the region behind one descriptor.
    pub fn desc_receptive_radius(&self) -> usize {
        let k2 = self.kernel / 2;
        let mut radius = self.trunk.len() * k2;
        let mut stride = 1;
        for _ in 0..self.pool_stages() {
            radius += stride;
            stride *= 2;
            radius += k2 * stride;
        }
        radius + k2 * stride
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Collapse RKF branches into one kernel per layer (inference path).
    Fused,
    /// Evaluate every rotated branch separately.
    Branched,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvKernel<T>),
    Rkf(RkfLayer<T>),
}

impl<T: Real> Layer<T> {
    /// The trainable kernel (the base kernel for RKF layers).
    pub fn kernel(&self) -> &ConvKernel<T> {
        match self {
            Layer::Conv(k) => k,
            Layer::Rkf(l) => l.base(),
        }
    }

    pub fn kernel_mut(&mut self) -> &mut ConvKernel<T> {
        match self {
            Layer::Conv(k) => k,
            Layer::Rkf(l) => l.base_mut(),
        }
    }

    pub fn effective_kernel(&self) -> Result<ConvKernel<T>> {
        match self {
            Layer::Conv(k) => Ok(k.clone()),
            Layer::Rkf(l) => l.reparameterize(),
        }
    }

    pub fn forward(&self, input: &Tensor<T>, mode: ForwardMode) -> Result<Tensor<T>> {
        match (self, mode) {
            (Layer::Conv(k), _) => conv2d(input, k, Padding::SameZero),
            (Layer::Rkf(l), ForwardMode::Branched) => l.forward(input),
            (Layer::Rkf(l), ForwardMode::Fused) => conv2d(input, &l.reparameterize()?, Padding::SameZero),
        }
    }

    /// Returns `(grad_input, grad_weights, grad_bias)` for the trainable kernel.
    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
        match self {
            Layer::Conv(k) => {
                let g = conv2d_backward(input, k, grad_out, Padding::SameZero)?;
                Ok((g.input, g.weights, g.bias))
            }
            Layer::Rkf(l) => {
                let g = l.backward(input, grad_out)?;
                Ok((g.input, g.base, g.bias))
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Conv(k) => Layer::Conv(k.cast()),
            Layer::Rkf(l) => Layer::Rkf(l.cast()),
        }
    }
}

/// Dense network outputs: unit descriptors at `1/r` resolution and a full-resolution score map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOutput<T> {
    pub desc: Tensor<T>,
    pub score: Tensor<T>,
}

/// Anything that maps an image to dense features.
pub trait FeatureExtractor<T: Real> {
    fn extract(&self, image: &Tensor<T>) -> Result<FeatureOutput<T>>;
    fn config(&self) -> &ModelConfig;
}

impl<T: Real> FeatureExtractor<T> for Model<T> {
    fn extract(&self, image: &Tensor<T>) -> Result<FeatureOutput<T>> {
        self.forward(image, ForwardMode::Fused)
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }
}

/// Per-layer gradients of the trainable kernels, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub layers: Vec<(Tensor<T>, Vec<T>)>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    let k = l.kernel();
                    (Tensor::zeros(k.weights().shape()), vec![T::zero(); k.c_out()])
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, s: T) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return shape_err("gradient layer count mismatch");
        }
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.check_same_shape(ow)?;
            for (a, &v) in w.data_mut().iter_mut().zip(ow.data()) {
                *a += s * v;
            }
            for (a, &v) in b.iter_mut().zip(ob) {
                *a += s * v;
            }
        }
        Ok(())
    }
}

/// Activations saved by [`Model::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input of every convolution, in declaration order.
    inputs: Vec<Tensor<T>>,
    /// Post-ReLU output of every trunk and head-stage convolution.
    activations: Vec<Tensor<T>>,
    desc_raw: Tensor<T>,
    score_pre: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Model<T> {
    /// Random initialization (uniform He), deterministic given `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel;
        let n_rot = config.variant.n_rotations();
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(c_out, c_in)| {
                let fan_in = (c_in * k * k) as f64;
                let mut bound = (6.0 / fan_in).sqrt();
                if matches!(config.variant, Variant::Rkf { .. }) {
                    bound /= (n_rot as f64).sqrt();
                }
                let w = Tensor::from_fn(Shape::new(c_out, c_in, k, k), |_, _, _, _| {
                    real(rng.gen_range(-bound..bound))
                });
                let kern = ConvKernel::new(w, vec![T::zero(); c_out])?;
                Self::wrap_layer(&config, kern)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    fn wrap_layer(config: &ModelConfig, kern: ConvKernel<T>) -> Result<Layer<T>> {
        match config.variant {
            Variant::Rkf { n_rotations } if kern.k() >= 3 => Ok(Layer::Rkf(RkfLayer::new(kern, n_rotations)?)),
            _ => Ok(Layer::Conv(kern)),
        }
    }

    /// Assembles a model from trainable kernels given in declaration order.
    pub fn from_kernels(config: ModelConfig, kernels: Vec<ConvKernel<T>>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != kernels.len() {
            return shape_err(format!("expected {} layers, got {}", dims.len(), kernels.len()));
        }
        for (&(c_out, c_in), k) in dims.iter().zip(&kernels) {
            if k.c_out() != c_out || k.c_in() != c_in || k.k() != config.kernel {
                return shape_err(format!(
                    "layer dims ({}, {}, {}) do not match ({c_out}, {c_in}, {})",
                    k.c_out(),
                    k.c_in(),
                    k.k(),
                    config.kernel
                ));
            }
        }
        let layers = kernels
            .into_iter()
            .map(|k| Self::wrap_layer(&config, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    /// Collapses every RKF layer into its fused kernel. Base models are returned unchanged.
    pub fn reparameterize(&self) -> Result<Self> {
        let variant = match self.config.variant {
            Variant::Rkf { n_rotations } => Variant::Fused { n_rotations },
            v => v,
        };
        let layers = self
            .layers
            .iter()
            .map(|l| l.effective_kernel().map(Layer::Conv))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: self.config.clone().with_variant(variant),
            layers,
        })
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        let s = image.shape();
        let m = 2 * self.config.r;
        if s.c != 1 {
            return shape_err(format!("expected a single-channel image, got {} channels", s.c));
        }
        if s.h % m != 0 || s.w % m != 0 || s.h == 0 || s.w == 0 {
            return shape_err(format!("image {}x{} not divisible by 2r = {m}", s.h, s.w));
        }
        Ok(())
    }

    fn roles(&self) -> (usize, usize, usize) {
        let trunk = self.config.trunk.len();
        let stages = self.config.pool_stages();
        (trunk, trunk + stages, trunk + stages + 1)
    }

    pub fn forward(&self, image: &Tensor<T>, mode: ForwardMode) -> Result<FeatureOutput<T>> {
        self.check_input(image)?;
        let (trunk, desc_layer, score_layer) = self.roles();
        let mut x = image.clone();
        for layer in &self.layers[..trunk] {
            x = relu(&layer.forward(&x, mode)?);
        }
        let score = score_map(&self.layers[score_layer].forward(&x, mode)?);
        for layer in &self.layers[trunk..desc_layer] {
            x = relu(&layer.forward(&avg_pool2(&x)?, mode)?);
        }
        let raw = self.layers[desc_layer].forward(&x, mode)?;
        let desc = l2_normalize_channels(&raw, real(NORM_EPS));
        Ok(FeatureOutput { desc, score })
    }

    /// Fused-kernel forward that keeps the activations needed by [`Model::backward`].
    pub fn forward_train(&self, image: &Tensor<T>) -> Result<(FeatureOutput<T>, ForwardCache<T>)> {
        self.check_input(image)?;
        let (trunk, desc_layer, score_layer) = self.roles();
        let mode = ForwardMode::Fused;
        let mut inputs = vec![Tensor::zeros(Shape::new(0, 0, 0, 0)); self.layers.len()];
        let mut activations = Vec::with_capacity(desc_layer);
        let mut x = image.clone();
        for (i, layer) in self.layers[..trunk].iter().enumerate() {
            let y = relu(&layer.forward(&x, mode)?);
            inputs[i] = std::mem::replace(&mut x, y.clone());
            activations.push(y);
        }
        let score_pre = self.layers[score_layer].forward(&x, mode)?;
        let score = score_map(&score_pre);
        inputs[score_layer] = x.clone();
        for i in trunk..desc_layer {
            let pooled = avg_pool2(&x)?;
            let y = relu(&self.layers[i].forward(&pooled, mode)?);
            inputs[i] = pooled;
            x = y.clone();
            activations.push(y);
        }
        let raw = self.layers[desc_layer].forward(&x, mode)?;
        inputs[desc_layer] = x;
        let desc = l2_normalize_channels(&raw, real(NORM_EPS));
        Ok((
            FeatureOutput { desc, score: score.clone() },
            ForwardCache {
                inputs,
                activations,
                desc_raw: raw,
                score_pre,
            },
        ))
    }

    /// Data-dependent initialization: rescales every convolution except the score
    /// head, in declaration order, so its pre-activations over `images` have zero
    /// mean and unit variance per channel.
    pub fn standardize(&mut self, images: &[Tensor<T>]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("standardize needs at least one image".into()));
        }
        let (_, desc_layer, _) = self.roles();
        for i in 0..=desc_layer {
            let c_out = self.layers[i].kernel().c_out();
            let (mut sum, mut sq, mut count) = (vec![0.0f64; c_out], vec![0.0f64; c_out], 0usize);
            for img in images {
                let (_, cache) = self.forward_train(img)?;
                let pre = self.layers[i].forward(&cache.inputs[i], ForwardMode::Fused)?;
                let s = pre.shape();
                let plane = s.h * s.w;
                for (j, v) in pre.data().iter().enumerate() {
                    let c = (j / plane) % c_out;
                    let v = v.to_f64().unwrap_or(0.0);
                    sum[c] += v;
                    sq[c] += v * v;
                }
                count += s.n * plane;
            }
            let kern = self.layers[i].kernel_mut();
            let k_elems = kern.c_in() * kern.k() * kern.k();
            for c in 0..c_out {
                let mean = sum[c] / count as f64;
                let std = (sq[c] / count as f64 - mean * mean).max(0.0).sqrt();
                if std < 1e-12 {
                    continue;
                }
                for w in &mut kern.weights_mut().data_mut()[c * k_elems..(c + 1) * k_elems] {
                    *w = real(w.to_f64().unwrap_or(0.0) / std);
                }
                let b = &mut kern.bias_mut()[c];
                *b = real((b.to_f64().unwrap_or(0.0) - mean) / std);
            }
        }
        Ok(())
    }

    /// Backpropagates gradients w.r.t. the descriptor and score maps to every trainable kernel.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        output: &FeatureOutput<T>,
        grad_desc: Option<&Tensor<T>>,
        grad_score: Option<&Tensor<T>>,
    ) -> Result<ModelGrads<T>> {
        let (trunk, desc_layer, score_layer) = self.roles();
        let mut grads = ModelGrads::zeros_like(self);
        let trunk_out_shape = cache.inputs[score_layer].shape();
        let mut g_trunk = Tensor::zeros(trunk_out_shape);

        if let Some(gs) = grad_score {
            let gu = sigmoid_backward(&output.score, gs)?;
            let gz = soft_clamp_backward(&cache.score_pre, &gu, real(SCORE_LOGIT_BOUND))?;
            let (gi, gw, gb) = self.layers[score_layer].backward(&cache.inputs[score_layer], &gz)?;
            grads.layers[score_layer] = (gw, gb);
            g_trunk.add_assign(&gi)?;
        }

        if let Some(gd) = grad_desc {
            let graw = l2_normalize_channels_backward(&cache.desc_raw, gd, real(NORM_EPS))?;
            let (mut g, gw, gb) = self.layers[desc_layer].backward(&cache.inputs[desc_layer], &graw)?;
            grads.layers[desc_layer] = (gw, gb);
            for i in (trunk..desc_layer).rev() {
                let gpre = relu_backward(&cache.activations[i], &g)?;
                let (gi, gw, gb) = self.layers[i].backward(&cache.inputs[i], &gpre)?;
                grads.layers[i] = (gw, gb);
                let pool_in = if i == trunk {
                    trunk_out_shape
                } else {
                    cache.activations[i - 1].shape()
                };
                g = avg_pool2_backward(pool_in, &gi)?;
            }
            g_trunk.add_assign(&g)?;
        }

        let mut g = g_trunk;
        for i in (0..trunk).rev() {
            let gpre = relu_backward(&cache.activations[i], &g)?;
            let (gi, gw, gb) = self.layers[i].backward(&cache.inputs[i], &gpre)?;
            grads.layers[i] = (gw, gb);
            g = gi;
        }
        Ok(grads)
    }

    /// CRC32 over the little-endian bytes of every trainable parameter.
    pub fn param_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for layer in &self.layers {
            let k = layer.kernel();
            for &v in k.weights().data().iter().chain(k.bias()) {
                h.update(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernel().weights().data().len() + l.kernel().c_out())
            .sum()
    }
}
