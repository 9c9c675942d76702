//! Multi-oriented feature aggregation: a rotation-ensembled teacher built from a frozen model.

use crate::error::{shape_err, Error, Result};
use crate::geometry::{rotate_image, RotationAngle};
use crate::net::{FeatureExtractor, FeatureOutput, ForwardMode, Model, ModelConfig, NORM_EPS};
use crate::tensor::{l2_normalize_channels, real, Real, Tensor};

/// Runs the wrapped model on `N` rotated copies of the input and averages the
/// inverse-rotated outputs.
#[derive(Debug, Clone)]
pub struct MofaTeacher<T> {
    model: Model<T>,
    n_rotations: usize,
}

impl<T: Real> MofaTeacher<T> {
    pub fn new(model: Model<T>, n_rotations: usize) -> Result<Self> {
        if n_rotations == 0 {
            return Err(Error::InvalidArgument("MOFA needs at least one rotation".into()));
        }
        Ok(Self { model, n_rotations })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn n_rotations(&self) -> usize {
        self.n_rotations
    }

    /// True when every branch angle is a multiple of 90°.
    pub fn is_exact(&self) -> bool {
        4 % self.n_rotations == 0
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<FeatureOutput<T>> {
        let s = image.shape();
        if self.is_exact() && self.n_rotations > 1 && s.h != s.w {
            return shape_err(format!("quarter-turn aggregation needs a square image, got {}x{}", s.h, s.w));
        }
        let mut desc_acc: Option<(Tensor<T>, Vec<T>)> = None;
        let mut score_acc: Option<(Tensor<T>, Vec<T>)> = None;
        for n in 0..self.n_rotations {
            let angle = RotationAngle::from_index(n, self.n_rotations)?;
            let (rotated, _) = rotate_image(image, angle);
            let out = self.model.forward(&rotated, ForwardMode::Fused)?;
            accumulate(&mut desc_acc, &out.desc, angle.inverse());
            accumulate(&mut score_acc, &out.score, angle.inverse());
        }
        let (desc, _) = desc_acc.map(finish).expect("n_rotations >= 1");
        let (score, _) = score_acc.map(finish).expect("n_rotations >= 1");
        Ok(FeatureOutput {
            desc: l2_normalize_channels(&desc, real(NORM_EPS)),
            score,
        })
    }
}

/// Adds the inverse-rotated map where it is defined and counts contributions per pixel.
fn accumulate<T: Real>(acc: &mut Option<(Tensor<T>, Vec<T>)>, map: &Tensor<T>, back: RotationAngle) {
    let (unrot, mask) = rotate_image(map, back);
    let s = map.shape();
    let (sum, count) = acc.get_or_insert_with(|| (Tensor::zeros(s), vec![T::zero(); s.h * s.w]));
    let plane = s.h * s.w;
    for (i, c) in count.iter_mut().enumerate() {
        if mask.as_slice()[i] {
            *c += T::one();
        }
    }
    let valid = mask.as_slice();
    for (j, (a, &v)) in sum.data_mut().iter_mut().zip(unrot.data()).enumerate() {
        if valid[j % plane] {
            *a += v;
        }
    }
}

fn finish<T: Real>((mut sum, count): (Tensor<T>, Vec<T>)) -> (Tensor<T>, Vec<T>) {
    let plane = count.len();
    for (j, v) in sum.data_mut().iter_mut().enumerate() {
        let c = count[j % plane];
        if c > T::zero() {
            *v = *v / c;
        }
    }
    (sum, count)
}

impl<T: Real> FeatureExtractor<T> for MofaTeacher<T> {
    fn extract(&self, image: &Tensor<T>) -> Result<FeatureOutput<T>> {
        self.forward(image)
    }

    fn config(&self) -> &ModelConfig {
        self.model.config()
    }
}
