//! Browser bindings: kernel rotation and fusion, an equivariance map, and a homography warp.

use wasm_bindgen::prelude::*;

use rkf_core::geometry::{rotate_image, sample_homography, warp_image, AugmentConfig, RotationAngle};
use rkf_core::net::{ForwardMode, Model, ModelConfig, Variant};
use rkf_core::rkf::RkfLayer;
use rkf_core::synth::{gen_image, StyleKind, SynthStyle};
use rkf_core::tensor::{ConvKernel, Shape, Tensor};

fn js(e: rkf_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `n` rotated copies of a single `k x k` kernel followed by their sum, each `k * k` values.
#[wasm_bindgen]
pub fn kernel_branches(weights: &[f32], k: usize, n: usize) -> Result<Vec<f32>, JsError> {
    if k == 0 || weights.len() != k * k {
        return Err(JsError::new(&format!("expected {} weights for k = {k}", k * k)));
    }
    let w = Tensor::from_vec(Shape::new(1, 1, k, k), weights.to_vec()).map_err(js)?;
    let layer = RkfLayer::new(ConvKernel::new(w, vec![0.0]).map_err(js)?, n).map_err(js)?;
    let mut out = Vec::with_capacity((n + 1) * k * k);
    for kern in layer.rotated_kernels().map_err(js)? {
        out.extend_from_slice(kern.weights().data());
    }
    out.extend_from_slice(layer.reparameterize().map_err(js)?.weights().data());
    Ok(out)
}

fn style(name: &str, seed: u32) -> Result<SynthStyle, JsError> {
    let kind: StyleKind = name.parse().map_err(|_| JsError::new(&format!("unknown style {name:?}")))?;
    Ok(SynthStyle::new(kind, seed as u64))
}

/// Score maps of a small untrained network for a synthetic image.
///
/// Returns three `size x size` planes: the score of the rotated image, the rotated
/// score of the image, and their absolute difference.
#[wasm_bindgen]
pub fn equivariance_map(style_name: &str, seed: u32, size: usize, quarter_turns: usize, rkf: bool) -> Result<Vec<f32>, JsError> {
    if size == 0 || size % 4 != 0 {
        return Err(JsError::new("size must be a positive multiple of 4"));
    }
    let img: Tensor<f32> = gen_image(&style(style_name, seed)?, size, size).map_err(js)?;
    let variant = if rkf { Variant::Rkf { n_rotations: 4 } } else { Variant::Base };
    let cfg = ModelConfig {
        trunk: vec![8],
        head: 8,
        desc_dim: 16,
        r: 4,
        kernel: 3,
        variant,
    };
    let mut model = Model::init(cfg, seed as u64).map_err(js)?;
    model.standardize(std::slice::from_ref(&img)).map_err(js)?;
    let angle = RotationAngle::quarter_turns_of(quarter_turns);
    let of_rotated = model.forward(&rotate_image(&img, angle).0, ForwardMode::Fused).map_err(js)?.score;
    let (rotated, _) = rotate_image(&model.forward(&img, ForwardMode::Fused).map_err(js)?.score, angle);
    let diff = of_rotated.sub(&rotated).map_err(js)?.map(f32::abs);
    Ok([of_rotated, rotated, diff].iter().flat_map(|t| t.data().to_vec()).collect())
}

/// A synthetic image and its warp under the homography with the given parameters.
///
/// Returns two `size x size` planes; pixels of the warp with no source are `-1`.
#[wasm_bindgen]
pub fn synth_warp(
    style_name: &str,
    seed: u32,
    size: usize,
    angle_deg: f64,
    scale: f64,
    shear: f64,
    perspective: f64,
) -> Result<Vec<f32>, JsError> {
    let img: Tensor<f32> = gen_image(&style(style_name, seed)?, size, size).map_err(js)?;
    let theta = angle_deg.to_radians();
    let cfg = AugmentConfig {
        rotation: (theta, theta),
        scale: (scale, scale),
        shear: (shear, shear),
        perspective: (perspective, perspective),
        translation: 0.0,
    };
    let h = sample_homography(&cfg, 0, size, size).map_err(js)?;
    let (warped, mask) = warp_image(&img, &h);
    let mut out = img.data().to_vec();
    out.extend(warped.data().iter().zip(mask.as_slice()).map(|(&v, &ok)| if ok { v } else { -1.0 }));
    Ok(out)
}
