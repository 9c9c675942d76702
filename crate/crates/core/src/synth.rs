//! Procedural grayscale textures and augmented image pairs with known homographies.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{generate_correspondences, sample_homography, warp_image, AugmentConfig, Homography, ValidMask};
use crate::tensor::{real, Real, Shape, Tensor};

/// Images whose pixel standard deviation falls below this are rejected.
pub const MIN_STDDEV: f64 = 0.02;
/// Largest sample value of the 16-bit image encoding.
pub const MAXVAL: u32 = 65535;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleKind {
    Blobs,
    CheckerWarped,
    MultiFreqNoise,
}

impl StyleKind {
    pub fn name(&self) -> &'static str {
        match self {
            StyleKind::Blobs => "blobs",
            StyleKind::CheckerWarped => "checker_warped",
            StyleKind::MultiFreqNoise => "multi_freq_noise",
        }
    }
}

impl fmt::Display for StyleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StyleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(StyleKind::Blobs),
            "checker_warped" => Ok(StyleKind::CheckerWarped),
            "multi_freq_noise" => Ok(StyleKind::MultiFreqNoise),
            other => Err(Error::InvalidArgument(format!(
                "unknown style '{other}' (expected blobs, checker_warped or multi_freq_noise)"
            ))),
        }
    }
}

/// A texture recipe: generator kind, its parameters and the seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthStyle {
    pub kind: StyleKind,
    /// Feature density: blobs per 64 px², checker cells per 16 px, or noise base frequency.
    pub density: f64,
    /// Output range around 0.5, in `(0, 1]`.
    pub contrast: f64,
    pub seed: u64,
}

impl SynthStyle {
    pub fn new(kind: StyleKind, seed: u64) -> Self {
        Self {
            kind,
            density: 1.0,
            contrast: 1.0,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Rounds to the nearest multiple of `1 / 65535`, ties upward.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * MAXVAL as f64 + 0.5).floor() / MAXVAL as f64
}

fn blobs(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Vec<f64> {
    let count = (density * (h * w) as f64 / 64.0).round() as usize;
    let mut img = vec![0.0; h * w];
    for _ in 0..count {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let sx = rng.gen_range(1.2..4.0);
        let sy = rng.gen_range(1.2..4.0);
        let amp = if rng.gen::<bool>() { 1.0 } else { -1.0 } * rng.gen_range(0.3..1.0);
        let (x0, x1) = ((cx - 3.0 * sx).floor().max(0.0) as usize, ((cx + 3.0 * sx).ceil() as usize).min(w));
        let (y0, y1) = ((cy - 3.0 * sy).floor().max(0.0) as usize, ((cy + 3.0 * sy).ceil() as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 - cx) / sx;
                let dy = (y as f64 - cy) / sy;
                img[y * w + x] += amp * (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
    }
    img
}

fn checker_warped(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Vec<f64> {
    let cell = 16.0 / density.max(1e-9);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.02..0.12),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut img = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut u, mut v) = (x as f64, y as f64);
            for &(amp, freq, pu, pv) in &waves {
                let (u0, v0) = (u, v);
                u += amp * (freq * v0 + pu).sin();
                v += amp * (freq * u0 + pv).sin();
            }
            let (ru, rv) = (ca * u - sa * v, sa * u + ca * v);
            let s = (std::f64::consts::PI * ru / cell).sin() * (std::f64::consts::PI * rv / cell).sin();
            img[y * w + x] = (3.0 * s).tanh();
        }
    }
    img
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn multi_freq_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Vec<f64> {
    let mut img = vec![0.0; h * w];
    let base = 32.0 / density.max(1e-9);
    let mut amp = 1.0;
    let mut period = base;
    while period >= 2.0 {
        let gw = (w as f64 / period).ceil() as usize + 2;
        let gh = (h as f64 / period).ceil() as usize + 2;
        let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (ox, oy) = (rng.gen_range(0.0..period), rng.gen_range(0.0..period));
        for y in 0..h {
            for x in 0..w {
                let (gx, gy) = ((x as f64 + ox) / period, (y as f64 + oy) / period);
                let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
                let (tx, ty) = (smoothstep(gx - ix as f64), smoothstep(gy - iy as f64));
                let g = |i: usize, j: usize| grid[j * gw + i];
                let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
                let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
                img[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        amp *= 0.6;
        period /= 2.0;
    }
    img
}

fn stddev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Generates a `1 x 1 x h x w` image with values quantized to the 16-bit grid.
pub fn gen_image<T: Real>(style: &SynthStyle, h: usize, w: usize) -> Result<Tensor<T>> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!("image must be at least 16x16, got {h}x{w}")));
    }
    if !(style.density >= 0.0 && style.density.is_finite()) {
        return Err(Error::InvalidArgument(format!("density must be >= 0, got {}", style.density)));
    }
    if !(style.contrast > 0.0 && style.contrast <= 1.0) {
        return Err(Error::InvalidArgument(format!("contrast must be in (0, 1], got {}", style.contrast)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(style.seed);
    let raw = match style.kind {
        _ if style.density == 0.0 => vec![0.0; h * w],
        StyleKind::Blobs => blobs(&mut rng, h, w, style.density),
        StyleKind::CheckerWarped => checker_warped(&mut rng, h, w, style.density),
        StyleKind::MultiFreqNoise => multi_freq_noise(&mut rng, h, w, style.density),
    };
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi - lo > 1e-12) {
        return Err(Error::DegenerateImage(format!("{} with density {} is constant", style.kind, style.density)));
    }
    let img: Vec<f64> = raw
        .iter()
        .map(|&v| quantize(0.5 + style.contrast * ((v - lo) / (hi - lo) - 0.5)))
        .collect();
    let sd = stddev(&img);
    if sd <= MIN_STDDEV {
        return Err(Error::DegenerateImage(format!("pixel stddev {sd:.4} <= {MIN_STDDEV}")));
    }
    Ok(Tensor::from_vec(Shape::new(1, 1, h, w), img.into_iter().map(real).collect())?)
}

/// An image, its warped copy and the homography relating them.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    /// Maps pixel coordinates of `a` to pixel coordinates of `b`.
    pub h: Homography,
    pub mask_a: ValidMask,
    pub mask_b: ValidMask,
    pub seed: u64,
    pub augment: AugmentConfig,
}

/// Grid spacing used to decide whether a drawn homography leaves enough overlap.
pub const PAIR_GRID_STRIDE: usize = 8;
/// Minimum correspondences on the check grid.
pub const PAIR_MIN_POINTS: usize = 16;
const PAIR_MAX_RETRIES: usize = 50;

/// Warps `img` by a random homography drawn from `aug`; `b` is quantized like `a`.
pub fn make_pair<T: Real>(img: &Tensor<T>, aug: &AugmentConfig, seed: u64) -> Result<PairRecord<T>> {
    aug.validate()?;
    let s = img.shape();
    let mask_a = ValidMask::all_valid(s.h, s.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..PAIR_MAX_RETRIES {
        let h = sample_homography(aug, rng.gen(), s.w, s.h)?;
        let (b, mask_b) = warp_image(img, &h);
        if generate_correspondences(&h, PAIR_GRID_STRIDE, &mask_a, &mask_b)?.len() >= PAIR_MIN_POINTS {
            let b = b.map(|v| real(quantize(v.to_f64().unwrap_or(0.0))));
            return Ok(PairRecord {
                a: img.clone(),
                b,
                h,
                mask_a,
                mask_b,
                seed,
                augment: *aug,
            });
        }
    }
    Err(Error::NoCorrespondences(PAIR_MIN_POINTS))
}

/// Rebuilds the masks of a pair whose images and homography were stored on disk.
pub fn pair_from_parts<T: Real>(a: Tensor<T>, b: Tensor<T>, h: Homography, seed: u64) -> Result<PairRecord<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape(format!("pair images differ in shape: {sa} vs {sb}")));
    }
    let (_, mask_b) = warp_image(&a, &h);
    Ok(PairRecord {
        mask_a: ValidMask::all_valid(sa.h, sa.w),
        mask_b,
        a,
        b,
        h,
        seed,
        augment: AugmentConfig::identity(),
    })
}
