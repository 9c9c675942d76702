//! Kernel and image rotations, homographies and ground-truth correspondences.
//!
//! Orientation convention: a rotation by `theta` turns content counter-clockwise
//! as displayed (rows grow downwards). For a `k x k` kernel and `theta = pi/2`
//! this is `out[i][j] = in[j][k - 1 - i]`. Images rotate about their centre
//! `((w - 1) / 2, (h - 1) / 2)` with the same handedness, so a 90 degree image
//! rotation and a 90 degree kernel rotation commute with convolution.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{real, ConvKernel, Real, Tensor};

/// A rotation angle, optionally tagged with its position `n` in a cyclic group of order `N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationAngle {
    theta: f64,
    group: Option<(usize, usize)>,
}

impl RotationAngle {
    pub fn from_radians(theta: f64) -> Self {
        Self { theta, group: None }
    }

    /// `theta_n = 2 pi n / N`.
    pub fn from_index(n: usize, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("rotation group order must be >= 1".into()));
        }
        let n = n % order;
        Ok(Self {
            theta: TAU * n as f64 / order as f64,
            group: Some((n, order)),
        })
    }

    pub fn quarter_turns_of(q: usize) -> Self {
        Self::from_index(q % 4, 4).expect("order 4 is valid")
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn group_index(&self) -> Option<(usize, usize)> {
        self.group
    }

    /// The rotation by `-theta`; group-tagged angles stay in the group (`-n == N - n`).
    pub fn inverse(&self) -> Self {
        match self.group {
            Some((n, order)) => Self::from_index((order - n) % order, order).expect("order >= 1"),
            None => Self::from_radians(-self.theta),
        }
    }

    /// Composition of two angles; group indices add modulo `N`.
    pub fn compose(&self, other: &Self) -> Self {
        match (self.group, other.group) {
            (Some((a, na)), Some((b, nb))) if na == nb => {
                Self::from_index((a + b) % na, na).expect("order >= 1")
            }
            _ => Self::from_radians(self.theta + other.theta),
        }
    }

    /// Number of counter-clockwise quarter turns if this angle is a multiple of `pi / 2`.
    pub fn quarter_turns(&self) -> Option<usize> {
        if let Some((n, order)) = self.group {
            return ((4 * n) % order == 0).then(|| (4 * n / order) % 4);
        }
        let t = self.theta / FRAC_PI_2;
        let r = t.round();
        ((t - r).abs() < 1e-9).then(|| (r as i64).rem_euclid(4) as usize)
    }

    /// `(cos, sin)`, exact for quarter turns.
    pub fn cos_sin(&self) -> (f64, f64) {
        match self.quarter_turns() {
            Some(0) => (1.0, 0.0),
            Some(1) => (0.0, 1.0),
            Some(2) => (-1.0, 0.0),
            Some(3) => (0.0, -1.0),
            _ => (self.theta.cos(), self.theta.sin()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelInterp {
    /// Tap permutation; only valid for multiples of `pi / 2`.
    Exact90,
    /// Bilinear resampling with zeros outside the `k x k` support.
    Bilinear,
}

/// Rotates every `k x k` slice of `kernel` about its centre tap. The bias is unchanged.
pub fn rotate_kernel<T: Real>(
    kernel: &ConvKernel<T>,
    angle: RotationAngle,
    interp: KernelInterp,
) -> Result<ConvKernel<T>> {
    let k = kernel.k();
    let w = kernel.weights();
    let ws = w.shape();
    let rotated = match interp {
        KernelInterp::Exact90 => {
            let q = angle.quarter_turns().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "exact kernel rotation needs a multiple of pi/2, got {}",
                    angle.theta()
                ))
            })?;
            Tensor::from_fn(ws, |o, i, r, c| {
                let (sr, sc) = match q {
                    0 => (r, c),
                    1 => (c, k - 1 - r),
                    2 => (k - 1 - r, k - 1 - c),
                    _ => (k - 1 - c, r),
                };
                w.get(o, i, sr, sc)
            })
        }
        KernelInterp::Bilinear => {
            let centre = (k / 2) as f64;
            let (cos, sin) = angle.cos_sin();
            Tensor::from_fn(ws, |o, i, r, c| {
                let (dx, dy) = (c as f64 - centre, r as f64 - centre);
                let (sx, sy) = source_offset(dx, dy, cos, sin);
                sample_zero_outside(w, o, i, sx + centre, sy + centre)
            })
        }
    };
    ConvKernel::new(rotated, kernel.bias().to_vec())
}

/// Source offset `(dx_s, dy_s)` feeding destination offset `(dx, dy)` under a CCW rotation.
#[inline]
fn source_offset(dx: f64, dy: f64, cos: f64, sin: f64) -> (f64, f64) {
    (cos * dx - sin * dy, sin * dx + cos * dy)
}

fn sample_zero_outside<T: Real>(t: &Tensor<T>, n: usize, c: usize, x: f64, y: f64) -> T {
    let s = t.shape();
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let mut acc = T::zero();
    for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wgt = wx * wy;
            if wgt == 0.0 {
                continue;
            }
            let (xi, yi) = (x0 + ox, y0 + oy);
            if xi >= 0.0 && yi >= 0.0 && xi < s.w as f64 && yi < s.h as f64 {
                acc += real::<T>(wgt) * t.get(n, c, yi as usize, xi as usize);
            }
        }
    }
    acc
}

/// Pixels whose pre-image under a warp falls inside the source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    h: usize,
    w: usize,
    valid: Vec<bool>,
}

impl ValidMask {
    pub fn all_valid(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            valid: vec![true; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != h * w {
            return Err(Error::Shape(format!("mask length {} for {h}x{w}", valid.len())));
        }
        Ok(Self { h, w, valid })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn all(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn and(&self, other: &Self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            valid: self.valid.iter().zip(&other.valid).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    /// True when every pixel used to bilinearly sample `(x, y)` is valid.
    pub fn valid_at(&self, x: f64, y: f64) -> bool {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.w - 1) as f64 && y <= (self.h - 1) as f64) {
            return false;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = (x.ceil() as usize, y.ceil() as usize);
        self.get(x0, y0) && self.get(x1, y0) && self.get(x0, y1) && self.get(x1, y1)
    }
}

/// Tolerance for treating an inverse-mapped coordinate as inside the source image.
const EDGE_TOL: f64 = 1e-9;

/// Inverse-mapping warp shared by image rotation and homography warping.
fn inverse_warp<T: Real>(
    t: &Tensor<T>,
    mut dst_to_src: impl FnMut(f64, f64) -> Option<(f64, f64)>,
) -> (Tensor<T>, ValidMask) {
    let s = t.shape();
    let (wmax, hmax) = ((s.w - 1) as f64, (s.h - 1) as f64);
    let mut out = Tensor::zeros(s);
    let mut valid = vec![false; s.plane()];
    let one = T::one();
    for y in 0..s.h {
        for x in 0..s.w {
            let Some((sx, sy)) = dst_to_src(x as f64, y as f64) else {
                continue;
            };
            if !(sx >= -EDGE_TOL && sy >= -EDGE_TOL && sx <= wmax + EDGE_TOL && sy <= hmax + EDGE_TOL) {
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, wmax), sy.clamp(0.0, hmax));
            valid[y * s.w + x] = true;
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(s.w - 1);
            let y1 = (y0 + 1).min(s.h - 1);
            let fx = real::<T>(sx - x0 as f64);
            let fy = real::<T>(sy - y0 as f64);
            for n in 0..s.n {
                for c in 0..s.c {
                    let p = t.plane(n, c);
                    let v = (one - fy) * ((one - fx) * p[y0 * s.w + x0] + fx * p[y0 * s.w + x1])
                        + fy * ((one - fx) * p[y1 * s.w + x0] + fx * p[y1 * s.w + x1]);
                    out.plane_mut(n, c)[y * s.w + x] = v;
                }
            }
        }
    }
    (out, ValidMask { h: s.h, w: s.w, valid })
}

/// Rotates every plane of `t` about the image centre on the original canvas.
///
/// Pixels whose source falls outside the image are zero-filled and marked invalid.
/// Quarter turns on square images are exact permutations with an all-valid mask.
pub fn rotate_image<T: Real>(t: &Tensor<T>, angle: RotationAngle) -> (Tensor<T>, ValidMask) {
    let s = t.shape();
    let (cx, cy) = ((s.w as f64 - 1.0) / 2.0, (s.h as f64 - 1.0) / 2.0);
    let (cos, sin) = angle.cos_sin();
    inverse_warp(t, |x, y| {
        let (dx, dy) = source_offset(x - cx, y - cy, cos, sin);
        Some((cx + dx, cy + dy))
    })
}

/// Maps a point through the same rotation [`rotate_image`] applies to content.
pub fn rotate_point(p: (f64, f64), angle: RotationAngle, w: usize, h: usize) -> (f64, f64) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (cos, sin) = angle.cos_sin();
    let (dx, dy) = (p.0 - cx, p.1 - cy);
    (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
}

/// Planar projective transform with `h[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

const MIN_DET: f64 = 1e-9;
const MIN_W: f64 = 1e-12;

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalizes by `m[2][2]` and rejects singular matrices.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        let s = m[2][2];
        if s.abs() < MIN_W || !m.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("homography with h22 == 0 or non-finite entries".into()));
        }
        let mut n = m;
        n.iter_mut().flatten().for_each(|v| *v /= s);
        if det3(&n).abs() < MIN_DET {
            return Err(Error::InvalidArgument("singular homography".into()));
        }
        Ok(Self { m: n })
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation about `(cx, cy)` matching [`rotate_image`] (exact for quarter turns).
    pub fn rotation_about(angle: RotationAngle, cx: f64, cy: f64) -> Self {
        let (cos, sin) = angle.cos_sin();
        let lin = [[cos, sin, 0.0], [-sin, cos, 0.0], [0.0, 0.0, 1.0]];
        let h = mat_mul(&Self::translation(cx, cy).m, &mat_mul(&lin, &Self::translation(-cx, -cy).m));
        Self { m: h }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn entries(&self) -> [f64; 9] {
        let m = &self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    pub fn from_entries(e: [f64; 9]) -> Result<Self> {
        Self::from_matrix([[e[0], e[1], e[2]], [e[3], e[4], e[5]], [e[6], e[7], e[8]]])
    }

    pub fn det(&self) -> f64 {
        det3(&self.m)
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &Self) -> Result<Self> {
        Self::from_matrix(mat_mul(&self.m, &first.m))
    }

    pub fn inverse(&self) -> Self {
        let m = &self.m;
        let d = det3(m);
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let mut inv = adj;
        inv.iter_mut().flatten().for_each(|v| *v /= d);
        let s = inv[2][2];
        if s.abs() > MIN_W {
            inv.iter_mut().flatten().for_each(|v| *v /= s);
        }
        Self { m: inv }
    }

    /// Projective application; `None` when the point maps to the plane at infinity.
    #[inline]
    pub fn apply(&self, (x, y): (f64, f64)) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < MIN_W {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }
}

pub fn warp_points(h: &Homography, pts: &[(f64, f64)]) -> Vec<Option<(f64, f64)>> {
    pts.iter().map(|&p| h.apply(p)).collect()
}

/// `out(p) = t(H^-1 p)` with bilinear sampling; zero-filled and invalid where the pre-image is outside.
pub fn warp_image<T: Real>(t: &Tensor<T>, h: &Homography) -> (Tensor<T>, ValidMask) {
    let inv = h.inverse();
    inverse_warp(t, |x, y| inv.apply((x, y)))
}

/// Ranges for random homography augmentation.
///
/// A draw is composed (in order of application to a point) as: move the image
/// centre to the origin, perspective, shear, scale, rotation, then move back and
/// translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Uniform rotation range in radians, `[lo, hi)`.
    pub rotation: (f64, f64),
    /// Scale range; sampled log-uniformly.
    pub scale: (f64, f64),
    /// Uniform shear range applied independently on both axes.
    pub shear: (f64, f64),
    /// Uniform range of the two perspective coefficients (centred pixel units).
    pub perspective: (f64, f64),
    /// Maximum translation as a fraction of the image size.
    pub translation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation: (0.0, TAU),
            scale: (0.8, 1.25),
            shear: (-0.2, 0.2),
            perspective: (-1e-4, 1e-4),
            translation: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            rotation: (0.0, 0.0),
            scale: (1.0, 1.0),
            shear: (0.0, 0.0),
            perspective: (0.0, 0.0),
            translation: 0.0,
        }
    }

    /// Default photometric-free ranges without rotation.
    pub fn upright() -> Self {
        Self {
            rotation: (0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn rotation_only(lo: f64, hi: f64) -> Self {
        Self {
            rotation: (lo, hi),
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !ordered(self.rotation) || !ordered(self.shear) || !ordered(self.perspective) {
            return Err(Error::InvalidArgument("augmentation range must satisfy lo <= hi".into()));
        }
        if !ordered(self.scale) || self.scale.0 <= 0.0 {
            return Err(Error::InvalidArgument("scale range must be positive and ordered".into()));
        }
        if !(self.translation.is_finite() && self.translation >= 0.0) {
            return Err(Error::InvalidArgument("translation fraction must be >= 0".into()));
        }
        if self.rotation.1 - self.rotation.0 > TAU + 1e-12 {
            return Err(Error::InvalidArgument("rotation range wider than 2 pi".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Draws a random homography for a `w x h` image. Pure function of `(cfg, seed, w, h)`.
pub fn sample_homography(cfg: &AugmentConfig, seed: u64, w: usize, h: usize) -> Result<Homography> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    loop {
        let theta = uniform(&mut rng, cfg.rotation);
        let scale = uniform(&mut rng, (cfg.scale.0.ln(), cfg.scale.1.ln())).exp();
        let (shx, shy) = (uniform(&mut rng, cfg.shear), uniform(&mut rng, cfg.shear));
        let (px, py) = (uniform(&mut rng, cfg.perspective), uniform(&mut rng, cfg.perspective));
        let tx = uniform(&mut rng, (-cfg.translation, cfg.translation)) * w as f64;
        let ty = uniform(&mut rng, (-cfg.translation, cfg.translation)) * h as f64;

        let to_origin = Homography::translation(-cx, -cy).m;
        let persp = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]];
        let shear = [[1.0, shx, 0.0], [shy, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let scale_m = [[scale, 0.0, 0.0], [0.0, scale, 0.0], [0.0, 0.0, 1.0]];
        let rot = Homography::rotation_about(RotationAngle::from_radians(theta), 0.0, 0.0).m;
        let back = Homography::translation(cx + tx, cy + ty).m;

        let m = [persp, shear, scale_m, rot, back]
            .iter()
            .fold(to_origin, |acc, step| mat_mul(step, &acc));
        if let Ok(hm) = Homography::from_matrix(m) {
            return Ok(hm);
        }
    }
}

/// One ground-truth correspondence between image A and image B.
pub type PointPair = ((f64, f64), (f64, f64));

/// Grid points of image A (spacing `grid_stride`, offset `grid_stride / 2`) mapped through `h`,
/// kept when both endpoints can be sampled from valid pixels.
pub fn generate_correspondences(
    h: &Homography,
    grid_stride: usize,
    mask_a: &ValidMask,
    mask_b: &ValidMask,
) -> Result<Vec<PointPair>> {
    if grid_stride == 0 {
        return Err(Error::InvalidArgument("grid stride must be >= 1".into()));
    }
    let mut pairs = Vec::new();
    let start = grid_stride / 2;
    for y in (start..mask_a.height()).step_by(grid_stride) {
        for x in (start..mask_a.width()).step_by(grid_stride) {
            if !mask_a.get(x, y) {
                continue;
            }
            let a = (x as f64, y as f64);
            if let Some(b) = h.apply(a) {
                if mask_b.valid_at(b.0, b.1) {
                    pairs.push((a, b));
                }
            }
        }
    }
    Ok(pairs)
}

pub fn degrees(theta: f64) -> f64 {
    theta * 180.0 / PI
}
