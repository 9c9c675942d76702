//! Mutual nearest-neighbour matching, mean matching accuracy, rotation sweeps and timing.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{degrees, AugmentConfig, Homography};
use crate::mofa::MofaTeacher;
use crate::net::{desc_map_coord, detect_keypoints, FeatureExtractor, FeatureOutput, ForwardMode, Keypoint, Model};
use crate::synth::{make_pair, PairRecord};
use crate::tensor::{bilinear_sample, Real, Shape, Tensor};

/// Mutual nearest-neighbour matches `(index_a, index_b, distance)`, ordered by `index_a`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub matches: Vec<(usize, usize, f64)>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `pool` to `q`; the lower index wins ties.
fn nearest(q: &[f64], pool: &[Vec<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, p) in pool.iter().enumerate() {
        let d = sq_dist(q, p);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best
}

/// Brute-force L2 nearest neighbours in both directions; keeps mutual pairs.
pub fn match_descriptors(desc_a: &[Vec<f64>], desc_b: &[Vec<f64>]) -> Result<MatchSet> {
    if desc_a.is_empty() || desc_b.is_empty() {
        return Ok(MatchSet::default());
    }
    let dim = desc_a[0].len();
    if desc_a.iter().chain(desc_b).any(|d| d.len() != dim) {
        return Err(Error::Shape("descriptor dimensions differ".into()));
    }
    let b_to_a: Vec<usize> = desc_b.iter().map(|d| nearest(d, desc_a).expect("non-empty").0).collect();
    let matches = desc_a
        .iter()
        .enumerate()
        .filter_map(|(i, d)| {
            let (j, d2) = nearest(d, desc_b)?;
            (b_to_a[j] == i).then(|| (i, j, d2.sqrt()))
        })
        .collect();
    Ok(MatchSet { matches })
}

/// Fraction of correct matches per pixel threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MmaCurve {
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Pairs averaged into this curve.
    pub pairs: usize,
    /// Pairs that produced no matches (counted as accuracy 0).
    pub empty_pairs: usize,
}

/// Thresholds 1..=10 px.
pub fn default_thresholds() -> Vec<f64> {
    (1..=10).map(f64::from).collect()
}

impl MmaCurve {
    /// Accuracy at threshold `t` (exact match of the threshold value).
    pub fn at(&self, t: f64) -> Option<f64> {
        self.thresholds.iter().position(|&x| x == t).map(|i| self.accuracy[i])
    }

    /// `threshold,accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,accuracy\n");
        for (t, a) in self.thresholds.iter().zip(&self.accuracy) {
            let _ = writeln!(out, "{t},{a}");
        }
        out
    }

    /// Mean of several curves over the same thresholds.
    pub fn mean(curves: &[MmaCurve]) -> Result<MmaCurve> {
        let first = curves
            .first()
            .ok_or_else(|| Error::InvalidArgument("no curves to average".into()))?;
        if curves.iter().any(|c| c.thresholds != first.thresholds) {
            return Err(Error::InvalidArgument("curves use different thresholds".into()));
        }
        let pairs: usize = curves.iter().map(|c| c.pairs).sum();
        let accuracy = (0..first.thresholds.len())
            .map(|i| curves.iter().map(|c| c.accuracy[i] * c.pairs as f64).sum::<f64>() / pairs.max(1) as f64)
            .collect();
        Ok(MmaCurve {
            thresholds: first.thresholds.clone(),
            accuracy,
            pairs,
            empty_pairs: curves.iter().map(|c| c.empty_pairs).sum(),
        })
    }
}

/// Scores the matches of one image pair against the ground-truth homography.
pub fn compute_mma(
    matches: &MatchSet,
    kpts_a: &[Keypoint],
    kpts_b: &[Keypoint],
    h: &Homography,
    thresholds: &[f64],
) -> Result<MmaCurve> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("thresholds must be ascending".into()));
    }
    if matches.is_empty() {
        return Ok(MmaCurve {
            thresholds: thresholds.to_vec(),
            accuracy: vec![0.0; thresholds.len()],
            pairs: 1,
            empty_pairs: 1,
        });
    }
    let errors: Vec<f64> = matches
        .matches
        .iter()
        .map(|&(i, j, _)| {
            let (a, b) = (kpts_a[i], kpts_b[j]);
            h.apply((a.x, a.y))
                .map_or(f64::INFINITY, |p| ((p.0 - b.x).powi(2) + (p.1 - b.y).powi(2)).sqrt())
        })
        .collect();
    let n = errors.len() as f64;
    let accuracy = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect();
    Ok(MmaCurve {
        thresholds: thresholds.to_vec(),
        accuracy,
        pairs: 1,
        empty_pairs: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams {
    pub nms_radius: usize,
    pub threshold: f64,
    pub top_k: usize,
    /// Keypoints closer than this to the image edge are dropped.
    pub border: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            nms_radius: 2,
            threshold: 0.0,
            top_k: 128,
            border: 4,
        }
    }
}

/// Unit descriptors sampled at keypoint locations.
pub fn describe_keypoints<T: Real>(out: &FeatureOutput<T>, kpts: &[Keypoint]) -> Result<Vec<Vec<f64>>> {
    let (ds, ss) = (out.desc.shape(), out.score.shape());
    let r = ss.w / ds.w;
    let pts: Vec<_> = kpts.iter().map(|k| desc_map_coord((k.x, k.y), r, ds.w, ds.h)).collect();
    Ok(bilinear_sample(&out.desc, 0, &pts)?
        .into_iter()
        .map(|v| {
            let v: Vec<f64> = v.iter().map(|x| x.to_f64().unwrap_or(0.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect())
}

fn keep_covisible(kpts: Vec<Keypoint>, to_other: &Homography, w: usize, h: usize, border: usize) -> Vec<Keypoint> {
    let lo = border as f64;
    let (hx, hy) = ((w - 1) as f64 - lo, (h - 1) as f64 - lo);
    let inside = |x: f64, y: f64| x >= lo && y >= lo && x <= hx && y <= hy;
    kpts.into_iter()
        .filter(|k| inside(k.x, k.y) && to_other.apply((k.x, k.y)).is_some_and(|(x, y)| inside(x, y)))
        .collect()
}

/// Detect, describe, match and score one pair.
///
/// Keypoints are kept only when they lie `border` pixels inside their own image
/// and project inside the other image under the ground truth.
pub fn evaluate_pair<T: Real, F: FeatureExtractor<T> + ?Sized>(
    extractor: &F,
    pair: &PairRecord<T>,
    params: &DetectorParams,
    thresholds: &[f64],
) -> Result<MmaCurve> {
    let s = pair.a.shape();
    let out_a = extractor.extract(&pair.a)?;
    let out_b = extractor.extract(&pair.b)?;
    let detect = |o: &FeatureOutput<T>| detect_keypoints(&o.score, params.nms_radius, params.threshold, usize::MAX);
    let mut ka = keep_covisible(detect(&out_a), &pair.h, s.w, s.h, params.border);
    let mut kb = keep_covisible(detect(&out_b), &pair.h.inverse(), s.w, s.h, params.border);
    ka.truncate(params.top_k);
    kb.truncate(params.top_k);
    let da = describe_keypoints(&out_a, &ka)?;
    let db = describe_keypoints(&out_b, &kb)?;
    let matches = match_descriptors(&da, &db)?;
    compute_mma(&matches, &ka, &kb, &pair.h, thresholds)
}

/// Mean curve over pairs; pairs without matches count as zero accuracy.
pub fn evaluate_model<T: Real, F: FeatureExtractor<T> + ?Sized>(
    extractor: &F,
    pairs: &[PairRecord<T>],
    params: &DetectorParams,
    thresholds: &[f64],
) -> Result<MmaCurve> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let curves = pairs
        .iter()
        .map(|p| evaluate_pair(extractor, p, params, thresholds))
        .collect::<Result<Vec<_>>>()?;
    MmaCurve::mean(&curves)
}

/// `(angle_deg, mma@5px)` rows of a rotation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<(f64, f64)>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("angle_deg,mma5\n");
        for (a, m) in &self.rows {
            let _ = writeln!(out, "{a},{m}");
        }
        out
    }
}

/// For each angle, rotates every image by exactly that angle about its centre and evaluates.
pub fn rotation_sweep<T: Real, F: FeatureExtractor<T> + ?Sized>(
    extractor: &F,
    images: &[Tensor<T>],
    angles: &[f64],
    params: &DetectorParams,
) -> Result<SweepTable> {
    let rows = angles
        .iter()
        .map(|&theta| {
            if !(0.0..std::f64::consts::TAU).contains(&theta) {
                return Err(Error::InvalidArgument(format!("sweep angle {theta} outside [0, 2 pi)")));
            }
            let aug = AugmentConfig::rotation_only(theta, theta);
            let pairs = images
                .iter()
                .map(|img| make_pair(img, &aug, 0))
                .collect::<Result<Vec<_>>>()?;
            let curve = evaluate_model(extractor, &pairs, params, &[5.0])?;
            Ok((degrees(theta), curve.accuracy[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { rows })
}

/// Sweep angles `0, step, 2 step, ... < 360` degrees, in radians.
pub fn sweep_angles(step_deg: f64) -> Result<Vec<f64>> {
    if !(step_deg > 0.0 && step_deg <= 360.0) {
        return Err(Error::InvalidArgument(format!("sweep step must be in (0, 360], got {step_deg}")));
    }
    let n = (360.0 / step_deg).ceil() as usize;
    Ok((0..n)
        .map(|i| i as f64 * step_deg)
        .filter(|&d| d < 360.0)
        .map(f64::to_radians)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub variant: String,
    pub size: usize,
    pub median_ms: f64,
    pub ratio_to_base: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,size,median_ms,ratio_to_base\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.4},{:.4}", r.variant, r.size, r.median_ms, r.ratio_to_base);
        }
        out
    }

    pub fn ratio(&self, variant: &str, size: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.size == size)
            .map(|r| r.ratio_to_base)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median single-image inference time of base, branched RKF, fused RKF and the
/// MOFA ensemble over `base`. Variants are interleaved within each repetition.
pub fn timing_compare(
    base: &Model<f32>,
    rkf: &Model<f32>,
    n_rotations: usize,
    sizes: &[usize],
    reps: usize,
    seed: u64,
) -> Result<TimingReport> {
    if reps < 10 {
        return Err(Error::InvalidArgument(format!("timing needs >= 10 repetitions, got {reps}")));
    }
    let fused = rkf.reparameterize()?;
    let teacher = MofaTeacher::new(base.clone(), n_rotations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &size in sizes {
        let img: Tensor<f32> = Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, _, _| rng.gen());
        let run = |i: usize| -> Result<()> {
            match i {
                0 => base.forward(&img, ForwardMode::Fused).map(|_| ()),
                1 => rkf.forward(&img, ForwardMode::Branched).map(|_| ()),
                2 => fused.forward(&img, ForwardMode::Fused).map(|_| ()),
                _ => teacher.forward(&img).map(|_| ()),
            }
        };
        for i in 0..4 {
            run(i)?;
            run(i)?;
        }
        let mut times = vec![Vec::with_capacity(reps); 4];
        for _ in 0..reps {
            for (i, t) in times.iter_mut().enumerate() {
                let start = Instant::now();
                run(i)?;
                t.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        let medians: Vec<f64> = times.into_iter().map(median).collect();
        for (name, &m) in ["base", "rkf_branched", "rkf_fused", "mofa"].iter().zip(&medians) {
            rows.push(TimingRow {
                variant: name.to_string(),
                size,
                median_ms: m,
                ratio_to_base: m / medians[0],
            });
        }
    }
    Ok(TimingReport { rows })
}
