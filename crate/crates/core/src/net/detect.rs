use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Strict local maxima of the score map (batch 0, channel 0).
///
/// A pixel qualifies when it is `>= threshold` and strictly greater than every
/// other in-bounds pixel of its `(2 * nms_radius + 1)²` window. Results are
/// sorted by descending score, ties by `(y, x)`, then truncated to `top_k`.
pub fn detect_keypoints<T: Real>(score: &Tensor<T>, nms_radius: usize, threshold: f64, top_k: usize) -> Vec<Keypoint> {
    let s = score.shape();
    let plane = score.plane(0, 0);
    let mut found = Vec::new();
    for y in 0..s.h {
        for x in 0..s.w {
            let v = plane[y * s.w + x];
            if v.to_f64().unwrap_or(f64::NEG_INFINITY) < threshold {
                continue;
            }
            let (y0, y1) = (y.saturating_sub(nms_radius), (y + nms_radius + 1).min(s.h));
            let (x0, x1) = (x.saturating_sub(nms_radius), (x + nms_radius + 1).min(s.w));
            let is_max = (y0..y1).all(|yy| (x0..x1).all(|xx| (yy == y && xx == x) || plane[yy * s.w + xx] < v));
            if is_max {
                found.push((v, y, x));
            }
        }
    }
    found.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    found.truncate(top_k);
    found
        .into_iter()
        .map(|(v, y, x)| Keypoint {
            x: x as f64,
            y: y as f64,
            score: v.to_f64().unwrap_or(0.0),
        })
        .collect()
}
