//! Axis-aligned boxes, anchors and the box-delta parameterization.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Box corners in pixel units, `x1 <= x2` and `y1 <= y2`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Rect<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("anchor must have positive width and height, got {0:?}")]
    DegenerateAnchor([f64; 4]),
    #[error("invalid anchor configuration: {0}")]
    InvalidAnchors(String),
    #[error("thresholds must satisfy 0 <= neg <= pos <= 1, got neg {neg} pos {pos}")]
    Thresholds { neg: f64, pos: f64 },
}

impl<T: Scalar> Rect<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        let (w, h) = (self.width(), self.height());
        if w > T::zero() && h > T::zero() {
            w * h
        } else {
            T::zero()
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    /// Clamps all corners into `[0, width] x [0, height]`.
    pub fn clip(self, width: T, height: T) -> Self {
        let cx = |v: T| v.max(T::zero()).min(width);
        let cy = |v: T| v.max(T::zero()).min(height);
        Self::new(cx(self.x1), cy(self.y1), cx(self.x2), cy(self.y2))
    }

    pub fn scaled(self, f: T) -> Self {
        Self::new(self.x1 * f, self.y1 * f, self.x2 * f, self.y2 * f)
    }

    pub fn cast<U: Scalar>(self) -> Rect<U> {
        Rect::from_array(self.to_array().map(|v| U::lit(v.as_f64())))
    }

    pub fn iou(&self, other: &Self) -> T {
        iou(self, other)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou<T: Scalar>(a: &Rect<T>, b: &Rect<T>) -> T {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression.
///
/// Visits boxes by descending score (lower index first on ties) and drops any
/// box whose IoU with an already kept box exceeds `iou_threshold`.
pub fn nms<T: Scalar>(boxes: &[Rect<T>], scores: &[T], iou_threshold: T) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig<T> {
    pub base_size: T,
    pub scales: Vec<T>,
    pub aspect_ratios: Vec<T>,
    pub feature_stride: T,
}

impl<T: Scalar> AnchorConfig<T> {
    pub fn per_location(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let all = std::iter::once(self.base_size)
            .chain(self.scales.iter().copied())
            .chain(self.aspect_ratios.iter().copied())
            .chain(std::iter::once(self.feature_stride));
        if self.per_location() == 0 {
            return Err(GeometryError::InvalidAnchors("need at least one scale and one ratio".into()));
        }
        if all.into_iter().any(|v| !(v > T::zero() && v.is_finite())) {
            return Err(GeometryError::InvalidAnchors("entries must be positive".into()));
        }
        Ok(())
    }
}

impl Default for AnchorConfig<f32> {
    fn default() -> Self {
        Self {
            base_size: 8.0,
            scales: vec![1.0, 2.0, 4.0],
            aspect_ratios: vec![1.0],
            feature_stride: 4.0,
        }
    }
}

/// Anchor grid over an `h_f x w_f` feature map.
///
/// Order is row-major over locations, then scales, then ratios. A ratio `r`
/// gives width `base·scale·sqrt(r)` and height `base·scale/sqrt(r)`.
pub fn generate_anchors<T: Scalar>(cfg: &AnchorConfig<T>, h_f: usize, w_f: usize) -> Vec<Rect<T>> {
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(h_f * w_f * cfg.per_location());
    for u in 0..h_f {
        for v in 0..w_f {
            let cy = (T::lit(u as f64) + half) * cfg.feature_stride;
            let cx = (T::lit(v as f64) + half) * cfg.feature_stride;
            for &s in &cfg.scales {
                for &r in &cfg.aspect_ratios {
                    let w = cfg.base_size * s * r.sqrt();
                    let h = cfg.base_size * s / r.sqrt();
                    out.push(Rect::new(cx - half * w, cy - half * h, cx + half * w, cy + half * h));
                }
            }
        }
    }
    out
}

/// Largest magnitude allowed for the log-ratio terms before exponentiation.
pub const MAX_LOG_RATIO: f64 = 4.0;

fn center_size<T: Scalar>(b: &Rect<T>) -> (T, T, T, T) {
    let half = T::lit(0.5);
    let (w, h) = (b.width(), b.height());
    (b.x1 + half * w, b.y1 + half * h, w, h)
}

fn check_anchor<T: Scalar>(anchor: &Rect<T>) -> Result<(), GeometryError> {
    if anchor.width() > T::zero() && anchor.height() > T::zero() {
        Ok(())
    } else {
        Err(GeometryError::DegenerateAnchor(anchor.to_array().map(|v| v.as_f64())))
    }
}

/// `(tx, ty, tw, th)` taking `anchor` to `gt`.
pub fn encode_deltas<T: Scalar>(anchor: &Rect<T>, gt: &Rect<T>) -> Result<[T; 4], GeometryError> {
    check_anchor(anchor)?;
    let (ax, ay, aw, ah) = center_size(anchor);
    let (gx, gy, gw, gh) = center_size(gt);
    // A zero-size gt would give log(0); a tiny floor keeps the encoding finite.
    let tiny = T::lit(1e-6);
    Ok([(gx - ax) / aw, (gy - ay) / ah, (gw.max(tiny) / aw).ln(), (gh.max(tiny) / ah).ln()])
}

/// Inverse of [`encode_deltas`]; `tw` and `th` are clamped to `±MAX_LOG_RATIO`.
pub fn decode_deltas<T: Scalar>(anchor: &Rect<T>, d: [T; 4]) -> Result<Rect<T>, GeometryError> {
    check_anchor(anchor)?;
    let (ax, ay, aw, ah) = center_size(anchor);
    let lim = T::lit(MAX_LOG_RATIO);
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].max(-lim).min(lim).exp();
    let h = ah * d[3].max(-lim).min(lim).exp();
    let half = T::lit(0.5);
    Ok(Rect::new(cx - half * w, cy - half * h, cx + half * w, cy + half * h))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the gt at this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Labels every anchor against the gt set.
///
/// Positive when IoU ≥ `pos_iou` with some gt, or when the anchor attains a
/// gt's best (nonzero) IoU; negative when its best IoU is below `neg_iou`;
/// ignored otherwise.
pub fn assign_anchor_targets<T: Scalar>(
    anchors: &[Rect<T>],
    gt: &[Rect<T>],
    pos_iou: T,
    neg_iou: T,
) -> Result<Vec<AnchorLabel>, GeometryError> {
    if !(T::zero() <= neg_iou && neg_iou <= pos_iou && pos_iou <= T::one()) {
        return Err(GeometryError::Thresholds { neg: neg_iou.as_f64(), pos: pos_iou.as_f64() });
    }
    if gt.is_empty() {
        return Ok(vec![AnchorLabel::Negative; anchors.len()]);
    }
    let mut best_for_gt = vec![T::zero(); gt.len()];
    let mut labels = Vec::with_capacity(anchors.len());
    let overlaps: Vec<Vec<T>> = anchors.iter().map(|a| gt.iter().map(|g| iou(a, g)).collect()).collect();
    for row in &overlaps {
        let (mut best, mut arg) = (T::zero(), 0);
        for (g, &o) in row.iter().enumerate() {
            if o > best {
                best = o;
                arg = g;
            }
            if o > best_for_gt[g] {
                best_for_gt[g] = o;
            }
        }
        labels.push(if best >= pos_iou && best > T::zero() {
            AnchorLabel::Positive(arg)
        } else if best < neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        });
    }
    for (g, &best) in best_for_gt.iter().enumerate() {
        if best <= T::zero() {
            continue;
        }
        for (a, row) in overlaps.iter().enumerate() {
            if row[g] == best && !matches!(labels[a], AnchorLabel::Positive(_)) {
                labels[a] = AnchorLabel::Positive(g);
            }
        }
    }
    Ok(labels)
}
