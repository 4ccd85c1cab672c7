use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::geometry::{iou, Rect};
use crate::scalar::Scalar;

/// Mean over every gt box of its best IoU against the first `top_p`
/// proposals of its image. `None` when there are no gt boxes.
pub fn proposal_mean_best_overlap<T: Scalar>(proposals: &[Vec<Rect<T>>], gt: &[Vec<Rect<T>>], top_p: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, boxes) in gt.iter().enumerate() {
        let props = proposals.get(i).map_or(&[][..], |p| &p[..p.len().min(top_p)]);
        for g in boxes {
            let best = props.iter().map(|p| iou(p, g).as_f64()).fold(0.0, f64::max);
            sum += best;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Lower IoU bound of a correct detection (exclusive).
pub const CORRECT_IOU: f64 = 0.5;
/// Lower IoU bound of a mislocalized detection (inclusive).
pub const MISLOCALIZED_IOU: f64 = 0.3;

/// Counts of the top-ranked detections by error type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTaxonomy {
    pub correct: usize,
    pub mislocalized: usize,
    pub background: usize,
}

impl ErrorTaxonomy {
    pub fn total(&self) -> usize {
        self.correct + self.mislocalized + self.background
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Correct,
    Mislocalized,
    Background,
}

/// IoU above 0.5 is correct, `[0.3, 0.5]` mislocalized, below 0.3 background.
pub fn classify_overlap(best_iou: f64) -> ErrorKind {
    if best_iou > CORRECT_IOU {
        ErrorKind::Correct
    } else if best_iou >= MISLOCALIZED_IOU {
        ErrorKind::Mislocalized
    } else {
        ErrorKind::Background
    }
}

/// Buckets the `top_r` highest-scoring detections over all images.
///
/// `detections[i]` and `gt[i]` belong to image `i`; a gt entry is a box and its
/// class. Overlap is measured only against gt of the detection's own class.
/// Score ties keep image order, then detection order.
pub fn categorize_detections(detections: &[Vec<Detection>], gt: &[Vec<(Rect<f32>, usize)>], top_r: usize) -> ErrorTaxonomy {
    let mut all: Vec<(usize, &Detection)> =
        detections.iter().enumerate().flat_map(|(i, ds)| ds.iter().map(move |d| (i, d))).collect();
    all.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut t = ErrorTaxonomy::default();
    for (i, d) in all.into_iter().take(top_r) {
        let best = gt
            .get(i)
            .into_iter()
            .flatten()
            .filter(|(_, c)| *c == d.category)
            .map(|(g, _)| iou(&d.bbox, g) as f64)
            .fold(0.0, f64::max);
        match classify_overlap(best) {
            ErrorKind::Correct => t.correct += 1,
            ErrorKind::Mislocalized => t.mislocalized += 1,
            ErrorKind::Background => t.background += 1,
        }
    }
    t
}
