use crate::geometry::{iou, Rect};
use crate::scalar::Scalar;

/// A scored box for one class, tagged with the image it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox<T> {
    pub image: usize,
    pub bbox: Rect<T>,
    pub score: T,
}

/// Marks each detection true or false positive by greedy matching in score
/// order. A detection claims the unmatched gt of its image with the highest
/// IoU, provided that IoU is at least `iou_thresh`. Ties in score keep input
/// order; ties in IoU go to the lower gt index.
pub fn match_detections<T: Scalar>(detections: &[ScoredBox<T>], gt: &[Vec<Rect<T>>], iou_thresh: T) -> Vec<bool> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.partial_cmp(&detections[a].score).unwrap_or(std::cmp::Ordering::Equal));
    let mut taken: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = vec![false; detections.len()];
    for i in order {
        let d = &detections[i];
        let Some(boxes) = gt.get(d.image) else { continue };
        let mut best: Option<(usize, T)> = None;
        for (j, g) in boxes.iter().enumerate() {
            if taken[d.image][j] {
                continue;
            }
            let o = iou(&d.bbox, g);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[d.image][j] = true;
            tp[i] = true;
        }
    }
    tp
}

/// Area under the all-points interpolated precision-recall curve.
///
/// `detections` of one class over all images, `gt[i]` the same class's boxes
/// in image `i`. Returns `None` when there is no gt at all.
pub fn average_precision<T: Scalar>(detections: &[ScoredBox<T>], gt: &[Vec<Rect<T>>], iou_thresh: T) -> Option<f64> {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let tp = match_detections(detections, gt, iou_thresh);
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.partial_cmp(&detections[a].score).unwrap_or(std::cmp::Ordering::Equal));
    let mut precision = Vec::with_capacity(order.len());
    let mut hits = 0usize;
    for (k, &i) in order.iter().enumerate() {
        hits += tp[i] as usize;
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    // Recall steps by 1/n_gt at each true positive, so the area is the sum of
    // the envelope there over n_gt.
    let area: f64 = order.iter().zip(&precision).filter(|(&i, _)| tp[i]).map(|(_, p)| p).sum();
    Some(area / n_gt as f64)
}
