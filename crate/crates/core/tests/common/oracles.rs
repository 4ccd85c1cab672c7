//! Brute-force reference implementations and random fixtures.

use dafrcnn::detector::Detection;
use dafrcnn::evaluation::ScoredBox;
use dafrcnn::geometry::{iou, Rect};
use rand::{Rng, RngExt};

/// Keeps box `i` iff no kept box ranked before it overlaps it by more than
/// `thr`. Rank: score descending, then index.
pub fn nms_oracle(boxes: &[Rect<f64>], scores: &[f64], thr: f64) -> Vec<usize> {
    let rank = |i: usize| (0..boxes.len()).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let mut by_rank: Vec<usize> = (0..boxes.len()).collect();
    by_rank.sort_by_key(|&i| rank(i));
    let mut kept: Vec<usize> = Vec::new();
    for i in by_rank {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thr) {
            kept.push(i);
        }
    }
    kept
}

/// Rank order of detections: score descending, input order on ties.
fn ranked(dets: &[ScoredBox<f64>]) -> Vec<usize> {
    let mut r: Vec<usize> = (0..dets.len()).collect();
    for a in 0..r.len() {
        for b in (a + 1..r.len()).rev() {
            if dets[r[b]].score > dets[r[b - 1]].score {
                r.swap(b, b - 1);
            }
        }
    }
    r
}

/// True positives within the first `k` ranked detections, matching greedily
/// from scratch.
fn hits_in_prefix(dets: &[ScoredBox<f64>], order: &[usize], gt: &[Vec<Rect<f64>>], thr: f64, k: usize) -> usize {
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = 0;
    for &i in &order[..k] {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt[d.image].iter().enumerate() {
            let o = iou(&d.bbox, g);
            if !used[d.image][j] && o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[d.image][j] = true;
            hits += 1;
        }
    }
    hits
}

/// All-points AP from the full precision/recall table of every prefix.
pub fn ap_oracle(dets: &[ScoredBox<f64>], gt: &[Vec<Rect<f64>>], thr: f64) -> Option<f64> {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let order = ranked(dets);
    let hits: Vec<usize> = (0..=dets.len()).map(|k| hits_in_prefix(dets, &order, gt, thr, k)).collect();
    let precision = |k: usize| hits[k] as f64 / k as f64;
    let mut area = 0.0;
    for k in 1..=dets.len() {
        if hits[k] > hits[k - 1] {
            area += (k..=dets.len()).map(precision).fold(f64::MIN, f64::max);
        }
    }
    Some(area / n_gt as f64)
}

pub fn mbo_oracle(proposals: &[Vec<Rect<f64>>], gt: &[Vec<Rect<f64>>], top_p: usize) -> Option<f64> {
    let mut best = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for b in g {
            let mut m = 0.0f64;
            for p in proposals[i].iter().take(top_p) {
                m = m.max(iou(p, b));
            }
            best.push(m);
        }
    }
    if best.is_empty() {
        None
    } else {
        Some(best.iter().sum::<f64>() / best.len() as f64)
    }
}

/// A box on a coarse grid inside `[0, extent]`, so IoU ties and exact
/// threshold hits occur.
pub fn grid_box<R: Rng>(rng: &mut R, extent: f64) -> Rect<f64> {
    let step = extent / 16.0;
    let x1 = rng.random_range(0..14) as f64 * step;
    let y1 = rng.random_range(0..14) as f64 * step;
    let w = rng.random_range(1..=(16 - (x1 / step) as i32).min(8)) as f64 * step;
    let h = rng.random_range(1..=(16 - (y1 / step) as i32).min(8)) as f64 * step;
    Rect::new(x1, y1, x1 + w, y1 + h)
}

/// Scores from a small set, so ties occur.
pub fn coarse_score<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(0..10) as f64 / 10.0
}

/// Detections near the gt of `images` images, some displaced, some random.
pub fn ap_fixture<R: Rng>(rng: &mut R, images: usize, max_dets: usize, max_gt: usize) -> (Vec<ScoredBox<f64>>, Vec<Vec<Rect<f64>>>) {
    let n_gt = rng.random_range(0..=max_gt);
    let mut gt = vec![Vec::new(); images];
    for _ in 0..n_gt {
        gt[rng.random_range(0..images)].push(grid_box(rng, 64.0));
    }
    let n_det = rng.random_range(0..=max_dets);
    let mut dets = Vec::with_capacity(n_det);
    for _ in 0..n_det {
        let image = rng.random_range(0..images);
        let bbox = match gt[image].len() {
            0 => grid_box(rng, 64.0),
            n if rng.random::<f64>() < 0.7 => {
                let g = gt[image][rng.random_range(0..n)];
                let dx = rng.random_range(-2..=2) as f64 * 2.0;
                Rect::new(g.x1 + dx, g.y1, g.x2 + dx, g.y2)
            }
            _ => grid_box(rng, 64.0),
        };
        dets.push(ScoredBox { image, bbox, score: coarse_score(rng) });
    }
    (dets, gt)
}

pub fn to_detections(dets: &[ScoredBox<f64>], images: usize, classes: usize, rng: &mut impl Rng) -> Vec<Vec<Detection>> {
    let mut out = vec![Vec::new(); images];
    for d in dets {
        out[d.image].push(Detection {
            bbox: d.bbox.cast(),
            category: rng.random_range(1..=classes),
            score: d.score as f32,
        });
    }
    out
}
