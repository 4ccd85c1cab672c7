use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::detector::network::{roi_head, ImageForward, RoiOutput};
use crate::detector::{proposals_from_outputs, Bound, DetectorConfig, DetectorError, Proposal};
use crate::geometry::{assign_anchor_targets, encode_deltas, iou, AnchorLabel, Rect};
use crate::synthdata::{DomainLabel, Sample};

/// Detection loss terms plus what the instance domain head needs.
pub struct DetectionLoss {
    pub l_rpn: Var,
    pub l_roi: Var,
    pub rois: Vec<Rect<f32>>,
    pub roi_out: RoiOutput,
    pub proposals: Vec<Proposal>,
}

/// Picks up to `rpn_batch` anchors, at most `rpn_pos_fraction` of them positive.
/// Returns `(positive, negative)` anchor indices.
pub fn sample_anchors<R: Rng + ?Sized>(labels: &[AnchorLabel], cfg: &DetectorConfig, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| matches!(labels[i], AnchorLabel::Positive(_))).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let max_pos = (cfg.rpn_batch as f32 * cfg.rpn_pos_fraction).floor() as usize;
    pos.truncate(max_pos);
    neg.truncate(cfg.rpn_batch - pos.len());
    (pos, neg)
}

fn mean_of(tape: &mut Tape<f32>, sum: Var, n: usize) -> Result<Var, DetectorError> {
    Ok(tape.scale(sum, 1.0 / n as f32)?)
}

/// Objectness cross-entropy over sampled anchors plus smooth-L1 on the
/// positives' deltas, each divided by the number of sampled anchors.
pub fn rpn_loss<R: Rng + ?Sized>(
    tape: &mut Tape<f32>,
    logits: Var,
    deltas: Var,
    anchors: &[Rect<f32>],
    gt: &[Rect<f32>],
    cfg: &DetectorConfig,
    rng: &mut R,
) -> Result<Var, DetectorError> {
    let labels = assign_anchor_targets(anchors, gt, cfg.rpn_pos_iou, cfg.rpn_neg_iou)?;
    let (pos, neg) = sample_anchors(&labels, cfg, rng);
    let rows: Vec<usize> = pos.iter().chain(&neg).copied().collect();
    let n = rows.len();
    if n == 0 {
        return Err(DetectorError::InvalidConfig("no anchors available for the RPN loss".into()));
    }
    let targets: Vec<f32> = (0..n).map(|i| if i < pos.len() { 1.0 } else { 0.0 }).collect();
    let picked = tape.gather_rows(logits, &rows)?;
    let ce = tape.sigmoid_cross_entropy_with(picked, &targets)?;
    let mut loss = mean_of(tape, ce, n)?;
    if !pos.is_empty() {
        let mut t = Vec::with_capacity(4 * pos.len());
        for &a in &pos {
            let AnchorLabel::Positive(g) = labels[a] else { unreachable!() };
            t.extend(encode_deltas(&anchors[a], &gt[g])?);
        }
        let pred = tape.gather_rows(deltas, &pos)?;
        let target = tape.constant(Tensor::new(vec![pos.len(), 4], t)?);
        let reg = tape.smooth_l1(pred, target)?;
        let reg = mean_of(tape, reg, n)?;
        loss = tape.add(loss, reg)?;
    }
    Ok(loss)
}

/// Sampled ROIs with their classification targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTargets {
    pub boxes: Vec<Rect<f32>>,
    /// 0 for background, otherwise the matched gt class.
    pub classes: Vec<usize>,
    /// Matched gt index for foreground ROIs.
    pub matched: Vec<Option<usize>>,
}

/// Draws up to `roi_batch` ROIs from `proposals ∪ gt`: foreground when IoU ≥
/// `roi_fg_iou` with some gt (capped at `roi_fg_fraction`), background otherwise.
pub fn sample_rois<R: Rng + ?Sized>(
    proposals: &[Rect<f32>],
    gt: &[Rect<f32>],
    gt_labels: &[usize],
    cfg: &DetectorConfig,
    rng: &mut R,
) -> RoiTargets {
    let cands: Vec<Rect<f32>> = proposals.iter().chain(gt).copied().collect();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, c) in cands.iter().enumerate() {
        let best = gt.iter().enumerate().map(|(g, b)| (g, iou(c, b))).fold(None, |acc: Option<(usize, f32)>, (g, o)| {
            match acc {
                Some((_, bo)) if bo >= o => acc,
                _ => Some((g, o)),
            }
        });
        match best {
            Some((g, o)) if o >= cfg.roi_fg_iou => fg.push((i, g)),
            _ => bg.push(i),
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let max_fg = ((cfg.roi_batch as f32 * cfg.roi_fg_fraction).round() as usize).min(cfg.roi_batch);
    fg.truncate(max_fg);
    bg.truncate(cfg.roi_batch - fg.len());
    let mut out = RoiTargets { boxes: Vec::new(), classes: Vec::new(), matched: Vec::new() };
    for &(i, g) in &fg {
        out.boxes.push(cands[i]);
        out.classes.push(gt_labels[g]);
        out.matched.push(Some(g));
    }
    for &i in &bg {
        out.boxes.push(cands[i]);
        out.classes.push(0);
        out.matched.push(None);
    }
    out
}

/// `(L_rpn, L_roi)` for a labelled source image.
///
/// Target-domain or stripped samples are refused: no target label may reach
/// the training losses.
pub fn compute_detection_loss<R: Rng + ?Sized>(
    tape: &mut Tape<f32>,
    p: &Bound,
    cfg: &DetectorConfig,
    sample: &Sample,
    fwd: &ImageForward,
    rng: &mut R,
) -> Result<DetectionLoss, DetectorError> {
    if sample.domain() != DomainLabel::Source {
        return Err(DetectorError::TargetSupervision);
    }
    let ann = sample.annotations().ok_or(DetectorError::MissingAnnotations)?;
    let l_rpn = rpn_loss(tape, fwd.rpn_logits, fwd.rpn_deltas, &fwd.anchors, &ann.boxes, cfg, rng)?;

    let proposals = proposals_from_outputs(
        tape.data(fwd.rpn_logits),
        tape.data(fwd.rpn_deltas),
        &fwd.anchors,
        fwd.image_hw,
        cfg,
        cfg.post_nms_top_n,
    );
    let prop_boxes: Vec<Rect<f32>> = proposals.iter().map(|p| p.bbox).collect();
    let targets = sample_rois(&prop_boxes, &ann.boxes, &ann.labels, cfg, rng);
    let n = targets.boxes.len();
    let roi_out = roi_head(tape, p, cfg, fwd.features, &targets.boxes)?;
    let ce = tape.softmax_cross_entropy(roi_out.cls_logits, &targets.classes)?;
    let mut l_roi = mean_of(tape, ce, n)?;

    let k1 = cfg.num_classes + 1;
    let fg: Vec<usize> = (0..n).filter(|&r| targets.classes[r] > 0).collect();
    if !fg.is_empty() {
        let s = cfg.bbox_stds;
        let mut rows = Vec::with_capacity(fg.len());
        let mut t = Vec::with_capacity(4 * fg.len());
        for &r in &fg {
            rows.push(r * k1 + targets.classes[r]);
            let g = targets.matched[r].expect("foreground ROI has a match");
            let d = encode_deltas(&targets.boxes[r], &ann.boxes[g])?;
            t.extend([d[0] / s[0], d[1] / s[1], d[2] / s[2], d[3] / s[3]]);
        }
        let per_class = tape.reshape(roi_out.bbox_deltas, vec![n * k1, 4])?;
        let pred = tape.gather_rows(per_class, &rows)?;
        let target = tape.constant(Tensor::new(vec![fg.len(), 4], t)?);
        let reg = tape.smooth_l1(pred, target)?;
        let reg = mean_of(tape, reg, n)?;
        l_roi = tape.add(l_roi, reg)?;
    }
    Ok(DetectionLoss { l_rpn, l_roi, rois: targets.boxes, roi_out, proposals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn single_anchor_micro_case_matches_hand_computation() {
        let cfg = DetectorConfig::default();
        let anchor = Rect::new(0.0f32, 0.0, 8.0, 8.0);
        let gt = Rect::new(1.0f32, 0.0, 9.0, 10.0);
        let mut tape = Tape::new();
        let logit = 0.3f32;
        let d = [0.1f32, -0.2, 0.05, 0.4];
        let l = tape.leaf(Tensor::new(vec![1, 1], vec![logit]).unwrap().with_requires_grad(true));
        let dv = tape.leaf(Tensor::new(vec![1, 4], d.to_vec()).unwrap().with_requires_grad(true));
        let loss = rpn_loss(&mut tape, l, dv, &[anchor], &[gt], &cfg, &mut rng()).unwrap();

        // Positive by the argmax rule: CE with label 1 is log(1 + e^{-z}).
        let ce = (1.0f64 + (-(logit as f64)).exp()).ln();
        // Targets: (1/8, 1/8, ln 1, ln 1.25).
        let t = [0.125f64, 0.125, 0.0, 1.25f64.ln()];
        let sl1: f64 = d
            .iter()
            .zip(t)
            .map(|(&p, t)| {
                let x = (p as f64 - t).abs();
                if x < 1.0 { 0.5 * x * x } else { x - 0.5 }
            })
            .sum();
        let got = tape.value(loss).item().unwrap() as f64;
        assert!((got - (ce + sl1)).abs() < 1e-6, "{got} vs {}", ce + sl1);
    }

    #[test]
    fn no_gt_gives_classification_only() {
        let cfg = DetectorConfig::default();
        let anchors: Vec<Rect<f32>> = (0..40).map(|i| Rect::new(i as f32, 0.0, i as f32 + 8.0, 8.0)).collect();
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(vec![40, 1]).unwrap().with_requires_grad(true));
        let dv = tape.leaf(Tensor::zeros(vec![40, 4]).unwrap().with_requires_grad(true));
        let loss = rpn_loss(&mut tape, l, dv, &anchors, &[], &cfg, &mut rng()).unwrap();
        // 32 negatives at logit 0: mean CE is ln 2.
        assert!((tape.value(loss).item().unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
        tape.backward(loss).unwrap();
        assert!(tape.grad(dv).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn confident_correct_predictions_drive_loss_to_zero() {
        let cfg = DetectorConfig::default();
        let anchor = Rect::new(0.0f32, 0.0, 8.0, 8.0);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(vec![1, 1], vec![60.0]).unwrap());
        let dv = tape.constant(Tensor::zeros(vec![1, 4]).unwrap());
        let loss = rpn_loss(&mut tape, l, dv, &[anchor], &[anchor], &cfg, &mut rng()).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-6);
    }

    #[test]
    fn anchor_sampling_respects_caps() {
        let cfg = DetectorConfig::default();
        let mut labels = vec![AnchorLabel::Positive(0); 40];
        labels.extend(vec![AnchorLabel::Negative; 100]);
        labels.extend(vec![AnchorLabel::Ignore; 10]);
        let (p, n) = sample_anchors(&labels, &cfg, &mut rng());
        assert_eq!((p.len(), n.len()), (16, 16));
        let few = [AnchorLabel::Positive(0), AnchorLabel::Negative, AnchorLabel::Ignore];
        let (p, n) = sample_anchors(&few, &cfg, &mut rng());
        assert_eq!((p, n), (vec![0], vec![1]));
    }

    #[test]
    fn roi_sampling_labels_by_overlap() {
        let cfg = DetectorConfig::default();
        let gt = [Rect::new(0.0f32, 0.0, 10.0, 10.0)];
        let props = [Rect::new(0.0f32, 0.0, 10.0, 9.0), Rect::new(30.0, 30.0, 40.0, 40.0)];
        let t = sample_rois(&props, &gt, &[2], &cfg, &mut rng());
        assert_eq!(t.boxes.len(), 3);
        for (b, &c) in t.boxes.iter().zip(&t.classes) {
            assert_eq!(c, if iou(b, &gt[0]) >= 0.5 { 2 } else { 0 });
        }
        assert_eq!(t.classes.iter().filter(|&&c| c == 2).count(), 2);
    }

    #[test]
    fn target_samples_are_refused() {
        let cfg = DetectorConfig::default();
        let params = init_params(&cfg, 0);
        let img = Tensor::full(vec![3, 32, 32], 0.5).unwrap();
        let s = Sample::new(img.clone(), vec![Rect::new(2.0, 2.0, 12.0, 12.0)], vec![1], DomainLabel::Target).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let fwd = ImageForward::run(&mut tape, &p, &cfg, &img).unwrap();
        let err = compute_detection_loss(&mut tape, &p, &cfg, &s, &fwd, &mut rng());
        assert!(matches!(err, Err(DetectorError::TargetSupervision)));
        assert_eq!(s.label_reads(), 0);
        let stripped = s.with_domain(DomainLabel::Source).stripped();
        let err = compute_detection_loss(&mut tape, &p, &cfg, &stripped, &fwd, &mut rng());
        assert!(matches!(err, Err(DetectorError::MissingAnnotations)));
    }

    #[test]
    fn source_loss_is_finite_and_reaches_every_detector_layer() {
        let cfg = DetectorConfig::default();
        let params = init_params(&cfg, 3);
        let mut img = Tensor::full(vec![3, 32, 32], 0.4).unwrap();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 31) % 17) as f32 / 17.0;
        }
        let s = Sample::new(img.clone(), vec![Rect::new(4.0, 4.0, 20.0, 20.0)], vec![3], DomainLabel::Source).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let fwd = ImageForward::run(&mut tape, &p, &cfg, &img).unwrap();
        let dl = compute_detection_loss(&mut tape, &p, &cfg, &s, &fwd, &mut rng()).unwrap();
        let total = tape.add(dl.l_rpn, dl.l_roi).unwrap();
        assert!(tape.value(total).is_finite());
        tape.backward(total).unwrap();
        let grads = p.grads(&tape);
        for ((name, _), g) in params.iter().zip(&grads) {
            let nonzero = g.iter().any(|&v| v != 0.0);
            if name.starts_with("da.") {
                assert!(!nonzero, "{name} must not see detection gradients");
            } else if name.ends_with(".w") {
                assert!(nonzero, "{name} received no gradient");
            }
        }
    }
}
