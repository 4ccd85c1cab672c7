use crate::autodiff::{sigmoid, Tape, Tensor};
use crate::detector::network::{backbone, roi_head};
use crate::detector::{Detection, DetectorConfig, DetectorError, ImageForward, ParamStore, Proposal};
use crate::geometry::{decode_deltas, nms, Rect};

/// Turns RPN outputs into ranked proposals.
///
/// Decodes every anchor, clips to the image, drops boxes smaller than
/// `min_proposal_size`, keeps the `pre_nms_top_n` best, applies NMS and
/// returns at most `top_n` survivors by descending objectness.
pub fn proposals_from_outputs(
    logits: &[f32],
    deltas: &[f32],
    anchors: &[Rect<f32>],
    image_hw: (usize, usize),
    cfg: &DetectorConfig,
    top_n: usize,
) -> Vec<Proposal> {
    let (h, w) = (image_hw.0 as f32, image_hw.1 as f32);
    let mut cands: Vec<(Rect<f32>, f32)> = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let d = [deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]];
        let Ok(b) = decode_deltas(a, d) else { continue };
        let b = b.clip(w, h);
        if b.width() >= cfg.min_proposal_size && b.height() >= cfg.min_proposal_size && logits[i].is_finite() {
            cands.push((b, sigmoid(logits[i])));
        }
    }
    // Stable sort keeps anchor order among equal scores.
    cands.sort_by(|a, b| b.1.total_cmp(&a.1));
    cands.truncate(cfg.pre_nms_top_n);
    let boxes: Vec<Rect<f32>> = cands.iter().map(|c| c.0).collect();
    let scores: Vec<f32> = cands.iter().map(|c| c.1).collect();
    nms(&boxes, &scores, cfg.rpn_nms_iou)
        .into_iter()
        .take(top_n)
        .map(|i| Proposal { bbox: boxes[i], objectness: scores[i], image_index: 0 })
        .collect()
}

/// Backbone features averaged over all locations, one value per channel.
pub fn pooled_features(image: &Tensor<f32>, params: &ParamStore) -> Result<Vec<f32>, DetectorError> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let f = backbone(&mut tape, &p, image)?;
    let s = tape.shape(f).to_vec();
    let plane = s[2] * s[3];
    Ok(tape.data(f).chunks(plane).map(|c| c.iter().sum::<f32>() / plane as f32).collect())
}

/// RPN proposals for one image with frozen parameters.
pub fn propose(image: &Tensor<f32>, params: &ParamStore, cfg: &DetectorConfig, top_n: usize) -> Result<Vec<Proposal>, DetectorError> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let fwd = ImageForward::run(&mut tape, &p, cfg, image)?;
    Ok(proposals_from_outputs(tape.data(fwd.rpn_logits), tape.data(fwd.rpn_deltas), &fwd.anchors, fwd.image_hw, cfg, top_n))
}

/// Full inference path; the domain heads are never evaluated.
pub fn detect(image: &Tensor<f32>, params: &ParamStore, cfg: &DetectorConfig) -> Result<Vec<Detection>, DetectorError> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let fwd = ImageForward::run(&mut tape, &p, cfg, image)?;
    let props = proposals_from_outputs(
        tape.data(fwd.rpn_logits),
        tape.data(fwd.rpn_deltas),
        &fwd.anchors,
        fwd.image_hw,
        cfg,
        cfg.post_nms_top_n,
    );
    if props.is_empty() {
        return Ok(Vec::new());
    }
    let boxes: Vec<Rect<f32>> = props.iter().map(|p| p.bbox).collect();
    let out = roi_head(&mut tape, &p, cfg, fwd.features, &boxes)?;
    let probs = tape.softmax(out.cls_logits)?;
    let probs = tape.data(probs);
    let deltas = tape.data(out.bbox_deltas);
    let k1 = cfg.num_classes + 1;
    let (h, w) = (fwd.image_hw.0 as f32, fwd.image_hw.1 as f32);
    let s = cfg.bbox_stds;
    let mut dets = Vec::new();
    for class in 1..k1 {
        let mut cls_boxes = Vec::new();
        let mut cls_scores = Vec::new();
        for (r, roi) in boxes.iter().enumerate() {
            let score = probs[r * k1 + class];
            if !(score >= cfg.score_floor) {
                continue;
            }
            let o = (r * k1 + class) * 4;
            let d = [deltas[o] * s[0], deltas[o + 1] * s[1], deltas[o + 2] * s[2], deltas[o + 3] * s[3]];
            let b = decode_deltas(roi, d)?.clip(w, h);
            if b.area() > 0.0 {
                cls_boxes.push(b);
                cls_scores.push(score);
            }
        }
        for i in nms(&cls_boxes, &cls_scores, cfg.det_nms_iou) {
            dets.push(Detection { bbox: cls_boxes[i], category: class, score: cls_scores[i] });
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(cfg.max_detections);
    Ok(dets)
}
