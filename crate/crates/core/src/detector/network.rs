use crate::autodiff::{Tape, Tensor, Var};
use crate::detector::{Bound, DetectorConfig, DetectorError, MIN_IMAGE_SIDE};
use crate::geometry::{generate_anchors, Rect};

fn conv(tape: &mut Tape<f32>, p: &Bound, name: &str, x: Var, pad: usize) -> Result<Var, DetectorError> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    Ok(tape.conv2d(x, w, b, 1, pad)?)
}

pub(crate) fn fc(tape: &mut Tape<f32>, p: &Bound, name: &str, x: Var) -> Result<Var, DetectorError> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    Ok(tape.linear(x, w, b)?)
}

/// `image[3,H,W]` to features `[1,64,H/4,W/4]`.
pub fn backbone(tape: &mut Tape<f32>, p: &Bound, image: &Tensor<f32>) -> Result<Var, DetectorError> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] < MIN_IMAGE_SIDE || s[2] < MIN_IMAGE_SIDE {
        return Err(DetectorError::BadImage { shape: s.to_vec(), min: MIN_IMAGE_SIDE });
    }
    let x = tape.constant(image.clone().reshape(vec![1, s[0], s[1], s[2]])?);
    let mut h = conv(tape, p, "det.conv1", x, 1)?;
    h = tape.relu(h)?;
    h = tape.max_pool2d(h, 2, 2)?;
    h = conv(tape, p, "det.conv2", h, 1)?;
    h = tape.relu(h)?;
    h = tape.max_pool2d(h, 2, 2)?;
    h = conv(tape, p, "det.conv3", h, 1)?;
    h = tape.relu(h)?;
    h = conv(tape, p, "det.conv4", h, 1)?;
    Ok(tape.relu(h)?)
}

/// Objectness logits `[N_a,1]` and deltas `[N_a,4]`, anchors ordered by location then anchor.
pub fn rpn_head(tape: &mut Tape<f32>, p: &Bound, features: Var) -> Result<(Var, Var), DetectorError> {
    let mut h = conv(tape, p, "det.rpn.conv", features, 1)?;
    h = tape.relu(h)?;
    let logits = conv(tape, p, "det.rpn.cls", h, 0)?;
    let deltas = conv(tape, p, "det.rpn.bbox", h, 0)?;
    let logits = tape.channels_to_rows(logits)?;
    let deltas = tape.channels_to_rows(deltas)?;
    let n = tape.value(logits).numel();
    let logits = tape.reshape(logits, vec![n, 1])?;
    let deltas = tape.reshape(deltas, vec![n, 4])?;
    Ok((logits, deltas))
}

/// Backbone and RPN outputs for one image.
pub struct ImageForward {
    pub features: Var,
    pub feature_hw: (usize, usize),
    pub image_hw: (usize, usize),
    pub rpn_logits: Var,
    pub rpn_deltas: Var,
    pub anchors: Vec<Rect<f32>>,
}

impl ImageForward {
    pub fn run(tape: &mut Tape<f32>, p: &Bound, cfg: &DetectorConfig, image: &Tensor<f32>) -> Result<Self, DetectorError> {
        let features = backbone(tape, p, image)?;
        let fs = tape.shape(features).to_vec();
        let (rpn_logits, rpn_deltas) = rpn_head(tape, p, features)?;
        let anchors = generate_anchors(&cfg.anchors, fs[2], fs[3]);
        debug_assert_eq!(anchors.len(), tape.value(rpn_logits).numel());
        Ok(Self {
            features,
            feature_hw: (fs[2], fs[3]),
            image_hw: (image.shape()[1], image.shape()[2]),
            rpn_logits,
            rpn_deltas,
            anchors,
        })
    }
}

/// ROI-head outputs for `R` boxes.
pub struct RoiOutput {
    /// `[R,128]` after the second fully connected layer.
    pub features: Var,
    /// `[R,K+1]`, background at column 0.
    pub cls_logits: Var,
    /// `[R,4(K+1)]`, four normalized deltas per class.
    pub bbox_deltas: Var,
}

pub fn roi_head(tape: &mut Tape<f32>, p: &Bound, cfg: &DetectorConfig, features: Var, boxes: &[Rect<f32>]) -> Result<RoiOutput, DetectorError> {
    let coords: Vec<[f32; 4]> = boxes.iter().map(|b| b.to_array()).collect();
    let pooled = tape.roi_pool(features, &coords, cfg.pool_size, cfg.pool_size, cfg.anchors.feature_stride)?;
    let flat = tape.flatten(pooled)?;
    let mut h = fc(tape, p, "det.fc6", flat)?;
    h = tape.relu(h)?;
    h = fc(tape, p, "det.fc7", h)?;
    let features = tape.relu(h)?;
    let cls_logits = fc(tape, p, "det.cls", features)?;
    let bbox_deltas = fc(tape, p, "det.bbox", features)?;
    Ok(RoiOutput { features, cls_logits, bbox_deltas })
}
