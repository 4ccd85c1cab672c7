use crate::autodiff::{Tape, Var};
use crate::detector::{Bound, DetectorError};

/// Per-activation domain logits `[1,1,H_f,W_f]` from backbone features.
///
/// Two 1×1 convolutions (64→32→1) with relu between, so every feature-map
/// location gets its own prediction. With `reverse` the features first pass
/// through gradient reversal, which is how training uses it; `false` gives the
/// plain classifier graph.
pub fn image_domain_head(tape: &mut Tape<f32>, p: &Bound, features: Var, reverse: bool) -> Result<Var, DetectorError> {
    let x = if reverse { tape.grad_reverse(features)? } else { features };
    let mut h = tape.conv2d(x, p.var("da.img.conv1.w")?, p.var("da.img.conv1.b")?, 1, 0)?;
    h = tape.relu(h)?;
    Ok(tape.conv2d(h, p.var("da.img.conv2.w")?, p.var("da.img.conv2.b")?, 1, 0)?)
}

/// Per-ROI domain logits `[R,1]` from ROI feature vectors `[R,128]`.
pub fn instance_domain_head(tape: &mut Tape<f32>, p: &Bound, roi_features: Var, reverse: bool) -> Result<Var, DetectorError> {
    let x = if reverse { tape.grad_reverse(roi_features)? } else { roi_features };
    let mut h = tape.linear(x, p.var("da.ins.fc1.w")?, p.var("da.ins.fc1.b")?)?;
    h = tape.relu(h)?;
    Ok(tape.linear(h, p.var("da.ins.fc2.w")?, p.var("da.ins.fc2.b")?)?)
}
