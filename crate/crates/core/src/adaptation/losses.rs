//! Domain-classification losses on logits, `p = sigmoid(logit)`.

use crate::adaptation::{AdaptationError, Reduction};
use crate::autodiff::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::synthdata::DomainLabel;

fn reduce<T: Scalar>(tape: &mut Tape<T>, sum: Var, count: usize, reduction: Reduction) -> Result<Var, AdaptationError> {
    Ok(match reduction {
        Reduction::Mean => tape.scale(sum, T::one() / T::lit(count as f64))?,
        Reduction::Sum => sum,
    })
}

fn zero<T: Scalar>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

fn label<T: Scalar>(d: DomainLabel) -> T {
    T::lit(d.as_u8() as f64)
}

/// Cross-entropy of every activation of every map against its image's domain,
/// reduced jointly over all `(i, u, v)`.
pub fn image_domain_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logit_maps: &[Var],
    labels: &[DomainLabel],
    reduction: Reduction,
) -> Result<Var, AdaptationError> {
    if logit_maps.is_empty() || logit_maps.len() != labels.len() {
        return Err(AdaptationError::Input(format!("{} maps for {} labels", logit_maps.len(), labels.len())));
    }
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (&m, &d) in logit_maps.iter().zip(labels) {
        let n = tape.value(m).numel();
        let ce = tape.sigmoid_cross_entropy_with(m, &vec![label::<T>(d); n])?;
        count += n;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    reduce(tape, total.expect("non-empty"), count, reduction)
}

/// Instance loss value plus whether it degenerated to 0 for lack of ROIs.
pub struct InstanceLoss {
    pub loss: Var,
    pub no_rois: bool,
}

/// Cross-entropy of every ROI against its image's domain. `logits[i]` is
/// `[R_i,1]`, or `None` when image `i` has no ROIs.
pub fn instance_domain_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &[Option<Var>],
    labels: &[DomainLabel],
    reduction: Reduction,
) -> Result<InstanceLoss, AdaptationError> {
    if logits.len() != labels.len() {
        return Err(AdaptationError::Input(format!("{} ROI sets for {} labels", logits.len(), labels.len())));
    }
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (l, &d) in logits.iter().zip(labels) {
        let Some(l) = *l else { continue };
        let n = tape.value(l).numel();
        let ce = tape.sigmoid_cross_entropy_with(l, &vec![label::<T>(d); n])?;
        count += n;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    match total {
        Some(t) => Ok(InstanceLoss { loss: reduce(tape, t, count, reduction)?, no_rois: false }),
        None => {
            log::warn!("instance domain loss has no ROIs; contributing 0");
            Ok(InstanceLoss { loss: zero(tape), no_rois: true })
        }
    }
}

/// `Σ_{i,j} |mean_{u,v} p_i^{(u,v)} − p_{i,j}|`, reduced over all ROIs.
///
/// Gradients reach both heads unless `stop_image_side`, which treats each
/// image's mean probability as a constant. Images without ROIs contribute nothing.
pub fn consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logit_maps: &[Var],
    instance_logits: &[Option<Var>],
    stop_image_side: bool,
    reduction: Reduction,
) -> Result<Var, AdaptationError> {
    if logit_maps.len() != instance_logits.len() {
        return Err(AdaptationError::Input(format!("{} maps for {} ROI sets", logit_maps.len(), instance_logits.len())));
    }
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (&m, ins) in logit_maps.iter().zip(instance_logits) {
        let Some(ins) = *ins else { continue };
        let pm = tape.sigmoid(m)?;
        let mut mean = tape.mean(pm)?;
        if stop_image_side {
            mean = tape.detach(mean);
        }
        let pi = tape.sigmoid(ins)?;
        let diff = tape.sub(pi, mean)?;
        let dist = tape.abs(diff)?;
        count += tape.value(dist).numel();
        let s = tape.sum(dist)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => reduce(tape, t, count, reduction),
        None => Ok(zero(tape)),
    }
}
