use crate::autodiff::Tensor;
use crate::training::TrainError;

/// One momentum-SGD update per tensor:
/// `g' = g + wd·w; v ← momentum·v + g'; w ← w − lr·v`.
pub fn sgd_step(
    params: &mut [Tensor<f32>],
    grads: &[Vec<f32>],
    velocity: &mut [Vec<f32>],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::Shape(format!("{} params, {} grads, {} buffers", params.len(), grads.len(), velocity.len())));
    }
    for (i, ((p, g), v)) in params.iter_mut().zip(grads).zip(velocity.iter_mut()).enumerate() {
        if p.numel() != g.len() || p.numel() != v.len() {
            return Err(TrainError::Shape(format!("tensor {i}: {} values, {} grads, {} buffer", p.numel(), g.len(), v.len())));
        }
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            let gd = gi + weight_decay * *w;
            *vi = momentum * *vi + gd;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let sq: f64 = grads.iter().flatten().map(|&g| g as f64 * g as f64).sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}
