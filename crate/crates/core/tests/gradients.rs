mod common;

use common::gradients::{worst_case, worst_loss_case, Conditioning, ADAPTATION_LOSSES, PRIMITIVES};

#[test]
fn every_primitive_passes_finite_differences_at_f32() {
    for (i, name) in PRIMITIVES.iter().enumerate() {
        let worst = worst_case::<f32>(name, 20, 1000 + i as u64, Conditioning::F32);
        assert!(worst < 1e-3, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn every_primitive_passes_unconditioned_finite_differences_at_f64() {
    for (i, name) in PRIMITIVES.iter().enumerate() {
        let worst = worst_case::<f64>(name, 20, 2000 + i as u64, Conditioning::Free);
        // Central differences at this step carry O(h^2) truncation error.
        assert!(worst < 1e-4, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn adaptation_losses_pass_finite_differences() {
    for (i, name) in ADAPTATION_LOSSES.iter().enumerate() {
        let worst = worst_loss_case::<f32>(name, 20, 3000 + i as u64, Conditioning::F32);
        assert!(worst < 1e-3, "{name} at f32: max relative error {worst:e}");
        let worst = worst_loss_case::<f64>(name, 20, 4000 + i as u64, Conditioning::Free);
        assert!(worst < 1e-4, "{name} at f64: max relative error {worst:e}");
    }
}
