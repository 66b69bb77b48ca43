mod common;

use common::*;
use tsmi::tokenizer::TokenizedWindow;

#[test]
fn reference_forward_agrees_with_model() {
    let (model, windows) = generic_model();
    let refs: Vec<&TokenizedWindow> = windows.iter().collect();
    let ours = model.batch_loss(&refs).unwrap();
    let theirs = reference_loss(&model.config, &model_params(&model), &windows);
    assert!((ours - theirs).abs() < 1e-5 * theirs.abs().max(1.0), "{ours} vs {theirs}");
}

#[test]
fn forecaster_gradients_by_layer_family() {
    let report = model_gradient_report(24);
    assert_eq!(report.len(), 6, "{report:?}");
    for (group, n, err) in &report {
        assert!(*n >= 20, "{group}: only {n} entries");
        assert!(*err < 1e-2, "{group}: relative error {err:e}");
    }
}

#[test]
fn sae_gradients_hold_support_fixed() {
    for (name, n, err) in sae_gradient_report(24) {
        assert!(n >= 20, "{name}: only {n} entries");
        assert!(err < 1e-2, "{name}: relative error {err:e}");
    }
}
