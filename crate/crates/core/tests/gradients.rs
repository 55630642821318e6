mod common;

use common::*;
use csmc_core::McMode;

#[test]
fn layer_gradients_over_ten_seeds() {
    for seed in 0..10 {
        for (name, e) in layer_gradient_errors(seed) {
            assert!(e < LAYER_TOL, "{name} seed {seed}: {e:e}");
        }
    }
}

#[test]
fn mc_head_gradients() {
    let e = mc_head_gradient_error();
    assert!(e < LAYER_TOL, "{e:e}");
}

#[test]
fn stage_gradients_every_mode() {
    for mode in [McMode::Learned, McMode::Lsq, McMode::Off] {
        let e = stage_gradient_error(mode);
        assert!(e < GRAD_TOL, "{mode}: {e:e}");
    }
}

#[test]
fn total_loss_gradients_single_stage() {
    for mode in [McMode::Learned, McMode::Lsq, McMode::Off] {
        let e = total_loss_gradient_error(mode, 1);
        assert!(e < GRAD_TOL, "{mode}: {e:e}");
    }
}

#[test]
fn total_loss_gradients_chain_through_stages() {
    for mode in [McMode::Learned, McMode::Lsq] {
        let e = total_loss_gradient_error(mode, 2);
        assert!(e < GRAD_TOL, "{mode}: {e:e}");
    }
}
