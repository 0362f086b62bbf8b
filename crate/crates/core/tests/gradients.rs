mod common;

use common::*;
use countlab::intervene::{FocusTerm, QuerySet};
use countlab::model::{loss_and_grad, HeadPatch, ModelConfig, OverrideSet};

/// Denominator floor for the relative error: entries whose gradient is
/// below this are judged on absolute error instead.
const FLOOR: f64 = 1e-3;

#[test]
fn sft_and_focus_gradients_match_central_differences() {
    let (scene, seq) = micro_example(3, 11);
    let prior = micro_prior(&scene);
    for seed in 0..3 {
        let p = wide_params(ModelConfig::micro(), seed, 0.2);
        let r = grad_check(&p, &seq, &OverrideSet::new(), Some(&prior), &[0, 1], 1.0, 1e-3, FLOOR);
        assert!(r.worst_rel < 1e-4, "seed {seed}: {:.3e} at {}", r.worst_rel, r.worst_name);
        assert!(r.max_abs_grad > 0.1);
    }
}

#[test]
fn error_shrinks_quadratically_with_step() {
    // Without a floor, the small-step check is tight everywhere.
    let (scene, seq) = micro_example(2, 4);
    let prior = micro_prior(&scene);
    let p = wide_params(ModelConfig::micro(), 7, 0.2);
    let r = grad_check(&p, &seq, &OverrideSet::new(), Some(&prior), &[1], 1.0, 1e-4, 1e-9);
    assert!(r.worst_rel < 1e-4, "{:.3e} at {}", r.worst_rel, r.worst_name);
}

#[test]
fn gradients_through_overrides() {
    let (scene, seq) = micro_example(2, 5);
    let prior = micro_prior(&scene);
    let p = wide_params(ModelConfig::micro(), 1, 0.2);
    let mut ov = OverrideSet::new();
    ov.logit_multiplier.insert((0, 1), 1.3);
    ov.head_scale.insert((1, 0), 0.7);
    ov.head_output.insert((1, 1), HeadPatch::Constant(vec![0.1, -0.2, 0.3, 0.05]));
    ov.residual.insert((1, 3), vec![0.5; 8]);
    let r = grad_check(&p, &seq, &ov, Some(&prior), &[0, 1], 0.5, 1e-3, FLOOR);
    assert!(r.worst_rel < 1e-4, "{:.3e} at {}", r.worst_rel, r.worst_name);
}

#[test]
fn lambda_zero_is_pure_sft_and_terms_add() {
    let (scene, seq) = micro_example(3, 2);
    let prior = micro_prior(&scene);
    let p = wide_params(ModelConfig::micro(), 3, 0.2);
    let q = QuerySet::AfterImage.positions(&seq);
    let ov = OverrideSet::new();
    let grad_with = |lambda: f64, layers: &[usize]| {
        let term = FocusTerm { layers, queries: &q, prior: &prior, lambda, eps: 1e-8 };
        let mut g = p.zeros_like();
        loss_and_grad(&p, &seq, &ov, Some(&term), &mut g).unwrap();
        g.data
    };
    let mut plain = p.zeros_like();
    loss_and_grad(&p, &seq, &ov, None, &mut plain).unwrap();
    assert_eq!(grad_with(0.0, &[0, 1]), plain.data);

    let one = grad_with(1.0, &[0, 1]);
    let two = grad_with(2.0, &[0, 1]);
    for ((a, b), c) in plain.data.iter().zip(&one).zip(&two) {
        // g(2) - g(1) == g(1) - g(0)
        assert!(((c - b) - (b - a)).abs() < 1e-12);
    }
}

#[test]
fn absent_tokens_and_unused_positions_get_no_gradient() {
    let (_, seq) = micro_example(3, 2);
    let p = wide_params(ModelConfig::micro(), 3, 0.2);
    let mut g = p.zeros_like();
    loss_and_grad(&p, &seq, &OverrideSet::new(), None, &mut g).unwrap();
    let d = p.cfg.d_model;
    let tok = g.s(&g.layout.token_embed);
    // image positions take patch embeddings, not token embeddings
    let used: Vec<usize> = (0..seq.len()).filter(|i| !seq.image_range().contains(i)).map(|i| seq.tokens[i]).collect();
    for id in 0..p.cfg.vocab_size {
        let row = &tok[id * d..(id + 1) * d];
        assert_eq!(row.iter().any(|&v| v != 0.0), used.contains(&id), "token {id}");
    }
    let pos = g.s(&g.layout.pos_embed);
    assert!(pos[seq.len() * d..].iter().all(|&v| v == 0.0));
}
