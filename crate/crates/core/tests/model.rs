mod common;

use common::*;
use countlab::model::linalg::argmax;
use countlab::model::{
    build_sequence, forward, generate_answer, load_checkpoint, loss_sft, train, Capture, ModelConfig,
    OptimizerConfig, OverrideSet, Params, TrainExample,
};
use countlab::synth::{gen_syndot, CanvasSpec, QARecord, Task};
use countlab::vocab::Vocab;

fn toy_seq(count: usize, seed: u64) -> countlab::model::TokenSequence {
    let scene = gen_syndot(CanvasSpec::toy(), count, 2, seed).unwrap();
    build_sequence(&QARecord::new(&scene, Task::Count).unwrap(), &scene, &ModelConfig::toy()).unwrap()
}

#[test]
fn attention_rows_are_causal_distributions() {
    let p = Params::init(ModelConfig::toy(), 0).unwrap();
    let seq = toy_seq(4, 1);
    let out = forward(&p, &seq, &OverrideSet::new(), Capture::ALL).unwrap();
    let tr = &out.trace;
    for l in 0..p.cfg.n_layers {
        for h in 0..p.cfg.n_heads {
            for i in 0..seq.len() {
                let row = tr.attn_row(l, h, i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn residual_bookkeeping_and_head_decomposition() {
    let p = wide_params(ModelConfig::toy(), 2, 0.1);
    let seq = toy_seq(3, 2);
    let tr = forward(&p, &seq, &OverrideSet::new(), Capture::ALL).unwrap().trace;
    let (d, dh, t) = (p.cfg.d_model, p.cfg.d_head, seq.len());
    for l in 0..p.cfg.n_layers {
        for i in 0..t * d {
            let want = tr.residuals[l][i] + tr.attn_out[l][i] + tr.mlp_out[l][i];
            assert!((tr.residuals[l + 1][i] - want).abs() < 1e-6);
        }
        // sum over heads of (zero-padded head output) W_O
        let mut sum = vec![0.0; t * d];
        for h in 0..p.cfg.n_heads {
            let block = p.wo_block(l, h);
            for pos in 0..t {
                let hv = tr.head_output(l, h, pos);
                for j in 0..d {
                    sum[pos * d + j] += (0..dh).map(|k| hv[k] * block[k * d + j]).sum::<f64>();
                }
            }
        }
        let full = &tr.attn_out[l];
        let num: f64 = sum.iter().zip(full).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = full.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den < 1e-5);
    }
}

#[test]
fn overrides_identity_cases() {
    let p = Params::init(ModelConfig::toy(), 3).unwrap();
    let seq = toy_seq(2, 3);
    let a = forward(&p, &seq, &OverrideSet::new(), Capture::NONE).unwrap().logits;
    let b = forward(&p, &seq, &OverrideSet::new(), Capture::NONE).unwrap().logits;
    assert_eq!(a, b);
    let mut ov = OverrideSet::new();
    for l in 0..6 {
        for h in 0..4 {
            ov.logit_multiplier.insert((l, h), 1.0);
            ov.head_scale.insert((l, h), 1.0);
        }
    }
    assert_eq!(forward(&p, &seq, &ov, Capture::NONE).unwrap().logits, a);
}

#[test]
fn full_state_substitution_reproduces_the_other_run() {
    let p = wide_params(ModelConfig::toy(), 4, 0.1);
    let clean = toy_seq(2, 9);
    let corrupt = toy_seq(5, 9);
    let cor = forward(&p, &corrupt, &OverrideSet::new(), Capture { residuals: true, ..Capture::NONE }).unwrap();
    for state in [0, 1, 3, 6] {
        let mut ov = OverrideSet::new();
        for t in 0..clean.len() {
            ov.residual.insert((state, t), cor.trace.residual(state, t).to_vec());
        }
        let patched = forward(&p, &clean, &ov, Capture::NONE).unwrap();
        assert_eq!(patched.logits, cor.logits, "state {state}");
    }
}

#[test]
fn bad_override_index_is_rejected() {
    let p = Params::init(ModelConfig::micro(), 0).unwrap();
    let (_, seq) = micro_example(1, 0);
    let mut ov = OverrideSet::new();
    ov.logit_multiplier.insert((2, 0), 1.0);
    assert!(forward(&p, &seq, &ov, Capture::NONE).is_err());
    let mut ov = OverrideSet::new();
    ov.residual.insert((0, seq.len()), vec![0.0; 8]);
    assert!(forward(&p, &seq, &ov, Capture::NONE).is_err());
    let mut ov = OverrideSet::new();
    ov.logit_multiplier.insert((0, 0), -1.0);
    assert!(forward(&p, &seq, &ov, Capture::NONE).is_err());
}

#[test]
fn sft_loss_examples() {
    let (_, seq) = micro_example(2, 0);
    let v = Vocab.len();
    let mut logits = vec![0.0; seq.len() * v];
    assert!((loss_sft(&logits, v, &seq).unwrap() - (v as f64).ln()).abs() < 1e-12);
    // perturbing a non-answer position changes nothing
    let before = loss_sft(&logits, v, &seq).unwrap();
    logits[3 * v + 7] = 50.0;
    assert_eq!(loss_sft(&logits, v, &seq).unwrap(), before);
    // saturated correct answer
    let (pos, tok) = seq.targets[0];
    logits[pos * v + tok] = 80.0;
    assert!(loss_sft(&logits, v, &seq).unwrap() < 1e-30);
    let mut empty = seq.clone();
    empty.targets.clear();
    assert!(loss_sft(&logits, v, &empty).is_err());
}

#[test]
fn untrained_predictions_are_roughly_uniform() {
    // fresh parameter draw per scene; tokens are exchangeable under the init
    let n = 1000;
    let v = Vocab.len();
    let mut counts = vec![0usize; v];
    for i in 0..n {
        let p = Params::init(ModelConfig::micro(), 1000 + i as u64).unwrap();
        let (_, seq) = micro_example(1 + i % 3, i as u64);
        counts[generate_answer(&p, &seq, &OverrideSet::new()).unwrap()] += 1;
    }
    let e = n as f64 / v as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 67 degrees of freedom, p = 0.001 critical value is about 106.4
    assert!(chi2 < 106.4, "chi2 {chi2}");
}

#[test]
fn greedy_is_shift_invariant() {
    let p = Params::init(ModelConfig::micro(), 8).unwrap();
    let (_, seq) = micro_example(2, 8);
    let out = forward(&p, &seq, &OverrideSet::new(), Capture::NONE).unwrap();
    let row = out.logits_at(seq.answer_pos);
    let shifted: Vec<f64> = row.iter().map(|x| x - 3.25).collect();
    assert_eq!(argmax(row), argmax(&shifted));
    assert_eq!(generate_answer(&p, &seq, &OverrideSet::new()).unwrap(), argmax(row));
}

fn micro_examples(n: usize) -> Vec<TrainExample> {
    (0..n)
        .map(|i| {
            let (scene, seq) = micro_example(1 + i % 3, i as u64);
            TrainExample { seq, prior: Some(micro_prior(&scene)) }
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_checkpoints_each_epoch() {
    let data = micro_examples(24);
    let opt = OptimizerConfig { batch_size: 8, epochs: 2, seed: 5, lr: 3e-3, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut a = Params::init(ModelConfig::micro(), 1).unwrap();
    let ra = train(&mut a, &data, &opt, None, Some(dir.path())).unwrap();
    let mut b = Params::init(ModelConfig::micro(), 1).unwrap();
    let rb = train(&mut b, &data, &opt, None, None).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(a, b);
    assert_eq!(ra.steps, 6);
    assert_eq!(ra.checkpoints.len(), 2);
    let (loaded, meta) = load_checkpoint(&ra.checkpoints[1]).unwrap();
    assert_eq!(meta.unwrap().step, 6);
    assert!(loaded.data.iter().zip(&a.data).all(|(x, y)| (*x as f32) == (*y as f32)));
    assert!(dir.path().join("epoch2.opt").exists());
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let data = micro_examples(8);
    let opt = OptimizerConfig { lr: 0.0, batch_size: 4, epochs: 1, ..Default::default() };
    let mut p = Params::init(ModelConfig::micro(), 2).unwrap();
    let before = p.clone();
    train(&mut p, &data, &opt, None, None).unwrap();
    assert_eq!(p, before);
}

#[test]
fn training_reduces_loss_on_a_small_set() {
    let data = micro_examples(16);
    let opt = OptimizerConfig { lr: 1e-2, batch_size: 16, epochs: 60, warmup_frac: 0.0, ..Default::default() };
    let mut p = Params::init(ModelConfig::micro(), 2).unwrap();
    let r = train(&mut p, &data, &opt, None, None).unwrap();
    assert!(r.losses.last().unwrap() < &(r.losses[0] * 0.5), "{:?}", (r.losses[0], r.losses.last()));
}

#[test]
fn empty_dataset_is_rejected() {
    let mut p = Params::init(ModelConfig::micro(), 2).unwrap();
    assert!(train(&mut p, &[], &OptimizerConfig::default(), None, None).is_err());
}
