mod common;

use countlab::corpus::{count_items, pair_corpus, Item, SplitSpec};
use countlab::interp::*;
use countlab::model::linalg::{argmax, softmax};
use countlab::model::{forward, unembed, Capture, HeadId, HeadPatch, ModelConfig, OverrideSet, Params};
use countlab::synth::{gen_scatter, gen_syndot, CanvasSpec, QARecord, SceneKind, Task};
use countlab::vocab::{Lexicons, Vocab};
use countlab::Error;

fn cfg() -> ModelConfig {
    ModelConfig::micro()
}

fn canvas() -> CanvasSpec {
    common::micro_canvas()
}

fn items(n_per: usize, seed: u64) -> Vec<Item> {
    count_items(canvas(), &SplitSpec::syndot(1, 4, n_per, seed), &cfg()).unwrap()
}

fn params() -> Params {
    common::wide_params(cfg(), 3, 0.3)
}

#[test]
fn final_lens_layer_is_the_model_output() {
    let p = params();
    let it = &items(1, 1)[2];
    let out = forward(&p, &it.seq, &OverrideSet::new(), Capture::ALL).unwrap();
    let pos = it.seq.answer_pos;
    let lens = logit_lens(&out.trace, &p, pos, 5, it.seq.answer()).unwrap();
    assert_eq!(lens.len(), cfg().n_layers);
    let last = lens.last().unwrap();
    let own: Vec<usize> = countlab::model::linalg::top_k(&softmax(out.logits_at(pos)), 5);
    assert_eq!(last.top.iter().map(|t| t.id).collect::<Vec<_>>(), own);
    assert_eq!(last.target_rank, Some(rank_of(out.logits_at(pos), it.seq.answer().unwrap())));
    assert!(last.top.windows(2).all(|w| w[0].prob >= w[1].prob));
    assert!(matches!(logit_lens(&out.trace, &p, 999, 5, None), Err(Error::Contract(_))));
}

#[test]
fn zero_residual_decodes_to_the_bias() {
    let p = params();
    let z = unembed(&p, &vec![0.0; cfg().d_model]);
    assert_eq!(z, p.s(&p.layout.unembed_b).to_vec());
}

#[test]
fn head_projections_sum_to_attention_output() {
    for seed in 0..5 {
        let p = common::wide_params(cfg(), seed, 0.5);
        let it = &items(1, seed)[0];
        let out = forward(&p, &it.seq, &OverrideSet::new(), Capture::ALL).unwrap();
        for l in 0..cfg().n_layers {
            for t in [0, it.seq.last_image_pos(), it.seq.answer_pos] {
                let mut sum = vec![0.0; cfg().d_model];
                for h in 0..cfg().n_heads {
                    for (s, v) in sum.iter_mut().zip(head_projection(&p, &out.trace, l, h, t)) {
                        *s += v;
                    }
                }
                let full = out.trace.attn_out_at(l, t);
                let err: f64 = sum.iter().zip(full).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let scale = full.iter().map(|x| x.abs()).fold(1e-12, f64::max);
                assert!(err / scale < 1e-10, "layer {l} pos {t}: {err}");
            }
        }
    }
}

#[test]
fn untrained_translators_are_identity() {
    let p = params();
    let its = items(2, 4);
    let corpus = collect_lens_corpus(&p, &its, true).unwrap();
    let tr = train_translators(&p, &corpus, &TranslatorConfig { steps: 0, ..Default::default() }).unwrap();
    assert_eq!(tr, {
        let mut id = TranslatorSet::identity(cfg().n_layers, cfg().d_model);
        id.initial_kl = tr.initial_kl.clone();
        id.final_kl = tr.final_kl.clone();
        id
    });
    let out = forward(&p, &its[0].seq, &OverrideSet::new(), Capture::ALL).unwrap();
    let pos = its[0].seq.answer_pos;
    let probs = headlens_decode(&p, &tr, &out.trace, 1, 0, pos).unwrap();
    let raw = softmax(&unembed(&p, &head_projection(&p, &out.trace, 1, 0, pos)));
    for (a, b) in probs.iter().zip(&raw) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn translator_fit_lowers_held_out_kl() {
    let p = params();
    let train = collect_lens_corpus(&p, &items(4, 10), true).unwrap();
    let held = collect_lens_corpus(&p, &items(2, 11), true).unwrap();
    let tr = train_translators(&p, &train, &TranslatorConfig { steps: 150, lr: 1e-2, after_image_only: true }).unwrap();
    let id = TranslatorSet::identity(cfg().n_layers, cfg().d_model);
    let better = (0..cfg().n_layers).filter(|&l| translator_kl(&p, &tr, &held, l) < translator_kl(&p, &id, &held, l)).count();
    assert_eq!(better, cfg().n_layers);
    assert!(tr.final_kl.iter().zip(&tr.initial_kl).all(|(f, i)| f < i));
}

#[test]
fn zero_head_output_decodes_translated_zero() {
    let p = params();
    let its = items(2, 4);
    let corpus = collect_lens_corpus(&p, &its, true).unwrap();
    let tr = train_translators(&p, &corpus, &TranslatorConfig { steps: 20, lr: 1e-2, after_image_only: true }).unwrap();
    let mut ov = OverrideSet::new();
    ov.head_output.insert((1, 1), HeadPatch::Constant(vec![0.0; cfg().d_head]));
    let out = forward(&p, &its[0].seq, &ov, Capture::ALL).unwrap();
    let probs = headlens_decode(&p, &tr, &out.trace, 1, 1, 3).unwrap();
    let expect = softmax(&unembed(&p, &tr.b[1]));
    for (a, b) in probs.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let short = TranslatorSet::identity(1, cfg().d_model);
    assert!(matches!(headlens_decode(&p, &short, &out.trace, 1, 0, 3), Err(Error::Contract(_))));
}

fn pairs(n: usize, seed: u64) -> Vec<SeqPair> {
    pair_corpus(canvas(), SceneKind::SynDot, 2, 1, 4, n, seed)
        .unwrap()
        .iter()
        .map(|p| SeqPair::counting(p, &cfg()).unwrap())
        .collect()
}

#[test]
fn overwrite_rate_identities() {
    let p = common::wide_params(cfg(), 3, 1.0);
    let ps = pairs(20, 5);
    let same: Vec<SeqPair> = ps.iter().map(|x| SeqPair { clean: x.clean.clone(), corrupted: x.clean.clone() }).collect();
    for c in vap_layerwise(&p, &same, &TokenGroup::SIX).unwrap() {
        assert!(c.rates.iter().all(|&r| r == 0.0));
    }
    let all = vap_layerwise(&p, &ps, &[TokenGroup::AllTokens]).unwrap();
    assert!(all[0].n_effective > 0, "parameters should separate some pairs");
    assert_eq!(all[0].rates[0], 1.0);
    assert_eq!(all[0].n_pairs, 20);
    let mut bad = ps[0].clone();
    bad.corrupted.segments.swap(0, 5);
    assert!(matches!(vap_layerwise(&p, &[bad], &[TokenGroup::ImageTokens]), Err(Error::Contract(_))));
}

#[test]
fn head_patching_with_own_activation_is_zero() {
    let p = params();
    let ps = pairs(3, 6);
    let same: Vec<SeqPair> = ps.iter().map(|x| SeqPair { clean: x.clean.clone(), corrupted: x.clean.clone() }).collect();
    let g = vap_headwise(&p, &same).unwrap();
    assert_eq!(g.len(), cfg().n_layers * cfg().n_heads);
    assert!(g.iter().all(|h| h.score == 0.0));
    let real = vap_headwise(&p, &ps).unwrap();
    assert!(real.iter().any(|h| h.score != 0.0));
}

#[test]
fn constant_heads_have_zero_ablation_effect() {
    let p = params();
    let one = items(1, 7).swap_remove(1);
    let corpus: Vec<Item> = (0..4).map(|_| Item { scene: one.scene.clone(), record: one.record.clone(), seq: one.seq.clone() }).collect();
    let means = head_means(&p, &corpus).unwrap();
    let (scores, set) = mean_ablation_importance(&p, &corpus, &means, "count", 3).unwrap();
    assert!(scores.iter().all(|s| s.score == 0.0));
    // all tied: order falls back to (layer, head)
    assert_eq!(set.heads, vec![HeadId::new(0, 0), HeadId::new(0, 1), HeadId::new(1, 0)]);
}

#[test]
fn ablation_sets_are_reproducible_and_cached() {
    let p = params();
    let corpus = items(3, 8);
    let dir = tempfile::tempdir().unwrap();
    let m1 = head_means_cached(&p, &corpus, dir.path()).unwrap();
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 1);
    let m2 = head_means_cached(&p, &corpus, dir.path()).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(m1.key, corpus_key(&p, &corpus));
    let a = mean_ablation_importance(&p, &corpus, &m1, "count", 2).unwrap();
    let b = mean_ablation_importance(&p, &corpus, &m2, "count", 2).unwrap();
    assert_eq!(a, b);
    let other = corpus_key(&Params::init(cfg(), 99).unwrap(), &corpus);
    assert_ne!(other, m1.key);
}

#[test]
fn jaccard_reference_cases() {
    let hs = |v: &[(usize, usize)]| HeadSet::new("t", v.iter().map(|&(l, h)| HeadId::new(l, h)).collect()).unwrap();
    assert_eq!(jaccard(&hs(&[(1, 2), (3, 4), (5, 6)]), &hs(&[(3, 4), (5, 6), (7, 8)])), 0.5);
    assert_eq!(jaccard(&hs(&[(1, 2)]), &hs(&[(1, 2)])), 1.0);
    assert_eq!(jaccard(&hs(&[(1, 2)]), &hs(&[(2, 1)])), 0.0);
}

#[test]
fn head_reports_respect_ranges() {
    let p = params();
    let its = items(2, 12);
    let corpus = collect_lens_corpus(&p, &its, true).unwrap();
    let tr = train_translators(&p, &corpus, &TranslatorConfig { steps: 10, lr: 1e-2, after_image_only: true }).unwrap();
    let lex = Lexicons::default().resolve(&Vocab).unwrap();
    let reps = score_heads(&p, &tr, &its, &[], &lex, DecodePosition::default(), &CategoryThresholds::default()).unwrap();
    assert_eq!(reps.len(), cfg().n_layers * cfg().n_heads);
    for r in &reps {
        for v in [r.img_attn_ratio, r.obj_in_img_ratio, r.cter, r.vgs, r.gt_at_10, r.top1_acc, r.awareness_mass] {
            assert!((0.0..=1.0 + 1e-12).contains(&v), "{r:?}");
        }
        assert!(r.cter + r.vgs <= 1.0 + 1e-12);
        assert_eq!(r.top10.len(), 10);
        assert!(r.top10.windows(2).all(|w| w[0].prob >= w[1].prob));
    }
    assert!(matches!(
        score_heads(&p, &tr, &[], &[], &lex, DecodePosition::default(), &CategoryThresholds::default()),
        Err(Error::Data(_))
    ));
}

/// Micro model on a 4x4 patch grid, roomy enough for multi-patch objects.
fn wide_cfg() -> ModelConfig {
    ModelConfig { canvas_px: 32, max_seq: 48, ..ModelConfig::micro() }
}

fn scatter_items(n: usize) -> Vec<Item> {
    let c = wide_cfg();
    let canvas = CanvasSpec::new(c.canvas_px, c.patch_px).unwrap();
    (0..n)
        .map(|i| {
            let scene = gen_scatter(canvas, 2 + i % 2, 4, 5, 100 + i as u64).unwrap();
            let record = QARecord::new(&scene, Task::Count).unwrap();
            let seq = countlab::model::build_sequence(&record, &scene, &c).unwrap();
            Item { scene, record, seq }
        })
        .collect()
}

#[test]
fn binding_labels_ignore_object_identity() {
    let its = scatter_items(6);
    for it in &its {
        let mut swapped = Item { scene: it.scene.clone(), record: it.record.clone(), seq: it.seq.clone() };
        swapped.scene.centers.reverse();
        swapped.scene.attributes.reverse();
        assert_eq!(binding_pairs(it), binding_pairs(&swapped));
    }
    assert!(its.iter().any(|it| binding_pairs(it).iter().any(|p| p.2)));
}

#[test]
fn binding_probe_runs_and_rejects_singletons() {
    let p = common::wide_params(wide_cfg(), 3, 0.3);
    let canvas = CanvasSpec::new(32, 8).unwrap();
    let its = scatter_items(20);
    let cfg = BindingConfig { rank: 4, steps: 30, ..Default::default() };
    let res = binding_probe(&p, &its, &[0, 2], &cfg).unwrap();
    for l in &res {
        assert!((0.0..=1.0).contains(&l.auc) && (0.0..=1.0).contains(&l.shuffled_auc));
        assert!(l.probe.rank <= ModelConfig::micro().d_model);
        assert!(l.test_pairs.0 > 0 && l.train_pairs.0 > 0);
    }
    let singles: Vec<Item> = (0..4)
        .map(|i| {
            let scene = gen_syndot(canvas, 1, 2, i).unwrap();
            let record = QARecord::new(&scene, Task::Count).unwrap();
            let seq = countlab::model::build_sequence(&record, &scene, &wide_cfg()).unwrap();
            Item { scene, record, seq }
        })
        .collect();
    assert!(matches!(binding_probe(&p, &singles, &[1], &cfg), Err(Error::Data(_))));
    assert!(matches!(binding_probe(&p, &its, &[1], &BindingConfig { rank: 99, ..cfg }), Err(Error::Config(_))));
}

#[test]
fn zero_probe_scores_give_chance_auc() {
    assert_eq!(roc_auc(&[0.0; 6], &[true, false, true, false, false, false]), Some(0.5));
}

#[test]
fn numerosity_probe_contracts() {
    let p = params();
    let its = items(5, 13);
    let res = numerosity_probe(&p, &its, &[0, 2], &NumerosityConfig { steps: 50, ..Default::default() }).unwrap();
    for l in &res {
        assert_eq!(l.n_train + l.n_test, its.len());
        assert_eq!(l.n_test, 4, "one test scene per count");
        assert!((0.0..=1.0).contains(&l.test_acc));
    }
    let one = count_items(canvas(), &SplitSpec::syndot(2, 2, 5, 1), &cfg()).unwrap();
    assert!(matches!(numerosity_probe(&p, &one, &[0], &NumerosityConfig::default()), Err(Error::Contract(_))));
}

#[test]
fn attention_lens_probe_sizes() {
    let p = params();
    let its = items(2, 14);
    let lex = Lexicons::default().resolve(&Vocab).unwrap();
    let rep = attentionlens_probes(&p, &its, 1, &[0, 1], &lex, &AttentionLensConfig { steps: 20, lr: 1e-2, bins: 4 }).unwrap();
    let c = cfg();
    assert!(rep.heads.iter().all(|h| h.n_params == c.d_head * c.d_model + c.d_model));
    assert!(rep.heads.iter().all(|h| h.final_kl <= h.initial_kl));
    assert_eq!(rep.kl_histogram.iter().map(|b| b.2).sum::<usize>(), 2);
}

#[test]
fn yes_band_on_micro_model() {
    let p = params();
    let scene = gen_syndot(canvas(), 3, 2, 1).unwrap();
    let b = yes_band(&p, &scene, 0..=9).unwrap();
    assert_eq!(b.responses.len(), 10);
    assert_eq!(b.true_count, 3);
    let yes = b.responses.iter().filter(|r| r.1 == 1).count();
    assert!(b.width <= yes);
    let _ = argmax(&[0.0]);
}
