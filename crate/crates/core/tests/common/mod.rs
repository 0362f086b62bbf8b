#![allow(dead_code)]

use countlab::intervene::{FocusTerm, QuerySet};
use countlab::model::{build_sequence, loss, loss_and_grad, ModelConfig, OverrideSet, Params, TokenSequence};
use countlab::synth::{focus_prior, gen_syndot, CanvasSpec, QARecord, RenderedScene, Task};

pub fn micro_canvas() -> CanvasSpec {
    let c = ModelConfig::micro();
    CanvasSpec::new(c.canvas_px, c.patch_px).unwrap()
}

pub fn micro_example(count: usize, seed: u64) -> (RenderedScene, TokenSequence) {
    let scene = gen_syndot(micro_canvas(), count, 2, seed).unwrap();
    let rec = QARecord::new(&scene, Task::Count).unwrap();
    let seq = build_sequence(&rec, &scene, &ModelConfig::micro()).unwrap();
    (scene, seq)
}

/// Parameters with a wider init than training uses, so every path carries
/// a gradient well above finite-difference noise.
pub fn wide_params(cfg: ModelConfig, seed: u64, std: f64) -> Params {
    let mut p = Params::init(cfg, seed).unwrap();
    let base = Params::init(cfg, seed).unwrap();
    for s in p.layout.slots.clone() {
        for i in s.range.clone() {
            let emb = s.name.contains("embed") && s.name != "unembed";
            p.data[i] = if s.shape.len() == 2 {
                base.data[i] / 0.02 * if emb { 1.0 } else { std }
            } else {
                // gains near 1, biases near 0, both perturbed
                let u = ((i as f64) * 12.9898).sin() * 43758.5453;
                let r = u - u.floor() - 0.5;
                if s.name.ends_with("norm") { 1.0 + r } else { r }
            };
        }
    }
    p
}

pub struct GradCheck {
    pub worst_rel: f64,
    pub worst_name: String,
    pub checked: usize,
    pub max_abs_grad: f64,
}

/// Compare the analytic gradient against central differences for every
/// parameter. Relative error uses `max(|a|, |n|, floor)` as denominator.
pub fn grad_check(
    p: &Params,
    seq: &TokenSequence,
    ov: &OverrideSet,
    prior: Option<&[f64]>,
    layers: &[usize],
    lambda: f64,
    h: f64,
    floor: f64,
) -> GradCheck {
    let queries = QuerySet::AfterImage.positions(seq);
    let term = prior.map(|g| FocusTerm { layers, queries: &queries, prior: g, lambda, eps: 1e-8 });
    let mut g = p.zeros_like();
    loss_and_grad(p, seq, ov, term.as_ref(), &mut g).unwrap();
    let mut q = p.clone();
    let mut out = GradCheck { worst_rel: 0.0, worst_name: String::new(), checked: 0, max_abs_grad: 0.0 };
    for s in &p.layout.slots {
        for i in s.range.clone() {
            let orig = q.data[i];
            q.data[i] = orig + h;
            let lp = loss(&q, seq, ov, term.as_ref()).unwrap().total;
            q.data[i] = orig - h;
            let lm = loss(&q, seq, ov, term.as_ref()).unwrap().total;
            q.data[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = g.data[i];
            let rel = (num - ana).abs() / ana.abs().max(num.abs()).max(floor);
            out.max_abs_grad = out.max_abs_grad.max(ana.abs());
            if rel > out.worst_rel {
                out.worst_rel = rel;
                out.worst_name = format!("{}[{}] ana {ana:e} num {num:e}", s.name, i - s.range.start);
            }
            out.checked += 1;
        }
    }
    out
}

pub fn micro_prior(scene: &RenderedScene) -> Vec<f64> {
    focus_prior(scene, micro_canvas(), 1.0)
}

/// Metrics by direct evaluation of the definitions with integer sums;
/// shares no code with the library. Returns `(acc, mae, rmse, obo)`.
pub fn brute_metrics(pred: &[i64], gt: &[i64]) -> (f64, f64, f64, f64) {
    let n = pred.len() as f64;
    let mut correct: i64 = 0;
    let mut within: i64 = 0;
    let mut abs_sum: i128 = 0;
    let mut sq_sum: i128 = 0;
    for i in 0..pred.len() {
        let d = pred[i] - gt[i];
        if d == 0 {
            correct += 1;
        }
        if -1 <= d && d <= 1 {
            within += 1;
        }
        abs_sum += d.unsigned_abs() as i128;
        sq_sum += (d as i128) * (d as i128);
    }
    (correct as f64 / n, abs_sum as f64 / n, (sq_sum as f64 / n).sqrt(), within as f64 / n)
}

/// A random answer string: usually a digit string, sometimes junk.
pub fn random_answer(r: &mut impl rand::Rng) -> String {
    match r.random_range(0..10) {
        0 => "yes".into(),
        1 => String::new(),
        2 => format!("{} ", r.random_range(0..40)),
        _ => r.random_range(0..12).to_string(),
    }
}
