use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lens::{decode_rows, fit_affine, top_tokens};
use crate::corpus::Item;
use crate::model::linalg::{log_softmax, softmax};
use crate::model::{forward, ActivationTrace, Capture, OverrideSet, Params};
use crate::synth::rng;
use crate::vocab::LexiconMasks;
use crate::{Error, Result};

/// ROC-AUC of `scores` against binary `labels` (Mann-Whitney U with tied
/// scores given their average rank). `None` when a class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[idx[k]]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for i in 0..w.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            w[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Column means and standard deviations of `x` (`rows x d`) over `rows`.
fn standardizer(x: &[f64], d: usize, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mu = vec![0.0; d];
    for &r in rows {
        for j in 0..d {
            mu[j] += x[r * d + j] / n;
        }
    }
    let mut sd = vec![0.0; d];
    for &r in rows {
        for j in 0..d {
            sd[j] += (x[r * d + j] - mu[j]).powi(2) / n;
        }
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    (mu, sd)
}

fn standardize(x: &mut [f64], d: usize, mu: &[f64], sd: &[f64]) {
    for row in x.chunks_mut(d) {
        for j in 0..d {
            row[j] = (row[j] - mu[j]) / sd[j];
        }
    }
}

/// Scene indices split `1 - test_fraction : test_fraction`, stratified by
/// `labels`. Every class with at least two members contributes one or more
/// test scenes.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by.entry(l).or_default().push(i);
    }
    let mut r = rng(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by {
        idx.shuffle(&mut r);
        let mut k = (idx.len() as f64 * test_fraction).round() as usize;
        if idx.len() >= 2 {
            k = k.clamp(1, idx.len() - 1);
        } else {
            k = 0;
        }
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn residual_traces(params: &Params, items: &[Item]) -> Result<Vec<ActivationTrace>> {
    let cap = Capture { residuals: true, ..Capture::NONE };
    items
        .par_iter()
        .map(|it| Ok(forward(params, &it.seq, &OverrideSet::new(), cap)?.trace))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BindingConfig {
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for BindingConfig {
    fn default() -> Self {
        Self { rank: 16, steps: 300, lr: 1e-2, test_fraction: 0.2, seed: 0 }
    }
}

/// Quadratic probe `score(x_i, x_j) = (W x_i) . (W x_j)` on standardized
/// residual states of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingProbe {
    pub layer: usize,
    pub rank: usize,
    /// Row-major `rank x d_model`.
    pub w: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingLayer {
    pub layer: usize,
    pub auc: f64,
    /// Same pipeline with pair labels permuted.
    pub shuffled_auc: f64,
    pub train_pairs: (usize, usize),
    pub test_pairs: (usize, usize),
    pub probe: BindingProbe,
}

/// Visual-token pairs of one scene: `(pos_i, pos_j, same_object)` over
/// image tokens that lie inside exactly one object.
pub fn binding_pairs(item: &Item) -> Vec<(usize, usize, bool)> {
    let owner = item.scene.patch_instances();
    let start = item.seq.image_start;
    let toks: Vec<(usize, usize)> = owner.iter().enumerate().filter_map(|(p, o)| o.map(|k| (start + p, k))).collect();
    let mut out = Vec::new();
    for (a, &(ti, ki)) in toks.iter().enumerate() {
        for &(tj, kj) in &toks[a + 1..] {
            out.push((ti, tj, ki == kj));
        }
    }
    out
}

struct PairSet {
    /// `tokens x d` features
    x: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    labels: Vec<bool>,
}

fn pair_set(items: &[Item], traces: &[ActivationTrace], scenes: &[usize], layer: usize, d: usize) -> PairSet {
    let mut x = Vec::new();
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for &s in scenes {
        let mut local: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, j, same) in binding_pairs(&items[s]) {
            for t in [i, j] {
                local.entry(t).or_insert_with(|| {
                    x.extend_from_slice(traces[s].residual(layer, t));
                    x.len() / d - 1
                });
            }
            pairs.push((local[&i], local[&j]));
            labels.push(same);
        }
    }
    PairSet { x, pairs, labels }
}

fn probe_scores(w: &[f64], r: usize, d: usize, x: &[f64], pairs: &[(usize, usize)]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut u = vec![0.0; n * r];
    for t in 0..n {
        for k in 0..r {
            u[t * r + k] = (0..d).map(|j| w[k * d + j] * x[t * d + j]).sum();
        }
    }
    let s = pairs.iter().map(|&(i, j)| (0..r).map(|k| u[i * r + k] * u[j * r + k]).sum()).collect();
    (s, u)
}

fn fit_binding(ps: &PairSet, labels: &[bool], d: usize, cfg: &BindingConfig, seed: u64) -> (Vec<f64>, f64) {
    let r = cfg.rank;
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
    let mut g = rng(seed);
    let mut w: Vec<f64> = (0..r * d).map(|_| normal.sample(&mut g)).collect();
    let mut bias = 0.0;
    let n_pos = labels.iter().filter(|&&l| l).count().max(1) as f64;
    let n_neg = (labels.len() as f64 - n_pos).max(1.0);
    let mut opt = Adam::new(r * d + 1, cfg.lr);
    let n_tok = ps.x.len() / d;
    for _ in 0..cfg.steps {
        let (s, u) = probe_scores(&w, r, d, &ps.x, &ps.pairs);
        let mut du = vec![0.0; n_tok * r];
        let mut db = 0.0;
        for (p, (&(i, j), &y)) in ps.pairs.iter().zip(labels).enumerate() {
            let sig = 1.0 / (1.0 + (-(s[p] + bias)).exp());
            // class-balanced logistic loss
            let gs = (sig - y as u8 as f64) * 0.5 / if y { n_pos } else { n_neg };
            db += gs;
            for k in 0..r {
                du[i * r + k] += gs * u[j * r + k];
                du[j * r + k] += gs * u[i * r + k];
            }
        }
        let mut grad = vec![0.0; r * d + 1];
        for t in 0..n_tok {
            for k in 0..r {
                let g = du[t * r + k];
                if g != 0.0 {
                    for j in 0..d {
                        grad[k * d + j] += g * ps.x[t * d + j];
                    }
                }
            }
        }
        grad[r * d] = db;
        let mut flat: Vec<f64> = w.iter().copied().chain(std::iter::once(bias)).collect();
        opt.step(&mut flat, &grad);
        bias = flat.pop().expect("bias slot");
        w = flat;
    }
    (w, bias)
}

/// Per-layer same-object vs different-object ROC-AUC of a rank-`r`
/// quadratic probe, trained and tested on disjoint scenes.
pub fn binding_probe(params: &Params, items: &[Item], layers: &[usize], cfg: &BindingConfig) -> Result<Vec<BindingLayer>> {
    let d = params.cfg.d_model;
    if cfg.rank == 0 || cfg.rank > d {
        return Err(Error::Config(format!("probe rank {} must be in 1..={d}", cfg.rank)));
    }
    if let Some(&l) = layers.iter().find(|&&l| l > params.cfg.n_layers) {
        return Err(Error::Config(format!("layer {l} exceeds the model depth")));
    }
    let per_scene: Vec<usize> = items.iter().map(|it| binding_pairs(it).iter().filter(|p| p.2).count()).collect();
    if per_scene.iter().all(|&n| n == 0) {
        return Err(Error::Data("no same-object token pairs: every object covers at most one patch".into()));
    }
    let traces = residual_traces(params, items)?;
    let strata: Vec<usize> = items.iter().map(|it| it.scene.count).collect();
    let (train, test) = stratified_split(&strata, cfg.test_fraction, cfg.seed);
    layers
        .par_iter()
        .map(|&layer| {
            let mut tr = pair_set(items, &traces, &train, layer, d);
            let mut te = pair_set(items, &traces, &test, layer, d);
            let all: Vec<usize> = (0..tr.x.len() / d).collect();
            let (mu, sd) = standardizer(&tr.x, d, &all);
            standardize(&mut tr.x, d, &mu, &sd);
            standardize(&mut te.x, d, &mu, &sd);
            let (w, bias) = fit_binding(&tr, &tr.labels, d, cfg, cfg.seed ^ layer as u64);
            let auc = roc_auc(&probe_scores(&w, cfg.rank, d, &te.x, &te.pairs).0, &te.labels)
                .ok_or_else(|| Error::Data("test scenes lack one of the pair classes".into()))?;
            let mut r = rng(cfg.seed.wrapping_add(0x5_4ff1e) ^ layer as u64);
            let mut tr_lab = tr.labels.clone();
            tr_lab.shuffle(&mut r);
            let mut te_lab = te.labels.clone();
            te_lab.shuffle(&mut r);
            let (ws, _) = fit_binding(&tr, &tr_lab, d, cfg, cfg.seed ^ layer as u64);
            let shuffled_auc = roc_auc(&probe_scores(&ws, cfg.rank, d, &te.x, &te.pairs).0, &te_lab).unwrap_or(0.5);
            let count = |l: &[bool]| {
                let p = l.iter().filter(|&&b| b).count();
                (p, l.len() - p)
            };
            Ok(BindingLayer {
                layer,
                auc,
                shuffled_auc,
                train_pairs: count(&tr.labels),
                test_pairs: count(&te.labels),
                probe: BindingProbe { layer, rank: cfg.rank, w, bias, mean: mu, scale: sd },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NumerosityConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for NumerosityConfig {
    fn default() -> Self {
        Self { hidden: 32, steps: 300, lr: 1e-2, test_fraction: 0.2, seed: 0 }
    }
}

/// One-hidden-layer classifier `softmax(tanh(x W1 + b1) W2 + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumerosityProbe {
    pub layer: usize,
    pub classes: Vec<usize>,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumerosityLayer {
    pub layer: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub probe: NumerosityProbe,
}

impl NumerosityProbe {
    fn logits(&self, x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
        let (h, c) = (self.hidden, self.classes.len());
        let n = x.len() / d;
        let mut hid = vec![0.0; n * h];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for k in 0..h {
                let z: f64 = self.b1[k] + (0..d).map(|j| x[r * d + j] * self.w1[j * h + k]).sum::<f64>();
                hid[r * h + k] = z.tanh();
            }
            for k in 0..c {
                out[r * c + k] = self.b2[k] + (0..h).map(|j| hid[r * h + j] * self.w2[j * c + k]).sum::<f64>();
            }
        }
        (out, hid)
    }

    fn accuracy(&self, x: &[f64], y: &[usize], d: usize) -> f64 {
        let (lg, _) = self.logits(x, d);
        let c = self.classes.len();
        let hits = y.iter().enumerate().filter(|(r, &t)| crate::model::linalg::argmax(&lg[r * c..(r + 1) * c]) == t).count();
        hits as f64 / y.len().max(1) as f64
    }
}

/// Mean of layer-`layer` residual states over image tokens touched by an
/// object (zeros when the scene is empty).
fn pooled(item: &Item, trace: &ActivationTrace, layer: usize, d: usize) -> Vec<f64> {
    let mask = item.scene.object_patches();
    let mut acc = vec![0.0; d];
    let mut n = 0;
    for (p, &m) in mask.iter().enumerate() {
        if m {
            for (a, v) in acc.iter_mut().zip(trace.residual(layer, item.seq.image_start + p)) {
                *a += v;
            }
            n += 1;
        }
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

fn fit_numerosity(x: &[f64], y: &[usize], d: usize, classes: Vec<usize>, layer: usize, cfg: &NumerosityConfig) -> NumerosityProbe {
    let (h, c) = (cfg.hidden, classes.len());
    let mut g = rng(cfg.seed ^ (layer as u64).wrapping_mul(0x9e37_79b9));
    let n1 = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
    let n2 = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("valid std");
    let mut p = NumerosityProbe {
        layer,
        classes,
        hidden: h,
        w1: (0..d * h).map(|_| n1.sample(&mut g)).collect(),
        b1: vec![0.0; h],
        w2: (0..h * c).map(|_| n2.sample(&mut g)).collect(),
        b2: vec![0.0; c],
    };
    let sizes = [d * h, h, h * c, c];
    let mut opt = Adam::new(sizes.iter().sum(), cfg.lr);
    let n = y.len() as f64;
    for _ in 0..cfg.steps {
        let (lg, hid) = p.logits(x, d);
        let mut gw1 = vec![0.0; d * h];
        let mut gb1 = vec![0.0; h];
        let mut gw2 = vec![0.0; h * c];
        let mut gb2 = vec![0.0; c];
        for (r, &t) in y.iter().enumerate() {
            let mut dz = softmax(&lg[r * c..(r + 1) * c]);
            dz[t] -= 1.0;
            dz.iter_mut().for_each(|v| *v /= n);
            let mut dh = vec![0.0; h];
            for j in 0..h {
                for k in 0..c {
                    gw2[j * c + k] += hid[r * h + j] * dz[k];
                    dh[j] += p.w2[j * c + k] * dz[k];
                }
                dh[j] *= 1.0 - hid[r * h + j].powi(2);
                gb1[j] += dh[j];
            }
            for k in 0..c {
                gb2[k] += dz[k];
            }
            for i in 0..d {
                let xi = x[r * d + i];
                for j in 0..h {
                    gw1[i * h + j] += xi * dh[j];
                }
            }
        }
        let mut flat: Vec<f64> = [&p.w1[..], &p.b1, &p.w2, &p.b2].concat();
        let grad: Vec<f64> = [gw1, gb1, gw2, gb2].concat();
        opt.step(&mut flat, &grad);
        let mut it = flat.into_iter();
        p.w1 = it.by_ref().take(sizes[0]).collect();
        p.b1 = it.by_ref().take(sizes[1]).collect();
        p.w2 = it.by_ref().take(sizes[2]).collect();
        p.b2 = it.collect();
    }
    p
}

/// Held-out count accuracy of a small classifier on mean-pooled object
/// tokens, per residual state (`0` is the raw embedding).
pub fn numerosity_probe(params: &Params, items: &[Item], layers: &[usize], cfg: &NumerosityConfig) -> Result<Vec<NumerosityLayer>> {
    let d = params.cfg.d_model;
    let counts: Vec<usize> = items.iter().map(|it| it.scene.count).collect();
    let classes: Vec<usize> = counts.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::Contract("numerosity probe needs at least two distinct counts".into()));
    }
    if let Some(&l) = layers.iter().find(|&&l| l > params.cfg.n_layers) {
        return Err(Error::Config(format!("layer {l} exceeds the model depth")));
    }
    let traces = residual_traces(params, items)?;
    let (train, test) = stratified_split(&counts, cfg.test_fraction, cfg.seed);
    let class_of = |c: usize| classes.binary_search(&c).expect("class present");
    layers
        .par_iter()
        .map(|&layer| {
            let feats: Vec<f64> = items.iter().zip(&traces).flat_map(|(it, tr)| pooled(it, tr, layer, d)).collect();
            let pick = |idx: &[usize]| -> (Vec<f64>, Vec<usize>) {
                let x = idx.iter().flat_map(|&i| feats[i * d..(i + 1) * d].to_vec()).collect();
                (x, idx.iter().map(|&i| class_of(counts[i])).collect())
            };
            let (mut xtr, ytr) = pick(&train);
            let (mut xte, yte) = pick(&test);
            let all: Vec<usize> = (0..ytr.len()).collect();
            let (mu, sd) = standardizer(&xtr, d, &all);
            standardize(&mut xtr, d, &mu, &sd);
            standardize(&mut xte, d, &mu, &sd);
            let probe = fit_numerosity(&xtr, &ytr, d, classes.clone(), layer, cfg);
            Ok(NumerosityLayer {
                layer,
                train_acc: probe.accuracy(&xtr, &ytr, d),
                test_acc: probe.accuracy(&xte, &yte, d),
                n_train: ytr.len(),
                n_test: yte.len(),
                probe,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionLensConfig {
    pub steps: usize,
    pub lr: f64,
    pub bins: usize,
}

impl Default for AttentionLensConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 1e-3, bins: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLensHead {
    pub head: usize,
    pub n_params: usize,
    pub initial_kl: f64,
    pub final_kl: f64,
    /// Mean visual-lexicon share of the probe's top-10 at the answer position.
    pub vgs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLensReport {
    pub layer: usize,
    pub heads: Vec<AttentionLensHead>,
    /// `(lo, hi, count)` bins of the final per-head KL.
    pub kl_histogram: Vec<(f64, f64, usize)>,
    pub best_to_mean_vgs: f64,
}

/// `max / mean`, or 0 when the mean is 0.
pub fn best_to_mean(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    if mean <= 0.0 {
        return 0.0;
    }
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max) / mean
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<(f64, f64, usize)> = (0..bins).map(|b| (lo + b as f64 * w, lo + (b + 1) as f64 * w, 0)).collect();
    for &v in values {
        let b = (((v - lo) / w) as usize).min(bins - 1);
        out[b].2 += 1;
    }
    out
}

/// Per-head linear probes `d_head -> d_model` decoded through the final norm
/// and unembedding, each fitted to the model's final distribution.
pub fn attentionlens_probes(
    params: &Params,
    items: &[Item],
    layer: usize,
    heads: &[usize],
    lex: &LexiconMasks,
    cfg: &AttentionLensConfig,
) -> Result<AttentionLensReport> {
    let (d, dh, vs) = (params.cfg.d_model, params.cfg.d_head, params.cfg.vocab_size);
    if layer >= params.cfg.n_layers {
        return Err(Error::Config(format!("layer {layer} exceeds the model depth")));
    }
    if let Some(&h) = heads.iter().find(|&&h| h >= params.cfg.n_heads) {
        return Err(Error::Config(format!("head {h} exceeds the head count")));
    }
    if items.is_empty() {
        return Err(Error::Data("attention lens corpus is empty".into()));
    }
    let cap = Capture { head_outputs: true, ..Capture::NONE };
    // per item: rows of (head outputs per head, final logp), and the answer row index
    let per: Vec<(Vec<Vec<f64>>, Vec<f64>, usize)> = items
        .par_iter()
        .map(|it| {
            let out = forward(params, &it.seq, &OverrideSet::new(), cap)?;
            let pos: Vec<usize> = (it.seq.last_image_pos()..it.seq.len()).collect();
            let z = heads
                .iter()
                .map(|&h| pos.iter().flat_map(|&t| out.trace.head_output(layer, h, t).to_vec()).collect())
                .collect();
            let lp = pos.iter().flat_map(|&t| log_softmax(out.logits_at(t))).collect();
            Ok((z, lp, it.seq.answer_pos - it.seq.last_image_pos()))
        })
        .collect::<Result<_>>()?;
    let mut target = Vec::new();
    let mut answer_rows = Vec::new();
    let mut z_all = vec![Vec::new(); heads.len()];
    for (z, lp, a) in &per {
        answer_rows.push(target.len() / vs + a);
        target.extend_from_slice(lp);
        for (dst, src) in z_all.iter_mut().zip(z) {
            dst.extend_from_slice(src);
        }
    }
    let fits: Vec<AttentionLensHead> = heads
        .par_iter()
        .zip(z_all.par_iter())
        .map(|(&h, z)| {
            let f = fit_affine(params, z, dh, vec![0.0; d * dh], &target, cfg.steps, cfg.lr)?;
            let mut vgs = 0.0;
            for &r in &answer_rows {
                let mut y = f.b.clone();
                for i in 0..d {
                    y[i] += (0..dh).map(|j| f.a[i * dh + j] * z[r * dh + j]).sum::<f64>();
                }
                let probs = softmax(&decode_rows(params, &y).0);
                let top = top_tokens(&probs, 10);
                vgs += top.iter().filter(|t| lex.visual[t.id]).count() as f64 / top.len() as f64;
            }
            Ok(AttentionLensHead {
                head: h,
                n_params: d * dh + d,
                initial_kl: f.first_kl,
                final_kl: f.last_kl,
                vgs: vgs / answer_rows.len() as f64,
            })
        })
        .collect::<Result<_>>()?;
    let kls: Vec<f64> = fits.iter().map(|f| f.final_kl).collect();
    let vgs: Vec<f64> = fits.iter().map(|f| f.vgs).collect();
    Ok(AttentionLensReport { layer, kl_histogram: histogram(&kls, cfg.bins), best_to_mean_vgs: best_to_mean(&vgs), heads: fits })
}
