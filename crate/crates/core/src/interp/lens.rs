use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Item;
use crate::model::linalg::{gemm, log_softmax, rmsnorm, rmsnorm_backward, softmax, top_k, Out, View};
use crate::model::{forward, unembed, ActivationTrace, Capture, OverrideSet, Params};
use crate::vocab::{TokenId, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token: String,
    pub id: TokenId,
    pub prob: f64,
}

fn ranked(probs: &[f64], k: usize) -> Vec<RankedToken> {
    top_k(probs, k)
        .into_iter()
        .map(|id| RankedToken { token: Vocab.token(id).into(), id, prob: probs[id] })
        .collect()
}

/// 1-based rank of `target` under descending logits (ties resolved by id).
pub fn rank_of(logits: &[f64], target: TokenId) -> usize {
    let v = logits[target];
    1 + logits.iter().enumerate().filter(|&(i, &x)| x > v || (x == v && i < target)).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensLayer {
    /// Residual state index: `l` is the output of block `l` (1-based).
    pub layer: usize,
    pub top: Vec<RankedToken>,
    pub target_rank: Option<usize>,
}

/// Project each block output at `position` through the final norm and
/// unembedding. Layers run `1..=L`; layer `L` is the model's own output.
pub fn logit_lens(
    trace: &ActivationTrace,
    params: &Params,
    position: usize,
    k: usize,
    target: Option<TokenId>,
) -> Result<Vec<LensLayer>> {
    if trace.residuals.is_empty() {
        return Err(Error::Contract("logit lens needs captured residual states".into()));
    }
    if position >= trace.seq_len {
        return Err(Error::Contract(format!("position {position} outside a {}-token trace", trace.seq_len)));
    }
    Ok((1..trace.residuals.len())
        .map(|l| {
            let logits = unembed(params, trace.residual(l, position));
            LensLayer { layer: l, top: ranked(&softmax(&logits), k), target_rank: target.map(|t| rank_of(&logits, t)) }
        })
        .collect())
}

/// Per-layer affine maps `T_l(z) = A_l z + b_l` applied before the final
/// norm and unembedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorSet {
    pub d_model: usize,
    /// Row-major `d x d` per layer; `out_i = sum_j A_ij z_j + b_i`.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub steps: usize,
    /// Mean KL on the training positions before and after fitting, per layer.
    pub initial_kl: Vec<f64>,
    pub final_kl: Vec<f64>,
}

impl TranslatorSet {
    pub fn identity(n_layers: usize, d: usize) -> Self {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        Self {
            d_model: d,
            a: vec![eye; n_layers],
            b: vec![vec![0.0; d]; n_layers],
            steps: 0,
            initial_kl: Vec::new(),
            final_kl: Vec::new(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.a.len()
    }

    /// `T_l` applied to each row of `z` (`rows x d`).
    pub fn apply(&self, layer: usize, z: &[f64]) -> Vec<f64> {
        let d = self.d_model;
        let rows = z.len() / d;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            out[r * d..(r + 1) * d].copy_from_slice(&self.b[layer]);
        }
        gemm(rows, d, d, View::rm(z, d), View::rm_t(&self.a[layer], d), 1.0, &mut out, Out::rm(d));
        out
    }
}

/// Final norm and unembedding over rows of `x`, as `rows x vocab` logits.
pub(crate) fn decode_rows(p: &Params, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = p.cfg.d_model;
    let vs = p.cfg.vocab_size;
    let rows = x.len() / d;
    let (n, inv) = rmsnorm(x, p.s(&p.layout.final_norm));
    let mut logits = vec![0.0; rows * vs];
    let c = p.s(&p.layout.unembed_b);
    for r in 0..rows {
        logits[r * vs..(r + 1) * vs].copy_from_slice(c);
    }
    gemm(rows, d, vs, View::rm(&n, d), View::rm_t(p.s(&p.layout.unembed), d), 1.0, &mut logits, Out::rm(vs));
    (logits, n, inv)
}

/// `KL(softmax(z) || q)` for each row, with its gradient in `z`.
fn kl_rows(logits: &[f64], target_logp: &[f64], vs: usize) -> (f64, Vec<f64>) {
    let rows = logits.len() / vs;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for r in 0..rows {
        let lp = log_softmax(&logits[r * vs..(r + 1) * vs]);
        let lq = &target_logp[r * vs..(r + 1) * vs];
        let kl: f64 = lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum();
        total += kl;
        for i in 0..vs {
            grad[r * vs + i] = lp[i].exp() * (lp[i] - lq[i] - kl) / rows as f64;
        }
    }
    (total / rows as f64, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    pub steps: usize,
    pub lr: f64,
    /// Train on positions from the image end marker onward.
    pub after_image_only: bool,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 1e-3, after_image_only: true }
    }
}

/// Attention outputs and final log-probabilities gathered over a corpus.
pub struct LensCorpus {
    /// Per layer, `rows x d` attention outputs.
    pub attn_out: Vec<Vec<f64>>,
    /// `rows x vocab` final log-probabilities.
    pub final_logp: Vec<f64>,
    pub rows: usize,
}

pub fn collect_lens_corpus(params: &Params, items: &[Item], after_image_only: bool) -> Result<LensCorpus> {
    let d = params.cfg.d_model;
    let vs = params.cfg.vocab_size;
    let nl = params.cfg.n_layers;
    let capture = Capture { blocks: true, ..Capture::NONE };
    let per: Vec<(Vec<Vec<f64>>, Vec<f64>)> = items
        .par_iter()
        .map(|it| {
            let out = forward(params, &it.seq, &OverrideSet::new(), capture)?;
            let start = if after_image_only { it.seq.last_image_pos() } else { 0 };
            let pos: Vec<usize> = (start..it.seq.len()).collect();
            let a = (0..nl)
                .map(|l| pos.iter().flat_map(|&t| out.trace.attn_out_at(l, t).to_vec()).collect())
                .collect();
            let lp = pos.iter().flat_map(|&t| log_softmax(out.logits_at(t))).collect();
            Ok((a, lp))
        })
        .collect::<Result<_>>()?;
    let mut attn_out = vec![Vec::new(); nl];
    let mut final_logp = Vec::new();
    for (a, lp) in per {
        for (dst, src) in attn_out.iter_mut().zip(a) {
            dst.extend(src);
        }
        final_logp.extend(lp);
    }
    let rows = final_logp.len() / vs;
    debug_assert_eq!(attn_out[0].len(), rows * d);
    Ok(LensCorpus { attn_out, final_logp, rows })
}

/// Mean KL of layer `l`'s translated attention output against the final
/// distribution over the corpus rows.
pub fn translator_kl(params: &Params, tr: &TranslatorSet, corpus: &LensCorpus, layer: usize) -> f64 {
    let z = tr.apply(layer, &corpus.attn_out[layer]);
    let (logits, _, _) = decode_rows(params, &z);
    kl_rows(&logits, &corpus.final_logp, params.cfg.vocab_size).0
}

/// Affine map `z -> A z + b` from `din` inputs to the residual width, fitted
/// so its decoded distribution matches `target_logp` in KL. `A` is row-major
/// `d x din`. Returns the fitted map and the KL before and after.
pub(crate) struct AffineFit {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub first_kl: f64,
    pub last_kl: f64,
}

pub(crate) fn fit_affine(
    params: &Params,
    x: &[f64],
    din: usize,
    a0: Vec<f64>,
    target_logp: &[f64],
    steps: usize,
    lr: f64,
) -> Result<AffineFit> {
    let (d, vs) = (params.cfg.d_model, params.cfg.vocab_size);
    let rows = x.len() / din;
    let gain = params.s(&params.layout.final_norm);
    let u = params.s(&params.layout.unembed);
    let mut a = a0;
    let mut b = vec![0.0; d];
    let n = d * din + d;
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..=steps {
        let mut z = vec![0.0; rows * d];
        for r in 0..rows {
            z[r * d..(r + 1) * d].copy_from_slice(&b);
        }
        gemm(rows, din, d, View::rm(x, din), View::rm_t(&a, din), 1.0, &mut z, Out::rm(d));
        let (logits, _, inv) = decode_rows(params, &z);
        let (kl, dlog) = kl_rows(&logits, target_logp, vs);
        if !kl.is_finite() {
            return Err(Error::Numeric(format!("lens fit diverged at step {step}")));
        }
        if step == 0 {
            first = kl;
        }
        last = kl;
        if step == steps {
            break;
        }
        let mut dn = vec![0.0; rows * d];
        gemm(rows, vs, d, View::rm(&dlog, vs), View::rm(u, d), 0.0, &mut dn, Out::rm(d));
        let mut dz = vec![0.0; rows * d];
        let mut dgain = vec![0.0; d];
        rmsnorm_backward(&z, &inv, gain, &dn, &mut dz, &mut dgain);
        let mut g = vec![0.0; n];
        // dA_ij = sum_r dz_ri x_rj
        gemm(d, rows, din, View::rm_t(&dz, d), View::rm(x, din), 0.0, &mut g[..d * din], Out::rm(din));
        for r in 0..rows {
            for i in 0..d {
                g[d * din + i] += dz[r * d + i];
            }
        }
        let t = (step + 1) as i32;
        let (b1, b2) = (0.9f64, 0.999f64);
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let upd = lr * (m[i] / (1.0 - b1.powi(t))) / ((v[i] / (1.0 - b2.powi(t))).sqrt() + 1e-8);
            if i < d * din {
                a[i] -= upd;
            } else {
                b[i - d * din] -= upd;
            }
        }
    }
    Ok(AffineFit { a, b, first_kl: first, last_kl: last })
}

/// Fit one translator per layer with full-batch Adam, starting from identity.
pub fn train_translators(params: &Params, corpus: &LensCorpus, cfg: &TranslatorConfig) -> Result<TranslatorSet> {
    if corpus.rows == 0 {
        return Err(Error::Data("translator corpus is empty".into()));
    }
    let (d, nl) = (params.cfg.d_model, params.cfg.n_layers);
    let mut set = TranslatorSet::identity(nl, d);
    let fits: Vec<AffineFit> = (0..nl)
        .into_par_iter()
        .map(|l| fit_affine(params, &corpus.attn_out[l], d, set.a[l].clone(), &corpus.final_logp, cfg.steps, cfg.lr))
        .collect::<Result<_>>()?;
    set.initial_kl.clear();
    set.final_kl.clear();
    for (l, f) in fits.into_iter().enumerate() {
        set.a[l] = f.a;
        set.b[l] = f.b;
        set.initial_kl.push(f.first_kl);
        set.final_kl.push(f.last_kl);
    }
    set.steps = cfg.steps;
    Ok(set)
}

/// Head `head`'s contribution to the residual stream at `position`: its
/// output multiplied by its block of `W_O`.
pub fn head_projection(params: &Params, trace: &ActivationTrace, layer: usize, head: usize, position: usize) -> Vec<f64> {
    let d = params.cfg.d_model;
    let dh = params.cfg.d_head;
    let z = trace.head_output(layer, head, position);
    let mut out = vec![0.0; d];
    gemm(1, dh, d, View::rm(z, dh), View::rm(params.wo_block(layer, head), d), 0.0, &mut out, Out::rm(d));
    out
}

/// Decoded token distribution of one head: its isolated `W_O` projection
/// through the layer's translator, the final norm and the unembedding.
pub fn headlens_decode(
    params: &Params,
    translators: &TranslatorSet,
    trace: &ActivationTrace,
    layer: usize,
    head: usize,
    position: usize,
) -> Result<Vec<f64>> {
    if layer >= translators.n_layers() {
        return Err(Error::Contract(format!("no translator for layer {layer}")));
    }
    if trace.head_outputs.is_empty() {
        return Err(Error::Contract("head lens needs captured head outputs".into()));
    }
    let p = head_projection(params, trace, layer, head, position);
    let z = translators.apply(layer, &p);
    Ok(softmax(&decode_rows(params, &z).0))
}

pub fn top_tokens(probs: &[f64], k: usize) -> Vec<RankedToken> {
    ranked(probs, k)
}
