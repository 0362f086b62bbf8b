use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::linalg::{gelu, gemm, matmul, rmsnorm, softmax_in_place, Out, View};
use super::{Params, TokenSequence};
use crate::{Error, Result};

/// Replacement for one head's output (the input to its `W_O` block).
#[derive(Debug, Clone, PartialEq)]
pub enum HeadPatch {
    /// `seq_len x d_head`, one row per position.
    PerToken(Vec<f64>),
    /// A single `d_head` vector used at every position.
    Constant(Vec<f64>),
}

/// Activation edits applied during a forward pass.
///
/// `residual` is keyed by `(state, token)`. State `l` is the input to block
/// `l` (state 0 is the embedding, state `L` feeds the final norm).
/// The head maps are keyed by `(layer, head)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OverrideSet {
    pub residual: BTreeMap<(usize, usize), Vec<f64>>,
    pub head_output: BTreeMap<(usize, usize), HeadPatch>,
    /// Multiplier on a head's pre-softmax attention logits.
    pub logit_multiplier: BTreeMap<(usize, usize), f64>,
    /// Multiplier on a head's output before `W_O`.
    pub head_scale: BTreeMap<(usize, usize), f64>,
}

impl OverrideSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.is_empty()
            && self.head_output.is_empty()
            && self.logit_multiplier.is_empty()
            && self.head_scale.is_empty()
    }

    /// Combine two fragments. Scalar multipliers on the same head multiply;
    /// two vector patches on the same site are a contract violation.
    pub fn merge(mut self, other: OverrideSet) -> Result<Self> {
        for (k, v) in other.residual {
            if self.residual.insert(k, v).is_some() {
                return Err(Error::Contract(format!("residual override {k:?} set twice")));
            }
        }
        for (k, v) in other.head_output {
            if self.head_output.insert(k, v).is_some() {
                return Err(Error::Contract(format!("head patch {k:?} set twice")));
            }
        }
        for (k, v) in other.logit_multiplier {
            *self.logit_multiplier.entry(k).or_insert(1.0) *= v;
        }
        for (k, v) in other.head_scale {
            *self.head_scale.entry(k).or_insert(1.0) *= v;
        }
        Ok(self)
    }

    pub fn beta(&self, layer: usize, head: usize) -> f64 {
        self.logit_multiplier.get(&(layer, head)).copied().unwrap_or(1.0)
    }

    pub fn scale(&self, layer: usize, head: usize) -> f64 {
        self.head_scale.get(&(layer, head)).copied().unwrap_or(1.0)
    }

    pub fn validate(&self, p: &Params, seq_len: usize) -> Result<()> {
        let c = &p.cfg;
        let bad = |m: String| Err(Error::Contract(m));
        for (&(l, t), v) in &self.residual {
            if l > c.n_layers || t >= seq_len {
                return bad(format!("residual override ({l}, {t}) outside {} states x {seq_len} tokens", c.n_layers + 1));
            }
            if v.len() != c.d_model {
                return bad(format!("residual override ({l}, {t}) has width {}", v.len()));
            }
        }
        let head_ok = |l: usize, h: usize| l < c.n_layers && h < c.n_heads;
        for (&(l, h), patch) in &self.head_output {
            if !head_ok(l, h) {
                return bad(format!("head patch L{l}H{h} out of range"));
            }
            let want = match patch {
                HeadPatch::PerToken(v) => (v.len(), seq_len * c.d_head),
                HeadPatch::Constant(v) => (v.len(), c.d_head),
            };
            if want.0 != want.1 {
                return bad(format!("head patch L{l}H{h} has {} values, expected {}", want.0, want.1));
            }
        }
        for (map, what) in [(&self.logit_multiplier, "logit multiplier"), (&self.head_scale, "head scale")] {
            for (&(l, h), &v) in map {
                if !head_ok(l, h) {
                    return bad(format!("{what} L{l}H{h} out of range"));
                }
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("{what} L{l}H{h} = {v} must be finite and non-negative"));
                }
            }
        }
        Ok(())
    }
}

/// Which activations a forward pass keeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capture {
    pub residuals: bool,
    pub attention: bool,
    pub head_outputs: bool,
    pub scores: bool,
    /// Per-layer attention and MLP contributions to the residual stream.
    pub blocks: bool,
}

impl Capture {
    pub const NONE: Capture =
        Capture { residuals: false, attention: false, head_outputs: false, scores: false, blocks: false };
    pub const ALL: Capture =
        Capture { residuals: true, attention: true, head_outputs: true, scores: true, blocks: true };
}

/// Activations captured during a forward pass. Uncaptured fields are empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationTrace {
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// `L + 1` states of `seq_len x d_model`: the embedding, then each block output.
    pub residuals: Vec<Vec<f64>>,
    /// Per layer, `n_heads x seq_len x seq_len` attention probabilities.
    pub attention: Vec<Vec<f64>>,
    /// Pre-softmax logits after the multiplier; masked entries are `-inf`.
    pub scores: Vec<Vec<f64>>,
    /// Per layer, concatenated head outputs as fed to `W_O` (`seq_len x d_model`).
    pub head_outputs: Vec<Vec<f64>>,
    pub attn_out: Vec<Vec<f64>>,
    pub mlp_out: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn residual(&self, state: usize, pos: usize) -> &[f64] {
        let d = self.d_model;
        &self.residuals[state][pos * d..(pos + 1) * d]
    }

    pub fn attn_row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let t = self.seq_len;
        let base = (head * t + query) * t;
        &self.attention[layer][base..base + t]
    }

    pub fn head_output(&self, layer: usize, head: usize, pos: usize) -> &[f64] {
        let d = self.d_model;
        let dh = d / self.n_heads;
        let base = pos * d + head * dh;
        &self.head_outputs[layer][base..base + dh]
    }

    pub fn attn_out_at(&self, layer: usize, pos: usize) -> &[f64] {
        let d = self.d_model;
        &self.attn_out[layer][pos * d..(pos + 1) * d]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `seq_len x vocab` logits.
    pub logits: Vec<f64>,
    pub vocab: usize,
    pub trace: ActivationTrace,
}

impl ForwardOutput {
    pub fn logits_at(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab..(pos + 1) * self.vocab]
    }
}

pub(crate) struct LayerTape {
    pub x: Vec<f64>,
    pub n1: Vec<f64>,
    pub inv1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub scores: Vec<f64>,
    pub p: Vec<f64>,
    pub hs: Vec<f64>,
    pub attn_out: Vec<f64>,
    pub x2: Vec<f64>,
    pub n2: Vec<f64>,
    pub inv2: Vec<f64>,
    pub z: Vec<f64>,
    pub g: Vec<f64>,
    pub mlp_out: Vec<f64>,
}

pub(crate) struct Tape {
    pub t: usize,
    pub layers: Vec<LayerTape>,
    pub x_final: Vec<f64>,
    pub nf: Vec<f64>,
    pub invf: Vec<f64>,
    pub logits: Vec<f64>,
}

fn apply_residual_overrides(x: &mut [f64], state: usize, d: usize, ov: &OverrideSet) {
    for (&(_, t), v) in ov.residual.range((state, 0)..(state + 1, 0)) {
        x[t * d..(t + 1) * d].copy_from_slice(v);
    }
}

fn embed(p: &Params, seq: &TokenSequence) -> Vec<f64> {
    let c = &p.cfg;
    let d = c.d_model;
    let t = seq.len();
    let mut x = vec![0.0; t * d];
    let tok = p.s(&p.layout.token_embed);
    let pos = p.s(&p.layout.pos_embed);
    let img = seq.image_range();
    for i in 0..t {
        let row = &mut x[i * d..(i + 1) * d];
        if !img.contains(&i) {
            row.copy_from_slice(&tok[seq.tokens[i] * d..(seq.tokens[i] + 1) * d]);
        }
        for (r, pv) in row.iter_mut().zip(&pos[i * d..(i + 1) * d]) {
            *r += pv;
        }
    }
    if seq.n_image > 0 {
        let pd = c.patch_dim();
        let proj = matmul(&seq.patches, p.s(&p.layout.patch_w), seq.n_image, pd, d);
        let b = p.s(&p.layout.patch_b);
        for (k, i) in img.enumerate() {
            for j in 0..d {
                x[i * d + j] += proj[k * d + j] + b[j];
            }
        }
    }
    x
}

pub(crate) fn check_sequence(p: &Params, seq: &TokenSequence) -> Result<()> {
    let c = &p.cfg;
    let t = seq.len();
    if t == 0 || t > c.max_seq {
        return Err(Error::Contract(format!("sequence length {t} outside 1..={}", c.max_seq)));
    }
    if seq.segments.len() != t || seq.patches.len() != seq.n_image * c.patch_dim() || seq.image_range().end > t {
        return Err(Error::Contract("malformed token sequence".into()));
    }
    if let Some(&tok) = seq.tokens.iter().find(|&&x| x >= c.vocab_size) {
        return Err(Error::Contract(format!("token id {tok} outside the vocabulary")));
    }
    Ok(())
}

pub(crate) fn forward_tape(p: &Params, seq: &TokenSequence, ov: &OverrideSet) -> Result<Tape> {
    check_sequence(p, seq)?;
    ov.validate(p, seq.len())?;
    let c = &p.cfg;
    let (t, d, nh, dh, m, vs) = (seq.len(), c.d_model, c.n_heads, c.d_head, c.d_mlp(), c.vocab_size);
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut x = embed(p, seq);
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let lay = &p.layout.layers[l];
        apply_residual_overrides(&mut x, l, d, ov);
        let (n1, inv1) = rmsnorm(&x, p.s(&lay.attn_norm));
        let q = matmul(&n1, p.s(&lay.wq), t, d, d);
        let k = matmul(&n1, p.s(&lay.wk), t, d, d);
        let v = matmul(&n1, p.s(&lay.wv), t, d, d);

        let mut scores = vec![0.0; nh * t * t];
        let mut probs = vec![0.0; nh * t * t];
        let mut hs = vec![0.0; t * d];
        for h in 0..nh {
            let s = &mut scores[h * t * t..(h + 1) * t * t];
            let scale = ov.beta(l, h) * inv_sqrt;
            gemm(t, dh, t, View::cols(&q, d, h * dh), View::cols_t(&k, d, h * dh), 0.0, s, Out::rm(t));
            let pr = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let srow = &mut s[i * t..(i + 1) * t];
                for sv in srow[..=i].iter_mut() {
                    *sv *= scale;
                }
                srow[i + 1..].fill(f64::NEG_INFINITY);
                let prow = &mut pr[i * t..(i + 1) * t];
                prow[..=i].copy_from_slice(&srow[..=i]);
                softmax_in_place(&mut prow[..=i]);
            }
            gemm(t, t, dh, View::rm(pr, t), View::cols(&v, d, h * dh), 0.0, &mut hs, Out::cols(d, h * dh));

            match ov.head_output.get(&(l, h)) {
                Some(HeadPatch::PerToken(rows)) => {
                    for i in 0..t {
                        hs[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&rows[i * dh..(i + 1) * dh]);
                    }
                }
                Some(HeadPatch::Constant(row)) => {
                    for i in 0..t {
                        hs[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(row);
                    }
                }
                None => {}
            }
            let sc = ov.scale(l, h);
            if sc != 1.0 {
                for i in 0..t {
                    hs[i * d + h * dh..i * d + (h + 1) * dh].iter_mut().for_each(|v| *v *= sc);
                }
            }
        }
        let attn_out = matmul(&hs, p.s(&lay.wo), t, d, d);
        let x2: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let (n2, inv2) = rmsnorm(&x2, p.s(&lay.mlp_norm));
        let mut z = matmul(&n2, p.s(&lay.w1), t, d, m);
        let b1 = p.s(&lay.b1);
        for row in z.chunks_mut(m) {
            row.iter_mut().zip(b1).for_each(|(a, b)| *a += b);
        }
        let g: Vec<f64> = z.iter().map(|&v| gelu(v)).collect();
        let mut mlp_out = matmul(&g, p.s(&lay.w2), t, m, d);
        let b2 = p.s(&lay.b2);
        for row in mlp_out.chunks_mut(d) {
            row.iter_mut().zip(b2).for_each(|(a, b)| *a += b);
        }
        let y: Vec<f64> = x2.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();
        layers.push(LayerTape {
            x: std::mem::replace(&mut x, y),
            n1,
            inv1,
            q,
            k,
            v,
            scores,
            p: probs,
            hs,
            attn_out,
            x2,
            n2,
            inv2,
            z,
            g,
            mlp_out,
        });
    }
    apply_residual_overrides(&mut x, c.n_layers, d, ov);
    let (nf, invf) = rmsnorm(&x, p.s(&p.layout.final_norm));
    let mut logits = vec![0.0; t * vs];
    let u = p.s(&p.layout.unembed);
    gemm(t, d, vs, View::rm(&nf, d), View::rm_t(u, d), 0.0, &mut logits, Out::rm(vs));
    let cb = p.s(&p.layout.unembed_b);
    for row in logits.chunks_mut(vs) {
        row.iter_mut().zip(cb).for_each(|(a, b)| *a += b);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits in forward pass".into()));
    }
    Ok(Tape { t, layers, x_final: x, nf, invf, logits })
}

/// Run the model over `seq`, applying `overrides` and keeping the
/// activations selected by `capture`.
pub fn forward(p: &Params, seq: &TokenSequence, overrides: &OverrideSet, capture: Capture) -> Result<ForwardOutput> {
    let tape = forward_tape(p, seq, overrides)?;
    let mut trace = ActivationTrace { seq_len: tape.t, d_model: p.cfg.d_model, n_heads: p.cfg.n_heads, ..Default::default() };
    let n_layers = tape.layers.len();
    for lt in tape.layers {
        if capture.residuals {
            trace.residuals.push(lt.x);
        }
        if capture.attention {
            trace.attention.push(lt.p);
        }
        if capture.scores {
            trace.scores.push(lt.scores);
        }
        if capture.head_outputs {
            trace.head_outputs.push(lt.hs);
        }
        if capture.blocks {
            trace.attn_out.push(lt.attn_out);
            trace.mlp_out.push(lt.mlp_out);
        }
    }
    if capture.residuals {
        trace.residuals.push(tape.x_final);
        debug_assert_eq!(trace.residuals.len(), n_layers + 1);
    }
    Ok(ForwardOutput { logits: tape.logits, vocab: p.cfg.vocab_size, trace })
}

/// Final norm and unembedding of a single residual vector.
pub fn unembed(p: &Params, x: &[f64]) -> Vec<f64> {
    let (n, _) = rmsnorm(x, p.s(&p.layout.final_norm));
    let vs = p.cfg.vocab_size;
    let mut out = p.s(&p.layout.unembed_b).to_vec();
    gemm(1, p.cfg.d_model, vs, View::rm(&n, p.cfg.d_model), View::rm_t(p.s(&p.layout.unembed), p.cfg.d_model), 1.0, &mut out, Out::rm(vs));
    out
}

/// Greedy single-token answer at the answer position.
pub fn generate_answer(p: &Params, seq: &TokenSequence, overrides: &OverrideSet) -> Result<usize> {
    let out = forward(p, seq, overrides, Capture::NONE)?;
    Ok(super::linalg::argmax(out.logits_at(seq.answer_pos)))
}

/// A single attention head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn key(&self) -> (usize, usize) {
        (self.layer, self.head)
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}
