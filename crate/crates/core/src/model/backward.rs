use super::forward::{forward_tape, Tape};
use super::linalg::{gelu_grad, gemm, log_softmax, rmsnorm_backward, softmax, Out, View};
use super::{OverrideSet, Params, TokenSequence};
use crate::intervene::{focus_row, FocusTerm};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub sft: f64,
    pub focus: f64,
    /// Focus rows whose attention mass on the image was exactly zero.
    pub zero_mass_rows: usize,
}

/// Mean cross-entropy over the answer positions of `seq`. Every other
/// position is ignored.
pub fn loss_sft(logits: &[f64], vocab: usize, seq: &TokenSequence) -> Result<f64> {
    if seq.targets.is_empty() {
        return Err(Error::Contract("sequence has no answer tokens".into()));
    }
    let mut total = 0.0;
    for &(pos, tok) in &seq.targets {
        total -= log_softmax(&logits[pos * vocab..(pos + 1) * vocab])[tok];
    }
    Ok(total / seq.targets.len() as f64)
}

/// Focus loss over the tape and, if `dp` is given, its gradient with
/// respect to each layer's attention probabilities (added into `dp[l]`).
fn focus_on_tape(tape: &Tape, seq: &TokenSequence, n_heads: usize, term: &FocusTerm, mut dp: Option<&mut [Vec<f64>]>) -> (f64, usize) {
    let t = tape.t;
    let img = seq.image_range();
    let n_rows = term.layers.len() * term.queries.len();
    if n_rows == 0 {
        return (0.0, 0);
    }
    let w = term.lambda / n_rows as f64 / n_heads as f64;
    let mut total = 0.0;
    let mut flagged = 0;
    let mut avg = vec![0.0; img.len()];
    for (li, &l) in term.layers.iter().enumerate() {
        let p = &tape.layers[l].p;
        for &q in term.queries {
            avg.fill(0.0);
            for h in 0..n_heads {
                let row = &p[(h * t + q) * t..(h * t + q + 1) * t];
                for (a, &v) in avg.iter_mut().zip(&row[img.clone()]) {
                    *a += v;
                }
            }
            avg.iter_mut().for_each(|a| *a /= n_heads as f64);
            let (loss, grad, zero) = focus_row(&avg, term.prior, term.eps);
            total += loss;
            flagged += zero as usize;
            if let Some(dp) = dp.as_deref_mut() {
                let dpl = &mut dp[li];
                for h in 0..n_heads {
                    let row = &mut dpl[(h * t + q) * t..(h * t + q + 1) * t];
                    for (r, g) in row[img.clone()].iter_mut().zip(&grad) {
                        *r += w * g;
                    }
                }
            }
        }
    }
    (total / n_rows as f64, flagged)
}

fn check_focus(p: &Params, seq: &TokenSequence, term: &FocusTerm) -> Result<()> {
    if term.prior.len() != seq.n_image {
        return Err(Error::Contract(format!("focus prior has {} entries for {} image tokens", term.prior.len(), seq.n_image)));
    }
    if let Some(&l) = term.layers.iter().find(|&&l| l >= p.cfg.n_layers) {
        return Err(Error::Contract(format!("focus layer {l} out of range")));
    }
    if let Some(&q) = term.queries.iter().find(|&&q| q >= seq.len()) {
        return Err(Error::Contract(format!("focus query {q} out of range")));
    }
    Ok(())
}

/// Composite loss `L_sft + lambda * L_focus` without gradients.
pub fn loss(p: &Params, seq: &TokenSequence, ov: &OverrideSet, focus: Option<&FocusTerm>) -> Result<LossBreakdown> {
    let tape = forward_tape(p, seq, ov)?;
    let sft = loss_sft(&tape.logits, p.cfg.vocab_size, seq)?;
    let mut out = LossBreakdown { total: sft, sft, ..Default::default() };
    if let Some(term) = focus {
        check_focus(p, seq, term)?;
        let (f, z) = focus_on_tape(&tape, seq, p.cfg.n_heads, term, None);
        out.focus = f;
        out.zero_mass_rows = z;
        out.total += term.lambda * f;
    }
    Ok(out)
}

fn colsum_into(x: &[f64], cols: usize, out: &mut [f64]) {
    for row in x.chunks(cols) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
}

fn zero_overridden_rows(dx: &mut [f64], state: usize, d: usize, ov: &OverrideSet) {
    for (&(_, t), _) in ov.residual.range((state, 0)..(state + 1, 0)) {
        dx[t * d..(t + 1) * d].fill(0.0);
    }
}

/// Reverse-mode gradient of the composite loss, accumulated into `grad`.
pub fn loss_and_grad(
    p: &Params,
    seq: &TokenSequence,
    ov: &OverrideSet,
    focus: Option<&FocusTerm>,
    grad: &mut Params,
) -> Result<LossBreakdown> {
    let tape = forward_tape(p, seq, ov)?;
    let c = &p.cfg;
    let (t, d, nh, dh, m, vs) = (tape.t, c.d_model, c.n_heads, c.d_head, c.d_mlp(), c.vocab_size);
    let lay = &p.layout;

    let sft = loss_sft(&tape.logits, vs, seq)?;
    let mut out = LossBreakdown { total: sft, sft, ..Default::default() };

    let mut focus_dp: Vec<Vec<f64>> = Vec::new();
    let mut focus_layer_index = vec![None; c.n_layers];
    if let Some(term) = focus {
        check_focus(p, seq, term)?;
        focus_dp = vec![vec![0.0; nh * t * t]; term.layers.len()];
        for (i, &l) in term.layers.iter().enumerate() {
            focus_layer_index[l] = Some(i);
        }
        let (f, z) = focus_on_tape(&tape, seq, nh, term, Some(&mut focus_dp));
        out.focus = f;
        out.zero_mass_rows = z;
        out.total += term.lambda * f;
        if term.layers.len() != focus_layer_index.iter().flatten().count() {
            return Err(Error::Contract("focus layers must be distinct".into()));
        }
    }

    // unembedding
    let mut dlog = vec![0.0; t * vs];
    let inv_n = 1.0 / seq.targets.len() as f64;
    for &(pos, tok) in &seq.targets {
        let mut pr = softmax(&tape.logits[pos * vs..(pos + 1) * vs]);
        pr[tok] -= 1.0;
        for (dl, pv) in dlog[pos * vs..(pos + 1) * vs].iter_mut().zip(&pr) {
            *dl += pv * inv_n;
        }
    }
    gemm(vs, t, d, View::rm_t(&dlog, vs), View::rm(&tape.nf, d), 1.0, grad.s_mut(&lay.unembed), Out::rm(d));
    colsum_into(&dlog, vs, grad.s_mut(&lay.unembed_b));
    let mut dnf = vec![0.0; t * d];
    gemm(t, vs, d, View::rm(&dlog, vs), View::rm(p.s(&lay.unembed), d), 0.0, &mut dnf, Out::rm(d));
    let mut dx = vec![0.0; t * d];
    rmsnorm_backward(&tape.x_final, &tape.invf, p.s(&lay.final_norm), &dnf, &mut dx, grad.s_mut(&lay.final_norm));
    zero_overridden_rows(&mut dx, c.n_layers, d, ov);

    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut dg = vec![0.0; t * m];
    let mut dn = vec![0.0; t * d];
    let mut dhs = vec![0.0; t * d];
    let mut dp = vec![0.0; t * t];
    for l in (0..c.n_layers).rev() {
        let lt = &tape.layers[l];
        let ll = &lay.layers[l];

        // MLP
        let mut dx2 = dx.clone();
        gemm(m, t, d, View::rm_t(&lt.g, m), View::rm(&dx, d), 1.0, grad.s_mut(&ll.w2), Out::rm(d));
        colsum_into(&dx, d, grad.s_mut(&ll.b2));
        gemm(t, d, m, View::rm(&dx, d), View::rm_t(p.s(&ll.w2), d), 0.0, &mut dg, Out::rm(m));
        for (g, &z) in dg.iter_mut().zip(&lt.z) {
            *g *= gelu_grad(z);
        }
        let dz = &dg;
        gemm(d, t, m, View::rm_t(&lt.n2, d), View::rm(dz, m), 1.0, grad.s_mut(&ll.w1), Out::rm(m));
        colsum_into(dz, m, grad.s_mut(&ll.b1));
        gemm(t, m, d, View::rm(dz, m), View::rm_t(p.s(&ll.w1), m), 0.0, &mut dn, Out::rm(d));
        rmsnorm_backward(&lt.x2, &lt.inv2, p.s(&ll.mlp_norm), &dn, &mut dx2, grad.s_mut(&ll.mlp_norm));

        // attention
        gemm(d, t, d, View::rm_t(&lt.hs, d), View::rm(&dx2, d), 1.0, grad.s_mut(&ll.wo), Out::rm(d));
        gemm(t, d, d, View::rm(&dx2, d), View::rm_t(p.s(&ll.wo), d), 0.0, &mut dhs, Out::rm(d));
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        for h in 0..nh {
            let pr = &lt.p[h * t * t..(h + 1) * t * t];
            let patched = ov.head_output.contains_key(&(l, h));
            let sc = if patched { 0.0 } else { ov.scale(l, h) };
            if sc != 1.0 {
                for i in 0..t {
                    dhs[i * d + h * dh..i * d + (h + 1) * dh].iter_mut().for_each(|v| *v *= sc);
                }
            }
            gemm(t, dh, t, View::cols(&dhs, d, h * dh), View::cols_t(&lt.v, d, h * dh), 0.0, &mut dp, Out::rm(t));
            if let Some(fi) = focus_layer_index[l] {
                let extra = &focus_dp[fi][h * t * t..(h + 1) * t * t];
                dp.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
            }
            gemm(t, t, dh, View::rm_t(pr, t), View::cols(&dhs, d, h * dh), 0.0, &mut dv, Out::cols(d, h * dh));
            let cscale = ov.beta(l, h) * inv_sqrt;
            for i in 0..t {
                let prow = &pr[i * t..(i + 1) * t];
                let drow = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot) * cscale;
                }
                drow[i + 1..].fill(0.0);
            }
            gemm(t, t, dh, View::rm(&dp, t), View::cols(&lt.k, d, h * dh), 0.0, &mut dq, Out::cols(d, h * dh));
            gemm(t, t, dh, View::rm_t(&dp, t), View::cols(&lt.q, d, h * dh), 0.0, &mut dk, Out::cols(d, h * dh));
        }
        for (dw, dy) in [(&ll.wq, &dq), (&ll.wk, &dk), (&ll.wv, &dv)] {
            gemm(d, t, d, View::rm_t(&lt.n1, d), View::rm(dy, d), 1.0, grad.s_mut(dw), Out::rm(d));
        }
        gemm(t, d, d, View::rm(&dq, d), View::rm_t(p.s(&ll.wq), d), 0.0, &mut dn, Out::rm(d));
        gemm(t, d, d, View::rm(&dk, d), View::rm_t(p.s(&ll.wk), d), 1.0, &mut dn, Out::rm(d));
        gemm(t, d, d, View::rm(&dv, d), View::rm_t(p.s(&ll.wv), d), 1.0, &mut dn, Out::rm(d));
        rmsnorm_backward(&lt.x, &lt.inv1, p.s(&ll.attn_norm), &dn, &mut dx2, grad.s_mut(&ll.attn_norm));
        dx = dx2;
        zero_overridden_rows(&mut dx, l, d, ov);
    }

    // embeddings
    let img = seq.image_range();
    {
        let gtok = grad.s_mut(&lay.token_embed);
        for i in 0..t {
            if !img.contains(&i) {
                let tok = seq.tokens[i];
                gtok[tok * d..(tok + 1) * d].iter_mut().zip(&dx[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
            }
        }
    }
    grad.s_mut(&lay.pos_embed)[..t * d].iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    if seq.n_image > 0 {
        let pd = c.patch_dim();
        let dimg = View { data: &dx, off: img.start * d, rs: d, cs: 1 };
        gemm(pd, seq.n_image, d, View::rm_t(&seq.patches, pd), dimg, 1.0, grad.s_mut(&lay.patch_w), Out::rm(d));
        colsum_into(&dx[img.start * d..img.end * d], d, grad.s_mut(&lay.patch_b));
    }
    if !out.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", out.total)));
    }
    Ok(out)
}
