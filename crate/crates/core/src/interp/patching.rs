use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Item;
use crate::model::linalg::argmax;
use crate::model::{
    build_sequence, forward, Capture, HeadId, HeadPatch, ModelConfig, OverrideSet, Params, Segment, TokenSequence,
};
use crate::synth::{CounterfactualPair, QARecord, Task};
use crate::{Error, Result};

/// Token positions patched together in layer-wise activation patching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenGroup {
    SystemPrompt,
    ImageTokens,
    LastImageToken,
    UserInstruction,
    LastPromptToken,
    GeneratedTokens,
    AllTokens,
}

impl TokenGroup {
    pub const SIX: [TokenGroup; 6] = [
        TokenGroup::SystemPrompt,
        TokenGroup::ImageTokens,
        TokenGroup::LastImageToken,
        TokenGroup::UserInstruction,
        TokenGroup::LastPromptToken,
        TokenGroup::GeneratedTokens,
    ];

    pub fn positions(&self, seq: &TokenSequence) -> Vec<usize> {
        let seg = match self {
            TokenGroup::AllTokens => return (0..seq.len()).collect(),
            TokenGroup::SystemPrompt => Segment::SystemPrompt,
            TokenGroup::ImageTokens => Segment::ImageToken,
            TokenGroup::LastImageToken => Segment::LastImageToken,
            TokenGroup::UserInstruction => Segment::UserInstruction,
            TokenGroup::LastPromptToken => Segment::LastPromptToken,
            TokenGroup::GeneratedTokens => Segment::GeneratedToken,
        };
        seq.positions_of(seg)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TokenGroup::SystemPrompt => "system-prompt",
            TokenGroup::ImageTokens => "image-tokens",
            TokenGroup::LastImageToken => "last-image-token",
            TokenGroup::UserInstruction => "user-instruction",
            TokenGroup::LastPromptToken => "last-prompt-token",
            TokenGroup::GeneratedTokens => "generated-tokens",
            TokenGroup::AllTokens => "all-tokens",
        }
    }
}

/// A clean/corrupted pair of aligned sequences.
#[derive(Debug, Clone)]
pub struct SeqPair {
    pub clean: TokenSequence,
    pub corrupted: TokenSequence,
}

impl SeqPair {
    /// Counting questions about both scenes of a counterfactual pair.
    pub fn counting(pair: &CounterfactualPair, cfg: &ModelConfig) -> Result<Self> {
        let seq = |scene| -> Result<TokenSequence> {
            let rec = QARecord::new(scene, Task::Count)?;
            build_sequence(&rec, scene, cfg)
        };
        Ok(Self { clean: seq(&pair.clean)?, corrupted: seq(&pair.corrupted)? })
    }
}

fn check_pair(p: &SeqPair) -> Result<()> {
    if p.clean.len() != p.corrupted.len() || p.clean.segments != p.corrupted.segments {
        return Err(Error::Contract("clean and corrupted sequences are not tag-aligned".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverwriteCurve {
    pub group: TokenGroup,
    /// Block indices `1..=L`; layer `l` patches the output of block `l`.
    pub layers: Vec<usize>,
    pub rates: Vec<f64>,
    pub n_pairs: usize,
    /// Pairs whose clean and corrupted predictions differ; the denominator.
    pub n_effective: usize,
}

/// Layer-wise overwrite rate: the fraction of pairs whose clean-run
/// prediction becomes the corrupted run's prediction after the group's
/// residual states at layer `l` are replaced by the corrupted ones. Pairs on
/// which both runs already agree cannot flip and are excluded.
pub fn vap_layerwise(params: &Params, pairs: &[SeqPair], groups: &[TokenGroup]) -> Result<Vec<OverwriteCurve>> {
    pairs.iter().try_for_each(check_pair)?;
    let nl = params.cfg.n_layers;
    let cap = Capture { residuals: true, ..Capture::NONE };
    // per pair: Option<flips[group][layer]> (None when the predictions agree)
    let per: Vec<Option<Vec<Vec<bool>>>> = pairs
        .par_iter()
        .map(|pair| {
            let clean = forward(params, &pair.clean, &OverrideSet::new(), Capture::NONE)?;
            let cor = forward(params, &pair.corrupted, &OverrideSet::new(), cap)?;
            let pos = pair.clean.answer_pos;
            let clean_pred = argmax(clean.logits_at(pos));
            let cor_pred = argmax(cor.logits_at(pos));
            if clean_pred == cor_pred {
                return Ok(None);
            }
            let flips = groups
                .iter()
                .map(|g| {
                    let toks = g.positions(&pair.clean);
                    (1..=nl)
                        .map(|l| {
                            let mut ov = OverrideSet::new();
                            for &t in &toks {
                                ov.residual.insert((l, t), cor.trace.residual(l, t).to_vec());
                            }
                            let out = forward(params, &pair.clean, &ov, Capture::NONE)?;
                            Ok(argmax(out.logits_at(pos)) == cor_pred)
                        })
                        .collect::<Result<Vec<bool>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(flips))
        })
        .collect::<Result<_>>()?;
    let effective: Vec<&Vec<Vec<bool>>> = per.iter().flatten().collect();
    let n_eff = effective.len();
    Ok(groups
        .iter()
        .enumerate()
        .map(|(gi, &group)| {
            let rates = (0..nl)
                .map(|li| {
                    if n_eff == 0 {
                        0.0
                    } else {
                        effective.iter().filter(|f| f[gi][li]).count() as f64 / n_eff as f64
                    }
                })
                .collect();
            OverwriteCurve { group, layers: (1..=nl).collect(), rates, n_pairs: pairs.len(), n_effective: n_eff }
        })
        .collect())
}

/// First layer at which `late` strictly exceeds `early`, if any.
pub fn crossover_layer(early: &OverwriteCurve, late: &OverwriteCurve) -> Option<usize> {
    early.layers.iter().zip(early.rates.iter().zip(&late.rates)).find(|(_, (e, l))| l > e).map(|(l, _)| *l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

impl HeadScore {
    pub fn id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

fn head_patch_rows(trace_outputs: &[f64], d: usize, dh: usize, h: usize, t: usize) -> Vec<f64> {
    (0..t).flat_map(|i| trace_outputs[i * d + h * dh..i * d + (h + 1) * dh].to_vec()).collect()
}

/// Per-head importance: the mean drop in `logit[clean answer] -
/// logit[corrupted answer]` when the head's output in the clean run is
/// replaced by its output in the corrupted run.
pub fn vap_headwise(params: &Params, pairs: &[SeqPair]) -> Result<Vec<HeadScore>> {
    pairs.iter().try_for_each(check_pair)?;
    if pairs.is_empty() {
        return Err(Error::Data("no pairs for head patching".into()));
    }
    let (nl, nh, d, dh) = (params.cfg.n_layers, params.cfg.n_heads, params.cfg.d_model, params.cfg.d_head);
    let cap = Capture { head_outputs: true, ..Capture::NONE };
    let per: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|pair| {
            let a = pair.clean.answer().ok_or_else(|| Error::Contract("clean sequence has no answer".into()))?;
            let b = pair.corrupted.answer().ok_or_else(|| Error::Contract("corrupted sequence has no answer".into()))?;
            let pos = pair.clean.answer_pos;
            let clean = forward(params, &pair.clean, &OverrideSet::new(), Capture::NONE)?;
            let cor = forward(params, &pair.corrupted, &OverrideSet::new(), cap)?;
            let ld = |lg: &[f64]| lg[a] - lg[b];
            let base = ld(clean.logits_at(pos));
            let mut out = Vec::with_capacity(nl * nh);
            for l in 0..nl {
                for h in 0..nh {
                    let mut ov = OverrideSet::new();
                    let rows = head_patch_rows(&cor.trace.head_outputs[l], d, dh, h, pair.clean.len());
                    ov.head_output.insert((l, h), HeadPatch::PerToken(rows));
                    let patched = forward(params, &pair.clean, &ov, Capture::NONE)?;
                    out.push(base - ld(patched.logits_at(pos)));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((0..nl * nh)
        .map(|i| HeadScore {
            layer: i / nh,
            head: i % nh,
            score: per.iter().map(|v| v[i]).sum::<f64>() / pairs.len() as f64,
        })
        .collect())
}

/// Per-position mean of every head's output over a corpus of equal-length
/// sequences, indexed `[layer][head]` as `seq_len x d_head`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeans {
    pub key: String,
    pub seq_len: usize,
    pub corpus_size: usize,
    pub means: Vec<Vec<Vec<f64>>>,
}

/// Content hash of a model and a corpus, used to key cached means.
pub fn corpus_key(params: &Params, items: &[Item]) -> String {
    let mut h = Sha256::new();
    for v in &params.data {
        h.update(v.to_le_bytes());
    }
    for it in items {
        for &t in &it.seq.tokens {
            h.update((t as u32).to_le_bytes());
        }
        for v in &it.seq.patches {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn head_means(params: &Params, items: &[Item]) -> Result<HeadMeans> {
    let Some(first) = items.first() else {
        return Err(Error::Data("mean ablation corpus is empty".into()));
    };
    let t = first.seq.len();
    if items.iter().any(|i| i.seq.len() != t) {
        return Err(Error::Contract("mean ablation needs equal-length sequences within a task".into()));
    }
    let (nl, nh, d, dh) = (params.cfg.n_layers, params.cfg.n_heads, params.cfg.d_model, params.cfg.d_head);
    let cap = Capture { head_outputs: true, ..Capture::NONE };
    let sums: Vec<Vec<Vec<f64>>> = items
        .par_iter()
        .map(|it| Ok(forward(params, &it.seq, &OverrideSet::new(), cap)?.trace.head_outputs))
        .collect::<Result<_>>()?;
    let n = items.len() as f64;
    let means = (0..nl)
        .map(|l| {
            (0..nh)
                .map(|h| {
                    let mut acc = vec![0.0; t * dh];
                    for s in &sums {
                        for (a, v) in acc.iter_mut().zip(head_patch_rows(&s[l], d, dh, h, t)) {
                            *a += v;
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= n);
                    acc
                })
                .collect()
        })
        .collect();
    Ok(HeadMeans { key: corpus_key(params, items), seq_len: t, corpus_size: items.len(), means })
}

/// [`head_means`] with an on-disk cache keyed by [`corpus_key`].
pub fn head_means_cached(params: &Params, items: &[Item], cache_dir: &Path) -> Result<HeadMeans> {
    let key = corpus_key(params, items);
    let path = cache_dir.join(format!("head_means_{}.json", &key[..16]));
    if path.exists() {
        let cached: HeadMeans = serde_json::from_slice(&std::fs::read(&path)?)?;
        if cached.key == key {
            return Ok(cached);
        }
    }
    let m = head_means(params, items)?;
    std::fs::create_dir_all(cache_dir)?;
    std::fs::write(&path, serde_json::to_vec(&m)?)?;
    Ok(m)
}

/// Ordered set of heads for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    pub task: String,
    pub heads: Vec<HeadId>,
}

impl HeadSet {
    pub fn new(task: impl Into<String>, heads: Vec<HeadId>) -> Result<Self> {
        let uniq: BTreeSet<_> = heads.iter().collect();
        if uniq.len() != heads.len() {
            return Err(Error::Contract("head set contains duplicates".into()));
        }
        Ok(Self { task: task.into(), heads })
    }
}

/// Sort by score descending, then layer and head ascending.
pub fn rank_heads(scores: &[HeadScore]) -> Vec<HeadScore> {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.layer.cmp(&b.layer)).then(a.head.cmp(&b.head)));
    s
}

pub fn top_k_heads(task: &str, scores: &[HeadScore], k: usize) -> HeadSet {
    let heads = rank_heads(scores).into_iter().take(k).map(|s| s.id()).collect();
    HeadSet { task: task.into(), heads }
}

/// Mean drop of the answer-token logit when each head is replaced by its
/// corpus mean, and the top-`k` heads under [`rank_heads`].
pub fn mean_ablation_importance(
    params: &Params,
    items: &[Item],
    means: &HeadMeans,
    task: &str,
    k: usize,
) -> Result<(Vec<HeadScore>, HeadSet)> {
    if items.iter().any(|i| i.seq.len() != means.seq_len) {
        return Err(Error::Contract("corpus does not match the precomputed means".into()));
    }
    let (nl, nh) = (params.cfg.n_layers, params.cfg.n_heads);
    let per: Vec<Vec<f64>> = items
        .par_iter()
        .map(|it| {
            let ans = it.seq.answer().ok_or_else(|| Error::Contract("item has no answer".into()))?;
            let pos = it.seq.answer_pos;
            let base = forward(params, &it.seq, &OverrideSet::new(), Capture::NONE)?.logits_at(pos)[ans];
            let mut out = Vec::with_capacity(nl * nh);
            for l in 0..nl {
                for h in 0..nh {
                    let mut ov = OverrideSet::new();
                    ov.head_output.insert((l, h), HeadPatch::PerToken(means.means[l][h].clone()));
                    let patched = forward(params, &it.seq, &ov, Capture::NONE)?;
                    out.push(base - patched.logits_at(pos)[ans]);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n = items.len().max(1) as f64;
    let scores: Vec<HeadScore> = (0..nl * nh)
        .map(|i| HeadScore { layer: i / nh, head: i % nh, score: per.iter().map(|v| v[i]).sum::<f64>() / n })
        .collect();
    let set = top_k_heads(task, &scores, k);
    Ok((scores, set))
}

/// `|A ∩ B| / |A ∪ B|`, with two empty sets defined to have similarity 1.
pub fn jaccard(a: &HeadSet, b: &HeadSet) -> f64 {
    let sa: BTreeSet<_> = a.heads.iter().collect();
    let sb: BTreeSet<_> = b.heads.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}
