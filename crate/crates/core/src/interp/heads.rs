use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lens::{headlens_decode, top_tokens, RankedToken, TranslatorSet};
use super::patching::HeadScore;
use crate::corpus::Item;
use crate::model::linalg::argmax;
use crate::model::{forward, Capture, HeadId, OverrideSet, Params, TokenSequence};
use crate::vocab::LexiconMasks;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    CountingAggregation,
    CrossModalRouting,
    VisualGrounding,
    Awareness,
    Unclassified,
}

/// Where head outputs are decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodePosition {
    /// The position whose logits produce the answer.
    #[default]
    LastPromptToken,
    LastImageToken,
}

impl DecodePosition {
    pub fn of(&self, seq: &TokenSequence) -> usize {
        match self {
            DecodePosition::LastPromptToken => seq.answer_pos,
            DecodePosition::LastImageToken => seq.last_image_pos(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub layer: usize,
    pub head: usize,
    pub importance: f64,
    pub img_attn_ratio: f64,
    pub obj_in_img_ratio: f64,
    /// Top-10 of the corpus-averaged decoded distribution.
    pub top10: Vec<RankedToken>,
    pub cter: f64,
    pub vgs: f64,
    /// Fraction of scenes with the ground-truth answer among the top 10.
    pub gt_at_10: f64,
    pub top1_acc: f64,
    /// Mean decoded probability on the awareness lexicon.
    pub awareness_mass: f64,
    pub category: Category,
}

impl HeadReport {
    pub fn id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CategoryThresholds {
    pub importance: f64,
    pub top1_acc: f64,
    pub routing_img_attn: f64,
    pub grounding_img_attn: f64,
    pub grounding_vgs: f64,
    /// Layers below `early_fraction * L` count as early.
    pub early_fraction: f64,
    /// Layers at or above `late_fraction * L` count as late.
    pub late_fraction: f64,
    pub awareness_mass: f64,
}

impl Default for CategoryThresholds {
    fn default() -> Self {
        Self {
            importance: 0.05,
            top1_acc: 0.1,
            routing_img_attn: 0.5,
            grounding_img_attn: 0.4,
            grounding_vgs: 0.3,
            early_fraction: 1.0 / 3.0,
            late_fraction: 0.5,
            awareness_mass: 0.2,
        }
    }
}

/// First matching rule wins: aggregation, routing, grounding, awareness.
pub fn categorize(r: &HeadReport, n_layers: usize, t: &CategoryThresholds) -> Category {
    let depth = r.layer as f64;
    let l = n_layers as f64;
    if r.importance > t.importance && r.top1_acc > t.top1_acc {
        Category::CountingAggregation
    } else if r.importance > t.importance && r.img_attn_ratio > t.routing_img_attn {
        Category::CrossModalRouting
    } else if depth < t.early_fraction * l && r.vgs >= t.grounding_vgs && r.img_attn_ratio > t.grounding_img_attn {
        Category::VisualGrounding
    } else if depth >= t.late_fraction * l && r.awareness_mass >= t.awareness_mass {
        Category::Awareness
    } else {
        Category::Unclassified
    }
}

pub fn categorize_heads(reports: &mut [HeadReport], n_layers: usize, t: &CategoryThresholds) {
    for r in reports {
        r.category = categorize(r, n_layers, t);
    }
}

#[derive(Default, Clone)]
struct Acc {
    img_attn: f64,
    obj_in_img: f64,
    cter: f64,
    vgs: f64,
    gt10: f64,
    top1: f64,
    aware: f64,
    probs: Vec<f64>,
}

/// HeadLens statistics for every head over a corpus. `importance` supplies
/// the patching importance per head (zero when absent).
pub fn score_heads(
    params: &Params,
    translators: &TranslatorSet,
    items: &[Item],
    importance: &[HeadScore],
    lex: &LexiconMasks,
    decode: DecodePosition,
    thresholds: &CategoryThresholds,
) -> Result<Vec<HeadReport>> {
    if items.is_empty() {
        return Err(Error::Data("head scoring corpus is empty".into()));
    }
    let (nl, nh, vs) = (params.cfg.n_layers, params.cfg.n_heads, params.cfg.vocab_size);
    let cap = Capture { attention: true, head_outputs: true, ..Capture::NONE };
    let per: Vec<Vec<Acc>> = items
        .par_iter()
        .map(|it| {
            let seq = &it.seq;
            let pos = decode.of(seq);
            let gt = seq.answer();
            let out = forward(params, seq, &OverrideSet::new(), cap)?;
            let obj = it.scene.object_patches();
            let img = seq.image_range();
            let mut accs = Vec::with_capacity(nl * nh);
            for l in 0..nl {
                for h in 0..nh {
                    let row = out.trace.attn_row(l, h, pos);
                    let mass: f64 = row[img.clone()].iter().sum();
                    let obj_mass: f64 = img.clone().filter(|&t| obj[t - img.start]).map(|t| row[t]).sum();
                    let probs = headlens_decode(params, translators, &out.trace, l, h, pos)?;
                    let top = top_tokens(&probs, 10);
                    let frac = |m: &[bool]| top.iter().filter(|t| m[t.id]).count() as f64 / top.len() as f64;
                    accs.push(Acc {
                        img_attn: mass.clamp(0.0, 1.0),
                        obj_in_img: if mass > 0.0 { (obj_mass / mass).clamp(0.0, 1.0) } else { 0.0 },
                        cter: frac(&lex.counting),
                        vgs: frac(&lex.visual),
                        gt10: gt.map_or(0.0, |g| top.iter().any(|t| t.id == g) as u8 as f64),
                        top1: gt.map_or(0.0, |g| (argmax(&probs) == g) as u8 as f64),
                        aware: probs.iter().zip(&lex.awareness).filter(|(_, &m)| m).map(|(p, _)| p).sum(),
                        probs,
                    });
                }
            }
            Ok(accs)
        })
        .collect::<Result<_>>()?;
    let n = items.len() as f64;
    let mut reports = Vec::with_capacity(nl * nh);
    for i in 0..nl * nh {
        let mut s = Acc { probs: vec![0.0; vs], ..Acc::default() };
        for scene in &per {
            let a = &scene[i];
            s.img_attn += a.img_attn;
            s.obj_in_img += a.obj_in_img;
            s.cter += a.cter;
            s.vgs += a.vgs;
            s.gt10 += a.gt10;
            s.top1 += a.top1;
            s.aware += a.aware;
            for (d, p) in s.probs.iter_mut().zip(&a.probs) {
                *d += p;
            }
        }
        s.probs.iter_mut().for_each(|p| *p /= n);
        let (layer, head) = (i / nh, i % nh);
        let imp = importance.iter().find(|x| x.layer == layer && x.head == head).map_or(0.0, |x| x.score);
        let mut r = HeadReport {
            layer,
            head,
            importance: imp,
            img_attn_ratio: s.img_attn / n,
            obj_in_img_ratio: s.obj_in_img / n,
            top10: top_tokens(&s.probs, 10),
            cter: s.cter / n,
            vgs: s.vgs / n,
            gt_at_10: s.gt10 / n,
            top1_acc: s.top1 / n,
            awareness_mass: s.aware / n,
            category: Category::Unclassified,
        };
        r.category = categorize(&r, nl, thresholds);
        reports.push(r);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(layer: usize, importance: f64, img: f64, top1: f64, vgs: f64, aware: f64) -> HeadReport {
        HeadReport {
            layer,
            head: 0,
            importance,
            img_attn_ratio: img,
            obj_in_img_ratio: 0.0,
            top10: Vec::new(),
            cter: 0.0,
            vgs,
            gt_at_10: 0.0,
            top1_acc: top1,
            awareness_mass: aware,
            category: Category::Unclassified,
        }
    }

    #[test]
    fn category_rules() {
        let t = CategoryThresholds::default();
        // shaped like the two exemplar heads of a 28-layer model
        assert_eq!(categorize(&report(26, 0.8, 0.034, 0.55, 0.0, 0.0), 28, &t), Category::CountingAggregation);
        assert_eq!(categorize(&report(18, 0.3, 0.937, 0.03, 0.0, 0.0), 28, &t), Category::CrossModalRouting);
        assert_eq!(categorize(&report(2, 0.0, 0.6, 0.0, 0.5, 0.0), 28, &t), Category::VisualGrounding);
        assert_eq!(categorize(&report(20, 0.0, 0.0, 0.0, 0.0, 0.5), 28, &t), Category::Awareness);
        assert_eq!(categorize(&report(20, 0.01, 0.1, 0.0, 0.0, 0.0), 28, &t), Category::Unclassified);
        // aggregation takes precedence when several rules match
        assert_eq!(categorize(&report(1, 0.8, 0.9, 0.5, 0.9, 0.9), 28, &t), Category::CountingAggregation);
    }
}
