//! Analyses over a frozen model: lenses, patching, head scoring and probes.

mod heads;
mod lens;
mod patching;
mod probes;
mod yesband;

pub use heads::{categorize, categorize_heads, score_heads, Category, CategoryThresholds, DecodePosition, HeadReport};
pub use lens::{
    collect_lens_corpus, head_projection, headlens_decode, logit_lens, rank_of, top_tokens, train_translators,
    translator_kl, LensCorpus, LensLayer, RankedToken, TranslatorConfig, TranslatorSet,
};
pub use patching::{
    corpus_key, crossover_layer, head_means, head_means_cached, jaccard, mean_ablation_importance, rank_heads,
    top_k_heads, vap_headwise, vap_layerwise, HeadMeans, HeadScore, HeadSet, OverwriteCurve, SeqPair, TokenGroup,
};
pub use probes::{
    attentionlens_probes, best_to_mean, binding_pairs, binding_probe, histogram, numerosity_probe, roc_auc,
    stratified_split, AttentionLensConfig, AttentionLensHead, AttentionLensReport, BindingConfig, BindingLayer,
    BindingProbe, NumerosityConfig, NumerosityLayer, NumerosityProbe,
};
pub use yesband::{band_stats, yes_band, YesBand};
