//! Assembling scenes and questions into model-ready corpora.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::model::{build_sequence, ModelConfig, TokenSequence, TrainExample};
use crate::synth::{
    build_records, focus_prior, gen_colorshape, gen_syndot, gen_synpoly, make_pair, rng, CanvasSpec,
    CounterfactualPair, QARecord, RenderedScene, SceneKind, TaskMix,
};
use crate::{Error, Result};

/// A grid of counting scenes: `per_count` scenes for each count in
/// `min_count..=max_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SceneKind,
    pub min_count: usize,
    pub max_count: usize,
    pub per_count: usize,
    pub radius_px: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn syndot(min_count: usize, max_count: usize, per_count: usize, seed: u64) -> Self {
        Self { kind: SceneKind::SynDot, min_count, max_count, per_count, radius_px: 2, seed }
    }

    pub fn synpoly(min_count: usize, max_count: usize, per_count: usize, seed: u64) -> Self {
        Self { kind: SceneKind::SynPoly, min_count, max_count, per_count, radius_px: 3, seed }
    }
}

/// Scene seeds are drawn in order from one stream keyed by the split seed.
pub fn counting_scenes(canvas: CanvasSpec, split: &SplitSpec) -> Result<Vec<RenderedScene>> {
    if split.min_count > split.max_count {
        return Err(Error::Config(format!("empty count range {}-{}", split.min_count, split.max_count)));
    }
    let mut seeds = rng(split.seed);
    let mut out = Vec::with_capacity((split.max_count - split.min_count + 1) * split.per_count);
    for count in split.min_count..=split.max_count {
        for _ in 0..split.per_count {
            let seed: u64 = seeds.random();
            out.push(match split.kind {
                SceneKind::SynDot => gen_syndot(canvas, count, split.radius_px, seed)?,
                SceneKind::SynPoly => gen_synpoly(canvas, count, split.radius_px, seed)?,
                SceneKind::ColorShape => {
                    return Err(Error::Config("colour/shape scenes are not a counting split".into()))
                }
            });
        }
    }
    Ok(out)
}

/// Task proportions of the multitask training mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mixture {
    pub count: f64,
    pub verify: f64,
    pub color: f64,
    pub shape: f64,
    pub verify_max: usize,
}

impl Default for Mixture {
    fn default() -> Self {
        Self { count: 70.0, verify: 10.0, color: 10.0, shape: 10.0, verify_max: 9 }
    }
}

impl Mixture {
    pub fn count_only() -> Self {
        Self { count: 1.0, verify: 0.0, color: 0.0, shape: 0.0, verify_max: 9 }
    }
}

/// Counting scenes with count and verification questions, plus single-object
/// colour/shape scenes sized so the four tasks follow `mix`.
pub fn training_corpus(
    canvas: CanvasSpec,
    split: &SplitSpec,
    mix: &Mixture,
) -> Result<(Vec<RenderedScene>, Vec<QARecord>)> {
    let mut scenes = counting_scenes(canvas, split)?;
    let tasks = TaskMix { count: mix.count, verify: mix.verify, verify_max: mix.verify_max };
    let mut records = build_records(&scenes, tasks, split.seed ^ 0x5eed_0001)?;
    let n_attr = if mix.count > 0.0 {
        (scenes.len() as f64 * (mix.color + mix.shape) / mix.count).round() as usize
    } else {
        0
    };
    let mut seeds = rng(split.seed ^ 0x5eed_0002);
    for _ in 0..n_attr {
        let (scene, rec) = gen_colorshape(canvas, seeds.random())?;
        scenes.push(scene);
        records.push(rec);
    }
    Ok((scenes, records))
}

/// Token sequences (and focus priors when `sigma` is set) for every record.
pub fn examples(
    scenes: &[RenderedScene],
    records: &[QARecord],
    cfg: &ModelConfig,
    sigma: Option<f64>,
) -> Result<Vec<TrainExample>> {
    let by_id: HashMap<&str, &RenderedScene> = scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    records
        .iter()
        .map(|r| {
            let scene = by_id
                .get(r.scene_id.as_str())
                .ok_or_else(|| Error::Data(format!("record {} refers to unknown scene {}", r.id, r.scene_id)))?;
            let seq = build_sequence(r, scene, cfg)?;
            let prior = sigma.map(|s| focus_prior(scene, scene.canvas, s));
            Ok(TrainExample { seq, prior })
        })
        .collect()
}

/// A scene with its counting question, ready for evaluation.
#[derive(Debug, Clone)]
pub struct Item {
    pub scene: RenderedScene,
    pub record: QARecord,
    pub seq: TokenSequence,
}

pub fn items(scenes: &[RenderedScene], records: &[QARecord], cfg: &ModelConfig) -> Result<Vec<Item>> {
    let by_id: HashMap<&str, &RenderedScene> = scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    records
        .iter()
        .map(|r| {
            let scene = *by_id
                .get(r.scene_id.as_str())
                .ok_or_else(|| Error::Data(format!("record {} refers to unknown scene {}", r.id, r.scene_id)))?;
            Ok(Item { scene: scene.clone(), record: r.clone(), seq: build_sequence(r, scene, cfg)? })
        })
        .collect()
}

/// Counting items for a split (one count question per scene).
pub fn count_items(canvas: CanvasSpec, split: &SplitSpec, cfg: &ModelConfig) -> Result<Vec<Item>> {
    let scenes = counting_scenes(canvas, split)?;
    let records = build_records(&scenes, TaskMix { count: 1.0, verify: 0.0, verify_max: 0 }, 0)?;
    items(&scenes, &records, cfg)
}

/// `n` counterfactual pairs whose counts are distinct values in
/// `min_count..=max_count`.
pub fn pair_corpus(
    canvas: CanvasSpec,
    kind: SceneKind,
    radius_px: usize,
    min_count: usize,
    max_count: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<CounterfactualPair>> {
    if max_count <= min_count {
        return Err(Error::Config("pairs need at least two distinct counts".into()));
    }
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let a = r.random_range(min_count..=max_count);
            let mut b = r.random_range(min_count..max_count);
            if b >= a {
                b += 1;
            }
            make_pair(canvas, kind, radius_px, a, b, r.random())
        })
        .collect()
}
