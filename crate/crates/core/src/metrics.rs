//! Answer parsing, the four counting metrics and the evaluation protocols.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{count_items, Item, SplitSpec};
use crate::model::{generate_answer, OverrideSet, Params};
use crate::synth::CanvasSpec;
use crate::vocab::{Vocab, MAX_DIGIT};
use crate::{Error, Result};

/// Sentinel for an answer that is not a number.
pub const PARSE_FAILURE: i64 = -1;

/// A non-negative decimal integer, or [`PARSE_FAILURE`].
pub fn parse_answer(raw: &str) -> i64 {
    let s = raw.trim();
    if s.is_empty() || s.len() > 18 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return PARSE_FAILURE;
    }
    s.parse().unwrap_or(PARSE_FAILURE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub ground_truth: i64,
    pub raw_answer: String,
    pub parsed: i64,
}

impl PredictionRecord {
    pub fn new(ground_truth: i64, raw_answer: impl Into<String>) -> Self {
        let raw_answer = raw_answer.into();
        let parsed = parse_answer(&raw_answer);
        Self { ground_truth, raw_answer, parsed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub mae: f64,
    pub rmse: f64,
    pub obo: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub mae: f64,
    pub rmse: f64,
    pub obo: f64,
    pub n: usize,
    pub parse_failure_rate: f64,
    /// Metrics restricted to each ground-truth count.
    pub per_count: BTreeMap<i64, Metrics>,
}

impl MetricsReport {
    pub fn metrics(&self) -> Metrics {
        Metrics { acc: self.acc, mae: self.mae, rmse: self.rmse, obo: self.obo, n: self.n }
    }
}

fn summarize<'a>(it: impl Iterator<Item = &'a PredictionRecord>) -> Metrics {
    let (mut n, mut hit, mut abs, mut sq, mut near) = (0usize, 0usize, 0.0, 0.0, 0usize);
    for r in it {
        let e = (r.parsed - r.ground_truth).abs();
        n += 1;
        hit += (e == 0) as usize;
        near += (e <= 1) as usize;
        abs += e as f64;
        sq += (e * e) as f64;
    }
    let nf = n as f64;
    Metrics { acc: hit as f64 / nf, mae: abs / nf, rmse: (sq / nf).sqrt(), obo: near as f64 / nf, n }
}

pub fn compute_metrics(records: &[PredictionRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Contract("cannot compute metrics over zero records".into()));
    }
    let all = summarize(records.iter());
    let mut counts: Vec<i64> = records.iter().map(|r| r.ground_truth).collect();
    counts.sort_unstable();
    counts.dedup();
    let per_count = counts
        .into_iter()
        .map(|c| (c, summarize(records.iter().filter(|r| r.ground_truth == c))))
        .collect();
    let failures = records.iter().filter(|r| r.parsed == PARSE_FAILURE).count();
    Ok(MetricsReport {
        acc: all.acc,
        mae: all.mae,
        rmse: all.rmse,
        obo: all.obo,
        n: all.n,
        parse_failure_rate: failures as f64 / records.len() as f64,
        per_count,
    })
}

/// One line of the per-scene evaluation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLog {
    pub record_id: String,
    pub scene_id: String,
    pub ground_truth: i64,
    pub raw_answer: String,
    pub parsed: i64,
}

/// Greedy-decode every item and score the counting answers.
pub fn eval_model(params: &Params, items: &[Item], overrides: &OverrideSet) -> Result<(MetricsReport, Vec<SceneLog>)> {
    if items.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let logs: Vec<SceneLog> = items
        .par_iter()
        .map(|it| {
            let tok = generate_answer(params, &it.seq, overrides)?;
            let raw = Vocab.token(tok).to_string();
            Ok(SceneLog {
                record_id: it.record.id.clone(),
                scene_id: it.scene.id.clone(),
                ground_truth: it.scene.count as i64,
                parsed: parse_answer(&raw),
                raw_answer: raw,
            })
        })
        .collect::<Result<_>>()?;
    let records: Vec<PredictionRecord> = logs
        .iter()
        .map(|l| PredictionRecord { ground_truth: l.ground_truth, raw_answer: l.raw_answer.clone(), parsed: l.parsed })
        .collect();
    Ok((compute_metrics(&records)?, logs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self {
            mean,
            std: var.sqrt(),
            min: xs.iter().cloned().fold(f64::INFINITY, f64::min),
            max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Mean and spread of each metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n_seeds: usize,
    pub acc: Spread,
    pub mae: Spread,
    pub rmse: Spread,
    pub obo: Spread,
}

pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<SeedSummary> {
    if reports.is_empty() {
        return Err(Error::Contract("no seed reports to aggregate".into()));
    }
    let col = |f: fn(&MetricsReport) -> f64| Spread::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(SeedSummary {
        n_seeds: reports.len(),
        acc: col(|r| r.acc),
        mae: col(|r| r.mae),
        rmse: col(|r| r.rmse),
        obo: col(|r| r.obo),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub min_count: usize,
    pub max_count: usize,
    /// Whether every count in the range was seen in training.
    pub in_train: bool,
    pub report: MetricsReport,
}

/// Evaluate on count intervals outside (or inside) the training range.
pub fn range_extrapolation(
    params: &Params,
    canvas: CanvasSpec,
    train_range: (usize, usize),
    test_ranges: &[(usize, usize)],
    template: &SplitSpec,
    overrides: &OverrideSet,
) -> Result<Vec<RangeReport>> {
    test_ranges
        .iter()
        .map(|&(lo, hi)| {
            if hi > MAX_DIGIT {
                return Err(Error::Config(format!("no answer tokens for counts above {MAX_DIGIT} (asked for {hi})")));
            }
            let split = SplitSpec { min_count: lo, max_count: hi, ..template.clone() };
            let items = count_items(canvas, &split, &params.cfg)?;
            let (report, _) = eval_model(params, &items, overrides)?;
            Ok(RangeReport { min_count: lo, max_count: hi, in_train: lo >= train_range.0 && hi <= train_range.1, report })
        })
        .collect()
}

/// Component switches of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub sft: bool,
    pub focus: bool,
    pub temperature: bool,
}

impl Components {
    /// The four rows of the component ablation, in order.
    pub const ROWS: [Components; 4] = [
        Components { sft: false, focus: false, temperature: false },
        Components { sft: true, focus: false, temperature: false },
        Components { sft: true, focus: true, temperature: false },
        Components { sft: true, focus: true, temperature: true },
    ];

    pub fn label(&self) -> &'static str {
        match (self.sft, self.focus, self.temperature) {
            (false, false, false) => "baseline",
            (true, false, false) => "+sft",
            (true, true, false) => "+sft+focus",
            (true, true, true) => "+sft+focus+temperature",
            _ => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub components: Components,
    pub per_seed: Vec<MetricsReport>,
    pub summary: SeedSummary,
}

/// A model (one per seed) with the overrides to evaluate it under.
pub struct GridEntry<'a> {
    pub components: Components,
    pub models: Vec<(&'a Params, OverrideSet)>,
}

pub fn ablation_grid(entries: &[GridEntry], items: &[Item]) -> Result<Vec<GridRow>> {
    entries
        .iter()
        .map(|e| {
            if e.models.is_empty() {
                return Err(Error::Data(format!("missing checkpoint for row {}", e.components.label())));
            }
            let per_seed = e
                .models
                .iter()
                .map(|(p, ov)| eval_model(p, items, ov).map(|r| r.0))
                .collect::<Result<Vec<_>>>()?;
            Ok(GridRow {
                label: e.components.label().into(),
                components: e.components,
                summary: aggregate_seeds(&per_seed)?,
                per_seed,
            })
        })
        .collect()
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = String::from("row,sft,focus,temperature,n_seeds,acc_mean,acc_std,mae_mean,mae_std,rmse_mean,rmse_std,obo_mean,obo_std\n");
    for r in rows {
        let m = &r.summary;
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.label,
            r.components.sft as u8,
            r.components.focus as u8,
            r.components.temperature as u8,
            m.n_seeds,
            m.acc.mean,
            m.acc.std,
            m.mae.mean,
            m.mae.std,
            m.rmse.mean,
            m.rmse.std,
            m.obo.mean,
            m.obo.std
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(p: &[i64], y: &[i64]) -> Vec<PredictionRecord> {
        p.iter().zip(y).map(|(&p, &y)| PredictionRecord { ground_truth: y, raw_answer: p.to_string(), parsed: p }).collect()
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_answer("7"), 7);
        assert_eq!(parse_answer("yes"), -1);
        assert_eq!(parse_answer(""), -1);
        assert_eq!(parse_answer(" 12 "), 12);
        assert_eq!(parse_answer("-3"), -1);
        assert_eq!(parse_answer("seven"), -1);
    }

    #[test]
    fn worked_example() {
        let r = compute_metrics(&recs(&[3, 5, -1], &[3, 4, 7])).unwrap();
        assert!((r.acc - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.mae - 3.0).abs() < 1e-12);
        assert!((r.rmse - (65.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.obo - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.parse_failure_rate - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_count[&7].acc, 0.0);
        assert_eq!(r.per_count[&3].acc, 1.0);
    }

    #[test]
    fn all_correct_and_empty() {
        let r = compute_metrics(&recs(&[1, 2, 3], &[1, 2, 3])).unwrap();
        assert_eq!((r.acc, r.mae, r.rmse, r.obo), (1.0, 0.0, 0.0, 1.0));
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn grid_labels_follow_component_order() {
        let labels: Vec<_> = Components::ROWS.iter().map(|c| c.label()).collect();
        assert_eq!(labels, ["baseline", "+sft", "+sft+focus", "+sft+focus+temperature"]);
    }

    #[test]
    fn spread_of_three() {
        let s = Spread::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std, s.min, s.max), (2.0, 1.0, 1.0, 3.0));
    }

    proptest::proptest! {
        #[test]
        fn parse_is_idempotent(s in ".{0,6}") {
            let p = parse_answer(&s);
            proptest::prop_assert_eq!(parse_answer(&p.to_string()), p);
        }

        #[test]
        fn metric_orderings(pairs in proptest::collection::vec((-1i64..12, 0i64..12), 1..40)) {
            let p: Vec<i64> = pairs.iter().map(|x| x.0).collect();
            let y: Vec<i64> = pairs.iter().map(|x| x.1).collect();
            let r = compute_metrics(&recs(&p, &y)).unwrap();
            proptest::prop_assert!(r.acc <= r.obo);
            proptest::prop_assert!(r.mae <= r.rmse + 1e-12);
            let mut rev = recs(&p, &y);
            rev.reverse();
            let r2 = compute_metrics(&rev).unwrap();
            proptest::prop_assert_eq!(r.acc, r2.acc);
            proptest::prop_assert_eq!(r.obo, r2.obo);
            proptest::prop_assert!((r.mae - r2.mae).abs() < 1e-12);
        }
    }
}
