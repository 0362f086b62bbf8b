use serde::{Deserialize, Serialize};

use crate::model::{build_sequence, generate_answer, OverrideSet, Params};
use crate::synth::{QARecord, RenderedScene, Task};
use crate::vocab::Vocab;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YesBand {
    pub true_count: usize,
    /// `(K, 1 for yes / 0 otherwise)` for every probed quantity.
    pub responses: Vec<(usize, u8)>,
    /// Maximal run of consecutive yes answers containing the true count.
    pub band: Option<(usize, usize)>,
    pub width: usize,
    /// Number of separate yes-runs beyond the first.
    pub oscillations: usize,
}

/// Band statistics of a response vector sorted by `K`.
pub fn band_stats(true_count: usize, responses: Vec<(usize, u8)>) -> YesBand {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<usize> = None;
    for &(k, y) in &responses {
        if y == 1 {
            match runs.last_mut() {
                Some(run) if prev == Some(k.wrapping_sub(1)) && run.1 + 1 == k => run.1 = k,
                _ => runs.push((k, k)),
            }
            prev = Some(k);
        } else {
            prev = None;
        }
    }
    let band = runs.iter().copied().find(|&(lo, hi)| lo <= true_count && true_count <= hi);
    YesBand {
        true_count,
        width: band.map_or(0, |(lo, hi)| hi - lo + 1),
        oscillations: runs.len().saturating_sub(1),
        band,
        responses,
    }
}

/// Ask "there are K ..." for every `K` in `k_range` and score yes as 1.
/// Any answer other than the yes token scores 0.
pub fn yes_band(params: &Params, scene: &RenderedScene, k_range: std::ops::RangeInclusive<usize>) -> Result<YesBand> {
    let yes = Vocab.yes();
    let mut responses = Vec::new();
    for k in k_range {
        let rec = QARecord::new(scene, Task::Verify(k))?;
        let seq = build_sequence(&rec, scene, &params.cfg)?;
        let ans = generate_answer(params, &seq, &OverrideSet::new())?;
        responses.push((k, (ans == yes) as u8));
    }
    Ok(band_stats(scene.count, responses))
}
