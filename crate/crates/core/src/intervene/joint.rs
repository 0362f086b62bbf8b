use std::collections::BTreeMap;
use std::path::Path;

use super::FocusConfig;
use crate::interp::{Category, HeadReport};
use crate::model::{train, OptimizerConfig, Params, TrainExample, TrainReport};
use crate::{Error, Result};

/// Train on `L_sft + lambda * L_focus`. Every example needs a focus prior
/// unless `lambda` is zero.
pub fn joint_train(
    params: &mut Params,
    data: &[TrainExample],
    focus: &FocusConfig,
    opt: &OptimizerConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    focus.validate(params.cfg.n_layers)?;
    if focus.lambda > 0.0 {
        if focus.target_layers.is_empty() {
            return Err(Error::Config("focus loss enabled without target layers".into()));
        }
        if let Some(i) = data.iter().position(|e| e.prior.is_none()) {
            return Err(Error::Data(format!("example {i} has no focus prior")));
        }
    }
    train(params, data, opt, Some(focus), checkpoint_dir)
}

/// The `n` layers holding the most grounding and routing heads, ties broken
/// by total image attention of their heads and then by depth. Returned in
/// ascending order.
pub fn select_focus_layers(reports: &[HeadReport], n: usize) -> Vec<usize> {
    let mut per: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for r in reports {
        let e = per.entry(r.layer).or_default();
        if matches!(r.category, Category::VisualGrounding | Category::CrossModalRouting) {
            e.0 += 1;
        }
        e.1 += r.img_attn_ratio;
    }
    let mut layers: Vec<(usize, (usize, f64))> = per.into_iter().collect();
    layers.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(b.1 .1.total_cmp(&a.1 .1)).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = layers.into_iter().take(n).map(|(l, _)| l).collect();
    out.sort_unstable();
    out
}
