use serde::{Deserialize, Serialize};

use crate::model::{HeadId, OverrideSet};
use crate::{Error, Result};

/// An importance score attached to a head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadGamma {
    pub layer: usize,
    pub head: usize,
    pub gamma: f64,
}

impl HeadGamma {
    pub fn id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemperatureConfig {
    pub alpha: f64,
    pub head_gammas: Vec<HeadGamma>,
    /// Rescale gammas to mean 1 over the targeted heads before applying alpha.
    pub normalize_gamma: bool,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self { alpha: 1.2, head_gammas: Vec::new(), normalize_gamma: true }
    }
}

/// The multipliers actually applied, echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedHeads {
    pub values: Vec<HeadGamma>,
    /// Heads whose negative gamma was clamped to zero.
    pub clamped: Vec<HeadId>,
}

/// Clamp negatives to zero and optionally rescale to mean 1.
fn effective_gammas(heads: &[HeadGamma], normalize: bool) -> Result<(Vec<f64>, Vec<HeadId>)> {
    let mut seen = std::collections::BTreeSet::new();
    let mut clamped = Vec::new();
    let mut g = Vec::with_capacity(heads.len());
    for h in heads {
        if !h.gamma.is_finite() {
            return Err(Error::Config(format!("gamma for {} is not finite", h.id())));
        }
        if !seen.insert(h.id()) {
            return Err(Error::Config(format!("head {} listed twice", h.id())));
        }
        if h.gamma < 0.0 {
            log::warn!("negative importance {} for {} clamped to 0", h.gamma, h.id());
            clamped.push(h.id());
        }
        g.push(h.gamma.max(0.0));
    }
    if normalize && !g.is_empty() {
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        if mean > 0.0 {
            g.iter_mut().for_each(|x| *x /= mean);
        } else {
            log::warn!("all targeted importances are zero; using equal weights");
            g.iter_mut().for_each(|x| *x = 1.0);
        }
    }
    Ok((g, clamped))
}

/// Per-head attention logit multipliers `beta = alpha * gamma`. Heads not
/// listed keep `beta = 1`.
pub fn apply_temperature(cfg: &TemperatureConfig) -> Result<(OverrideSet, ResolvedHeads)> {
    if !(cfg.alpha >= 0.0 && cfg.alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be finite and non-negative, got {}", cfg.alpha)));
    }
    let (g, clamped) = effective_gammas(&cfg.head_gammas, cfg.normalize_gamma)?;
    let mut ov = OverrideSet::new();
    let mut values = Vec::with_capacity(g.len());
    for (h, gt) in cfg.head_gammas.iter().zip(g) {
        let beta = cfg.alpha * gt;
        ov.logit_multiplier.insert((h.layer, h.head), beta);
        values.push(HeadGamma { gamma: beta, ..*h });
    }
    Ok((ov, ResolvedHeads { values, clamped }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReweightConfig {
    pub heads: Vec<HeadGamma>,
    pub eta: f64,
    pub normalize_gamma: bool,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self { heads: Vec::new(), eta: 0.1, normalize_gamma: true }
    }
}

/// Scale each listed head's output by `1 + eta * gamma`.
pub fn apply_reweight(cfg: &ReweightConfig) -> Result<(OverrideSet, ResolvedHeads)> {
    if !cfg.eta.is_finite() {
        return Err(Error::Config("eta must be finite".into()));
    }
    let (g, clamped) = effective_gammas(&cfg.heads, cfg.normalize_gamma)?;
    let mut ov = OverrideSet::new();
    let mut values = Vec::with_capacity(g.len());
    for (h, gt) in cfg.heads.iter().zip(g) {
        let s = (1.0 + cfg.eta * gt).max(0.0);
        ov.head_scale.insert((h.layer, h.head), s);
        values.push(HeadGamma { gamma: s, ..*h });
    }
    Ok((ov, ResolvedHeads { values, clamped }))
}

/// Shannon entropy (nats) of an attention row.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}
