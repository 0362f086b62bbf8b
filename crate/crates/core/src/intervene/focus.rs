use serde::{Deserialize, Serialize};

use crate::model::{ActivationTrace, Segment, TokenSequence};
use crate::{Error, Result};

/// Which query rows the focus loss regularises.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySet {
    /// Every position from the image end marker onward.
    #[default]
    AfterImage,
    /// The image tokens themselves.
    ImageTokens,
}

impl QuerySet {
    pub fn positions(&self, seq: &TokenSequence) -> Vec<usize> {
        match self {
            QuerySet::AfterImage => (seq.last_image_pos()..seq.len()).collect(),
            QuerySet::ImageTokens => seq.positions_of(Segment::ImageToken),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocusConfig {
    pub target_layers: Vec<usize>,
    pub sigma: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub query_set: QuerySet,
}

impl Default for FocusConfig {
    fn default() -> Self {
        Self { target_layers: Vec::new(), sigma: 1.0, lambda: 1.0, epsilon: 1e-8, query_set: QuerySet::AfterImage }
    }
}

impl FocusConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("focus sigma must be positive, got {}", self.sigma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("focus lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("focus epsilon must be positive".into()));
        }
        let mut seen = vec![false; n_layers];
        for &l in &self.target_layers {
            if l >= n_layers || std::mem::replace(&mut seen[l], true) {
                return Err(Error::Config(format!("focus layer {l} invalid or repeated")));
            }
        }
        Ok(())
    }
}

/// Focus loss inputs for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct FocusTerm<'a> {
    pub layers: &'a [usize],
    pub queries: &'a [usize],
    /// Prior over the image tokens; sums to 1.
    pub prior: &'a [f64],
    pub lambda: f64,
    pub eps: f64,
}

/// Cross-entropy of one head-averaged attention row against the prior,
/// after renormalising the row over the image columns.
///
/// Returns the loss, its gradient with respect to `avg`, and whether the
/// row put no mass at all on the image (in which case the gradient is zero).
pub fn focus_row(avg: &[f64], prior: &[f64], eps: f64) -> (f64, Vec<f64>, bool) {
    let mass: f64 = avg.iter().sum();
    if mass <= 0.0 {
        let loss = -prior.iter().map(|g| g * eps.ln()).sum::<f64>();
        return (loss, vec![0.0; avg.len()], true);
    }
    let q: Vec<f64> = avg.iter().map(|a| a / mass).collect();
    let w: Vec<f64> = prior.iter().zip(&q).map(|(g, q)| g / (q + eps)).collect();
    let loss = -prior.iter().zip(&q).map(|(g, q)| g * (q + eps).ln()).sum::<f64>();
    let wq: f64 = w.iter().zip(&q).map(|(a, b)| a * b).sum();
    let grad = w.iter().map(|wk| (wq - wk) / mass).collect();
    (loss, grad, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusValue {
    pub loss: f64,
    pub zero_mass_rows: usize,
}

/// Focus loss read off a captured trace. The trace must hold attention.
pub fn focus_loss(trace: &ActivationTrace, seq: &TokenSequence, prior: &[f64], cfg: &FocusConfig) -> Result<FocusValue> {
    if trace.attention.is_empty() {
        return Err(Error::Contract("focus loss needs captured attention".into()));
    }
    let queries = cfg.query_set.positions(seq);
    let rows = cfg.target_layers.len() * queries.len();
    if rows == 0 {
        return Ok(FocusValue { loss: 0.0, zero_mass_rows: 0 });
    }
    let img = seq.image_range();
    let nh = trace.n_heads;
    let mut total = 0.0;
    let mut zero = 0;
    for &l in &cfg.target_layers {
        for &q in &queries {
            let mut avg = vec![0.0; img.len()];
            for h in 0..nh {
                for (a, v) in avg.iter_mut().zip(&trace.attn_row(l, h, q)[img.clone()]) {
                    *a += v / nh as f64;
                }
            }
            let (loss, _, z) = focus_row(&avg, prior, cfg.epsilon);
            total += loss;
            zero += z as usize;
        }
    }
    Ok(FocusValue { loss: total / rows as f64, zero_mass_rows: zero })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entropy(g: &[f64]) -> f64 {
        -g.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
    }

    #[test]
    fn matching_row_gives_entropy() {
        let g = [0.1, 0.2, 0.3, 0.4];
        // an unnormalised row with the same shape as g
        let avg: Vec<f64> = g.iter().map(|x| x * 0.25).collect();
        let (loss, grad, zero) = focus_row(&avg, &g, 0.0);
        assert!(!zero);
        assert!((loss - entropy(&g)).abs() < 1e-12);
        // stationary point of the cross-entropy
        assert!(grad.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn one_hot_prior_reduces_to_log_of_patch() {
        let g = [0.0, 1.0, 0.0];
        let avg = [0.2, 0.3, 0.5];
        let (loss, _, _) = focus_row(&avg, &g, 1e-8);
        assert!((loss + (0.3f64 + 1e-8).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_mass_is_flagged() {
        let (_, grad, zero) = focus_row(&[0.0, 0.0], &[0.5, 0.5], 1e-8);
        assert!(zero);
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn row_gradient_matches_difference() {
        let g = [0.05, 0.6, 0.25, 0.1];
        let avg = [0.1, 0.02, 0.3, 0.08];
        let (_, grad, _) = focus_row(&avg, &g, 1e-8);
        for k in 0..4 {
            let mut a = avg;
            let mut b = avg;
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let fd = (focus_row(&a, &g, 1e-8).0 - focus_row(&b, &g, 1e-8).0) / 2e-6;
            assert!((fd - grad[k]).abs() < 1e-6, "{k}: {fd} vs {}", grad[k]);
        }
    }

    proptest::proptest! {
        #[test]
        fn gibbs_inequality(raw_g in proptest::collection::vec(0.01f64..1.0, 6), raw_q in proptest::collection::vec(0.001f64..1.0, 6)) {
            let s: f64 = raw_g.iter().sum();
            let g: Vec<f64> = raw_g.iter().map(|x| x / s).collect();
            let (loss, _, _) = focus_row(&raw_q, &g, 0.0);
            proptest::prop_assert!(loss >= entropy(&g) - 1e-12);
        }
    }
}
