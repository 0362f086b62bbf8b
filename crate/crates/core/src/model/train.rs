use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, save_moments, CheckpointMeta};
use super::{loss_and_grad, LossBreakdown, OverrideSet, Params, TokenSequence};
use crate::intervene::{FocusConfig, FocusTerm};
use crate::synth::{rng, PRNG_ALGORITHM};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Global gradient norm clip; 0 disables.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.03,
            grad_clip: 1.0,
            batch_size: 16,
            epochs: 2,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.warmup_frac)
            && self.grad_clip >= 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.epochs * n_examples.div_ceil(self.batch_size)
    }
}

/// Learning rate at `step` (0-based): linear warmup to `lr`, then linear
/// decay to zero at `total`.
pub fn lr_at(cfg: &OptimizerConfig, step: usize, total: usize) -> f64 {
    let warm = (cfg.warmup_frac * total as f64).ceil() as usize;
    if step < warm {
        cfg.lr * (step + 1) as f64 / warm as f64
    } else if total > warm {
        cfg.lr * (total - step) as f64 / (total - warm) as f64
    } else {
        cfg.lr
    }
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub seq: TokenSequence,
    /// Focus prior over the image tokens, needed only when the focus term is on.
    pub prior: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean composite loss of each optimizer step.
    pub losses: Vec<f64>,
    pub sft_losses: Vec<f64>,
    pub focus_losses: Vec<f64>,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
    pub zero_mass_rows: usize,
}

fn example_grad(
    params: &Params,
    ex: &TrainExample,
    focus: Option<&FocusConfig>,
) -> Result<(LossBreakdown, Params)> {
    let mut g = params.zeros_like();
    let queries;
    let term = match (focus, &ex.prior) {
        (Some(f), Some(prior)) if f.lambda > 0.0 || !f.target_layers.is_empty() => {
            queries = f.query_set.positions(&ex.seq);
            Some(FocusTerm { layers: &f.target_layers, queries: &queries, prior, lambda: f.lambda, eps: f.epsilon })
        }
        _ => None,
    };
    let lb = loss_and_grad(params, &ex.seq, &OverrideSet::new(), term.as_ref(), &mut g)?;
    Ok((lb, g))
}

/// Mini-batch AdamW with decoupled weight decay on matrices, warmup then
/// linear decay, and global-norm clipping. With `focus` set the objective
/// is `L_sft + lambda * L_focus` on examples that carry a prior.
pub fn train(
    params: &mut Params,
    data: &[TrainExample],
    opt: &OptimizerConfig,
    focus: Option<&FocusConfig>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(f) = focus {
        f.validate(params.cfg.n_layers)?;
    }
    let n = params.data.len();
    let decay: Vec<bool> = {
        let mut v = vec![false; n];
        for s in params.layout.slots.iter().filter(|s| s.decay) {
            v[s.range.clone()].fill(true);
        }
        v
    };
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let total = opt.total_steps(data.len());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng(opt.seed.wrapping_add(epoch as u64)));
        for batch in order.chunks(opt.batch_size) {
            let results: Vec<Result<(LossBreakdown, Params)>> =
                batch.par_iter().map(|&i| example_grad(params, &data[i], focus)).collect();
            let mut grad = params.zeros_like();
            let mut sum = LossBreakdown::default();
            for r in results {
                let (lb, g) = r?;
                sum.total += lb.total;
                sum.sft += lb.sft;
                sum.focus += lb.focus;
                sum.zero_mass_rows += lb.zero_mass_rows;
                grad.add_scaled(&g, 1.0);
            }
            let k = 1.0 / batch.len() as f64;
            grad.data.iter_mut().for_each(|x| *x *= k);
            let gnorm = grad.norm();
            if !gnorm.is_finite() || !sum.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at step {step} (epoch {epoch}): loss {}, grad norm {gnorm}",
                    sum.total * k
                )));
            }
            if opt.grad_clip > 0.0 && gnorm > opt.grad_clip {
                let s = opt.grad_clip / gnorm;
                grad.data.iter_mut().for_each(|x| *x *= s);
            }
            let lr = lr_at(opt, step, total);
            let t = (step + 1) as i32;
            let bc1 = 1.0 - opt.beta1.powi(t);
            let bc2 = 1.0 - opt.beta2.powi(t);
            for i in 0..n {
                let g = grad.data[i];
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
                let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + opt.eps);
                let wd = if decay[i] { opt.weight_decay * params.data[i] } else { 0.0 };
                params.data[i] -= lr * (upd + wd);
            }
            report.losses.push(sum.total * k);
            report.sft_losses.push(sum.sft * k);
            report.focus_losses.push(sum.focus * k);
            report.zero_mass_rows += sum.zero_mass_rows;
            step += 1;
            if step % 50 == 0 {
                log::info!("step {step}/{total} loss {:.4} lr {lr:.2e}", sum.total * k);
            }
        }
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("epoch{}.ckpt", epoch + 1));
            let moments = dir.join(format!("epoch{}.opt", epoch + 1));
            let meta = CheckpointMeta {
                config: params.cfg,
                step,
                epoch: epoch + 1,
                seed: opt.seed,
                prng: PRNG_ALGORITHM.into(),
                optimizer: Some(opt.clone()),
                moments_file: moments.file_name().map(|s| s.to_string_lossy().into_owned()),
                last_loss: report.losses.last().copied(),
            };
            save_checkpoint(&path, params, &meta)?;
            save_moments(&moments, params, &m, &v)?;
            report.checkpoints.push(path);
        }
    }
    params.check_finite()?;
    report.steps = step;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_then_decays() {
        let cfg = OptimizerConfig { lr: 1.0, warmup_frac: 0.03, ..Default::default() };
        let total = 1000;
        // 30 warmup steps
        assert!((lr_at(&cfg, 0, total) - 1.0 / 30.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 29, total) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 30, total) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 515, total) - 0.5).abs() < 1e-12);
        assert!(lr_at(&cfg, 999, total) > 0.0);
        let mut prev = f64::INFINITY;
        for s in 30..total {
            let lr = lr_at(&cfg, s, total);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
