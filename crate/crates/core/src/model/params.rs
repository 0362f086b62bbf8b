use std::ops::Range;

use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::synth::rng;
use crate::{Error, Result};

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    pub range: Range<usize>,
    pub shape: Vec<usize>,
    /// Receives decoupled weight decay (matrices only).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub attn_norm: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub mlp_norm: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every tensor in the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub patch_w: Range<usize>,
    pub patch_b: Range<usize>,
    pub token_embed: Range<usize>,
    pub pos_embed: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub final_norm: Range<usize>,
    pub unembed: Range<usize>,
    pub unembed_b: Range<usize>,
    pub slots: Vec<Slot>,
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut slots = Vec::new();
        let mut at = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let range = at..at + n;
            at += n;
            slots.push(Slot { name, range: range.clone(), shape: shape.clone(), decay: shape.len() == 2 });
            range
        };
        let (d, v, m) = (cfg.d_model, cfg.vocab_size, cfg.d_mlp());
        let patch_w = push("patch_embed.weight".into(), vec![cfg.patch_dim(), d]);
        let patch_b = push("patch_embed.bias".into(), vec![d]);
        let token_embed = push("token_embed".into(), vec![v, d]);
        let pos_embed = push("pos_embed".into(), vec![cfg.max_seq, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerLayout {
                attn_norm: push(format!("layers.{l}.attn_norm"), vec![d]),
                wq: push(format!("layers.{l}.wq"), vec![d, d]),
                wk: push(format!("layers.{l}.wk"), vec![d, d]),
                wv: push(format!("layers.{l}.wv"), vec![d, d]),
                wo: push(format!("layers.{l}.wo"), vec![d, d]),
                mlp_norm: push(format!("layers.{l}.mlp_norm"), vec![d]),
                w1: push(format!("layers.{l}.w1"), vec![d, m]),
                b1: push(format!("layers.{l}.b1"), vec![m]),
                w2: push(format!("layers.{l}.w2"), vec![m, d]),
                b2: push(format!("layers.{l}.b2"), vec![d]),
            })
            .collect();
        let final_norm = push("final_norm".into(), vec![d]);
        let unembed = push("unembed".into(), vec![v, d]);
        let unembed_b = push("unembed.bias".into(), vec![v]);
        Layout { patch_w, patch_b, token_embed, pos_embed, layers, final_norm, unembed, unembed_b, slots, len: at }
    }
}

/// All model weights in one flat `f64` buffer. Gradients and optimizer
/// moments share the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl Params {
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let data = vec![0.0; layout.len];
        Ok(Self { cfg, layout, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self { cfg: self.cfg, layout: self.layout.clone(), data: vec![0.0; self.data.len()] }
    }

    /// Gaussian init with std 0.02, residual output projections scaled by
    /// `1/sqrt(2L)`, norm gains at 1 and biases at 0.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut r = rng(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let out_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let slots = p.layout.slots.clone();
        for slot in &slots {
            let vals = &mut p.data[slot.range.clone()];
            if slot.shape.len() == 2 {
                let s = if slot.name.ends_with(".wo") || slot.name.ends_with(".w2") { out_scale } else { 1.0 };
                vals.iter_mut().for_each(|v| *v = normal.sample(&mut r) * s);
            } else if slot.name.ends_with("norm") {
                vals.fill(1.0);
            }
        }
        Ok(p)
    }

    pub fn s(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    pub fn s_mut(&mut self, r: &Range<usize>) -> &mut [f64] {
        &mut self.data[r.clone()]
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.layout.slots.iter().find(|s| s.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.slot(name).map(|s| &self.data[s.range.clone()])
    }

    /// Columns of `W_O` rows belonging to head `h`: rows `h*dh..(h+1)*dh`.
    pub fn wo_block(&self, layer: usize, head: usize) -> &[f64] {
        let d = self.cfg.d_model;
        let dh = self.cfg.d_head;
        let wo = self.s(&self.layout.layers[layer].wo);
        &wo[head * dh * d..(head + 1) * dh * d]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => {
                let slot = self.layout.slots.iter().find(|s| s.range.contains(&i)).map(|s| s.name.as_str());
                Err(Error::Numeric(format!("non-finite parameter in {}", slot.unwrap_or("?"))))
            }
        }
    }

    pub fn add_scaled(&mut self, other: &Params, k: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous_and_named_uniquely() {
        let cfg = ModelConfig::micro();
        let l = Layout::new(&cfg);
        let mut at = 0;
        for s in &l.slots {
            assert_eq!(s.range.start, at);
            assert_eq!(s.range.len(), s.shape.iter().product::<usize>());
            at = s.range.end;
        }
        assert_eq!(at, l.len);
        let mut names: Vec<_> = l.slots.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), l.slots.len());
    }

    #[test]
    fn init_is_seeded_and_finite() {
        let a = Params::init(ModelConfig::micro(), 3).unwrap();
        let b = Params::init(ModelConfig::micro(), 3).unwrap();
        let c = Params::init(ModelConfig::micro(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data, c.data);
        a.check_finite().unwrap();
        assert!(a.tensor("final_norm").unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn wo_blocks_tile_the_matrix() {
        let p = Params::init(ModelConfig::micro(), 1).unwrap();
        let joined: Vec<f64> = (0..p.cfg.n_heads).flat_map(|h| p.wo_block(1, h).to_vec()).collect();
        assert_eq!(joined, p.s(&p.layout.layers[1].wo));
    }
}
