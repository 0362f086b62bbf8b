use serde::{Deserialize, Serialize};

use crate::synth::CanvasSpec;
use crate::vocab::Vocab;
use crate::{Error, Result};

/// Longest prompt the templates produce, in tokens.
pub const MAX_PROMPT_TOKENS: usize = 17;

/// Special tokens around the image and prompt: sys, img_start, img_end, assistant.
pub const FRAME_TOKENS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub mlp_mult: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub patch_px: usize,
    pub canvas_px: usize,
}

impl ModelConfig {
    /// Default desk-scale model: 6 layers of 4 heads over a 64 px canvas.
    pub fn toy() -> Self {
        Self {
            n_layers: 6,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            mlp_mult: 4,
            vocab_size: Vocab.len(),
            max_seq: 96,
            patch_px: 8,
            canvas_px: 64,
        }
    }

    /// Two layers, two heads, 16 px canvas. Used for gradient checks.
    pub fn micro() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            mlp_mult: 2,
            vocab_size: Vocab.len(),
            max_seq: 32,
            patch_px: 8,
            canvas_px: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.mlp_mult == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.vocab_size != Vocab.len() {
            return bad(format!("vocab_size {} but the vocabulary has {} tokens", self.vocab_size, Vocab.len()));
        }
        self.canvas()?;
        let need = self.n_image_tokens() + MAX_PROMPT_TOKENS + FRAME_TOKENS;
        if self.max_seq < need {
            return bad(format!("max_seq {} below the {need} positions a prompt needs", self.max_seq));
        }
        Ok(())
    }

    pub fn canvas(&self) -> Result<CanvasSpec> {
        CanvasSpec::new(self.canvas_px, self.patch_px)
    }

    pub fn n_image_tokens(&self) -> usize {
        let g = self.canvas_px / self.patch_px;
        g * g
    }

    /// Input width of the patch projection: three channels of `patch_px^2` pixels.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_px * self.patch_px
    }

    pub fn d_mlp(&self) -> usize {
        self.d_model * self.mlp_mult
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
        assert_eq!(ModelConfig::toy().n_image_tokens(), 64);
    }

    #[test]
    fn rejects_head_mismatch_and_short_context() {
        let mut c = ModelConfig::toy();
        c.d_head = 15;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy();
        c.max_seq = 80;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
