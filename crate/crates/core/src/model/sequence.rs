use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::synth::{QARecord, RenderedScene};
use crate::vocab::{self, TokenId, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    SystemPrompt,
    ImageToken,
    LastImageToken,
    UserInstruction,
    LastPromptToken,
    GeneratedToken,
}

/// Model input for one question. Image positions carry patch pixels instead
/// of a token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub segments: Vec<Segment>,
    /// Ink values (`1 - pixel`) of each image patch, `n_image x patch_dim`.
    pub patches: Vec<f64>,
    pub image_start: usize,
    pub n_image: usize,
    /// Position of the assistant marker, whose logits predict the first answer token.
    pub answer_pos: usize,
    /// `(position, token)` pairs supervised by the loss.
    pub targets: Vec<(usize, TokenId)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn image_range(&self) -> std::ops::Range<usize> {
        self.image_start..self.image_start + self.n_image
    }

    pub fn last_image_pos(&self) -> usize {
        self.image_start + self.n_image
    }

    pub fn positions_of(&self, seg: Segment) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.segments[i] == seg).collect()
    }

    pub fn answer(&self) -> Option<TokenId> {
        self.targets.first().map(|t| t.1)
    }
}

pub fn build_sequence(record: &QARecord, scene: &RenderedScene, cfg: &ModelConfig) -> Result<TokenSequence> {
    if scene.canvas.canvas_px != cfg.canvas_px || scene.canvas.patch_px != cfg.patch_px {
        return Err(Error::Config(format!(
            "scene {} is {}px/{}px but the model expects {}px/{}px",
            scene.id, scene.canvas.canvas_px, scene.canvas.patch_px, cfg.canvas_px, cfg.patch_px
        )));
    }
    if record.answer.is_empty() {
        return Err(Error::Contract(format!("record {} has no answer tokens", record.id)));
    }
    let v = Vocab;
    let n_image = cfg.n_image_tokens();
    let len = 4 + n_image + record.prompt.len() + record.answer.len() - 1;
    if len > cfg.max_seq {
        return Err(Error::Capacity { requested: len, capacity: cfg.max_seq });
    }
    let mut tokens = Vec::with_capacity(len);
    let mut segments = Vec::with_capacity(len);
    tokens.extend([v.expect(vocab::SYS), v.expect(vocab::IMG_START)]);
    segments.extend([Segment::SystemPrompt, Segment::SystemPrompt]);
    let image_start = tokens.len();
    tokens.extend(std::iter::repeat_n(v.expect(vocab::IMG), n_image));
    segments.extend(std::iter::repeat_n(Segment::ImageToken, n_image));
    tokens.push(v.expect(vocab::IMG_END));
    segments.push(Segment::LastImageToken);
    tokens.extend(&record.prompt);
    segments.extend(std::iter::repeat_n(Segment::UserInstruction, record.prompt.len()));
    let answer_pos = tokens.len();
    tokens.push(v.expect(vocab::ASSISTANT));
    segments.push(Segment::LastPromptToken);
    for &a in &record.answer[..record.answer.len() - 1] {
        tokens.push(a);
        segments.push(Segment::GeneratedToken);
    }
    let targets = record.answer.iter().enumerate().map(|(i, &a)| (answer_pos + i, a)).collect();

    let mut patches = Vec::with_capacity(n_image * cfg.patch_dim());
    for i in 0..n_image {
        scene.patch_pixels(i, &mut patches);
    }
    patches.iter_mut().for_each(|x| *x = 1.0 - *x);
    Ok(TokenSequence { tokens, segments, patches, image_start, n_image, answer_pos, targets })
}
