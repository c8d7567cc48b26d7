//! Model abstraction: logits over a laid-out batch of query rows.
//!
//! Two implementations ship with the crate. [`ToyModel`] is a small seeded
//! bidirectional transformer whose K/V can be cached. [`ScriptedModel`]
//! replays a [`ScriptedSchedule`] so decoder state machines can be driven
//! through exact scenarios.

mod scripted;
mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{CacheView, KvRows};
use crate::layout::{AttentionLayout, BlockTag};

pub use scripted::{
    scripted_forward, EosMark, ScheduleEntry, ScriptSource, ScriptedModel, ScriptedPrediction,
    ScriptedSchedule, SyntheticScript,
};
pub use toy::{LayerWeights, ToyModel, ToyWeights};

/// Token identifier.
pub type TokenId = u32;

/// Hyper-parameters of a model. JSON keys match the field names exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub mask_token_id: TokenId,
    pub eos_token_id: TokenId,
    pub seed: u64,
}

impl ModelConfig {
    /// The small configuration used throughout the tests and docs.
    pub fn toy() -> Self {
        Self {
            vocab_size: 128,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            mask_token_id: 126,
            eos_token_id: 127,
            seed: 7,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 3 {
            return fail(format!("vocab_size {} < 3", self.vocab_size));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "head dim {} must be even for rotary encoding",
                self.head_dim()
            ));
        }
        if self.mask_token_id == self.eos_token_id {
            return fail("mask_token_id equals eos_token_id".into());
        }
        let vocab = self.vocab_size as u64;
        if u64::from(self.mask_token_id) >= vocab || u64::from(self.eos_token_id) >= vocab {
            return fail("special token ids must be below vocab_size".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter count of the toy architecture.
///
/// Token embedding and output projection (`vocab x d` each), plus per layer
/// four `d x d` attention projections and the two feed-forward matrices.
/// Normalisation is parameter-free and there are no biases.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let (v, d, f, l) = (
        cfg.vocab_size as u64,
        cfg.d_model as u64,
        cfg.d_ff as u64,
        cfg.n_layers as u64,
    );
    2 * v * d + l * (4 * d * d + 2 * d * f)
}

/// One forward call's inputs.
#[derive(Debug, Clone, Copy)]
pub struct ForwardBatch<'a> {
    /// Token of each query row, in layout row order.
    pub tokens: &'a [TokenId],
    pub layout: &'a AttentionLayout,
    pub cache: &'a CacheView,
    /// Index of this forward within the trajectory.
    pub step: usize,
    /// The decode state's token sequence at call time.
    pub context: &'a [TokenId],
    pub prompt_len: usize,
}

/// Logits and fresh K/V for every query row.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: LogitsView,
    pub kv: KvRows,
}

pub trait Model: Send + Sync {
    fn config(&self) -> &ModelConfig;

    /// Width of one cached key or value row. Zero for models that keep no K/V.
    fn kv_width(&self) -> usize;

    fn forward(&self, batch: &ForwardBatch<'_>) -> Result<ForwardOutput>;
}

/// Score vectors, one per query row, tagged with position and block.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsView {
    vocab: usize,
    positions: Vec<usize>,
    tags: Vec<BlockTag>,
    scores: Vec<f32>,
}

impl LogitsView {
    pub fn new(
        vocab: usize,
        positions: Vec<usize>,
        tags: Vec<BlockTag>,
        scores: Vec<f32>,
    ) -> Result<Self> {
        if positions.len() != tags.len() || scores.len() != positions.len() * vocab {
            return Err(Error::Shape(format!(
                "{} positions, {} tags, {} scores for vocab {vocab}",
                positions.len(),
                tags.len(),
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Shape("non-finite logit".into()));
        }
        Ok(Self {
            vocab,
            positions,
            tags,
            scores,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn tags(&self) -> &[BlockTag] {
        &self.tags
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.scores[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Rows `range` as a new view.
    pub fn slice(&self, range: std::ops::Range<usize>) -> LogitsView {
        LogitsView {
            vocab: self.vocab,
            positions: self.positions[range.clone()].to_vec(),
            tags: self.tags[range.clone()].to_vec(),
            scores: self.scores[range.start * self.vocab..range.end * self.vocab].to_vec(),
        }
    }

    /// Row index holding `position`, first match.
    pub fn row_of(&self, position: usize) -> Option<usize> {
        self.positions.iter().position(|&p| p == position)
    }
}

/// A greedy prediction: the argmax token and its softmax probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub token: TokenId,
    pub confidence: f64,
}

fn softmax_parts(scores: &[f32]) -> (f32, f64) {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let denom: f64 = scores.iter().map(|&s| f64::from((s - max).exp())).sum();
    (max, denom)
}

/// Softmax distribution of a score vector.
pub fn softmax(scores: &[f32]) -> Vec<f64> {
    let (max, denom) = softmax_parts(scores);
    scores
        .iter()
        .map(|&s| f64::from((s - max).exp()) / denom)
        .collect()
}

fn predict(scores: &[f32], excluded: Option<TokenId>) -> Result<Prediction> {
    if scores.is_empty() {
        return Err(Error::Shape("empty score vector".into()));
    }
    let mut best: Option<(usize, f32)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if Some(i as TokenId) == excluded {
            continue;
        }
        // strict comparison keeps the lowest id on ties
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (token, score) = best.ok_or_else(|| Error::Shape("no eligible token".into()))?;
    let (max, denom) = softmax_parts(scores);
    Ok(Prediction {
        token: token as TokenId,
        confidence: f64::from((score - max).exp()) / denom,
    })
}

/// Argmax token and its softmax probability; ties go to the lowest id.
pub fn logits_to_prediction(scores: &[f32]) -> Result<Prediction> {
    predict(scores, None)
}

/// Like [`logits_to_prediction`] but never returns `excluded`.
///
/// The decoder uses this with the mask token so a masked position can only be
/// filled with a real token. The confidence keeps the full-vocabulary
/// normalisation.
pub fn predict_excluding(scores: &[f32], excluded: TokenId) -> Result<Prediction> {
    predict(scores, Some(excluded))
}
