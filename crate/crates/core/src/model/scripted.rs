//! Scripted logit models for exact decoder scenarios.
//!
//! A [`ScriptedSchedule`] is a table: step index to per-position
//! `(token, confidence)` pairs, plus EOS marks. Logits are built two-level
//! (target logit against a flat rest, mask token pushed far down), so the
//! decoder's softmax recovers the scripted confidence.
//!
//! [`SyntheticScript`] is procedural instead: it ranks the masked positions
//! visible to each block and gives the first one a confident prediction and
//! the next few progressively weaker ones. Unmasking a token therefore lifts
//! its neighbours, the next-step acceptance pattern speculation exploits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ForwardBatch, ForwardOutput, LogitsView, Model, ModelConfig, TokenId};
use crate::error::{Error, Result};
use crate::kv_cache::KvRows;

/// Logit given to the mask token so it carries no probability mass.
const SUPPRESSED: f32 = -1.0e4;
/// Largest target gap; `exp(-60)` is below f64 resolution next to 1.
const MAX_GAP: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPrediction {
    pub token: TokenId,
    pub confidence: f64,
}

/// EOS predicted at `position`; with `tail`, at every later position too.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EosMark {
    pub position: usize,
    pub confidence: f64,
    #[serde(default)]
    pub tail: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    /// Absolute position to prediction.
    #[serde(default)]
    pub predictions: BTreeMap<usize, ScriptedPrediction>,
    #[serde(default)]
    pub eos: Vec<EosMark>,
    /// Used for positions not listed; absent means uniform logits.
    #[serde(default)]
    pub fallback: Option<ScriptedPrediction>,
}

impl ScheduleEntry {
    fn lookup(&self, position: usize, eos_id: TokenId) -> Option<ScriptedPrediction> {
        let eos = self
            .eos
            .iter()
            .filter(|m| m.position == position || (m.tail && m.position <= position))
            .max_by(|a, b| a.position.cmp(&b.position));
        if let Some(m) = eos {
            return Some(ScriptedPrediction {
                token: eos_id,
                confidence: m.confidence,
            });
        }
        self.predictions.get(&position).copied().or(self.fallback)
    }

    fn confidences(&self) -> impl Iterator<Item = f64> + '_ {
        self.predictions
            .values()
            .map(|p| p.confidence)
            .chain(self.eos.iter().map(|m| m.confidence))
            .chain(self.fallback.iter().map(|p| p.confidence))
    }
}

/// Step-indexed table of scripted predictions.
///
/// JSON form: `{"steps": {"0": {"predictions": {"3": {"token": 17,
/// "confidence": 0.95}}, "eos": [...], "fallback": null}, ...}}`. An entry
/// holds until the next listed step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSchedule {
    pub steps: BTreeMap<usize, ScheduleEntry>,
}

impl ScriptedSchedule {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("schedule: {e}")))
    }

    /// The entry in force at `step`.
    pub fn entry_at(&self, step: usize) -> Result<&ScheduleEntry> {
        self.steps
            .range(..=step)
            .next_back()
            .map(|(_, e)| e)
            .ok_or(Error::ScheduleExhausted(step))
    }

    /// Checks confidences are in `[0, 1]` and tokens are in the vocabulary.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (step, entry) in &self.steps {
            if let Some(c) = entry.confidences().find(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Config(format!(
                    "step {step}: confidence {c} outside [0, 1]"
                )));
            }
            let tokens = entry
                .predictions
                .values()
                .chain(entry.fallback.iter())
                .map(|p| p.token);
            if let Some(t) = tokens.clone().find(|&t| t as usize >= cfg.vocab_size) {
                return Err(Error::Config(format!("step {step}: token {t} outside vocabulary")));
            }
        }
        Ok(())
    }
}

/// Logits whose greedy prediction (mask token excluded) is `pred`.
///
/// The target gets logit `g`, every other non-mask token `0`, the mask token a
/// large negative value, so `confidence = e^g / (e^g + n_rest)`. Confidences
/// below `1 / (n_rest + 1)` cannot be the argmax and yield flat logits.
pub(crate) fn scripted_logits(cfg: &ModelConfig, pred: Option<ScriptedPrediction>) -> Vec<f32> {
    let vocab = cfg.vocab_size;
    let mut out = vec![0f32; vocab];
    let Some(pred) = pred else {
        return out;
    };
    let target = pred.token as usize;
    let mask = cfg.mask_token_id as usize;
    if target != mask {
        out[mask] = SUPPRESSED;
    }
    let n_rest = (if target == mask { vocab - 1 } else { vocab - 2 }) as f64;
    let p = pred.confidence;
    let gap = if p >= 1.0 {
        MAX_GAP
    } else {
        (p * n_rest / (1.0 - p)).ln().clamp(0.0, MAX_GAP)
    };
    out[target] = gap as f32;
    out
}

/// Logits for `positions` from the schedule entry in force at `step`.
pub fn scripted_forward(
    schedule: &ScriptedSchedule,
    step: usize,
    positions: &[usize],
    cfg: &ModelConfig,
) -> Result<LogitsView> {
    let entry = schedule.entry_at(step)?;
    let mut scores = Vec::with_capacity(positions.len() * cfg.vocab_size);
    for &p in positions {
        scores.extend(scripted_logits(cfg, entry.lookup(p, cfg.eos_token_id)));
    }
    LogitsView::new(
        cfg.vocab_size,
        positions.to_vec(),
        vec![0; positions.len()],
        scores,
    )
}

/// Procedural script: ranked masked positions with an optional EOS tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScript {
    /// Response offset from which EOS is predicted.
    pub eos_offset: Option<usize>,
    pub eos_confidence: f64,
    /// Confidence of the `i`-th masked position (before the EOS tail); the
    /// rest get `base_confidence`.
    pub ranked_confidences: Vec<f64>,
    pub base_confidence: f64,
    /// Seeds the token chosen for each position.
    pub token_seed: u64,
}

impl Default for SyntheticScript {
    fn default() -> Self {
        Self {
            eos_offset: None,
            eos_confidence: 0.99,
            ranked_confidences: vec![0.95, 0.8, 0.7],
            base_confidence: 0.3,
            token_seed: 0,
        }
    }
}

impl SyntheticScript {
    /// Token predicted at `position`, never the mask or EOS token.
    pub fn token_for(&self, cfg: &ModelConfig, position: usize) -> TokenId {
        let vocab = cfg.vocab_size as u64;
        let mut t = (position as u64 ^ self.token_seed)
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .rotate_right(17)
            % vocab;
        while t as TokenId == cfg.mask_token_id || t as TokenId == cfg.eos_token_id {
            t = (t + 1) % vocab;
        }
        t as TokenId
    }

    /// Predictions for every response position of `view`.
    fn predictions(
        &self,
        cfg: &ModelConfig,
        view: &[TokenId],
        prompt_len: usize,
    ) -> BTreeMap<usize, ScriptedPrediction> {
        let mut out = BTreeMap::new();
        let mut rank = 0;
        for (p, &tok) in view.iter().enumerate().skip(prompt_len) {
            let offset = p - prompt_len;
            let pred = if tok != cfg.mask_token_id {
                ScriptedPrediction {
                    token: tok,
                    confidence: 1.0,
                }
            } else if self.eos_offset.is_some_and(|e| offset >= e) {
                ScriptedPrediction {
                    token: cfg.eos_token_id,
                    confidence: self.eos_confidence,
                }
            } else {
                let c = self
                    .ranked_confidences
                    .get(rank)
                    .copied()
                    .unwrap_or(self.base_confidence);
                rank += 1;
                ScriptedPrediction {
                    token: self.token_for(cfg, p),
                    confidence: c,
                }
            };
            out.insert(p, pred);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum ScriptSource {
    Table(ScriptedSchedule),
    Synthetic(SyntheticScript),
}

/// A model that replays a script instead of computing attention.
///
/// Keeps no K/V (width zero); its config still supplies the dimensions the
/// cost model charges for.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    config: ModelConfig,
    source: ScriptSource,
}

impl ScriptedModel {
    /// Table-driven; the entry is chosen by the forward's step index.
    pub fn from_schedule(config: ModelConfig, schedule: ScriptedSchedule) -> Result<Self> {
        config.validate()?;
        schedule.validate(&config)?;
        Ok(Self {
            config,
            source: ScriptSource::Table(schedule),
        })
    }

    pub fn synthetic(config: ModelConfig, script: SyntheticScript) -> Result<Self> {
        config.validate()?;
        let bad = script
            .ranked_confidences
            .iter()
            .chain([&script.base_confidence, &script.eos_confidence])
            .copied()
            .find(|c| !(0.0..=1.0).contains(c));
        if let Some(c) = bad {
            return Err(Error::Config(format!("confidence {c} outside [0, 1]")));
        }
        Ok(Self {
            config,
            source: ScriptSource::Synthetic(script),
        })
    }

    pub fn source(&self) -> &ScriptSource {
        &self.source
    }
}

impl Model for ScriptedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn kv_width(&self) -> usize {
        0
    }

    fn forward(&self, batch: &ForwardBatch<'_>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let layout = batch.layout;
        if batch.tokens.len() != layout.n_queries() {
            return Err(Error::Shape(format!(
                "{} tokens for {} query rows",
                batch.tokens.len(),
                layout.n_queries()
            )));
        }
        let positions: Vec<usize> = layout.queries().iter().map(|q| q.position).collect();
        let tags: Vec<usize> = layout.queries().iter().map(|q| q.tag).collect();
        let logits = match &self.source {
            ScriptSource::Table(schedule) => {
                let view = scripted_forward(schedule, batch.step, &positions, cfg)?;
                LogitsView::new(
                    cfg.vocab_size,
                    positions.clone(),
                    tags,
                    (0..view.len()).flat_map(|i| view.row(i).to_vec()).collect(),
                )?
            }
            ScriptSource::Synthetic(script) => {
                let mut scores = Vec::with_capacity(positions.len() * cfg.vocab_size);
                for tag in 0..layout.n_tags() {
                    let rows = layout.rows_of(tag);
                    let mut view = batch.context.to_vec();
                    for r in rows.clone() {
                        let p = positions[r];
                        if p >= view.len() {
                            view.resize(p + 1, cfg.mask_token_id);
                        }
                        view[p] = batch.tokens[r];
                    }
                    let preds = script.predictions(cfg, &view, batch.prompt_len);
                    for r in rows {
                        let pred = preds.get(&positions[r]).copied().or(Some(ScriptedPrediction {
                            token: batch.tokens[r],
                            confidence: 1.0,
                        }));
                        scores.extend(scripted_logits(cfg, pred));
                    }
                }
                LogitsView::new(cfg.vocab_size, positions.clone(), tags, scores)?
            }
        };
        let kv = KvRows::from_parts(
            0,
            positions,
            vec![Default::default(); cfg.n_layers],
        )?;
        Ok(ForwardOutput { logits, kv })
    }
}
