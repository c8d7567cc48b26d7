//! Reverse diffusion steps and the semi-autoregressive block loop.
//!
//! The response is split into fixed-size blocks decoded left to right. Inside
//! a block, each step predicts every masked position greedily and accepts
//! those whose confidence clears the acceptance threshold; when none does, the
//! single most confident position is accepted so every step makes progress.
//!
//! Three strategies share the loop:
//! - `vanilla` runs a full-sequence forward every step, no cache;
//! - `fast` refreshes a DualCache at each block start and runs block-local
//!   steps against it;
//! - `odb` adds EOS-driven length truncation at every refresh and jump-share
//!   speculation inside the block.

use std::ops::Range;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{cache_view, refresh_dual_cache, CacheView, DualCache};
use crate::layout::{build_block_layout, AttentionLayout, BlockTag};
use crate::length::{apply_truncation, scan_eos};
use crate::model::{predict_excluding, softmax, ForwardBatch, LogitsView, Model, TokenId};
use crate::speculative::{select_candidates, spec_step, CandidateSet};
use crate::trajectory::{Phase, StepRecord, Trajectory};

/// Token sequence of one request plus its block bookkeeping.
///
/// A response position is masked exactly when it holds the mask token; prompt
/// positions are never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    tokens: Vec<TokenId>,
    prompt_len: usize,
    gen_length: usize,
    block_size: usize,
    active_block: usize,
    time: f64,
    mask_token_id: TokenId,
}

impl DecodeState {
    /// Prompt followed by `gen_length` mask tokens.
    pub fn new(
        prompt: &[TokenId],
        gen_length: usize,
        block_size: usize,
        mask_token_id: TokenId,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::Precondition("prompt is empty".into()));
        }
        if prompt.contains(&mask_token_id) {
            return Err(Error::Precondition("prompt contains the mask token".into()));
        }
        if block_size == 0 || gen_length == 0 || !gen_length.is_multiple_of(block_size) {
            return Err(Error::Precondition(format!(
                "gen_length {gen_length} must be a positive multiple of block_size {block_size}"
            )));
        }
        let mut tokens = prompt.to_vec();
        tokens.resize(prompt.len() + gen_length, mask_token_id);
        Ok(Self {
            tokens,
            prompt_len: prompt.len(),
            gen_length,
            block_size,
            active_block: 0,
            time: 1.0,
            mask_token_id,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn gen_length(&self) -> usize {
        self.gen_length
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn mask_token_id(&self) -> TokenId {
        self.mask_token_id
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn response_range(&self) -> Range<usize> {
        self.prompt_len..self.tokens.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.gen_length / self.block_size
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        let start = self.prompt_len + block * self.block_size;
        start..start + self.block_size
    }

    pub fn active_block(&self) -> usize {
        self.active_block
    }

    pub fn set_active_block(&mut self, block: usize) -> Result<()> {
        if block >= self.n_blocks() {
            return Err(Error::Index {
                index: block,
                len: self.n_blocks(),
            });
        }
        self.active_block = block;
        Ok(())
    }

    pub fn active_range(&self) -> Range<usize> {
        self.block_range(self.active_block)
    }

    /// Diffusion time, used only by the tau-leaping sampler.
    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    pub fn is_masked(&self, position: usize) -> bool {
        position >= self.prompt_len && self.tokens[position] == self.mask_token_id
    }

    /// Per-position mask flags.
    pub fn masked(&self) -> Vec<bool> {
        (0..self.tokens.len()).map(|p| self.is_masked(p)).collect()
    }

    pub fn masked_in(&self, range: Range<usize>) -> Vec<usize> {
        range.filter(|&p| self.is_masked(p)).collect()
    }

    pub fn decoded_in(&self, range: Range<usize>) -> Vec<usize> {
        range.filter(|&p| !self.is_masked(p)).collect()
    }

    pub fn n_masked(&self) -> usize {
        self.masked_in(self.response_range()).len()
    }

    /// Writes a token into a masked response position.
    pub fn unmask(&mut self, position: usize, token: TokenId) -> Result<()> {
        if !self.response_range().contains(&position) {
            return Err(Error::Index {
                index: position,
                len: self.tokens.len(),
            });
        }
        if token == self.mask_token_id {
            return Err(Error::Precondition("cannot unmask to the mask token".into()));
        }
        if !self.is_masked(position) {
            return Err(Error::Invariant(format!("position {position} already decoded")));
        }
        self.tokens[position] = token;
        Ok(())
    }

    /// Commits a step's acceptances.
    pub fn apply(&mut self, outcome: &StepOutcome) -> Result<()> {
        for a in &outcome.accepted {
            self.unmask(a.position, a.token)?;
        }
        Ok(())
    }

    /// Shrinks the generation length; trailing positions are dropped.
    pub(crate) fn truncate_gen(&mut self, new_gen_length: usize) {
        debug_assert!(new_gen_length.is_multiple_of(self.block_size));
        self.gen_length = new_gen_length;
        self.tokens.truncate(self.prompt_len + new_gen_length);
    }
}

/// A decided position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f64,
}

/// Result of one decoding step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Positions unmasked by the step, ascending.
    pub accepted: Vec<Acceptance>,
    /// Masked positions left behind, confidence descending, ties by position.
    pub rejected_top: Vec<Acceptance>,
    pub jump_count: usize,
    pub adopted_block: BlockTag,
}

/// Greedy predictions for `positions`, read from the matching logits rows.
pub(crate) fn predictions_for(
    positions: &[usize],
    logits: &LogitsView,
    mask_token_id: TokenId,
) -> Result<Vec<Acceptance>> {
    positions
        .iter()
        .map(|&p| {
            let row = logits
                .row_of(p)
                .ok_or_else(|| Error::Shape(format!("no logits for masked position {p}")))?;
            let pred = predict_excluding(logits.row(row), mask_token_id)?;
            Ok(Acceptance {
                position: p,
                token: pred.token,
                confidence: pred.confidence,
            })
        })
        .collect()
}

/// Splits predictions by the threshold. With `force_progress`, an empty
/// acceptance set is replaced by the single most confident prediction.
pub(crate) fn decide(
    mut preds: Vec<Acceptance>,
    threshold: f64,
    force_progress: bool,
) -> StepOutcome {
    preds.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.position.cmp(&b.position))
    });
    let (mut accepted, mut rejected): (Vec<_>, Vec<_>) =
        preds.into_iter().partition(|a| a.confidence > threshold);
    if accepted.is_empty() && force_progress && !rejected.is_empty() {
        accepted.push(rejected.remove(0));
    }
    accepted.sort_by_key(|a| a.position);
    StepOutcome {
        accepted,
        rejected_top: rejected,
        jump_count: 0,
        adopted_block: 0,
    }
}

/// Confidence-threshold step over the masked positions of the active block.
///
/// Logits rows at already-decoded positions are ignored.
pub fn threshold_step(
    state: &DecodeState,
    logits: &LogitsView,
    threshold: f64,
) -> Result<StepOutcome> {
    let masked = state.masked_in(state.active_range());
    if masked.is_empty() {
        return Err(Error::BlockComplete);
    }
    let preds = predictions_for(&masked, logits, state.mask_token_id)?;
    Ok(decide(preds, threshold, true))
}

/// One tau-leaping reverse step from time `t` (the state's) to `s`.
///
/// Every masked position with a logits row stays masked with probability
/// `s / t`; otherwise it is filled with a token sampled from the softmax of
/// its logits, the mask token excluded. Decoded positions never change.
pub fn tau_leaping_step<R: Rng + ?Sized>(
    state: &DecodeState,
    logits: &LogitsView,
    s: f64,
    rng: &mut R,
) -> Result<DecodeState> {
    let t = state.time;
    if !(0.0..t).contains(&s) || t > 1.0 {
        return Err(Error::TimeOrder { s, t });
    }
    let stay = s / t;
    let mut next = state.clone();
    for (row, &p) in logits.positions().iter().enumerate() {
        if !state.is_masked(p) {
            continue;
        }
        if rng.random::<f64>() < stay {
            continue;
        }
        let mut probs = softmax(logits.row(row));
        probs[state.mask_token_id as usize] = 0.0;
        let total: f64 = probs.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut token = probs.iter().rposition(|&q| q > 0.0).unwrap_or(0);
        for (i, &q) in probs.iter().enumerate() {
            if q > 0.0 && u < q {
                token = i;
                break;
            }
            u -= q;
        }
        next.tokens[p] = token as TokenId;
    }
    next.time = s;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Vanilla,
    Fast,
    Odb,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Fast => "fast",
            Strategy::Odb => "odb",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "fast" => Ok(Strategy::Fast),
            "odb" => Ok(Strategy::Odb),
            other => Err(format!("unknown strategy {other:?} (vanilla|fast|odb)")),
        }
    }
}

fn default_threshold() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

/// Decoding run parameters. JSON keys match the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub gen_length: usize,
    pub block_size: usize,
    #[serde(default = "default_threshold")]
    pub accept_threshold: f64,
    #[serde(default = "default_threshold")]
    pub truncate_threshold: f64,
    /// Decoded tokens in the block needed for the decoded-share stage;
    /// defaults to a quarter of the block.
    #[serde(default)]
    pub stage2_min_decoded: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Vanilla only: tau-leaping steps per block; 0 selects threshold decoding.
    #[serde(default)]
    pub tau_steps: usize,
    /// ODB only: enables jump-share speculation.
    #[serde(default = "default_true")]
    pub speculative: bool,
}

impl RunConfig {
    pub fn new(strategy: Strategy, gen_length: usize, block_size: usize) -> Self {
        Self {
            strategy,
            gen_length,
            block_size,
            accept_threshold: default_threshold(),
            truncate_threshold: default_threshold(),
            stage2_min_decoded: None,
            seed: 0,
            tau_steps: 0,
            speculative: true,
        }
    }

    pub fn stage2_min(&self) -> usize {
        self.stage2_min_decoded
            .unwrap_or(self.block_size / 4)
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.gen_length == 0 || !self.gen_length.is_multiple_of(self.block_size) {
            return Err(Error::Config(format!(
                "gen_length {} must be a positive multiple of block_size {}",
                self.gen_length, self.block_size
            )));
        }
        if !(0.0..=1.0).contains(&self.accept_threshold) {
            return Err(Error::Config(format!(
                "accept_threshold {} outside [0, 1]",
                self.accept_threshold
            )));
        }
        if self.truncate_threshold.is_nan() || self.truncate_threshold <= 0.0 {
            return Err(Error::Config(format!(
                "truncate_threshold {} must be positive",
                self.truncate_threshold
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Recorder {
    steps: Vec<StepRecord>,
}

impl Recorder {
    fn next_index(&self) -> usize {
        self.steps.len()
    }

    fn push_forward(&mut self, state: &DecodeState, phase: Phase, layout: &AttentionLayout) {
        self.steps.push(StepRecord {
            index: self.steps.len(),
            block: state.active_block(),
            phase,
            query_tokens: layout.n_queries(),
            context_tokens: layout.n_keys(),
            stage: None,
            blocks_evaluated: layout.n_tags(),
            candidates: Vec::new(),
            adopted_block: 0,
            jump_count: 0,
            accepted: Vec::new(),
            gen_length: state.gen_length(),
        });
    }

    fn last_mut(&mut self) -> &mut StepRecord {
        self.steps.last_mut().expect("a forward was recorded")
    }
}

fn check_progress(outcome: &StepOutcome, state: &DecodeState) -> Result<()> {
    if outcome.accepted.is_empty() {
        return Err(Error::Invariant(format!(
            "no token unmasked in block {} ({} masked)",
            state.active_block(),
            state.masked_in(state.active_range()).len()
        )));
    }
    Ok(())
}

/// Decodes `prompt` under `config` and returns the full step log.
pub fn decode(model: &dyn Model, prompt: &[TokenId], config: &RunConfig) -> Result<Trajectory> {
    config.validate()?;
    let cfg = model.config();
    let mut state = DecodeState::new(prompt, config.gen_length, config.block_size, cfg.mask_token_id)?;
    let mut rec = Recorder { steps: Vec::new() };
    let truncations = match config.strategy {
        Strategy::Vanilla => {
            run_vanilla(model, &mut state, config, &mut rec)?;
            Vec::new()
        }
        Strategy::Fast | Strategy::Odb => run_cached(model, &mut state, config, &mut rec)?,
    };
    Ok(Trajectory {
        strategy: config.strategy,
        prompt_len: state.prompt_len(),
        block_size: config.block_size,
        initial_gen_length: config.gen_length,
        final_gen_length: state.gen_length(),
        tokens: state.tokens().to_vec(),
        steps: rec.steps,
        truncations,
    })
}

fn run_vanilla(
    model: &dyn Model,
    state: &mut DecodeState,
    config: &RunConfig,
    rec: &mut Recorder,
) -> Result<()> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let empty = CacheView::empty(cfg.n_layers, model.kv_width());
    for block in 0..state.n_blocks() {
        state.set_active_block(block)?;
        state.set_time(1.0);
        let range = state.active_range();
        let mut k = 0;
        while !state.masked_in(range.clone()).is_empty() {
            let layout = AttentionLayout::full_sequence(state.seq_len())?;
            let out = model.forward(&ForwardBatch {
                tokens: state.tokens(),
                layout: &layout,
                cache: &empty,
                step: rec.next_index(),
                context: state.tokens(),
                prompt_len: state.prompt_len(),
            })?;
            rec.push_forward(state, Phase::Prefill, &layout);
            let block_logits = out.logits.slice(range.clone());
            let accepted = if config.tau_steps > 0 {
                k += 1;
                let s = (1.0 - k as f64 / config.tau_steps as f64).max(0.0);
                let next = tau_leaping_step(state, &block_logits, s, &mut rng)?;
                let probs_of = |p: usize, tok: TokenId| {
                    let row = block_logits.row_of(p).expect("block row");
                    softmax(block_logits.row(row))[tok as usize]
                };
                let acc: Vec<Acceptance> = range
                    .clone()
                    .filter(|&p| state.is_masked(p) && !next.is_masked(p))
                    .map(|p| Acceptance {
                        position: p,
                        token: next.tokens()[p],
                        confidence: probs_of(p, next.tokens()[p]),
                    })
                    .collect();
                *state = next;
                acc
            } else {
                let outcome = threshold_step(state, &block_logits, config.accept_threshold)?;
                check_progress(&outcome, state)?;
                state.apply(&outcome)?;
                outcome.accepted
            };
            rec.last_mut().accepted = accepted;
        }
    }
    Ok(())
}

fn run_cached(
    model: &dyn Model,
    state: &mut DecodeState,
    config: &RunConfig,
    rec: &mut Recorder,
) -> Result<Vec<crate::length::TruncationEvent>> {
    let odb = config.strategy == Strategy::Odb;
    let speculate = odb && config.speculative;
    let mut truncations = Vec::new();
    let mut cache: Option<DualCache> = None;
    let mut block = 0;
    while block < state.n_blocks() {
        state.set_active_block(block)?;
        let range = state.active_range();
        let layout = AttentionLayout::full_sequence(state.seq_len())?;
        let (mut fresh, draft) =
            refresh_dual_cache(model, state, range.clone(), cache.as_ref(), rec.next_index())?;
        rec.push_forward(state, Phase::Prefill, &layout);
        if odb {
            if let Some(cut) = scan_eos(&draft, state, config.truncate_threshold, model.config()) {
                match apply_truncation(state, cut, fresh.refresh_epoch()) {
                    Ok(Some(event)) => {
                        debug!(
                            "truncated gen_length {} -> {} at eos {}",
                            event.old_gen_length, event.new_gen_length, event.eos_position
                        );
                        fresh.truncate_to(state.seq_len());
                        rec.last_mut().gen_length = state.gen_length();
                        truncations.push(event);
                    }
                    Ok(None) => {}
                    Err(e) => warn!("{e}"),
                }
            }
        }
        let epoch = fresh.refresh_epoch();
        let cache_ref = cache.insert(fresh);

        let mut candidates: Option<CandidateSet> = None;
        while !state.masked_in(range.clone()).is_empty() {
            let decoded = state.decoded_in(range.clone()).len();
            let outcome = match candidates.take().filter(|_| speculate) {
                Some(cands) => {
                    let stage = if decoded >= config.stage2_min() {
                        crate::layout::Stage::DecodedShare
                    } else {
                        crate::layout::Stage::AcceptJump
                    };
                    let step = spec_step(model, state, cache_ref, &cands, stage, config, rec.next_index())?;
                    rec.push_forward(state, Phase::Decode, &step.layout);
                    let r = rec.last_mut();
                    r.stage = Some(stage);
                    r.candidates = cands.as_slice().to_vec();
                    r.adopted_block = step.outcome.adopted_block;
                    r.jump_count = step.outcome.jump_count;
                    step.outcome
                }
                None => {
                    let view = cache_view(cache_ref, None, epoch)?;
                    let layout = build_block_layout(range.clone(), view.positions())?;
                    let out = model.forward(&ForwardBatch {
                        tokens: &state.tokens()[range.clone()],
                        layout: &layout,
                        cache: &view,
                        step: rec.next_index(),
                        context: state.tokens(),
                        prompt_len: state.prompt_len(),
                    })?;
                    rec.push_forward(state, Phase::Decode, &layout);
                    threshold_step(state, &out.logits, config.accept_threshold)?
                }
            };
            check_progress(&outcome, state)?;
            state.apply(&outcome)?;
            rec.last_mut().accepted = outcome.accepted.clone();
            if speculate {
                let decoded = state.decoded_in(range.clone()).len();
                let k = if decoded >= config.stage2_min() { 4 } else { 2 };
                candidates = select_candidates(&outcome, k);
            }
        }
        block += 1;
    }
    Ok(truncations)
}
