//! Jump-share speculation.
//!
//! Candidates are the most confident rejections of the previous step. Each
//! speculative block is a copy of the active block with a subset of the
//! candidates written in ahead of time; all blocks run in one forward and
//! cannot see each other. Afterwards the decoder walks a ladder of subsets
//! `{c1} -> {c1,c2} -> {c1,c2,c3} -> {c1..c4}` and adopts the furthest block
//! whose candidates were confirmed along the way.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::decoder::{decide, predictions_for, Acceptance, DecodeState, RunConfig, StepOutcome};
use crate::error::{Error, Result};
use crate::kv_cache::{build_shared_kv, cache_view, DualCache};
use crate::layout::{build_spec_layout, AttentionLayout, BlockTag, Stage};
use crate::model::{ForwardBatch, Model, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f64,
}

/// Candidates ordered by confidence descending, ties by position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet(Vec<Candidate>);

impl CandidateSet {
    pub fn new(mut cands: Vec<Candidate>) -> Result<Self> {
        cands.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(a.position.cmp(&b.position))
        });
        if has_duplicate_positions(&cands) {
            return Err(Error::Precondition("candidate positions must be distinct".into()));
        }
        Ok(Self(cands))
    }

    pub fn as_slice(&self) -> &[Candidate] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Candidate> {
        self.0.get(i)
    }
}

fn has_duplicate_positions(cands: &[Candidate]) -> bool {
    let mut p: Vec<usize> = cands.iter().map(|c| c.position).collect();
    p.sort_unstable();
    p.windows(2).any(|w| w[0] == w[1])
}

/// A speculative block: its tag and the candidate indices (0-based) it holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecBlock {
    pub tag: BlockTag,
    pub members: Vec<usize>,
}

/// The speculative blocks of one step. Block 0 is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecSet {
    stage: Stage,
    candidates: CandidateSet,
    blocks: Vec<SpecBlock>,
}

const STAGE1_SUBSETS: &[&[usize]] = &[&[0], &[1], &[0, 1]];
const STAGE2_SUBSETS: &[&[usize]] = &[&[0], &[1], &[0, 1], &[2], &[0, 1, 2], &[3], &[0, 1, 2, 3]];

impl SpecSet {
    /// Subsets whose members all exist are kept, in lattice order.
    pub fn new(stage: Stage, candidates: CandidateSet) -> Self {
        let lattice = match stage {
            Stage::AcceptJump => STAGE1_SUBSETS,
            Stage::DecodedShare => STAGE2_SUBSETS,
        };
        let blocks = lattice
            .iter()
            .filter(|s| s.iter().all(|&i| i < candidates.len()))
            .enumerate()
            .map(|(i, s)| SpecBlock {
                tag: i + 1,
                members: s.to_vec(),
            })
            .collect();
        Self {
            stage,
            candidates,
            blocks,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn candidates(&self) -> &CandidateSet {
        &self.candidates
    }

    pub fn blocks(&self) -> &[SpecBlock] {
        &self.blocks
    }

    /// Tag of the block holding exactly `members`.
    pub fn tag_of(&self, members: &[usize]) -> Option<BlockTag> {
        self.blocks.iter().find(|b| b.members == members).map(|b| b.tag)
    }

    /// Candidate indices pre-filled in block `tag`; empty for block 0.
    pub fn members_of(&self, tag: BlockTag) -> &[usize] {
        match tag {
            0 => &[],
            t => &self.blocks[t - 1].members,
        }
    }
}

/// The `k` most confident rejections, or `None` when nothing was rejected.
pub fn select_candidates(outcome: &StepOutcome, k: usize) -> Option<CandidateSet> {
    if outcome.rejected_top.is_empty() || k == 0 {
        return None;
    }
    let cands = outcome
        .rejected_top
        .iter()
        .take(k)
        .map(|a| Candidate {
            position: a.position,
            token: a.token,
            confidence: a.confidence,
        })
        .collect();
    CandidateSet::new(cands).ok()
}

fn accepted_in(outcome: &StepOutcome, c: &Candidate) -> bool {
    outcome
        .accepted
        .iter()
        .any(|a| a.position == c.position && a.token == c.token)
}

/// Picks the block to adopt and counts the jumps taken to reach it.
///
/// `results[t]` is block `t`'s own threshold outcome. Moving from block 0 to
/// the starting block is one jump and every chain step is another.
pub fn resolve_jump(results: &[StepOutcome], spec_set: &SpecSet) -> (BlockTag, usize) {
    let cands = spec_set.candidates().as_slice();
    let ok = |tag: BlockTag, i: usize| results.get(tag).is_some_and(|r| accepted_in(r, &cands[i]));
    let ladder = |j: usize| spec_set.tag_of(&(0..j).collect::<Vec<_>>());

    // rung j means the block holding c1..cj
    let start = (1..=cands.len())
        .rev()
        .find_map(|j| ladder(j).filter(|_| (0..j).all(|i| ok(0, i))).map(|t| (t, j)));
    let (mut tag, mut rung) = match start {
        Some(s) => s,
        None => {
            let single = (1..cands.len())
                .find_map(|i| spec_set.tag_of(&[i]).filter(|_| ok(0, i)).map(|t| (t, i)));
            match single {
                // {c2} climbs onto the ladder at {c1,c2}
                Some((t, 1)) => match ladder(2) {
                    Some(pair) if ok(t, 0) => (pair, 2),
                    _ => return (t, 1),
                },
                Some((t, _)) => return (t, 1),
                None => return (0, 0),
            }
        }
    };
    let mut jumps = if rung == 2 && start.is_none() { 2 } else { 1 };
    while let Some(next) = ladder(rung + 1) {
        if !ok(tag, rung) {
            break;
        }
        tag = next;
        rung += 1;
        jumps += 1;
    }
    (tag, jumps)
}

/// A finished speculative step.
#[derive(Debug, Clone)]
pub struct SpecStep {
    /// The adopted outcome, candidates included in `accepted`.
    pub outcome: StepOutcome,
    pub layout: AttentionLayout,
    pub spec_set: SpecSet,
    /// Each block's own threshold outcome, by tag.
    pub block_outcomes: Vec<StepOutcome>,
}

/// Query-row tokens of every block in `layout`.
pub fn spec_tokens(state: &DecodeState, layout: &AttentionLayout, spec_set: &SpecSet) -> Vec<TokenId> {
    let cands = spec_set.candidates().as_slice();
    layout
        .queries()
        .iter()
        .map(|q| {
            spec_set
                .members_of(q.tag)
                .iter()
                .map(|&i| cands[i])
                .find(|c| c.position == q.position)
                .map_or(state.tokens()[q.position], |c| c.token)
        })
        .collect()
}

/// Threshold outcome of every block of a speculative forward.
pub fn block_outcomes(
    state: &DecodeState,
    block: Range<usize>,
    layout: &AttentionLayout,
    logits: &crate::model::LogitsView,
    spec_set: &SpecSet,
    threshold: f64,
) -> Result<Vec<StepOutcome>> {
    let cands = spec_set.candidates().as_slice();
    let masked = state.masked_in(block);
    (0..layout.n_tags())
        .map(|tag| {
            let filled: Vec<usize> = spec_set
                .members_of(tag)
                .iter()
                .map(|&i| cands[i].position)
                .collect();
            let open: Vec<usize> = masked.iter().copied().filter(|p| !filled.contains(p)).collect();
            let sub = logits.slice(layout.rows_of(tag));
            let preds = predictions_for(&open, &sub, state.mask_token_id())?;
            Ok(decide(preds, threshold, tag == 0))
        })
        .collect()
}

/// One batched speculative forward over block 0 and every speculative block.
pub fn spec_step(
    model: &dyn Model,
    state: &DecodeState,
    cache: &DualCache,
    candidates: &CandidateSet,
    stage: Stage,
    config: &RunConfig,
    step: usize,
) -> Result<SpecStep> {
    if candidates.is_empty() {
        return Err(Error::Precondition("speculation needs at least one candidate".into()));
    }
    let block = state.active_range();
    let decoded = state.decoded_in(block.clone());
    let epoch = cache.refresh_epoch();
    let spec_set = SpecSet::new(stage, candidates.clone());
    let view = match stage {
        Stage::AcceptJump => cache_view(cache, None, epoch)?,
        Stage::DecodedShare => {
            if decoded.len() < config.stage2_min() {
                return Err(Error::Precondition(format!(
                    "decoded-share stage needs {} decoded tokens, block has {}",
                    config.stage2_min(),
                    decoded.len()
                )));
            }
            let shared = build_shared_kv(model, state, block.clone(), cache, step)?;
            cache_view(cache, Some(&shared), epoch)?
        }
    };
    let decoded_for_layout: &[usize] = match stage {
        Stage::AcceptJump => &[],
        Stage::DecodedShare => &decoded,
    };
    let layout = build_spec_layout(block.clone(), &spec_set, decoded_for_layout, &cache.positions())?;
    let tokens = spec_tokens(state, &layout, &spec_set);
    let out = model.forward(&ForwardBatch {
        tokens: &tokens,
        layout: &layout,
        cache: &view,
        step,
        context: state.tokens(),
        prompt_len: state.prompt_len(),
    })?;
    let results = block_outcomes(state, block, &layout, &out.logits, &spec_set, config.accept_threshold)?;
    let (tag, jumps) = resolve_jump(&results, &spec_set);
    let mut outcome = results[tag].clone();
    let cands = spec_set.candidates().as_slice();
    outcome.accepted.extend(spec_set.members_of(tag).iter().map(|&i| Acceptance {
        position: cands[i].position,
        token: cands[i].token,
        confidence: cands[i].confidence,
    }));
    outcome.accepted.sort_by_key(|a| a.position);
    outcome.adopted_block = tag;
    outcome.jump_count = jumps;
    Ok(SpecStep {
        outcome,
        layout,
        spec_set,
        block_outcomes: results,
    })
}
