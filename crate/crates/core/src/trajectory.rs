//! Step log of one decode run; the source of every metric.

use serde::{Deserialize, Serialize};

use crate::decoder::{Acceptance, Strategy};
use crate::layout::{BlockTag, Stage};
use crate::length::TruncationEvent;
use crate::model::TokenId;
use crate::speculative::Candidate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Full-sequence forward: a cache refresh, or any vanilla step.
    Prefill,
    /// Block-local forward against the cache.
    Decode,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

/// One forward invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub block: usize,
    pub phase: Phase,
    /// Query rows in the forward.
    pub query_tokens: usize,
    /// Keys in the forward's layout (context plus query rows).
    pub context_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    /// Blocks evaluated in the forward (decoding block plus speculative ones).
    pub blocks_evaluated: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
    pub adopted_block: BlockTag,
    pub jump_count: usize,
    pub accepted: Vec<Acceptance>,
    /// Generation length after this step.
    pub gen_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub strategy: Strategy,
    pub prompt_len: usize,
    pub block_size: usize,
    pub initial_gen_length: usize,
    pub final_gen_length: usize,
    /// Final token sequence, prompt included.
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
    pub truncations: Vec<TruncationEvent>,
}

impl Trajectory {
    pub fn nfe(&self) -> usize {
        self.steps.len()
    }

    pub fn total_jumps(&self) -> usize {
        self.steps.iter().map(|s| s.jump_count).sum()
    }

    pub fn prefill_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.phase == Phase::Prefill).count()
    }

    pub fn decode_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.phase == Phase::Decode).count()
    }

    /// Response tokens, prompt stripped.
    pub fn response(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    /// Everything except the strategy label, for cross-strategy equality.
    pub fn same_run_as(&self, other: &Trajectory) -> bool {
        self.prompt_len == other.prompt_len
            && self.block_size == other.block_size
            && self.initial_gen_length == other.initial_gen_length
            && self.final_gen_length == other.final_gen_length
            && self.tokens == other.tokens
            && self.steps == other.steps
            && self.truncations == other.truncations
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serialises")
    }
}
