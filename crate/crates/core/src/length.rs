//! Adaptive length prediction from the prefill draft.

use serde::{Deserialize, Serialize};

use crate::decoder::DecodeState;
use crate::error::{Error, Result};
use crate::kv_cache::PrefillDraft;
use crate::model::{predict_excluding, ModelConfig};

/// A confident EOS found in a draft.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EosCut {
    /// Absolute position.
    pub position: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationEvent {
    pub refresh_epoch: u64,
    pub eos_position: usize,
    pub eos_confidence: f64,
    pub old_gen_length: usize,
    pub new_gen_length: usize,
}

/// Earliest position at or after the active block's end whose draft argmax
/// is EOS with confidence strictly above `threshold`.
pub fn scan_eos(
    draft: &PrefillDraft,
    state: &DecodeState,
    threshold: f64,
    cfg: &ModelConfig,
) -> Option<EosCut> {
    let from = state.active_range().end;
    let to = state.seq_len();
    let logits = &draft.logits;
    let mut best: Option<EosCut> = None;
    for (row, &p) in logits.positions().iter().enumerate() {
        if p < from || p >= to || best.is_some_and(|b| b.position <= p) {
            continue;
        }
        let Ok(pred) = predict_excluding(logits.row(row), cfg.mask_token_id) else {
            continue;
        };
        if pred.token == cfg.eos_token_id && pred.confidence > threshold {
            best = Some(EosCut {
                position: p,
                confidence: pred.confidence,
            });
        }
    }
    best
}

/// Generation length that keeps `cut`, rounded up to whole blocks.
pub fn truncated_length(state: &DecodeState, cut_position: usize) -> usize {
    let bs = state.block_size();
    let offset = cut_position - state.prompt_len();
    let rounded = (offset + 1).div_ceil(bs) * bs;
    let active_end = state.active_range().end - state.prompt_len();
    rounded.max(active_end)
}

/// Shrinks the generation length to keep `cut`.
///
/// Returns `Ok(None)` when the rounded length would not shrink. A cut inside
/// the active block, the prompt, or any decoded region is rejected and the
/// state is left untouched.
pub fn apply_truncation(
    state: &mut DecodeState,
    cut: EosCut,
    refresh_epoch: u64,
) -> Result<Option<TruncationEvent>> {
    let active_end = state.active_range().end;
    if cut.position < active_end {
        return Err(Error::TruncationRejected {
            position: cut.position,
            reason: format!("before the end of the active block ({active_end})"),
        });
    }
    if cut.position >= state.seq_len() {
        return Err(Error::TruncationRejected {
            position: cut.position,
            reason: format!("beyond the sequence ({})", state.seq_len()),
        });
    }
    let old = state.gen_length();
    let new = truncated_length(state, cut.position);
    if new >= old {
        return Ok(None);
    }
    let dropped = state.prompt_len() + new..state.seq_len();
    if let Some(&p) = state.decoded_in(dropped).first() {
        return Err(Error::TruncationRejected {
            position: cut.position,
            reason: format!("would drop decoded position {p}"),
        });
    }
    state.truncate_gen(new);
    Ok(Some(TruncationEvent {
        refresh_epoch,
        eos_position: cut.position,
        eos_confidence: cut.confidence,
        old_gen_length: old,
        new_gen_length: new,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EosMark, LogitsView, ScheduleEntry, ScriptedSchedule};
    use std::collections::BTreeMap;

    const PROMPT: usize = 4;

    fn state(gen: usize) -> DecodeState {
        DecodeState::new(&[1, 2, 3, 4], gen, 32, 126).unwrap()
    }

    fn draft_with(marks: &[(usize, f64)], seq_len: usize) -> PrefillDraft {
        let entry = ScheduleEntry {
            eos: marks
                .iter()
                .map(|&(offset, confidence)| EosMark {
                    position: PROMPT + offset,
                    confidence,
                    tail: false,
                })
                .collect(),
            ..Default::default()
        };
        let schedule = ScriptedSchedule {
            steps: BTreeMap::from([(0, entry)]),
        };
        let positions: Vec<usize> = (0..seq_len).collect();
        let logits: LogitsView =
            crate::model::scripted_forward(&schedule, 0, &positions, &ModelConfig::toy()).unwrap();
        PrefillDraft { logits, epoch: 1 }
    }

    fn cut_at(offset: usize) -> EosCut {
        EosCut {
            position: PROMPT + offset,
            confidence: 0.99,
        }
    }

    #[test]
    fn finds_confident_eos() {
        let s = state(256);
        let d = draft_with(&[(87, 0.97)], s.seq_len());
        let cut = scan_eos(&d, &s, 0.9, &ModelConfig::toy()).unwrap();
        assert_eq!(cut.position - PROMPT, 87);
        assert!((cut.confidence - 0.97).abs() < 1e-4);
    }

    #[test]
    fn weak_or_absent_eos_is_ignored() {
        let s = state(256);
        let cfg = ModelConfig::toy();
        assert_eq!(scan_eos(&draft_with(&[(87, 0.5)], s.seq_len()), &s, 0.9, &cfg), None);
        assert_eq!(scan_eos(&draft_with(&[], s.seq_len()), &s, 0.9, &cfg), None);
    }

    #[test]
    fn earliest_eos_wins_and_active_block_is_skipped() {
        let s = state(256);
        let d = draft_with(&[(10, 0.99), (150, 0.99), (90, 0.95)], s.seq_len());
        let cut = scan_eos(&d, &s, 0.9, &ModelConfig::toy()).unwrap();
        assert_eq!(cut.position - PROMPT, 90);
    }

    #[test]
    fn rounding_rule() {
        let mut s = state(256);
        let e = apply_truncation(&mut s, cut_at(87), 1).unwrap().unwrap();
        assert_eq!((e.old_gen_length, e.new_gen_length), (256, 96));
        assert_eq!(s.gen_length(), 96);
        assert_eq!(s.seq_len(), PROMPT + 96);

        let mut s = state(256);
        apply_truncation(&mut s, cut_at(95), 1).unwrap();
        assert_eq!(s.gen_length(), 96);
        assert!(s.seq_len() > PROMPT + 95);
    }

    #[test]
    fn sequential_cuts_are_monotone() {
        let mut s = state(1024);
        apply_truncation(&mut s, cut_at(200), 1).unwrap();
        assert_eq!(s.gen_length(), 224);
        s.set_active_block(1).unwrap();
        apply_truncation(&mut s, cut_at(120), 2).unwrap();
        assert_eq!(s.gen_length(), 128);
        s.set_active_block(2).unwrap();
        assert_eq!(apply_truncation(&mut s, cut_at(127), 3).unwrap(), None);
        assert_eq!(s.gen_length(), 128);
    }

    #[test]
    fn cut_inside_active_block_rejected() {
        let mut s = state(256);
        s.set_active_block(2).unwrap();
        let before = s.clone();
        assert!(matches!(
            apply_truncation(&mut s, cut_at(70), 1),
            Err(Error::TruncationRejected { .. })
        ));
        assert_eq!(s, before);
    }

    #[test]
    fn never_drops_decoded_tokens() {
        let mut s = state(256);
        s.unmask(PROMPT + 200, 5).unwrap();
        assert!(matches!(
            apply_truncation(&mut s, cut_at(87), 1),
            Err(Error::TruncationRejected { .. })
        ));
        assert_eq!(s.gen_length(), 256);
    }
}
