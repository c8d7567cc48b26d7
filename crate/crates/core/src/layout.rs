//! Position IDs and attention visibility for block decoding.
//!
//! A layout lists the query rows of one forward (absolute position plus the
//! block tag the row belongs to) and the keys those rows may attend to. Keys
//! come in a fixed order: cached context ascending by position, then shared
//! decoded-token keys, then one key per query row in row order.
//!
//! Tag `0` is the decoding block. Speculative blocks carry tags `1..` and
//! reuse the absolute position IDs of the decoding block, so a candidate path
//! sees the same positional geometry as the block it speculates on.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::speculative::SpecSet;

/// Block tag of a query row. `0` is the decoding block.
pub type BlockTag = usize;

/// Speculation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Stage {
    /// Every speculative block recomputes the whole block.
    AcceptJump,
    /// Decoded tokens are computed once in block 0 and shared.
    DecodedShare,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::AcceptJump => 1,
            Stage::DecodedShare => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::AcceptJump),
            2 => Ok(Stage::DecodedShare),
            other => Err(format!("stage must be 1 or 2, got {other}")),
        }
    }
}

/// Where a key's K/V come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeySource {
    Cache,
    Shared,
    Block(BlockTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub position: usize,
    pub tag: BlockTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub position: usize,
    pub source: KeySource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    queries: Vec<QueryEntry>,
    keys: Vec<KeyEntry>,
    /// Number of leading keys that come from cache or shared storage.
    n_context: usize,
    /// Sorted positions held by each tag.
    tag_positions: Vec<Vec<usize>>,
}

impl AttentionLayout {
    /// Builds a layout from context keys and per-tag query positions.
    ///
    /// `blocks[t]` holds the positions of tag `t`, and every tag must be
    /// non-empty. Context keys must list cache keys before shared keys.
    pub fn from_blocks(context: Vec<KeyEntry>, blocks: Vec<Vec<usize>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Precondition("layout needs at least one block".into()));
        }
        let mut seen_shared = false;
        for key in &context {
            match key.source {
                KeySource::Cache if seen_shared => {
                    return Err(Error::Shape("cache keys must precede shared keys".into()))
                }
                KeySource::Cache => {}
                KeySource::Shared => seen_shared = true,
                KeySource::Block(_) => {
                    return Err(Error::Shape("block keys cannot be context keys".into()))
                }
            }
        }
        let mut queries = Vec::new();
        let mut tag_positions = Vec::with_capacity(blocks.len());
        for (tag, positions) in blocks.into_iter().enumerate() {
            if positions.is_empty() {
                return Err(Error::Precondition(format!("block tag {tag} has no rows")));
            }
            if positions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Shape(format!(
                    "block tag {tag} positions must be strictly ascending"
                )));
            }
            queries.extend(positions.iter().map(|&position| QueryEntry { position, tag }));
            tag_positions.push(positions);
        }
        let n_context = context.len();
        let mut keys = context;
        keys.extend(queries.iter().map(|q| KeyEntry {
            position: q.position,
            source: KeySource::Block(q.tag),
        }));
        Ok(Self {
            queries,
            keys,
            n_context,
            tag_positions,
        })
    }

    /// Every position of a `seq_len` sequence as one block with no context.
    pub fn full_sequence(seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Range { range: 0..0, len: 0 });
        }
        Self::from_blocks(Vec::new(), vec![(0..seq_len).collect()])
    }

    pub fn queries(&self) -> &[QueryEntry] {
        &self.queries
    }

    pub fn keys(&self) -> &[KeyEntry] {
        &self.keys
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn n_keys(&self) -> usize {
        self.keys.len()
    }

    /// Keys served from cache or shared storage.
    pub fn context_keys(&self) -> &[KeyEntry] {
        &self.keys[..self.n_context]
    }

    pub fn n_tags(&self) -> usize {
        self.tag_positions.len()
    }

    pub fn tag_positions(&self, tag: BlockTag) -> &[usize] {
        &self.tag_positions[tag]
    }

    /// Row indices belonging to `tag`, in row order.
    pub fn rows_of(&self, tag: BlockTag) -> Range<usize> {
        let start: usize = self.tag_positions[..tag].iter().map(Vec::len).sum();
        start..start + self.tag_positions[tag].len()
    }

    fn tag_contains(&self, tag: BlockTag, position: usize) -> bool {
        self.tag_positions[tag].binary_search(&position).is_ok()
    }

    /// Whether query row `q` may attend to key `k`.
    ///
    /// Cached keys are visible to every row. A shared key is visible to a row
    /// unless the row's own block already holds that position. Block keys are
    /// visible only within the same tag.
    pub fn mask_allows(&self, q: usize, k: usize) -> Result<bool> {
        let query = self.queries.get(q).ok_or(Error::Index {
            index: q,
            len: self.queries.len(),
        })?;
        let key = self.keys.get(k).ok_or(Error::Index {
            index: k,
            len: self.keys.len(),
        })?;
        Ok(match key.source {
            KeySource::Cache => true,
            KeySource::Shared => !self.tag_contains(query.tag, key.position),
            KeySource::Block(tag) => tag == query.tag,
        })
    }

    /// Dense `n_queries x n_keys` visibility matrix, row-major.
    pub fn dense_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.queries.len() * self.keys.len());
        for q in 0..self.queries.len() {
            for k in 0..self.keys.len() {
                out.push(self.mask_allows(q, k).expect("indices in range"));
            }
        }
        out
    }

    /// The dense mask as a 0/1 CSV grid, one row per query.
    pub fn mask_csv(&self) -> String {
        let n_keys = self.keys.len();
        let mut out = String::new();
        for row in self.dense_mask().chunks(n_keys.max(1)) {
            let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }
}

fn cache_keys(cache_positions: &[usize]) -> Result<Vec<KeyEntry>> {
    if cache_positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Shape("cache positions must be strictly ascending".into()));
    }
    Ok(cache_positions
        .iter()
        .map(|&position| KeyEntry {
            position,
            source: KeySource::Cache,
        })
        .collect())
}

fn check_disjoint(block: &Range<usize>, cache_positions: &[usize]) -> Result<()> {
    if cache_positions.iter().any(|p| block.contains(p)) {
        return Err(Error::Shape(format!(
            "cache overlaps the active block {block:?}"
        )));
    }
    Ok(())
}

/// Layout for a plain decode step: the block's rows against the cache.
pub fn build_block_layout(block: Range<usize>, cache_positions: &[usize]) -> Result<AttentionLayout> {
    if block.is_empty() {
        return Err(Error::Range {
            range: block,
            len: 0,
        });
    }
    check_disjoint(&block, cache_positions)?;
    AttentionLayout::from_blocks(cache_keys(cache_positions)?, vec![block.collect()])
}

/// Layout for a batched speculative forward.
///
/// Stage 1 gives every block all positions of the active block. Stage 2 gives
/// block 0 all positions and each speculative block only the positions that
/// are still masked; the decoded positions become shared keys.
pub fn build_spec_layout(
    block: Range<usize>,
    spec_set: &SpecSet,
    decoded_positions: &[usize],
    cache_positions: &[usize],
) -> Result<AttentionLayout> {
    if block.is_empty() {
        return Err(Error::Range {
            range: block,
            len: 0,
        });
    }
    check_disjoint(&block, cache_positions)?;
    let mut decoded = decoded_positions.to_vec();
    decoded.sort_unstable();
    decoded.dedup();
    if let Some(&p) = decoded.iter().find(|p| !block.contains(p)) {
        return Err(Error::Precondition(format!(
            "decoded position {p} outside active block {block:?}"
        )));
    }
    let mut context = cache_keys(cache_positions)?;
    let full: Vec<usize> = block.clone().collect();
    let n_spec = spec_set.blocks().len();
    let mut blocks = vec![full.clone()];
    match spec_set.stage() {
        Stage::AcceptJump => blocks.extend(std::iter::repeat_n(full, n_spec)),
        Stage::DecodedShare => {
            if decoded.is_empty() {
                return Err(Error::Precondition(
                    "decoded-share stage requires decoded positions".into(),
                ));
            }
            let masked: Vec<usize> = full
                .iter()
                .copied()
                .filter(|p| decoded.binary_search(p).is_err())
                .collect();
            if masked.is_empty() && n_spec > 0 {
                return Err(Error::BlockComplete);
            }
            context.extend(decoded.iter().map(|&position| KeyEntry {
                position,
                source: KeySource::Shared,
            }));
            blocks.extend(std::iter::repeat_n(masked, n_spec));
        }
    }
    AttentionLayout::from_blocks(context, blocks)
}
