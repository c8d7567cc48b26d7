//! DualCache and shared decoded-token K/V.
//!
//! A refresh runs one full-sequence forward and keeps the K/V of every
//! position outside the active block: the prefix (prompt plus finished
//! blocks) and the suffix (the still-masked tail). Those entries stay frozen
//! for the whole block cycle. The refresh also hands back the full-sequence
//! logits as a prefill draft, which the length predictor scans for EOS.

use std::ops::Range;

use crate::decoder::DecodeState;
use crate::error::{Error, Result};
use crate::layout::{build_block_layout, AttentionLayout};
use crate::model::{ForwardBatch, LogitsView, Model};

/// Keys and values of one layer, row-major `[rows x width]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerKv {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

/// Per-layer K/V for a list of absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct KvRows {
    width: usize,
    positions: Vec<usize>,
    layers: Vec<LayerKv>,
}

impl KvRows {
    pub fn empty(n_layers: usize, width: usize) -> Self {
        Self {
            width,
            positions: Vec::new(),
            layers: vec![LayerKv::default(); n_layers],
        }
    }

    pub fn from_parts(width: usize, positions: Vec<usize>, layers: Vec<LayerKv>) -> Result<Self> {
        let n = positions.len() * width;
        if layers
            .iter()
            .any(|l| l.keys.len() != n || l.values.len() != n)
        {
            return Err(Error::Shape(format!(
                "layer K/V sizes do not match {} rows of width {width}",
                positions.len()
            )));
        }
        Ok(Self {
            width,
            positions,
            layers,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    /// Copies the given rows, in the given order.
    pub fn select(&self, rows: impl IntoIterator<Item = usize>) -> KvRows {
        let w = self.width;
        let mut out = KvRows::empty(self.layers.len(), w);
        for r in rows {
            out.positions.push(self.positions[r]);
            for (dst, src) in out.layers.iter_mut().zip(&self.layers) {
                dst.keys.extend_from_slice(&src.keys[r * w..(r + 1) * w]);
                dst.values.extend_from_slice(&src.values[r * w..(r + 1) * w]);
            }
        }
        out
    }

    pub fn concat(parts: &[&KvRows]) -> Result<KvRows> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let mut out = KvRows::empty(first.n_layers(), first.width);
        for part in parts {
            if part.width != out.width || part.n_layers() != out.n_layers() {
                return Err(Error::Shape("K/V parts disagree on layers or width".into()));
            }
            out.positions.extend_from_slice(&part.positions);
            for (dst, src) in out.layers.iter_mut().zip(&part.layers) {
                dst.keys.extend_from_slice(&src.keys);
                dst.values.extend_from_slice(&src.values);
            }
        }
        Ok(out)
    }

    /// Bytes held, at 4 bytes per element.
    pub fn bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| 4 * (l.keys.len() + l.values.len()))
            .sum()
    }
}

/// Full-sequence logits captured at a cache refresh, before re-masking.
#[derive(Debug, Clone)]
pub struct PrefillDraft {
    pub logits: LogitsView,
    pub epoch: u64,
}

/// Prefix and suffix K/V frozen for one block cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCache {
    prefix: KvRows,
    suffix: KvRows,
    block: Range<usize>,
    refresh_epoch: u64,
    snapshot_len: usize,
}

impl DualCache {
    pub fn prefix(&self) -> &KvRows {
        &self.prefix
    }

    pub fn suffix(&self) -> &KvRows {
        &self.suffix
    }

    /// The active block this cache was built around.
    pub fn block(&self) -> Range<usize> {
        self.block.clone()
    }

    pub fn refresh_epoch(&self) -> u64 {
        self.refresh_epoch
    }

    /// Sequence length when the cache was refreshed.
    pub fn snapshot_len(&self) -> usize {
        self.snapshot_len
    }

    /// Cached positions, ascending.
    pub fn positions(&self) -> Vec<usize> {
        let mut p = self.prefix.positions().to_vec();
        p.extend_from_slice(self.suffix.positions());
        p
    }

    pub fn len(&self) -> usize {
        self.prefix.len() + self.suffix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes(&self) -> usize {
        self.prefix.bytes() + self.suffix.bytes()
    }

    /// Drops suffix entries at or beyond `seq_len` after a length cut.
    pub fn truncate_to(&mut self, seq_len: usize) {
        let keep = self
            .suffix
            .positions()
            .iter()
            .take_while(|&&p| p < seq_len)
            .count();
        self.suffix = self.suffix.select(0..keep);
    }
}

/// K/V of the decoded positions of the active block, computed once in the
/// decoding block's context and read by every speculative block.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedKv {
    rows: KvRows,
    epoch: u64,
}

impl SharedKv {
    pub fn rows(&self) -> &KvRows {
        &self.rows
    }

    pub fn positions(&self) -> &[usize] {
        self.rows.positions()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

/// Key/value context handed to a forward: cache rows then shared rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheView {
    rows: KvRows,
    epoch: Option<u64>,
}

impl CacheView {
    /// No cached context.
    pub fn empty(n_layers: usize, width: usize) -> Self {
        Self {
            rows: KvRows::empty(n_layers, width),
            epoch: None,
        }
    }

    /// A view over explicitly assembled rows.
    pub fn from_rows(rows: KvRows) -> Self {
        Self { rows, epoch: None }
    }

    pub fn rows(&self) -> &KvRows {
        &self.rows
    }

    pub fn positions(&self) -> &[usize] {
        self.rows.positions()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn epoch(&self) -> Option<u64> {
        self.epoch
    }
}

/// Assembles the context for a forward in block cycle `cycle_epoch`.
pub fn cache_view(
    cache: &DualCache,
    shared: Option<&SharedKv>,
    cycle_epoch: u64,
) -> Result<CacheView> {
    if cache.refresh_epoch != cycle_epoch {
        return Err(Error::StaleCache {
            expected: cycle_epoch,
            found: cache.refresh_epoch,
        });
    }
    let mut parts = vec![&cache.prefix, &cache.suffix];
    if let Some(shared) = shared {
        if shared.epoch != cycle_epoch {
            return Err(Error::StaleCache {
                expected: cycle_epoch,
                found: shared.epoch,
            });
        }
        parts.push(&shared.rows);
    }
    Ok(CacheView {
        rows: KvRows::concat(&parts)?,
        epoch: Some(cycle_epoch),
    })
}

fn check_block(state: &DecodeState, block: &Range<usize>) -> Result<()> {
    let response = state.response_range();
    if block.is_empty() || block.start < response.start || block.end > response.end {
        return Err(Error::Range {
            range: block.clone(),
            len: state.seq_len(),
        });
    }
    Ok(())
}

/// Runs a full-sequence forward and caches everything outside `block`.
///
/// The returned cache's epoch is one past `prior`'s (or 1 for the first
/// refresh). `step` is the forward's index within the trajectory.
pub fn refresh_dual_cache(
    model: &dyn Model,
    state: &DecodeState,
    block: Range<usize>,
    prior: Option<&DualCache>,
    step: usize,
) -> Result<(DualCache, PrefillDraft)> {
    check_block(state, &block)?;
    let cfg = model.config();
    let seq_len = state.seq_len();
    let layout = AttentionLayout::full_sequence(seq_len)?;
    let empty = CacheView::empty(cfg.n_layers, model.kv_width());
    let out = model.forward(&ForwardBatch {
        tokens: state.tokens(),
        layout: &layout,
        cache: &empty,
        step,
        context: state.tokens(),
        prompt_len: state.prompt_len(),
    })?;
    let epoch = prior.map_or(0, |c| c.refresh_epoch) + 1;
    let cache = DualCache {
        prefix: out.kv.select(0..block.start),
        suffix: out.kv.select(block.end..seq_len),
        block,
        refresh_epoch: epoch,
        snapshot_len: seq_len,
    };
    Ok((
        cache,
        PrefillDraft {
            logits: out.logits,
            epoch,
        },
    ))
}

/// Computes K/V of the decoded positions of `block` in the decoding block's
/// context: the decoded tokens attend to the cache and to every position of
/// the block, masked ones included.
pub fn build_shared_kv(
    model: &dyn Model,
    state: &DecodeState,
    block: Range<usize>,
    cache: &DualCache,
    step: usize,
) -> Result<SharedKv> {
    check_block(state, &block)?;
    let decoded = state.decoded_in(block.clone());
    if decoded.is_empty() {
        return Err(Error::EmptyShared);
    }
    let view = cache_view(cache, None, cache.refresh_epoch)?;
    let layout = build_block_layout(block.clone(), view.positions())?;
    let out = model.forward(&ForwardBatch {
        tokens: &state.tokens()[block.clone()],
        layout: &layout,
        cache: &view,
        step,
        context: state.tokens(),
        prompt_len: state.prompt_len(),
    })?;
    let rows = out.kv.select(decoded.iter().map(|p| p - block.start));
    Ok(SharedKv {
        rows,
        epoch: cache.refresh_epoch,
    })
}
