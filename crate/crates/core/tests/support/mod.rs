//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use dlm_core::model::ToyWeights;
use dlm_core::{ModelConfig, StepOutcome};

/// K/V row computed by the reference model, per layer.
#[derive(Clone, Debug)]
pub struct RefKv {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

pub struct RefOutput {
    pub logits: Vec<Vec<f64>>,
    /// `kv[row]` for each query row.
    pub kv: Vec<RefKv>,
}

/// Straightforward f64 transformer over the toy weights.
pub struct Reference<'a> {
    pub cfg: &'a ModelConfig,
    pub w: &'a ToyWeights,
}

fn matvec(x: &[f64], m: &ndarray::Array2<f32>) -> Vec<f64> {
    let (rows, cols) = m.dim();
    assert_eq!(rows, x.len());
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * f64::from(m[[i, j]]);
        }
    }
    out
}

fn norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn rope(x: &mut [f64], pos: usize, hd: usize) {
    for head in x.chunks_mut(hd) {
        for i in 0..hd / 2 {
            let theta = 10_000f64.powf(-2.0 * i as f64 / hd as f64);
            let (c, s) = ((pos as f64 * theta).cos(), (pos as f64 * theta).sin());
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

impl Reference<'_> {
    /// Runs `tokens` at `positions`. Row `i` attends to external key `j`
    /// when `see_ext(i, j)` and to own row `j` when `see_own(i, j)`.
    pub fn forward(
        &self,
        tokens: &[u32],
        positions: &[usize],
        ext: &[RefKv],
        see_ext: &dyn Fn(usize, usize) -> bool,
        see_own: &dyn Fn(usize, usize) -> bool,
    ) -> RefOutput {
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let hd = d / nh;
        let t = tokens.len();
        let mut h: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&tok| self.w.embed.row(tok as usize).iter().map(|&v| f64::from(v)).collect())
            .collect();
        let mut kv = vec![
            RefKv {
                keys: Vec::new(),
                values: Vec::new()
            };
            t
        ];
        for (l, lw) in self.w.layers.iter().enumerate() {
            let x: Vec<Vec<f64>> = h.iter().map(|r| norm(r)).collect();
            let mut q: Vec<Vec<f64>> = x.iter().map(|r| matvec(r, &lw.wq)).collect();
            let mut k: Vec<Vec<f64>> = x.iter().map(|r| matvec(r, &lw.wk)).collect();
            let v: Vec<Vec<f64>> = x.iter().map(|r| matvec(r, &lw.wv)).collect();
            for i in 0..t {
                rope(&mut q[i], positions[i], hd);
                rope(&mut k[i], positions[i], hd);
                kv[i].keys.push(k[i].clone());
                kv[i].values.push(v[i].clone());
            }
            for i in 0..t {
                let mut attn = vec![0.0; d];
                for head in 0..nh {
                    let r = head * hd..(head + 1) * hd;
                    let mut keys: Vec<(&[f64], &[f64])> = Vec::new();
                    for (j, e) in ext.iter().enumerate() {
                        if see_ext(i, j) {
                            keys.push((&e.keys[l][r.clone()], &e.values[l][r.clone()]));
                        }
                    }
                    for j in 0..t {
                        if see_own(i, j) {
                            keys.push((&k[j][r.clone()], &v[j][r.clone()]));
                        }
                    }
                    let scores: Vec<f64> = keys
                        .iter()
                        .map(|(kk, _)| {
                            q[i][r.clone()].iter().zip(*kk).map(|(a, b)| a * b).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for ((_, vv), e) in keys.iter().zip(&exps) {
                        for (o, &val) in attn[r.clone()].iter_mut().zip(*vv) {
                            *o += e / z * val;
                        }
                    }
                }
                let proj = matvec(&attn, &lw.wo);
                for (a, b) in h[i].iter_mut().zip(proj) {
                    *a += b;
                }
            }
            for row in h.iter_mut() {
                let hidden: Vec<f64> = matvec(&norm(row), &lw.w1).into_iter().map(gelu).collect();
                for (a, b) in row.iter_mut().zip(matvec(&hidden, &lw.w2)) {
                    *a += b;
                }
            }
        }
        let logits = h.iter().map(|r| matvec(&norm(r), &self.w.unembed)).collect();
        RefOutput { logits, kv }
    }

    /// Full bidirectional forward over a whole sequence.
    pub fn dense(&self, tokens: &[u32]) -> RefOutput {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        self.forward(tokens, &positions, &[], &|_, _| false, &|_, _| true)
    }
}

/// Largest absolute difference over the largest reference magnitude.
pub fn rel_err(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-12);
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (f64::from(g) - w).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn rel_err_f32(got: &[f32], want: &[f32]) -> f64 {
    let want: Vec<f64> = want.iter().map(|&v| f64::from(v)).collect();
    rel_err(got, &want)
}

/// Which candidate indices each block confirmed.
pub type Confirmed = Vec<Vec<bool>>;

/// Jump resolution by explicit case analysis over the fixed block lattice.
///
/// Tags: 1 = {c1}, 2 = {c2}, 3 = {c1,c2}, then in the decoded-share stage
/// 4 = {c3}, 5 = {c1,c2,c3}, 6 = {c4}, 7 = {c1..c4}. Subsets needing a
/// missing candidate are absent and later tags shift down.
pub fn jump_oracle(k: usize, stage2: bool, confirmed: &Confirmed) -> (usize, usize) {
    let lattice: Vec<Vec<usize>> = if stage2 {
        vec![vec![0], vec![1], vec![0, 1], vec![2], vec![0, 1, 2], vec![3], vec![0, 1, 2, 3]]
    } else {
        vec![vec![0], vec![1], vec![0, 1]]
    };
    let present: Vec<Vec<usize>> = lattice
        .into_iter()
        .filter(|s| s.iter().all(|&i| i < k))
        .collect();
    let tag = |s: &[usize]| present.iter().position(|p| p == s).map(|i| i + 1);
    let c = |t: usize, i: usize| confirmed[t][i];

    if k == 0 {
        return (0, 0);
    }
    if k == 1 {
        return if c(0, 0) { (1, 1) } else { (0, 0) };
    }
    if !stage2 || k == 2 {
        let (t1, t2, t12) = (tag(&[0]).unwrap(), tag(&[1]).unwrap(), tag(&[0, 1]).unwrap());
        return match (c(0, 0), c(0, 1)) {
            (true, true) => (t12, 1),
            (true, false) if c(t1, 1) => (t12, 2),
            (true, false) => (t1, 1),
            (false, true) if c(t2, 0) => (t12, 2),
            (false, true) => (t2, 1),
            (false, false) => (0, 0),
        };
    }
    // stage 2 with three or four candidates
    let ladder: Vec<usize> = (1..=k).map(|j| tag(&(0..j).collect::<Vec<_>>()).unwrap()).collect();
    let mut rung = 0;
    for j in 1..=k {
        if (0..j).all(|i| c(0, i)) {
            rung = j;
        }
    }
    let mut jumps;
    if rung == 0 {
        if c(0, 1) {
            let t2 = tag(&[1]).unwrap();
            if c(t2, 0) {
                rung = 2;
                jumps = 2;
            } else {
                return (t2, 1);
            }
        } else if c(0, 2) {
            return (tag(&[2]).unwrap(), 1);
        } else if k == 4 && c(0, 3) {
            return (tag(&[3]).unwrap(), 1);
        } else {
            return (0, 0);
        }
    } else {
        jumps = 1;
    }
    while rung < k && c(ladder[rung - 1], rung) {
        rung += 1;
        jumps += 1;
    }
    (ladder[rung - 1], jumps)
}

/// Turns per-block confirmation flags into outcomes `resolve_jump` can read.
pub fn outcomes_from(
    cands: &[dlm_core::Candidate],
    confirmed: &Confirmed,
    wrong_token: &[Vec<bool>],
) -> Vec<StepOutcome> {
    confirmed
        .iter()
        .enumerate()
        .map(|(t, flags)| StepOutcome {
            accepted: flags
                .iter()
                .enumerate()
                .filter(|(i, &f)| f || wrong_token[t][*i])
                .map(|(i, _)| dlm_core::Acceptance {
                    position: cands[i].position,
                    token: if wrong_token[t][i] && !flags[i] {
                        cands[i].token + 1
                    } else {
                        cands[i].token
                    },
                    confidence: 0.95,
                })
                .collect(),
            ..Default::default()
        })
        .collect()
}

use std::ops::Range;

use dlm_core::layout::KeySource;
use dlm_core::speculative::{block_outcomes, spec_tokens};
use dlm_core::{
    build_block_layout, build_shared_kv, build_spec_layout, cache_view, predict_excluding,
    refresh_dual_cache, spec_step, AttentionLayout, Candidate, CandidateSet, CacheView,
    DecodeState, ForwardBatch, KeyEntry, LogitsView, Model, RunConfig, SpecSet, Stage, Strategy,
    ToyModel,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A toy model plus a partially decoded request.
pub struct Scenario {
    pub model: ToyModel,
    pub state: DecodeState,
    pub rng: ChaCha8Rng,
}

/// Random state: earlier blocks decoded, the active block partly decoded
/// with at least `min_masked` masked and `min_decoded` decoded positions.
pub fn scenario(seed: u64, min_masked: usize, min_decoded: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::toy();
    cfg.seed = rng.random_range(0..4);
    let model = ToyModel::new(cfg.clone()).unwrap();
    let block_size = [8, 16][rng.random_range(0..2)];
    let n_blocks = rng.random_range(2..=4);
    let prompt: Vec<u32> = (0..rng.random_range(3..10))
        .map(|_| rng.random_range(0..cfg.mask_token_id))
        .collect();
    let mut state = DecodeState::new(&prompt, n_blocks * block_size, block_size, cfg.mask_token_id).unwrap();
    let active = rng.random_range(0..n_blocks);
    for b in 0..active {
        for p in state.block_range(b) {
            let tok = rng.random_range(0..cfg.mask_token_id);
            state.unmask(p, tok).unwrap();
        }
    }
    state.set_active_block(active).unwrap();
    let mut block: Vec<usize> = state.active_range().collect();
    block.shuffle(&mut rng);
    let max_decoded = block_size - min_masked;
    let n_decoded = rng.random_range(min_decoded..=max_decoded);
    for &p in &block[..n_decoded] {
        let tok = rng.random_range(0..cfg.mask_token_id);
        state.unmask(p, tok).unwrap();
    }
    Scenario { model, state, rng }
}

fn cache_keys(positions: &[usize]) -> Vec<KeyEntry> {
    positions
        .iter()
        .map(|&position| KeyEntry {
            position,
            source: KeySource::Cache,
        })
        .collect()
}

fn rows_of(logits: &LogitsView, rows: Range<usize>) -> Vec<f32> {
    rows.flat_map(|r| logits.row(r).to_vec()).collect()
}

/// Block forward through a fresh DualCache against a dense f64 forward over
/// the same snapshot. Returns the worst relative logit error.
pub fn check_cache(seed: u64) -> f64 {
    let Scenario { model, mut state, mut rng } = scenario(seed, 1, 0);
    let cfg = model.config().clone();
    let reference = Reference { cfg: &cfg, w: model.weights() };
    let block = state.active_range();
    let (cache, _) = refresh_dual_cache(&model, &state, block.clone(), None, 0).unwrap();
    let snapshot = reference.dense(state.tokens());

    let mut worst = 0f64;
    for round in 0..2 {
        if round == 1 {
            // decode one more token and reuse the frozen cache
            let masked = state.masked_in(block.clone());
            let p = masked[rng.random_range(0..masked.len())];
            state.unmask(p, rng.random_range(0..cfg.mask_token_id)).unwrap();
        }
        let view = cache_view(&cache, None, cache.refresh_epoch()).unwrap();
        let layout = build_block_layout(block.clone(), view.positions()).unwrap();
        let out = model
            .forward(&ForwardBatch {
                tokens: &state.tokens()[block.clone()],
                layout: &layout,
                cache: &view,
                step: 0,
                context: state.tokens(),
                prompt_len: state.prompt_len(),
            })
            .unwrap();
        let got = rows_of(&out.logits, 0..block.len());
        let want: Vec<f64> = if round == 0 {
            block.clone().flat_map(|p| snapshot.logits[p].clone()).collect()
        } else {
            let ext: Vec<RefKv> = cache.positions().iter().map(|&p| snapshot.kv[p].clone()).collect();
            let positions: Vec<usize> = block.clone().collect();
            let o = reference.forward(
                &state.tokens()[block.clone()],
                &positions,
                &ext,
                &|_, _| true,
                &|_, _| true,
            );
            o.logits.into_iter().flatten().collect()
        };
        worst = worst.max(rel_err(&got, &want));
    }
    worst
}

/// Random candidates among the masked positions of the active block.
pub fn random_candidates(sc: &mut Scenario, k: usize) -> CandidateSet {
    let cfg = sc.model.config().clone();
    let mut masked = sc.state.masked_in(sc.state.active_range());
    masked.shuffle(&mut sc.rng);
    let cands = masked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &position)| Candidate {
            position,
            token: sc.rng.random_range(0..cfg.mask_token_id),
            confidence: 0.8 - 0.1 * i as f64,
        })
        .collect();
    CandidateSet::new(cands).unwrap()
}

/// Threshold acceptance over one block's own logits.
pub fn local_acceptance(
    logits: &LogitsView,
    open: &[usize],
    mask_id: u32,
    threshold: f64,
    force: bool,
) -> Vec<(usize, u32)> {
    let mut preds: Vec<(usize, u32, f64)> = open
        .iter()
        .map(|&p| {
            let pr = predict_excluding(logits.row(logits.row_of(p).unwrap()), mask_id).unwrap();
            (p, pr.token, pr.confidence)
        })
        .collect();
    let mut acc: Vec<(usize, u32)> = preds
        .iter()
        .filter(|x| x.2 > threshold)
        .map(|x| (x.0, x.1))
        .collect();
    if acc.is_empty() && force && !preds.is_empty() {
        preds.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        acc.push((preds[0].0, preds[0].1));
    }
    acc.sort();
    acc
}

pub struct IsolationReport {
    pub max_rel_err: f64,
    pub acceptances_match: bool,
    pub rows: usize,
}

/// Batched speculative forward against one isolated forward per block.
pub fn check_isolation(seed: u64, stage: Stage) -> IsolationReport {
    let (k, min_decoded) = match stage {
        Stage::AcceptJump => (2, 0),
        Stage::DecodedShare => (4, 1),
    };
    let mut sc = scenario(seed, k + 1, min_decoded);
    let cands = random_candidates(&mut sc, k);
    let model = &sc.model;
    let state = &sc.state;
    let cfg = model.config().clone();
    let block = state.active_range();
    let decoded = state.decoded_in(block.clone());
    let threshold = [0.02, 0.05, 0.1, 0.2][sc.rng.random_range(0..4)];

    let (cache, _) = refresh_dual_cache(model, state, block.clone(), None, 0).unwrap();
    let epoch = cache.refresh_epoch();
    let spec_set = SpecSet::new(stage, cands.clone());
    let shared = match stage {
        Stage::AcceptJump => None,
        Stage::DecodedShare => Some(build_shared_kv(model, state, block.clone(), &cache, 1).unwrap()),
    };
    let view = cache_view(&cache, shared.as_ref(), epoch).unwrap();
    let dec_for_layout: &[usize] = if shared.is_some() { &decoded } else { &[] };
    let layout = build_spec_layout(block.clone(), &spec_set, dec_for_layout, &cache.positions()).unwrap();
    let tokens = spec_tokens(state, &layout, &spec_set);
    let batched = model
        .forward(&ForwardBatch {
            tokens: &tokens,
            layout: &layout,
            cache: &view,
            step: 1,
            context: state.tokens(),
            prompt_len: state.prompt_len(),
        })
        .unwrap();

    let mut config = RunConfig::new(Strategy::Odb, state.gen_length(), state.block_size());
    config.accept_threshold = threshold;
    config.stage2_min_decoded = Some(1);
    let spec = spec_step(model, state, &cache, &cands, stage, &config, 1).unwrap();
    let batched_outcomes =
        block_outcomes(state, block.clone(), &layout, &batched.logits, &spec_set, threshold).unwrap();

    let mut worst = 0f64;
    let mut same = spec.block_outcomes == batched_outcomes;
    let masked = state.masked_in(block.clone());
    for tag in 0..layout.n_tags() {
        let positions = layout.tag_positions(tag).to_vec();
        let sees_shared = tag > 0 && shared.is_some();
        let (ctx_view, ctx_keys) = if sees_shared {
            let v = cache_view(&cache, shared.as_ref(), epoch).unwrap();
            let mut keys = cache_keys(&cache.positions());
            keys.extend(decoded.iter().map(|&position| KeyEntry {
                position,
                source: KeySource::Shared,
            }));
            (v, keys)
        } else {
            let v = cache_view(&cache, None, epoch).unwrap();
            (v, cache_keys(&cache.positions()))
        };
        let iso_layout = AttentionLayout::from_blocks(ctx_keys, vec![positions.clone()]).unwrap();
        let rows = layout.rows_of(tag);
        let iso = model
            .forward(&ForwardBatch {
                tokens: &tokens[rows.clone()],
                layout: &iso_layout,
                cache: &ctx_view,
                step: 1,
                context: state.tokens(),
                prompt_len: state.prompt_len(),
            })
            .unwrap();
        worst = worst.max(rel_err_f32(
            &rows_of(&batched.logits, rows.clone()),
            &rows_of(&iso.logits, 0..positions.len()),
        ));
        let filled: Vec<usize> = spec_set
            .members_of(tag)
            .iter()
            .map(|&i| cands.as_slice()[i].position)
            .collect();
        let open: Vec<usize> = masked.iter().copied().filter(|p| !filled.contains(p)).collect();
        let want = local_acceptance(&iso.logits, &open, cfg.mask_token_id, threshold, tag == 0);
        let got: Vec<(usize, u32)> = spec.block_outcomes[tag]
            .accepted
            .iter()
            .map(|a| (a.position, a.token))
            .collect();
        same &= got == want;
    }
    IsolationReport {
        max_rel_err: worst,
        acceptances_match: same,
        rows: layout.n_queries(),
    }
}

/// Decoded-share rows against an f64 forward that substitutes block 0's
/// K/V for the decoded positions explicitly.
pub fn check_shared(seed: u64) -> f64 {
    let mut sc = scenario(seed, 5, 1);
    let cands = random_candidates(&mut sc, 4);
    let model = &sc.model;
    let state = &sc.state;
    let cfg = model.config().clone();
    let reference = Reference { cfg: &cfg, w: model.weights() };
    let block = state.active_range();
    let decoded = state.decoded_in(block.clone());

    let (cache, _) = refresh_dual_cache(model, state, block.clone(), None, 0).unwrap();
    let epoch = cache.refresh_epoch();
    let shared = build_shared_kv(model, state, block.clone(), &cache, 1).unwrap();
    let view = cache_view(&cache, Some(&shared), epoch).unwrap();
    let spec_set = SpecSet::new(Stage::DecodedShare, cands.clone());
    let layout = build_spec_layout(block.clone(), &spec_set, &decoded, &cache.positions()).unwrap();
    let tokens = spec_tokens(state, &layout, &spec_set);
    let batched = model
        .forward(&ForwardBatch {
            tokens: &tokens,
            layout: &layout,
            cache: &view,
            step: 1,
            context: state.tokens(),
            prompt_len: state.prompt_len(),
        })
        .unwrap();

    let snapshot = reference.dense(state.tokens());
    let ext: Vec<RefKv> = cache.positions().iter().map(|&p| snapshot.kv[p].clone()).collect();
    let block_pos: Vec<usize> = block.clone().collect();
    let b0 = reference.forward(&state.tokens()[block.clone()], &block_pos, &ext, &|_, _| true, &|_, _| true);
    let mut worst = 0f64;
    for tag in 1..layout.n_tags() {
        let mut ext_t = ext.clone();
        ext_t.extend(decoded.iter().map(|&p| b0.kv[p - block.start].clone()));
        let positions = layout.tag_positions(tag).to_vec();
        let rows = layout.rows_of(tag);
        let o = reference.forward(&tokens[rows.clone()], &positions, &ext_t, &|_, _| true, &|_, _| true);
        let want: Vec<f64> = o.logits.into_iter().flatten().collect();
        worst = worst.max(rel_err(&rows_of(&batched.logits, rows), &want));
    }
    worst
}

/// Random per-block confirmation pattern for `k` candidates.
pub fn random_confirmations(
    rng: &mut ChaCha8Rng,
    k: usize,
    spec_set: &SpecSet,
) -> (Confirmed, Vec<Vec<bool>>) {
    let n = spec_set.blocks().len() + 1;
    let mut confirmed = vec![vec![false; k]; n];
    let mut wrong = vec![vec![false; k]; n];
    for t in 0..n {
        let members = spec_set.members_of(t);
        for i in 0..k {
            if members.contains(&i) {
                continue;
            }
            match rng.random_range(0..10) {
                0..=4 => confirmed[t][i] = true,
                5 => wrong[t][i] = true,
                _ => {}
            }
        }
    }
    (confirmed, wrong)
}

pub fn empty_view(model: &dyn Model) -> CacheView {
    CacheView::empty(model.config().n_layers, model.kv_width())
}

use dlm_core::model::{EosMark, ScheduleEntry, ScriptedPrediction, SyntheticScript};
use dlm_core::{ScriptedModel, ScriptedSchedule};

pub const REFERENCE_PROMPT: [u32; 8] = [3, 14, 15, 92, 65, 35, 89, 79];

/// Every position predicts token 9 at 0.95; EOS at `eos_offset` at 0.99.
pub fn alp_model(prompt_len: usize, eos_offset: usize) -> ScriptedModel {
    let entry = ScheduleEntry {
        eos: vec![EosMark {
            position: prompt_len + eos_offset,
            confidence: 0.99,
            tail: false,
        }],
        fallback: Some(ScriptedPrediction {
            token: 9,
            confidence: 0.95,
        }),
        ..Default::default()
    };
    let schedule = ScriptedSchedule {
        steps: [(0, entry)].into_iter().collect(),
    };
    ScriptedModel::from_schedule(ModelConfig::toy(), schedule).unwrap()
}

/// Ranked confidences 0.95 / 0.8 / 0.7 then 0.3: one token clears the
/// threshold per step and the next two are accepted one step later.
pub fn stable_candidates_model() -> ScriptedModel {
    ScriptedModel::synthetic(ModelConfig::toy(), SyntheticScript::default()).unwrap()
}
