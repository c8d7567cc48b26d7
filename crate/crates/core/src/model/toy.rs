//! Seeded bidirectional transformer.
//!
//! Pre-norm blocks (parameter-free RMS norm), multi-head attention with
//! rotary position encoding driven by each row's absolute position, a GELU
//! feed-forward, and a single projection to the vocabulary. Weights are drawn
//! from a seeded normal distribution scaled by `1/sqrt(d_model)`.

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{count_params, ForwardBatch, ForwardOutput, LogitsView, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::kv_cache::{KvRows, LayerKv};

const NORM_EPS: f32 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    /// `d_model x d_ff`
    pub w1: Array2<f32>,
    /// `d_ff x d_model`
    pub w2: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    /// `vocab x d_model`
    pub embed: Array2<f32>,
    pub layers: Vec<LayerWeights>,
    /// `d_model x vocab`
    pub unembed: Array2<f32>,
}

impl ToyWeights {
    pub fn param_count(&self) -> u64 {
        let layer: usize = self
            .layers
            .iter()
            .map(|l| l.wq.len() + l.wk.len() + l.wv.len() + l.wo.len() + l.w1.len() + l.w2.len())
            .sum();
        (self.embed.len() + self.unembed.len() + layer) as u64
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ModelConfig,
    weights: ToyWeights,
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let scale = 1.0 / (d as f32).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng) * scale)
        };
        let embed = draw(v, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                w1: draw(d, f),
                w2: draw(f, d),
            })
            .collect();
        let unembed = draw(d, v);
        let weights = ToyWeights {
            embed,
            layers,
            unembed,
        };
        debug_assert_eq!(weights.param_count(), count_params(&config));
        Ok(Self { config, weights })
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    /// FNV-1a over the bit patterns of the first layer's weights.
    pub fn first_layer_checksum(&self) -> u64 {
        let l = &self.weights.layers[0];
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
            for x in m.iter() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

pub(crate) fn rms_norm(x: &Array2<f32>) -> Array2<f32> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Rotates consecutive pairs within each head by `position * theta_i`.
pub(crate) fn apply_rope(x: &mut Array2<f32>, positions: &[usize], head_dim: usize) {
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    for (mut row, &pos) in x.rows_mut().into_iter().zip(positions) {
        let cs: Vec<(f32, f32)> = inv_freq
            .iter()
            .map(|f| {
                let a = pos as f64 * f;
                (a.cos() as f32, a.sin() as f32)
            })
            .collect();
        let row = row.as_slice_mut().expect("standard layout");
        for head in row.chunks_mut(head_dim) {
            for (i, &(c, s)) in cs.iter().enumerate() {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

fn as_view(data: &[f32], rows: usize, cols: usize) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((rows, cols), data).expect("row-major K/V")
}

impl Model for ToyModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn kv_width(&self) -> usize {
        self.config.d_model
    }

    fn forward(&self, batch: &ForwardBatch<'_>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (d, n_heads, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let layout = batch.layout;
        let t = layout.n_queries();
        if batch.tokens.len() != t {
            return Err(Error::Shape(format!(
                "{} tokens for {t} query rows",
                batch.tokens.len()
            )));
        }
        let ctx = batch.cache.rows();
        let n_ctx = layout.context_keys().len();
        if ctx.len() != n_ctx {
            return Err(Error::Shape(format!(
                "layout expects {n_ctx} context keys, cache view has {}",
                ctx.len()
            )));
        }
        if layout
            .context_keys()
            .iter()
            .zip(ctx.positions())
            .any(|(k, &p)| k.position != p)
        {
            return Err(Error::Shape("cache positions disagree with layout".into()));
        }
        if n_ctx > 0 && (ctx.n_layers() != cfg.n_layers || ctx.width() != d) {
            return Err(Error::Shape(format!(
                "cache has {} layers of width {}, model {} of width {d}",
                ctx.n_layers(),
                ctx.width(),
                cfg.n_layers
            )));
        }
        if let Some(&bad) = batch
            .tokens
            .iter()
            .find(|&&tok| tok as usize >= cfg.vocab_size)
        {
            return Err(Error::Shape(format!("token {bad} outside vocabulary")));
        }

        let positions: Vec<usize> = layout.queries().iter().map(|q| q.position).collect();
        let n_keys = n_ctx + t;
        let mask = layout.dense_mask();
        let scale = 1.0 / (hd as f32).sqrt();

        let mut h = Array2::<f32>::zeros((t, d));
        for (mut row, &tok) in h.rows_mut().into_iter().zip(batch.tokens) {
            row.assign(&self.weights.embed.row(tok as usize));
        }

        let mut kv_layers = Vec::with_capacity(cfg.n_layers);
        let mut scores = vec![0f32; n_keys];
        for (l, w) in self.weights.layers.iter().enumerate() {
            let x = rms_norm(&h);
            let mut q = x.dot(&w.wq);
            let mut k = x.dot(&w.wk);
            let v = x.dot(&w.wv);
            apply_rope(&mut q, &positions, hd);
            apply_rope(&mut k, &positions, hd);

            let (ck, cv) = if n_ctx > 0 {
                let layer = ctx.layer(l);
                (
                    as_view(&layer.keys, n_ctx, d),
                    as_view(&layer.values, n_ctx, d),
                )
            } else {
                (
                    ArrayView2::from_shape((0, d), &[][..]).expect("empty"),
                    ArrayView2::from_shape((0, d), &[][..]).expect("empty"),
                )
            };
            let mut attn = Array2::<f32>::zeros((t, d));
            for head in 0..n_heads {
                let cols = s![.., head * hd..(head + 1) * hd];
                let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
                let (ckh, cvh) = (ck.slice(cols), cv.slice(cols));
                for i in 0..t {
                    let qi = qh.row(i);
                    let allowed = &mask[i * n_keys..(i + 1) * n_keys];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..n_keys {
                        if !allowed[j] {
                            continue;
                        }
                        let kj = if j < n_ctx { ckh.row(j) } else { kh.row(j - n_ctx) };
                        let sc = qi.dot(&kj) * scale;
                        scores[j] = sc;
                        max = max.max(sc);
                    }
                    let mut denom = 0f32;
                    for j in 0..n_keys {
                        if allowed[j] {
                            let e = (scores[j] - max).exp();
                            scores[j] = e;
                            denom += e;
                        }
                    }
                    let mut out = attn.slice_mut(s![i, head * hd..(head + 1) * hd]);
                    for j in 0..n_keys {
                        if !allowed[j] {
                            continue;
                        }
                        let p = scores[j] / denom;
                        let vj = if j < n_ctx { cvh.row(j) } else { vh.row(j - n_ctx) };
                        out.scaled_add(p, &vj);
                    }
                }
            }
            h += &attn.dot(&w.wo);
            let x = rms_norm(&h);
            let hidden = x.dot(&w.w1).mapv(gelu);
            h += &hidden.dot(&w.w2);

            kv_layers.push(LayerKv {
                keys: k.into_raw_vec_and_offset().0,
                values: v.into_raw_vec_and_offset().0,
            });
        }
        let logits = rms_norm(&h).dot(&self.weights.unembed);
        let tags = layout.queries().iter().map(|q| q.tag).collect();
        let scores = logits.as_standard_layout().iter().copied().collect();
        Ok(ForwardOutput {
            logits: LogitsView::new(cfg.vocab_size, positions.clone(), tags, scores)?,
            kv: KvRows::from_parts(d, positions, kv_layers)?,
        })
    }
}
