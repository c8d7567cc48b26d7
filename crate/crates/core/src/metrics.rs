//! NFE accounting and a first-order roofline cost model.
//!
//! Cost of one forward with `T` query rows attending to `C` keys, for a model
//! with `L` layers, width `d`, feed-forward width `f` and vocabulary `V`:
//!
//! ```text
//! flops = L * (8*T*d^2 + 4*T*C*d + 4*T*d*f) + 2*T*d*V
//! bytes = 4 * (params + 2*L*C*d + 2*L*T*d)
//! ```
//!
//! Weights are 32-bit and read once per forward, K/V are read over the
//! context and written for the queries. Time is the roofline maximum of
//! compute time and memory time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::length::TruncationEvent;
use crate::model::{count_params, ModelConfig};
use crate::trajectory::{Phase, Trajectory};

/// Peak compute and memory bandwidth of a target device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub name: String,
    /// FLOP/s.
    pub peak_flops: f64,
    /// Bytes/s.
    pub mem_bandwidth: f64,
}

impl HardwareProfile {
    pub fn new(name: impl Into<String>, peak_flops: f64, mem_bandwidth: f64) -> Result<Self> {
        let p = Self {
            name: name.into(),
            peak_flops,
            mem_bandwidth,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.peak_flops) || !positive(self.mem_bandwidth) {
            return Err(Error::Config(format!(
                "profile {:?}: peak_flops and mem_bandwidth must be positive",
                self.name
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("profile: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    /// Arithmetic intensity (FLOP/byte) where compute and memory time meet.
    pub fn balance(&self) -> f64 {
        self.peak_flops / self.mem_bandwidth
    }
}

impl Default for HardwareProfile {
    /// A generic profile with balance 150 FLOP/byte.
    fn default() -> Self {
        Self {
            name: "generic-150".into(),
            peak_flops: 150e12,
            mem_bandwidth: 1e12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Compute,
    Memory,
}

impl Bound {
    pub fn as_str(self) -> &'static str {
        match self {
            Bound::Compute => "compute",
            Bound::Memory => "memory",
        }
    }
}

/// Modeled cost of one forward. Serialises to the per-step CSV columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub step: usize,
    pub phase: Phase,
    #[serde(rename = "T")]
    pub query_tokens: usize,
    #[serde(rename = "C")]
    pub context_tokens: usize,
    pub flops: f64,
    pub bytes: f64,
    #[serde(rename = "ai")]
    pub arithmetic_intensity: f64,
    pub bound: Bound,
    pub est_time_s: f64,
}

/// Exact integer FLOP and byte counts of one forward.
pub fn forward_counts(cfg: &ModelConfig, t: usize, c: usize) -> (u128, u128) {
    let (t, c) = (t as u128, c as u128);
    let d = cfg.d_model as u128;
    let l = cfg.n_layers as u128;
    let f = cfg.d_ff as u128;
    let v = cfg.vocab_size as u128;
    let flops = l * (8 * t * d * d + 4 * t * c * d + 4 * t * d * f) + 2 * t * d * v;
    let bytes = 4 * (u128::from(count_params(cfg)) + 2 * l * c * d + 2 * l * t * d);
    (flops, bytes)
}

pub fn cost_of_forward(
    cfg: &ModelConfig,
    phase: Phase,
    query_tokens: usize,
    context_tokens: usize,
    profile: &HardwareProfile,
) -> Result<CostRecord> {
    if query_tokens == 0 {
        return Err(Error::EmptyInput("forward with no query rows".into()));
    }
    if context_tokens < query_tokens {
        return Err(Error::Shape(format!(
            "context {context_tokens} smaller than query count {query_tokens}"
        )));
    }
    let (flops, bytes) = forward_counts(cfg, query_tokens, context_tokens);
    let (flops, bytes) = (flops as f64, bytes as f64);
    let ai = flops / bytes;
    Ok(CostRecord {
        step: 0,
        phase,
        query_tokens,
        context_tokens,
        flops,
        bytes,
        arithmetic_intensity: ai,
        bound: if ai >= profile.balance() {
            Bound::Compute
        } else {
            Bound::Memory
        },
        est_time_s: (flops / profile.peak_flops).max(bytes / profile.mem_bandwidth),
    })
}

/// One cost record per logged forward.
pub fn trajectory_costs(
    traj: &Trajectory,
    cfg: &ModelConfig,
    profile: &HardwareProfile,
) -> Result<Vec<CostRecord>> {
    traj.steps
        .iter()
        .map(|s| {
            let mut r = cost_of_forward(cfg, s.phase, s.query_tokens, s.context_tokens, profile)?;
            r.step = s.index;
            Ok(r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nfe: usize,
    pub eff_nfe: usize,
    pub prefill_steps: usize,
    pub decode_steps: usize,
    pub total_jumps: usize,
    pub blocks_evaluated: usize,
    pub tokens_generated: usize,
    pub initial_gen_length: usize,
    pub final_gen_length: usize,
    pub truncations: Vec<TruncationEvent>,
    pub total_flops: f64,
    pub total_bytes: f64,
    pub total_est_time_s: f64,
    pub prefill_est_time_s: f64,
    pub prefill_time_frac: f64,
    pub mean_prefill_ai: Option<f64>,
    pub mean_decode_ai: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn trajectory_metrics(
    traj: &Trajectory,
    cfg: &ModelConfig,
    profile: &HardwareProfile,
) -> Result<MetricsReport> {
    if traj.steps.is_empty() {
        return Err(Error::EmptyInput("trajectory has no steps".into()));
    }
    let costs = trajectory_costs(traj, cfg, profile)?;
    let total_time: f64 = costs.iter().map(|c| c.est_time_s).sum();
    let prefill_time: f64 = costs
        .iter()
        .filter(|c| c.phase == Phase::Prefill)
        .map(|c| c.est_time_s)
        .sum();
    let ai_of = |phase| {
        mean(
            costs
                .iter()
                .filter(move |c| c.phase == phase)
                .map(|c| c.arithmetic_intensity),
        )
    };
    let nfe = traj.nfe();
    let total_jumps = traj.total_jumps();
    Ok(MetricsReport {
        nfe,
        eff_nfe: nfe + total_jumps,
        prefill_steps: traj.prefill_steps(),
        decode_steps: traj.decode_steps(),
        total_jumps,
        blocks_evaluated: traj.steps.iter().map(|s| s.blocks_evaluated).sum(),
        tokens_generated: traj.steps.iter().map(|s| s.accepted.len()).sum(),
        initial_gen_length: traj.initial_gen_length,
        final_gen_length: traj.final_gen_length,
        truncations: traj.truncations.clone(),
        total_flops: costs.iter().map(|c| c.flops).sum(),
        total_bytes: costs.iter().map(|c| c.bytes).sum(),
        total_est_time_s: total_time,
        prefill_est_time_s: prefill_time,
        prefill_time_frac: prefill_time / total_time,
        mean_prefill_ai: ai_of(Phase::Prefill),
        mean_decode_ai: ai_of(Phase::Decode),
    })
}

/// Modeled time of `a` over modeled time of `b`; above 1 means `b` is faster.
pub fn estimate_speedup(
    a: &Trajectory,
    b: &Trajectory,
    cfg: &ModelConfig,
    profile: &HardwareProfile,
) -> Result<f64> {
    if a.prompt_len != b.prompt_len || a.tokens[..a.prompt_len] != b.tokens[..b.prompt_len] {
        return Err(Error::Precondition("trajectories come from different prompts".into()));
    }
    let time = |t: &Trajectory| -> Result<f64> {
        Ok(trajectory_costs(t, cfg, profile)?
            .iter()
            .map(|c| c.est_time_s)
            .sum())
    };
    let (ta, tb) = (time(a)?, time(b)?);
    if ta <= 0.0 || tb <= 0.0 {
        return Err(Error::Degenerate("trajectory with zero modeled time".into()));
    }
    Ok(ta / tb)
}
