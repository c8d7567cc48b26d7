//! Block-wise decoding for masked diffusion language models.
//!
//! The crate provides a small deterministic transformer and a scripted model,
//! a DualCache-backed block decoder, EOS-driven length truncation, jump-share
//! speculation, and a roofline cost model over the resulting step logs.
//!
//! ```
//! use dlm_core::{decode, ModelConfig, RunConfig, Strategy, ToyModel};
//!
//! let model = ToyModel::new(ModelConfig::toy()).unwrap();
//! let traj = decode(&model, &[1, 2, 3, 4], &RunConfig::new(Strategy::Fast, 64, 32)).unwrap();
//! assert_eq!(traj.prefill_steps(), 2);
//! ```

pub mod decoder;
pub mod error;
pub mod kv_cache;
pub mod layout;
pub mod length;
pub mod metrics;
pub mod model;
pub mod speculative;
pub mod trajectory;

pub use decoder::{
    decode, tau_leaping_step, threshold_step, Acceptance, DecodeState, RunConfig, StepOutcome,
    Strategy,
};
pub use error::{Error, Result};
pub use kv_cache::{
    build_shared_kv, cache_view, refresh_dual_cache, CacheView, DualCache, KvRows, LayerKv,
    PrefillDraft, SharedKv,
};
pub use layout::{
    build_block_layout, build_spec_layout, AttentionLayout, BlockTag, KeyEntry, KeySource,
    QueryEntry, Stage,
};
pub use length::{apply_truncation, scan_eos, EosCut, TruncationEvent};
pub use metrics::{
    cost_of_forward, estimate_speedup, trajectory_costs, trajectory_metrics, Bound, CostRecord,
    HardwareProfile, MetricsReport,
};
pub use model::{
    count_params, logits_to_prediction, predict_excluding, softmax, ForwardBatch, ForwardOutput,
    LogitsView, Model, ModelConfig, Prediction, ScriptedModel, ScriptedSchedule, SyntheticScript,
    TokenId, ToyModel,
};
pub use speculative::{
    resolve_jump, select_candidates, spec_step, Candidate, CandidateSet, SpecBlock, SpecSet,
};
pub use trajectory::{Phase, StepRecord, Trajectory};
