//! Shared fixtures for the benchmarks.

use dlm_core::{ModelConfig, ToyModel};

pub const PROMPT: [u32; 8] = [3, 14, 15, 92, 65, 35, 89, 79];

pub fn toy_model() -> ToyModel {
    ToyModel::new(ModelConfig::toy()).expect("toy config is valid")
}
