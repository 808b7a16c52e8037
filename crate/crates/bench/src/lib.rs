//! Shared fixtures for the criterion benches.

use swarmwm_core::runtime::{expert_plan, learn_model};
use swarmwm_core::{MissionInstance, SimConfig, WorldModel};

/// Desk-scale settings used by every bench.
pub fn bench_config() -> SimConfig {
    SimConfig::ci()
}

pub fn instance(cfg: &SimConfig, seed: u64) -> MissionInstance {
    cfg.instance.sample(seed).expect("ci instance parameters are valid")
}

/// Model learned from `n` expert plans on training seeds. Seeds the planner
/// cannot solve are skipped.
pub fn trained_model(cfg: &SimConfig, n: usize) -> WorldModel {
    let demos: Vec<_> = (0..n as u64)
        .map(|i| cfg.train_seed + i)
        .filter_map(|s| expert_plan(&instance(cfg, s), cfg, s).ok().map(|d| (s, d)))
        .collect();
    learn_model(cfg, &demos).expect("at least one demonstration")
}
