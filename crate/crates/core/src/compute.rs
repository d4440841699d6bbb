//! Parameter and multiply-accumulate accounting.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::RgbImage;
use crate::error::Result;
use crate::model::Network;
use crate::policy::{SampleMode, Selector};
use crate::training::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub backbone: u64,
    pub global_branch: u64,
    /// Glimpse encoder plus GRU update, paid once per step.
    pub per_step: u64,
    /// Policy head, paid between consecutive steps.
    pub per_policy_call: u64,
    pub classifier: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeReport {
    pub parameters: usize,
    /// Parameter count per top-level module (`backbone`, `branch1`, `gru`, ...).
    pub parameters_by_module: BTreeMap<String, usize>,
    pub steps: usize,
    pub macs: MacBreakdown,
    pub macs_per_episode: u64,
    /// Deterministic episodes per second on this machine, when measured.
    pub episodes_per_second: Option<f64>,
}

pub fn parameters_by_module(net: &Network) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (_, name, t) in net.store.iter() {
        let module = name.split('.').next().unwrap_or(name).to_string();
        *out.entry(module).or_insert(0) += t.len();
    }
    out
}

pub fn mac_breakdown(net: &Network) -> MacBreakdown {
    let cfg = &net.config;
    let fused = cfg.fused_dim() as u64;
    MacBreakdown {
        backbone: net.backbone.macs(cfg.input_size),
        global_branch: if net.ablation.uses_global() { net.branch1.macs(cfg.feature_side()) } else { 0 },
        per_step: if net.ablation.uses_local() {
            net.glimpse.macs(cfg.patch_size) + net.gru.macs()
        } else {
            0
        },
        per_policy_call: if net.ablation.uses_local() && net.selector == Selector::Drl {
            net.policy.macs()
        } else {
            0
        },
        classifier: fused * 2,
    }
}

/// Multiply-accumulates of one inference episode with `steps` glimpses:
/// `backbone + branch + steps · per_step + (steps − 1) · policy + classifier`.
pub fn episode_macs(b: &MacBreakdown, steps: usize) -> u64 {
    let steps = steps as u64;
    b.backbone + b.global_branch + steps * b.per_step + steps.saturating_sub(1) * b.per_policy_call + b.classifier
}

/// Counts parameters and MACs of `net` (the patch scorer is not part of the model).
pub fn compute_report(net: &Network) -> ComputeReport {
    let macs = mac_breakdown(net);
    ComputeReport {
        parameters: net.store.parameter_count(),
        parameters_by_module: parameters_by_module(net),
        steps: net.config.steps,
        macs_per_episode: episode_macs(&macs, net.config.steps),
        macs,
        episodes_per_second: None,
    }
}

/// Times `rounds` deterministic episodes on a constant image.
pub fn measure_throughput(net: &Network, rounds: usize) -> Result<f64> {
    let s = net.config.input_size;
    let image = RgbImage::filled(s, s, 0.5);
    let mut rng = stream_rng(0, 0);
    let start = Instant::now();
    for _ in 0..rounds {
        net.forward_episode(&image, SampleMode::EvalDeterministic, None, &mut rng)?;
    }
    Ok(rounds as f64 / start.elapsed().as_secs_f64().max(1e-9))
}
