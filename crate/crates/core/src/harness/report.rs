use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, evaluate_imitation};
use super::train::ImitationBaseline;
use crate::error::Result;
use crate::flownet::VelocityModel;
use crate::sampler::SamplerConfig;
use crate::scenario::SceneSample;
use crate::vocab::AnchorVocab;

/// A mode seen in the data but drawn less often than this counts as collapsed.
pub const COLLAPSE_FREQUENCY: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelModes {
    /// Share of samples per data mode, zero for modes never drawn.
    pub frequencies: BTreeMap<usize, f64>,
    pub expert_distance: f64,
    pub collapsed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCollapseReport {
    pub flow: ModelModes,
    pub imitation: ModelModes,
    /// Every scene has a single expert, so collapse cannot be judged.
    pub single_mode_data: bool,
    pub note: Option<String>,
}

fn modes_of(coverage: &BTreeMap<usize, f64>, distance: f64, data_modes: &BTreeSet<usize>, judge: bool) -> ModelModes {
    let frequencies: BTreeMap<usize, f64> = data_modes
        .iter()
        .map(|m| (*m, coverage.get(m).copied().unwrap_or(0.0)))
        .collect();
    let collapsed = judge && frequencies.values().any(|&f| f < COLLAPSE_FREQUENCY);
    ModelModes {
        frequencies,
        expert_distance: distance,
        collapsed,
    }
}

/// Per-mode frequencies and distance to the nearest expert for a flow model
/// (`n` samples per scene, intent masked) and the regression baseline.
pub fn mode_collapse_report(
    flow: &VelocityModel,
    vocab: Option<&AnchorVocab>,
    imitation: &ImitationBaseline,
    scenes: &[SceneSample],
    cfg: &SamplerConfig,
    n: usize,
) -> Result<ModeCollapseReport> {
    let data_modes: BTreeSet<usize> = scenes
        .iter()
        .flat_map(|s| s.experts.iter().map(|(_, m)| *m))
        .collect();
    let single = scenes.iter().all(|s| s.experts.len() <= 1);
    let fm = evaluate(flow, vocab, scenes, cfg, n)?;
    let im = evaluate_imitation(imitation, scenes)?;
    Ok(ModeCollapseReport {
        flow: modes_of(&fm.mode_coverage, fm.expert_distance, &data_modes, !single),
        imitation: modes_of(&im.mode_coverage, im.expert_distance, &data_modes, !single),
        single_mode_data: single,
        note: single.then(|| "every scene has one expert mode; collapse is not assessed".to_string()),
    })
}
