use rand::Rng;
use rand_distr::StandardNormal;

use super::metrics::{score, Metrics};
use super::parallel::map_ordered;
use super::train::ImitationBaseline;
use crate::error::{Error, Result};
use crate::flownet::{ConditionSet, VelocityModel};
use crate::sampler::{conditions_for, sample_chains, SamplerConfig};
use crate::scenario::{SceneSample, Trajectory, DT, HORIZON};
use crate::seed::{self, streams};
use crate::vocab::{select_constraint_anchor, AnchorVocab};

/// Chain seed for sample `j` of the scene with dataset index `scene`.
/// Independent of module toggles, so runs that differ only in modules share
/// their initial noise.
pub fn chain_seed(master: u64, scene: usize, j: usize) -> u64 {
    seed::derive(seed::derive(master, streams::SAMPLER), ((scene as u64) << 16) | j as u64)
}

/// `n` samples per scene with the intent masked and the reward condition
/// taken from `cfg.reward`.
pub fn generate(
    model: &VelocityModel,
    vocab: Option<&AnchorVocab>,
    scenes: &[SceneSample],
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Vec<Vec<Trajectory>>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("samples per scene must be positive".into()));
    }
    let needs_vocab = cfg.cvf_enabled || cfg.cf_enabled;
    if needs_vocab && vocab.is_none_or(|v| v.is_empty()) {
        return Err(Error::Config(
            "velocity correction or truncation needs an anchor vocabulary".into(),
        ));
    }
    let conds: Vec<ConditionSet> = vec![conditions_for(model, None, cfg); n];
    let per_scene = map_ordered(scenes, |s| -> Result<Vec<Trajectory>> {
        let prepared = model.prepare(&s.scene)?;
        let anchor = match vocab {
            Some(v) if needs_vocab => Some(select_constraint_anchor(v, &s.scene)),
            _ => None,
        };
        let seeds: Vec<u64> = (0..n).map(|j| chain_seed(cfg.seed, s.index, j)).collect();
        let out = sample_chains(model, &prepared, &s.scene, &conds, anchor.as_ref(), cfg, &seeds)?;
        Ok(out.into_iter().map(|(t, _)| t).collect())
    });
    per_scene.into_iter().collect()
}

/// Samples and scores; a pure function of its arguments.
pub fn evaluate(
    model: &VelocityModel,
    vocab: Option<&AnchorVocab>,
    scenes: &[SceneSample],
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Metrics> {
    Ok(score(scenes, &generate(model, vocab, scenes, cfg, n)?))
}

pub fn evaluate_imitation(baseline: &ImitationBaseline, scenes: &[SceneSample]) -> Result<Metrics> {
    let plans: Vec<Result<Vec<Trajectory>>> =
        map_ordered(scenes, |s| Ok(vec![baseline.predict(&s.scene)?]));
    Ok(score(scenes, &plans.into_iter().collect::<Result<Vec<_>>>()?))
}

/// Heading random walk at a random constant speed.
pub fn random_walk(seed_value: u64) -> Trajectory {
    let mut rng = seed::rng(seed_value);
    let speed: f64 = rng.random_range(2.0..15.0);
    let mut heading = 0.0f64;
    let (mut x, mut y) = (0.0, 0.0);
    let mut w = Vec::with_capacity(HORIZON);
    for _ in 0..HORIZON {
        let turn: f64 = rng.sample(StandardNormal);
        heading += 0.25 * turn;
        x += speed * DT * heading.cos();
        y += speed * DT * heading.sin();
        w.push([x, y]);
    }
    Trajectory::new(w, DT)
}

pub fn evaluate_random_walk(scenes: &[SceneSample], n: usize, master: u64) -> Metrics {
    let base = seed::derive(master, streams::BASELINE);
    let plans: Vec<Vec<Trajectory>> = scenes
        .iter()
        .map(|s| (0..n).map(|j| random_walk(chain_seed(base, s.index, j))).collect())
        .collect();
    score(scenes, &plans)
}
