//! Euler integration of the learned flow with velocity correction, state
//! truncation and energy-guided refinement.

pub mod guidance;
pub mod path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use guidance::{cvf_correct, cvf_correct_signed, cvf_reference, epsilon_schedule, CvfSign};
pub use path::{read_path_records, FlowPath, PathRecord, Truncation};

use crate::diffcore::Tensor2;
use crate::error::{Error, Result};
use crate::flownet::{energy, ConditionSet, PreparedScene, SceneInput, VelocityModel};
use crate::scenario::{Scene, Trajectory};
use crate::seed;
use crate::vocab::{select_constraint_anchor, AnchorVocab, ConstraintAnchor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Transport steps.
    pub k: usize,
    /// Step at which CF swaps in the constraint anchor.
    pub k_c: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub refine_steps: usize,
    pub eta_scale: f64,
    pub cvf_enabled: bool,
    pub cf_enabled: bool,
    pub rfe_enabled: bool,
    pub cvf_sign: CvfSign,
    /// Adds `sqrt(2·η·ε)·ξ` noise to every energy step (unadjusted Langevin).
    pub langevin: bool,
    /// Reward condition used when sampling; `None` masks the reward group.
    pub reward: Option<f64>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 100,
            k_c: 50,
            lambda: 0.1,
            gamma: 1.5,
            refine_steps: 20,
            eta_scale: 1.0,
            cvf_enabled: false,
            cf_enabled: false,
            rfe_enabled: false,
            cvf_sign: CvfSign::Paper,
            langevin: false,
            reward: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k_c == 0 || self.k_c >= self.k {
            return Err(Error::Config(format!(
                "need 0 < k_c < K, got k_c = {}, K = {}",
                self.k_c, self.k
            )));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1)", self.lambda)));
        }
        if self.gamma < 0.0 || self.eta_scale < 0.0 {
            return Err(Error::Config("gamma and eta_scale must be non-negative".into()));
        }
        if let Some(r) = self.reward {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("reward {r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.k as f64
    }

    /// Refinement steps actually taken.
    pub fn active_refine_steps(&self) -> usize {
        if self.rfe_enabled {
            self.refine_steps
        } else {
            0
        }
    }

    /// Energy step size `η(t) = η_scale · ε(t) · Δt`.
    pub fn eta(&self, t: f64, tau_star: f64, eps_max: f64) -> f64 {
        self.eta_scale * epsilon_schedule(t, tau_star, eps_max) * self.dt()
    }
}

/// Batched energy and its gradient; one state per row.
pub trait EnergyFn {
    fn energy_and_grad(&self, x: &Tensor2) -> Result<(Vec<f64>, Tensor2)>;
}

/// The learned energy on one scene, in model coordinates.
pub struct ModelEnergy<'a> {
    pub model: &'a VelocityModel,
    pub prepared: &'a PreparedScene,
    pub scene: &'a Scene,
    pub conds: Vec<ConditionSet>,
}

impl EnergyFn for ModelEnergy<'_> {
    fn energy_and_grad(&self, x: &Tensor2) -> Result<(Vec<f64>, Tensor2)> {
        let conds = if self.conds.len() == x.rows() {
            self.conds.clone()
        } else {
            vec![self.conds[0].clone(); x.rows()]
        };
        energy(
            self.model,
            &SceneInput::Prepared(self.prepared),
            self.scene,
            x,
            &conds,
        )
    }
}

const MAX_HALVINGS: usize = 30;

/// One energy step `x ← base − η∇E(x)` per row. Without noise each row's
/// step is halved until `E` at the result does not exceed `E(base)`; if that
/// never happens the row stays at `base`.
fn energy_step<E: EnergyFn, R: Rng>(
    e: &E,
    x: &Tensor2,
    base: &Tensor2,
    etas: &[f64],
    eps: f64,
    langevin: bool,
    rngs: &mut [R],
) -> Result<Tensor2> {
    let (rows, cols) = x.shape();
    let (_, grad) = e.energy_and_grad(x)?;
    if langevin {
        let mut out = base.clone();
        for r in 0..rows {
            let noise = (2.0 * etas[r] * eps).sqrt();
            for c in 0..cols {
                let xi: f64 = rngs[r].sample(StandardNormal);
                let i = r * cols + c;
                out.data_mut()[i] += -etas[r] * grad.data()[i] + noise * xi;
            }
        }
        return Ok(out);
    }
    let (e_base, _) = e.energy_and_grad(base)?;
    let mut out = base.clone();
    let mut pending: Vec<usize> = (0..rows)
        .filter(|&r| etas[r] > 0.0 && grad.row_slice(r).iter().any(|&g| g != 0.0))
        .collect();
    let mut scale = 1.0;
    for _ in 0..=MAX_HALVINGS {
        if pending.is_empty() {
            break;
        }
        let mut trial = Tensor2::zeros(pending.len(), cols);
        for (j, &r) in pending.iter().enumerate() {
            for c in 0..cols {
                let i = r * cols + c;
                trial.set(j, c, base.data()[i] - scale * etas[r] * grad.data()[i]);
            }
        }
        let (e_trial, _) = e.energy_and_grad(&trial)?;
        let mut still = Vec::new();
        for (j, &r) in pending.iter().enumerate() {
            if e_trial[j] <= e_base[r] {
                out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(trial.row_slice(j));
            } else {
                still.push(r);
            }
        }
        pending = still;
        scale *= 0.5;
    }
    Ok(out)
}

fn check_finite(x: &Tensor2, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            max_magnitude: x.data().iter().fold(0.0f64, |m, v| {
                if v.is_finite() {
                    m.max(v.abs())
                } else {
                    f64::INFINITY
                }
            }),
        })
    }
}

fn standard_normal_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Energy-only refinement from `x` (rows are independent chains) for `steps`
/// steps at `t = 1 + j·Δt`. `seeds` drive the Langevin noise when enabled.
pub fn refine_with<E: EnergyFn>(
    e: &E,
    x: &Tensor2,
    steps: usize,
    cfg: &SamplerConfig,
    tau_star: f64,
    eps_max: f64,
    seeds: &[u64],
) -> Result<Tensor2> {
    if steps == 0 {
        return Err(Error::Config("refinement needs at least one step".into()));
    }
    let mut rngs: Vec<_> = seeds.iter().map(|&s| seed::rng(s)).collect();
    if rngs.len() != x.rows() {
        return Err(Error::Dimension(format!(
            "{} seeds for {} chains",
            rngs.len(),
            x.rows()
        )));
    }
    let mut x = x.clone();
    for j in 0..steps {
        let t = 1.0 + j as f64 * cfg.dt();
        let eta = cfg.eta(t, tau_star, eps_max);
        let eps = epsilon_schedule(t, tau_star, eps_max);
        let etas = vec![eta; x.rows()];
        x = energy_step(e, &x, &x, &etas, eps, cfg.langevin, &mut rngs)?;
        check_finite(&x, cfg.k + j + 1)?;
    }
    Ok(x)
}

/// Energy-only refinement of a trajectory under the model's energy.
pub fn refine_only(
    model: &VelocityModel,
    prepared: &PreparedScene,
    scene: &Scene,
    x: &Trajectory,
    conds: &ConditionSet,
    steps: usize,
    cfg: &SamplerConfig,
) -> Result<Trajectory> {
    let e = ModelEnergy {
        model,
        prepared,
        scene,
        conds: vec![conds.clone()],
    };
    let start = Tensor2::row(model.to_flow(&x.flat()));
    let out = refine_with(
        &e,
        &start,
        steps,
        cfg,
        model.config.tau_star,
        model.config.eps_max,
        &[cfg.seed],
    )?;
    Trajectory::from_flat(&model.to_meters(out.data()), model.config.dt)
}

/// Samples one chain per row of `conds`, chain `i` seeded by `seeds[i]`.
/// Rows never interact, so every chain's result is independent of how
/// chains are batched.
pub fn sample_chains(
    model: &VelocityModel,
    prepared: &PreparedScene,
    scene: &Scene,
    conds: &[ConditionSet],
    anchor: Option<&ConstraintAnchor>,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<(Trajectory, FlowPath)>> {
    cfg.validate()?;
    let rows = conds.len();
    if seeds.len() != rows {
        return Err(Error::Dimension(format!("{} seeds for {rows} chains", seeds.len())));
    }
    let w = model.config.width();
    let mcfg = &model.config;
    let wants_anchor = cfg.cvf_enabled || cfg.cf_enabled;
    let anchor_flow = match (wants_anchor, anchor) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Config(
                "velocity correction or truncation enabled without a constraint anchor".into(),
            ))
        }
        (true, Some(a)) if a.infeasible => None,
        (true, Some(a)) => {
            if a.trajectory.len() != mcfg.horizon {
                return Err(Error::Dimension(format!(
                    "anchor of {} waypoints for horizon {}",
                    a.trajectory.len(),
                    mcfg.horizon
                )));
            }
            Some((a.trajectory.flat(), model.to_flow(&a.trajectory.flat())))
        }
    };
    let disabled = wants_anchor && anchor_flow.is_none();

    let mut rngs: Vec<_> = seeds.iter().map(|&s| seed::rng(s)).collect();
    let mut x0 = Vec::with_capacity(rows * w);
    for rng in rngs.iter_mut() {
        x0.extend(standard_normal_row(rng, w));
    }
    let mut x = Tensor2::from_vec(rows, w, x0)?;
    let v_ref: Option<Tensor2> = match (&anchor_flow, cfg.cvf_enabled) {
        (Some((_, af)), true) => {
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend(cvf_reference(x.row_slice(r), af));
            }
            Some(Tensor2::from_vec(rows, w, data)?)
        }
        _ => None,
    };

    let mut paths: Vec<FlowPath> = (0..rows)
        .map(|_| FlowPath {
            constraints_disabled: disabled,
            ..FlowPath::default()
        })
        .collect();
    let record = |paths: &mut Vec<FlowPath>, x: &Tensor2, t: f64| {
        for (r, p) in paths.iter_mut().enumerate() {
            p.states.push(model.to_meters(x.row_slice(r)));
            p.times.push(t);
        }
    };
    record(&mut paths, &x, 0.0);

    let energy_fn = ModelEnergy {
        model,
        prepared,
        scene,
        conds: conds.to_vec(),
    };
    let dt = cfg.dt();
    let total = cfg.k + cfg.active_refine_steps();
    for k in 0..total {
        let t = k as f64 * dt;
        if cfg.cf_enabled && k == cfg.k_c {
            if let Some((meters, af)) = &anchor_flow {
                for (r, p) in paths.iter_mut().enumerate().take(rows) {
                    x.data_mut()[r * w..(r + 1) * w].copy_from_slice(af);
                    *p.states.last_mut().expect("state recorded") = meters.clone();
                    p.truncation = Some(Truncation {
                        index: k,
                        anchor: meters.clone(),
                    });
                }
            }
        }
        let ts = vec![t; rows];
        let mut v = model.cfg_velocity_batch(prepared, &x, &ts, conds, cfg.gamma)?;
        if let Some(vr) = &v_ref {
            if k < cfg.k {
                for (r, p) in paths.iter_mut().enumerate().take(rows) {
                    match cvf_correct_signed(v.row_slice(r), vr.row_slice(r), cfg.lambda, cfg.cvf_sign) {
                        Some(c) => v.data_mut()[r * w..(r + 1) * w].copy_from_slice(&c),
                        None => p.cvf_skipped.push(k),
                    }
                }
            }
        }
        let mut base = x.clone();
        base.add_scaled(&v, dt);
        let eps = epsilon_schedule(t, mcfg.tau_star, mcfg.eps_max);
        x = if cfg.rfe_enabled && eps > 0.0 {
            let etas = vec![cfg.eta(t, mcfg.tau_star, mcfg.eps_max); rows];
            energy_step(&energy_fn, &x, &base, &etas, eps, cfg.langevin, &mut rngs)?
        } else {
            base
        };
        check_finite(&x, k + 1)?;
        record(&mut paths, &x, (k + 1) as f64 * dt);
    }

    paths
        .into_iter()
        .map(|p| {
            let last = p.states.last().expect("at least one state").clone();
            Ok((Trajectory::from_flat(&last, mcfg.dt)?, p))
        })
        .collect()
}

/// Single chain seeded by `cfg.seed`.
pub fn sample(
    model: &VelocityModel,
    prepared: &PreparedScene,
    scene: &Scene,
    conds: &ConditionSet,
    anchor: Option<&ConstraintAnchor>,
    cfg: &SamplerConfig,
) -> Result<(Trajectory, FlowPath)> {
    let mut out = sample_chains(
        model,
        prepared,
        scene,
        std::slice::from_ref(conds),
        anchor,
        cfg,
        &[cfg.seed],
    )?;
    Ok(out.remove(0))
}

/// Conditions the sampler uses for a given intent (anchor) under `cfg`.
pub fn conditions_for(model: &VelocityModel, anchor: Option<&Trajectory>, cfg: &SamplerConfig) -> ConditionSet {
    let c = match anchor {
        Some(a) => ConditionSet::from_anchor(model.config.condition, a),
        None => ConditionSet::unconditional(),
    };
    match cfg.reward {
        Some(r) => c.with_reward(r),
        None => c,
    }
}

/// One chain per vocabulary anchor, each conditioned on its anchor and
/// seeded with `derive(cfg.seed, index)`.
pub fn sample_multimodal(
    model: &VelocityModel,
    prepared: &PreparedScene,
    scene: &Scene,
    vocab: &AnchorVocab,
    cfg: &SamplerConfig,
) -> Result<Vec<(Trajectory, usize)>> {
    if vocab.is_empty() {
        return Err(Error::Config("empty anchor vocabulary".into()));
    }
    let conds: Vec<ConditionSet> = vocab
        .anchors
        .iter()
        .map(|a| conditions_for(model, Some(a), cfg))
        .collect();
    let seeds: Vec<u64> = (0..vocab.len() as u64).map(|i| seed::derive(cfg.seed, i)).collect();
    let constraint = (cfg.cvf_enabled || cfg.cf_enabled).then(|| select_constraint_anchor(vocab, scene));
    let out = sample_chains(model, prepared, scene, &conds, constraint.as_ref(), cfg, &seeds)?;
    Ok(out.into_iter().enumerate().map(|(i, (t, _))| (t, i)).collect())
}
