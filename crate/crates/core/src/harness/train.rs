use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, Tensor2};
use crate::error::{Error, Result};
use crate::flownet::{
    rf_loss, rfe_loss, ConditionSet, ConditionType, FlowBatch, ModelConfig, Normalizer,
    VelocityModel,
};
use crate::sampler::{sample_chains, SamplerConfig};
use crate::scenario::{ep_reward, scene_tokens, Dataset, SceneSample, SceneTokens, Trajectory};
use crate::seed::{self, streams};
use crate::vocab::{nearest_anchor, AnchorVocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Rows per optimiser step.
    pub batch: usize,
    /// Rows drawn from each scene inside a batch.
    pub rows_per_scene: usize,
    pub lr: f64,
    pub mask_rate: f64,
    pub rfe: bool,
    pub rfe_weight: f64,
    /// Fraction of epochs trained on the flow loss alone before the energy
    /// term switches on.
    pub rfe_warmup: f64,
    /// Euler steps used to generate the endpoints the energy term compares.
    pub rfe_sample_steps: usize,
    /// Fit a per-coordinate normalizer to the training trajectories when the
    /// model config does not carry one.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 32,
            rows_per_scene: 4,
            lr: 2e-4,
            mask_rate: 0.2,
            rfe: false,
            rfe_weight: 0.1,
            rfe_warmup: 0.5,
            rfe_sample_steps: 10,
            normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.rows_per_scene == 0 {
            return Err(Error::Config("epochs, batch and rows_per_scene must be positive".into()));
        }
        if !self.batch.is_multiple_of(self.rows_per_scene) {
            return Err(Error::Config(format!(
                "batch {} is not a multiple of rows_per_scene {}",
                self.batch, self.rows_per_scene
            )));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config("need lr > 0 and mask_rate in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.rfe_warmup) || self.rfe_weight < 0.0 {
            return Err(Error::Config("need rfe_warmup in [0, 1] and rfe_weight ≥ 0".into()));
        }
        if self.rfe && self.rfe_sample_steps < 2 {
            return Err(Error::Config("rfe_sample_steps must be at least 2".into()));
        }
        Ok(())
    }

    fn scenes_per_batch(&self) -> usize {
        self.batch / self.rows_per_scene
    }

    fn rfe_from_epoch(&self) -> usize {
        (self.rfe_warmup * self.epochs as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub rf_loss: f64,
    pub rfe_loss: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,steps,rf_loss,rfe_loss\n");
    for e in log {
        out.push_str(&format!("{},{},{:.9e},{:.9e}\n", e.epoch, e.steps, e.rf_loss, e.rfe_loss));
    }
    out
}

/// Per-scene training material.
struct Item {
    sample: SceneSample,
    tokens: SceneTokens,
    /// Progress reward of each expert.
    rewards: Vec<f64>,
    /// Intent conditions of each expert before masking.
    intents: Vec<ConditionSet>,
}

fn intent_for(kind: ConditionType, vocab: Option<&AnchorVocab>, gt: &Trajectory) -> Result<ConditionSet> {
    Ok(match (kind, vocab) {
        (ConditionType::None, _) => ConditionSet::unconditional(),
        (_, Some(v)) => ConditionSet::from_anchor(kind, nearest_anchor(v, gt).1),
        (ConditionType::Command, None) => ConditionSet::from_anchor(kind, gt),
        (_, None) => {
            return Err(Error::Config(format!(
                "{kind:?} conditioning needs an anchor vocabulary"
            )))
        }
    })
}

fn items(data: &Dataset, kind: ConditionType, vocab: Option<&AnchorVocab>) -> Result<Vec<Item>> {
    if data.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    data.scenes()
        .into_iter()
        .map(|s| {
            let rewards = s.experts.iter().map(|(t, _)| ep_reward(t, &s.scene).value()).collect();
            let intents = s
                .experts
                .iter()
                .map(|(t, _)| intent_for(kind, vocab, t))
                .collect::<Result<_>>()?;
            Ok(Item {
                tokens: scene_tokens(&s.scene),
                sample: s,
                rewards,
                intents,
            })
        })
        .collect()
}

fn normal_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Flow-matching rows for one scene: random expert, noise, time and masks.
fn scene_batch<R: Rng>(
    item: &Item,
    norm: &Normalizer,
    rows: usize,
    mask_rate: f64,
    rng: &mut R,
) -> Result<FlowBatch> {
    let width = norm.width();
    let mut x0 = Vec::with_capacity(rows * width);
    let mut x1 = Vec::with_capacity(rows * width);
    let mut ts = Vec::with_capacity(rows);
    let mut conds = Vec::with_capacity(rows);
    for _ in 0..rows {
        let e = rng.random_range(0..item.sample.experts.len());
        x1.extend(norm.to_flow(&item.sample.experts[e].0.flat()));
        x0.extend(normal_row(rng, width));
        ts.push(rng.random_range(0.0..1.0));
        conds.push(
            item.intents[e]
                .clone()
                .with_reward(item.rewards[e])
                .drop_groups(mask_rate, rng),
        );
    }
    Ok(FlowBatch {
        x0: Tensor2::from_vec(rows, width, x0)?,
        x1: Tensor2::from_vec(rows, width, x1)?,
        ts,
        conds,
    })
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: VelocityModel,
    pub log: Vec<EpochLog>,
}

/// Trains a velocity model from scratch. Everything random derives from
/// `master_seed`, so identical inputs give identical weights.
pub fn train(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    vocab: Option<&AnchorVocab>,
    master_seed: u64,
) -> Result<Trained> {
    cfg.validate()?;
    let model = VelocityModel::new(fitted(model_config, cfg, data)?, seed::derive(master_seed, streams::INIT))?;
    train_from(model, cfg, data, vocab, master_seed)
}

fn fitted(model_config: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<ModelConfig> {
    let mut mc = model_config.clone();
    if cfg.normalize && mc.normalizer.is_none() {
        let trajs: Vec<Trajectory> = data.records.iter().map(|r| r.trajectory.clone()).collect();
        mc.normalizer = Some(Normalizer::fit(&trajs)?);
    }
    Ok(mc)
}

/// Continues training `model` in place of a fresh initialisation.
pub fn train_from(
    mut model: VelocityModel,
    cfg: &TrainConfig,
    data: &Dataset,
    vocab: Option<&AnchorVocab>,
    master_seed: u64,
) -> Result<Trained> {
    cfg.validate()?;
    let items = items(data, model.config.condition, vocab)?;
    let width = model.config.width();
    let norm = model.normalizer().clone();
    let opt = Adam {
        lr: cfg.lr,
        ..Adam::default()
    };
    let mut rng = seed::rng(seed::derive(master_seed, streams::TRAIN_LOOP));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let per = cfg.scenes_per_batch();
    let gen_cfg = SamplerConfig {
        k: cfg.rfe_sample_steps,
        k_c: 1,
        gamma: 1.0,
        ..SamplerConfig::default()
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let with_rfe = cfg.rfe && epoch >= cfg.rfe_from_epoch();
        let (mut rf_sum, mut rfe_sum, mut n) = (0.0, 0.0, 0usize);
        for group in order.chunks(per) {
            let scale = 1.0 / group.len() as f64;
            for &i in group {
                let item = &items[i];
                let batch = scene_batch(item, &norm, cfg.rows_per_scene, cfg.mask_rate, &mut rng)?;
                let (l, grads) = rf_loss(&model, &item.tokens, &batch)?;
                rf_sum += l;
                n += 1;
                if with_rfe {
                    let prepared = model.prepare_tokens(&item.tokens)?;
                    let seeds: Vec<u64> = (0..batch.conds.len()).map(|_| rng.random()).collect();
                    let chains = sample_chains(
                        &model,
                        &prepared,
                        &item.sample.scene,
                        &batch.conds,
                        None,
                        &gen_cfg,
                        &seeds,
                    )?;
                    let mut gen = Vec::with_capacity(batch.x1.len());
                    for (t, _) in &chains {
                        gen.extend(model.to_flow(&t.flat()));
                    }
                    let gen = Tensor2::from_vec(batch.x1.rows(), width, gen)?;
                    let (le, ge) = rfe_loss(&model, &item.tokens, &item.sample.scene, &gen, &batch.x1, &batch.conds)?;
                    rfe_sum += le;
                    model.params.accumulate(&ge, cfg.rfe_weight * scale);
                }
                model.params.accumulate(&grads, scale);
            }
            model.params.adam_step(&opt)?;
        }
        log.push(EpochLog {
            epoch,
            steps: model.params.step(),
            rf_loss: rf_sum / n as f64,
            rfe_loss: rfe_sum / n as f64,
        });
    }
    Ok(Trained { model, log })
}

/// Direct regression baseline sharing the flow model's trunk: the state and
/// time inputs are pinned to zero and the decoder output is read as the plan.
#[derive(Debug, Clone)]
pub struct ImitationBaseline {
    pub model: VelocityModel,
}

impl ImitationBaseline {
    pub fn predict(&self, scene: &crate::scenario::Scene) -> Result<Trajectory> {
        let prepared = self.model.prepare(scene)?;
        let w = self.model.config.width();
        let v = self.model.velocity_batch(
            &prepared,
            &Tensor2::zeros(1, w),
            &[0.0],
            &[ConditionSet::unconditional()],
        )?;
        Trajectory::from_flat(&self.model.to_meters(v.data()), self.model.config.dt)
    }
}

/// Mean squared error against every expert record, so on multi-modal scenes
/// the regression settles between the modes.
pub fn train_imitation(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    master_seed: u64,
) -> Result<(ImitationBaseline, Vec<EpochLog>)> {
    cfg.validate()?;
    let mcfg = ModelConfig {
        condition: ConditionType::None,
        ..fitted(model_config, cfg, data)?
    };
    let base = seed::derive(master_seed, streams::BASELINE);
    let mut model = VelocityModel::new(mcfg, seed::derive(base, streams::INIT))?;
    let items = items(data, ConditionType::None, None)?;
    let width = model.config.width();
    let opt = Adam {
        lr: cfg.lr,
        ..Adam::default()
    };
    let mut rng = seed::rng(seed::derive(base, streams::TRAIN_LOOP));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for group in order.chunks(cfg.scenes_per_batch()) {
            for &i in group {
                let item = &items[i];
                let experts = &item.sample.experts;
                let mut x1 = Vec::with_capacity(experts.len() * width);
                for (t, _) in experts {
                    x1.extend(model.to_flow(&t.flat()));
                }
                let rows = experts.len();
                let batch = FlowBatch {
                    x0: Tensor2::zeros(rows, width),
                    x1: Tensor2::from_vec(rows, width, x1)?,
                    ts: vec![0.0; rows],
                    conds: vec![ConditionSet::unconditional(); rows],
                };
                let (l, grads) = rf_loss(&model, &item.tokens, &batch)?;
                sum += l;
                n += 1;
                model.params.accumulate(&grads, 1.0 / group.len() as f64);
            }
            model.params.adam_step(&opt)?;
        }
        log.push(EpochLog {
            epoch,
            steps: model.params.step(),
            rf_loss: sum / n as f64,
            rfe_loss: 0.0,
        });
    }
    Ok((ImitationBaseline { model }, log))
}
