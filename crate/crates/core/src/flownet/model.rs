use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::conditions::{ConditionSet, ConditionType};
use crate::diffcore::layers::{attend, project_kv, KeyValues};
use crate::diffcore::{
    checkpoint, dense, dense_forward, register_attention, register_dense, Activation, Graph, NodeId, ParamStore,
    Tensor2, TimeEmbedding,
};
use crate::error::{Error, Result};
use crate::scenario::{scene_tokens, Scene, SceneTokens, Trajectory, DT, HORIZON, TOKEN_DIM};
use crate::seed;

/// Default model coordinates are ego-frame meters divided by this factor.
/// A power of two keeps that conversion exact in both directions.
pub const FLOW_SCALE: f64 = 8.0;

/// Smallest per-coordinate scale a fitted normalizer may use (meters).
pub const MIN_SCALE: f64 = 0.25;

/// Per-coordinate affine map between meters and model coordinates:
/// `flow = (meters − mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn uniform(width: usize, scale: f64) -> Self {
        Self {
            mean: vec![0.0; width],
            scale: vec![scale; width],
        }
    }

    /// Mean and standard deviation of each flattened coordinate, the
    /// deviation floored at [`MIN_SCALE`].
    pub fn fit(trajectories: &[Trajectory]) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Config("cannot fit a normalizer to no trajectories".into()))?;
        let w = 2 * first.len();
        let n = trajectories.len() as f64;
        let mut mean = vec![0.0; w];
        for t in trajectories {
            if 2 * t.len() != w {
                return Err(Error::Dimension("trajectories of mixed horizon".into()));
            }
            for (m, v) in mean.iter_mut().zip(t.flat()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; w];
        for t in trajectories {
            for ((s, v), m) in var.iter_mut().zip(t.flat()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        Ok(Self {
            mean,
            scale: var.iter().map(|v| v.sqrt().max(MIN_SCALE)).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn to_flow(&self, meters: &[f64]) -> Vec<f64> {
        meters
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn to_meters(&self, flow: &[f64]) -> Vec<f64> {
        flow.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: usize,
    pub dt: f64,
    pub embed_dim: usize,
    pub time_base: f64,
    pub condition: ConditionType,
    pub tau_star: f64,
    pub eps_max: f64,
    /// Step of the single self-refinement move inside the energy.
    pub refine_dt: f64,
    /// File name of the anchor vocabulary the model was trained with, if any.
    #[serde(default)]
    pub vocab: Option<String>,
    /// Coordinate map; `None` divides meters by [`FLOW_SCALE`].
    #[serde(default)]
    pub normalizer: Option<Normalizer>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: HORIZON,
            dt: DT,
            embed_dim: 64,
            time_base: 200.0,
            condition: ConditionType::Anchor,
            tau_star: 0.8,
            eps_max: 0.5,
            refine_dt: 0.01,
            vocab: None,
            normalizer: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.dt <= 0.0 {
            return Err(Error::Config("horizon and dt must be positive".into()));
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embed_dim must be even and at least 2, got {}",
                self.embed_dim
            )));
        }
        if !(0.0..1.0).contains(&self.tau_star) || self.eps_max <= 0.0 {
            return Err(Error::Config(
                "tau_star must lie in [0, 1) and eps_max be positive".into(),
            ));
        }
        if self.refine_dt <= 0.0 {
            return Err(Error::Config("refine_dt must be positive".into()));
        }
        if let Some(n) = &self.normalizer {
            if n.mean.len() != self.width() || n.scale.len() != self.width() {
                return Err(Error::Dimension(format!(
                    "normalizer of width {} for horizon {}",
                    n.mean.len(),
                    self.horizon
                )));
            }
            if n.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::Config("normalizer scales must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        2 * self.horizon
    }

    pub fn normalizer(&self) -> Normalizer {
        self.normalizer
            .clone()
            .unwrap_or_else(|| Normalizer::uniform(self.width(), FLOW_SCALE))
    }
}

/// Flow state in model coordinates: flattened `T×2` waypoints and time.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: Vec<f64>,
    pub t: f64,
}

/// Key/value projections of a scene's tokens, computed once per scene and
/// reused by every velocity evaluation on it.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    agent: (Tensor2, Tensor2),
    map: (Tensor2, Tensor2),
}

/// Scene tokens either as trainable graph inputs or as cached projections.
pub enum SceneInput<'s> {
    Tokens(&'s SceneTokens),
    Prepared(&'s PreparedScene),
}

#[derive(Debug, Clone)]
pub struct VelocityModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    norm: Normalizer,
}

impl VelocityModel {
    /// Fresh model: attention output projections and the last decoder layer
    /// start at zero, so the initial field is identically zero.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let w = config.width();
        let mut rng = seed::rng(init_seed);
        let mut p = ParamStore::new();
        register_dense(&mut p, "enc1", w, d, false, &mut rng)?;
        register_dense(&mut p, "enc2", d, d, false, &mut rng)?;
        register_dense(&mut p, "time", d, d, false, &mut rng)?;
        register_dense(&mut p, "agent_embed", TOKEN_DIM, d, false, &mut rng)?;
        register_dense(&mut p, "map_embed", TOKEN_DIM, d, false, &mut rng)?;
        p.insert_kaiming("agent_null", 1, d, &mut rng)?;
        register_attention(&mut p, "attn_agent", d, &mut rng)?;
        register_attention(&mut p, "attn_map", d, &mut rng)?;
        register_attention(&mut p, "attn_cond", d, &mut rng)?;
        match config.condition {
            ConditionType::Anchor => register_dense(&mut p, "cond_anchor", w, d, false, &mut rng)?,
            ConditionType::Goal => register_dense(&mut p, "cond_goal", 2, d, false, &mut rng)?,
            ConditionType::Command => {
                p.insert_kaiming("cond_command", 3, d, &mut rng)?;
            }
            ConditionType::None => {}
        }
        register_dense(&mut p, "cond_reward", 1, d, false, &mut rng)?;
        p.insert_kaiming("intent_null", 1, d, &mut rng)?;
        p.insert_kaiming("reward_null", 1, d, &mut rng)?;
        register_dense(&mut p, "dec1", d, d, false, &mut rng)?;
        register_dense(&mut p, "dec2", d, w, true, &mut rng)?;
        let norm = config.normalizer();
        Ok(Self {
            config,
            params: p,
            norm,
        })
    }

    fn time_embedding(&self) -> TimeEmbedding {
        TimeEmbedding {
            dim: self.config.embed_dim,
            base: self.config.time_base,
        }
    }

    /// Embedded agent and map tokens plus their key/value projections.
    fn scene_kv(&self, g: &mut Graph<'_>, scene: &SceneInput<'_>) -> Result<(KeyValues, KeyValues)> {
        match scene {
            SceneInput::Prepared(p) => {
                let agent = KeyValues {
                    keys: g.constant(p.agent.0.clone()),
                    values: g.constant(p.agent.1.clone()),
                };
                let map = KeyValues {
                    keys: g.constant(p.map.0.clone()),
                    values: g.constant(p.map.1.clone()),
                };
                Ok((agent, map))
            }
            SceneInput::Tokens(tok) => {
                let agents = if tok.agents_null {
                    g.param("agent_null")?
                } else {
                    let a = g.constant(tok.agents.clone());
                    dense(g, a, "agent_embed", Activation::Gelu)?
                };
                let m = g.constant(tok.map.clone());
                let map = dense(g, m, "map_embed", Activation::Gelu)?;
                Ok((project_kv(g, agents, "attn_agent")?, project_kv(g, map, "attn_map")?))
            }
        }
    }

    pub fn prepare(&self, scene: &Scene) -> Result<PreparedScene> {
        self.prepare_tokens(&scene_tokens(scene))
    }

    pub fn prepare_tokens(&self, tokens: &SceneTokens) -> Result<PreparedScene> {
        let mut g = Graph::new(&self.params);
        let (a, m) = self.scene_kv(&mut g, &SceneInput::Tokens(tokens))?;
        Ok(PreparedScene {
            agent: (g.value(a.keys).clone(), g.value(a.values).clone()),
            map: (g.value(m.keys).clone(), g.value(m.values).clone()),
        })
    }

    /// `MLP(x) + Linear(sinusoid(t))`, one row per state.
    pub fn encode_graph(&self, g: &mut Graph<'_>, x: NodeId, ts: &[f64]) -> Result<NodeId> {
        let d = self.config.embed_dim;
        let (rows, cols) = g.shape(x);
        if cols != self.config.width() || rows != ts.len() {
            return Err(Error::Dimension(format!(
                "flow state {rows}x{cols} with {} times for horizon {}",
                ts.len(),
                self.config.horizon
            )));
        }
        let emb = self.time_embedding();
        let mut tdata = Vec::with_capacity(rows * d);
        for &t in ts {
            tdata.extend(emb.embed(t));
        }
        let h1 = dense(g, x, "enc1", Activation::Gelu)?;
        let h = dense(g, h1, "enc2", Activation::Identity)?;
        let te = g.constant(Tensor2::from_vec(rows, d, tdata)?);
        let tp = dense(g, te, "time", Activation::Identity)?;
        g.add(h, tp)
    }

    /// Per-row intent and reward tokens, null embeddings where masked.
    fn condition_tokens(&self, g: &mut Graph<'_>, conds: &[ConditionSet]) -> Result<(NodeId, NodeId)> {
        let d = self.config.embed_dim;
        let rows = conds.len();
        let kind = self.config.condition;
        for c in conds {
            c.check(kind, self.config.horizon)?;
        }
        let ones = |g: &mut Graph<'_>, mask: Vec<f64>| {
            g.constant(Tensor2::from_vec(rows, 1, mask).expect("mask column"))
        };

        let intent_null = g.param("intent_null")?;
        let intent_on: Vec<f64> = conds.iter().map(|c| if c.intent_mask { 0.0 } else { 1.0 }).collect();
        let intent = if kind == ConditionType::None || intent_on.iter().all(|&m| m == 0.0) {
            let col = ones(g, vec![1.0; rows]);
            g.matmul(col, intent_null)?
        } else {
            let (input, prefix) = match kind {
                ConditionType::Anchor => {
                    let w = self.config.width();
                    let mut data = Vec::with_capacity(rows * w);
                    for c in conds {
                        match (&c.plan_anchor, c.intent_mask) {
                            (Some(a), false) => data.extend(self.norm.to_flow(&a.flat())),
                            _ => data.extend(std::iter::repeat_n(0.0, w)),
                        }
                    }
                    (Tensor2::from_vec(rows, w, data)?, Some("cond_anchor"))
                }
                ConditionType::Goal => {
                    let mut data = Vec::with_capacity(rows * 2);
                    for c in conds {
                        match (c.goal, c.intent_mask) {
                            (Some(p), false) => {
                                let w = self.config.width();
                                let (m, sc) = (&self.norm.mean, &self.norm.scale);
                                data.extend([
                                    (p.x - m[w - 2]) / sc[w - 2],
                                    (p.y - m[w - 1]) / sc[w - 1],
                                ])
                            }
                            _ => data.extend([0.0, 0.0]),
                        }
                    }
                    (Tensor2::from_vec(rows, 2, data)?, Some("cond_goal"))
                }
                ConditionType::Command => {
                    let mut data = Vec::with_capacity(rows * 3);
                    for c in conds {
                        match (c.command, c.intent_mask) {
                            (Some(cmd), false) => data.extend(cmd.one_hot()),
                            _ => data.extend([0.0; 3]),
                        }
                    }
                    (Tensor2::from_vec(rows, 3, data)?, None)
                }
                ConditionType::None => unreachable!(),
            };
            let x = g.constant(input);
            let emb = match prefix {
                Some(p) => dense(g, x, p, Activation::Identity)?,
                None => {
                    let table = g.param("cond_command")?;
                    g.matmul(x, table)?
                }
            };
            self.blend(g, emb, intent_null, intent_on)?
        };

        let reward_null = g.param("reward_null")?;
        let reward_on: Vec<f64> = conds.iter().map(|c| if c.reward_mask { 0.0 } else { 1.0 }).collect();
        let reward = if reward_on.iter().all(|&m| m == 0.0) {
            let col = ones(g, vec![1.0; rows]);
            g.matmul(col, reward_null)?
        } else {
            let r: Vec<f64> = conds
                .iter()
                .map(|c| if c.reward_mask { 0.0 } else { c.reward.unwrap_or(0.0) })
                .collect();
            let x = g.constant(Tensor2::from_vec(rows, 1, r)?);
            let emb = dense(g, x, "cond_reward", Activation::Identity)?;
            self.blend(g, emb, reward_null, reward_on)?
        };
        debug_assert_eq!(g.shape(intent), (rows, d));
        Ok((intent, reward))
    }

    /// `on ⊙ emb + (1 − on) ⊗ null` row by row.
    fn blend(&self, g: &mut Graph<'_>, emb: NodeId, null: NodeId, on: Vec<f64>) -> Result<NodeId> {
        let rows = on.len();
        let off: Vec<f64> = on.iter().map(|m| 1.0 - m).collect();
        let on = g.constant(Tensor2::from_vec(rows, 1, on)?);
        let off = g.constant(Tensor2::from_vec(rows, 1, off)?);
        let kept = g.mul_col(emb, on)?;
        let nulls = g.matmul(off, null)?;
        g.add(kept, nulls)
    }

    /// Residual single-head attention of each hidden row over its own two
    /// condition tokens (intent, reward).
    pub fn fuse_graph(&self, g: &mut Graph<'_>, h: NodeId, conds: &[ConditionSet]) -> Result<NodeId> {
        let d = self.config.embed_dim;
        let (intent, reward) = self.condition_tokens(g, conds)?;
        let wq = g.param("attn_cond.wq")?;
        let wk = g.param("attn_cond.wk")?;
        let wv = g.param("attn_cond.wv")?;
        let q = g.matmul(h, wq)?;
        let k1 = g.matmul(intent, wk)?;
        let k2 = g.matmul(reward, wk)?;
        let v1 = g.matmul(intent, wv)?;
        let v2 = g.matmul(reward, wv)?;
        let s1 = g.row_dot(q, k1)?;
        let s2 = g.row_dot(q, k2)?;
        let s = g.concat_cols(&[s1, s2])?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let w = g.softmax_rows(s);
        let w1 = g.slice_cols(w, 0, 1)?;
        let w2 = g.slice_cols(w, 1, 1)?;
        let m1 = g.mul_col(v1, w1)?;
        let m2 = g.mul_col(v2, w2)?;
        let mixed = g.add(m1, m2)?;
        let wo = g.param("attn_cond.wo")?;
        let bo = g.param("attn_cond.bo")?;
        let proj = dense_forward(g, mixed, wo, bo, Activation::Identity)?;
        g.add(h, proj)
    }

    /// Scene-attended hidden state shared by conditional and unconditional
    /// branches.
    pub fn trunk_graph(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        ts: &[f64],
        scene: &SceneInput<'_>,
    ) -> Result<NodeId> {
        let h = self.encode_graph(g, x, ts)?;
        let (agent, map) = self.scene_kv(g, scene)?;
        let h = attend(g, h, agent, "attn_agent")?.output;
        Ok(attend(g, h, map, "attn_map")?.output)
    }

    pub fn decode_graph(&self, g: &mut Graph<'_>, h: NodeId) -> Result<NodeId> {
        let h = dense(g, h, "dec1", Activation::Gelu)?;
        dense(g, h, "dec2", Activation::Identity)
    }

    /// Velocity rows for flow states `x` (rows × 2T, model coordinates).
    pub fn velocity_graph(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        ts: &[f64],
        scene: &SceneInput<'_>,
        conds: &[ConditionSet],
    ) -> Result<NodeId> {
        let h = self.trunk_graph(g, x, ts, scene)?;
        let h = self.fuse_graph(g, h, conds)?;
        self.decode_graph(g, h)
    }

    /// `(1 − γ)·v(masked) + γ·v(conditional)` with the trunk evaluated once.
/// Rows whose conditions are all masked get `v(masked)` unchanged.
    pub fn cfg_velocity_graph(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        ts: &[f64],
        scene: &SceneInput<'_>,
        conds: &[ConditionSet],
        gamma: f64,
    ) -> Result<NodeId> {
        let h = self.trunk_graph(g, x, ts, scene)?;
        let uncond: Vec<ConditionSet> = conds.iter().map(|c| c.masked()).collect();
        let hu = self.fuse_graph(g, h, &uncond)?;
        let vu = self.decode_graph(g, hu)?;
        if conds.iter().all(|c| c.intent_mask && c.reward_mask) {
            return Ok(vu);
        }
        let hc = self.fuse_graph(g, h, conds)?;
        let vc = self.decode_graph(g, hc)?;
        // per-row weight so fully masked rows keep vu exactly
        let weights: Vec<f64> = conds
            .iter()
            .map(|c| if c.intent_mask && c.reward_mask { 0.0 } else { gamma })
            .collect();
        let keep: Vec<f64> = weights.iter().map(|w| 1.0 - w).collect();
        let wc = g.constant(Tensor2::from_vec(conds.len(), 1, weights)?);
        let wu = g.constant(Tensor2::from_vec(conds.len(), 1, keep)?);
        let a = g.mul_col(vu, wu)?;
        let b = g.mul_col(vc, wc)?;
        g.add(a, b)
    }

    pub fn velocity_batch(
        &self,
        scene: &PreparedScene,
        x: &Tensor2,
        ts: &[f64],
        conds: &[ConditionSet],
    ) -> Result<Tensor2> {
        let mut g = Graph::new(&self.params);
        let xn = g.constant(x.clone());
        let v = self.velocity_graph(&mut g, xn, ts, &SceneInput::Prepared(scene), conds)?;
        Ok(g.value(v).clone())
    }

    pub fn cfg_velocity_batch(
        &self,
        scene: &PreparedScene,
        x: &Tensor2,
        ts: &[f64],
        conds: &[ConditionSet],
        gamma: f64,
    ) -> Result<Tensor2> {
        let mut g = Graph::new(&self.params);
        let xn = g.constant(x.clone());
        let v = self.cfg_velocity_graph(&mut g, xn, ts, &SceneInput::Prepared(scene), conds, gamma)?;
        Ok(g.value(v).clone())
    }

    pub fn encode_state(&self, state: &FlowState) -> Result<Tensor2> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(Tensor2::row(state.x.clone()));
        let h = self.encode_graph(&mut g, x, &[state.t])?;
        Ok(g.value(h).clone())
    }

    pub fn condition_fuse(&self, hidden: &Tensor2, conds: &ConditionSet) -> Result<Tensor2> {
        let mut g = Graph::new(&self.params);
        let h = g.constant(hidden.clone());
        let out = self.fuse_graph(&mut g, h, std::slice::from_ref(conds))?;
        Ok(g.value(out).clone())
    }

    pub fn velocity(
        &self,
        state: &FlowState,
        scene: &PreparedScene,
        conds: &ConditionSet,
    ) -> Result<Vec<f64>> {
        let v = self.velocity_batch(
            scene,
            &Tensor2::row(state.x.clone()),
            &[state.t],
            std::slice::from_ref(conds),
        )?;
        Ok(v.data().to_vec())
    }

    pub fn cfg_velocity(
        &self,
        state: &FlowState,
        scene: &PreparedScene,
        conds: &ConditionSet,
        gamma: f64,
    ) -> Result<Vec<f64>> {
        let v = self.cfg_velocity_batch(
            scene,
            &Tensor2::row(state.x.clone()),
            &[state.t],
            std::slice::from_ref(conds),
            gamma,
        )?;
        Ok(v.data().to_vec())
    }

    /// Writes `model.bin` style weights to `path` and the hyperparameters to
    /// `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.params.to_blocks())?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: side.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let blocks = checkpoint::read_file(path)?;
        let mut model = Self::new(config, 0)?;
        model.params.load_blocks(&blocks)?;
        Ok(model)
    }

    pub fn blocks(&self) -> BTreeMap<String, Tensor2> {
        self.params.to_blocks()
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl VelocityModel {
    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    /// Meters → model coordinates.
    pub fn to_flow(&self, meters: &[f64]) -> Vec<f64> {
        self.norm.to_flow(meters)
    }

    /// Model coordinates → meters.
    pub fn to_meters(&self, flow: &[f64]) -> Vec<f64> {
        self.norm.to_meters(flow)
    }
}
