//! Command-line entry point.
//!
//! Every command reads one TOML file (`--config`), writes its outputs under
//! `--out`, and finishes with `manifest.json`. Outputs are computed in memory
//! first, so a failing command leaves no partial files behind.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::flownet::{ConditionType, ModelConfig, VelocityModel};
use crate::harness::{
    ablation_suite, evaluate, evaluate_imitation, evaluate_random_walk, log_csv,
    rows_csv, train, train_imitation, AblationConfig, Checkpoints, ExperimentSpec,
    ImitationBaseline, Metrics, Modules,
};
use crate::sampler::{
    conditions_for, read_path_records, sample_chains, sample_multimodal, PathRecord,
    SamplerConfig,
};
use crate::scenario::{
    dataset_build, expert_trajectories, generate_scene, Dataset, DatasetConfig,
    ScenarioKind, Trajectory,
};
use crate::seed::{self, streams};
use crate::vocab::{fps_build, select_constraint_anchor, AnchorVocab};

#[derive(Debug, Parser)]
#[command(name = "cfmplan", version, about = "Constrained flow-matching planner on synthetic driving scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Only print errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the master seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct WithModules {
    #[command(flatten)]
    pub common: Common,
    /// Sampling modules, e.g. `cvf,cf,rfe,ras` or `none`.
    #[arg(long)]
    pub modules: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training (and optional evaluation) dataset.
    GenData(Common),
    /// Build the anchor vocabulary from a dataset.
    BuildVocab(Common),
    /// Train the flow model (and optionally the regression baseline).
    Train(Common),
    /// Sample trajectories and their flow paths for one scene.
    Sample(Common),
    /// Evaluate a checkpoint on a dataset.
    Eval(WithModules),
    /// Run the module grid and hyperparameter sweeps.
    Ablate(WithModules),
    /// Flatten a recorded flow path to CSV or JSON lines.
    ExportPath {
        /// Path file written by `sample`.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ExportFormat,
    },
}

/// `[model]` keys; horizon and step follow the scenario constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub time_base: f64,
    pub condition: ConditionType,
    pub tau_star: f64,
    pub eps_max: f64,
    pub refine_dt: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            embed_dim: m.embed_dim,
            time_base: m.time_base,
            condition: m.condition,
            tau_star: m.tau_star,
            eps_max: m.eps_max,
            refine_dt: m.refine_dt,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            time_base: self.time_base,
            condition: self.condition,
            tau_star: self.tau_star,
            eps_max: self.eps_max,
            refine_dt: self.refine_dt,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training scenes per kind.
    pub counts: BTreeMap<ScenarioKind, usize>,
    /// Evaluation scenes per kind; written to `eval.jsonl` when non-empty.
    pub eval_counts: BTreeMap<ScenarioKind, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub dataset: Option<PathBuf>,
    pub size: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self {
            dataset: None,
            size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub dataset: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Also fit the regression baseline.
    pub imitation: bool,
    #[serde(flatten)]
    pub train: crate::harness::TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub kind: ScenarioKind,
    /// Scene generator seed.
    pub scene_seed: u64,
    pub count: usize,
    /// One chain per vocabulary anchor instead of `count` masked-intent chains.
    pub multimodal: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            vocab: None,
            kind: ScenarioKind::ObstacleAvoid,
            scene_seed: 0,
            count: 1,
            multimodal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Regression baseline checkpoint to score alongside.
    pub imitation: Option<PathBuf>,
    pub random_walk: bool,
    pub samples_per_scene: usize,
    pub ras_reward: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            vocab: None,
            dataset: None,
            imitation: None,
            random_walk: false,
            samples_per_scene: 4,
            ras_reward: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub rf_checkpoint: Option<PathBuf>,
    pub rfe_checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    #[serde(flatten)]
    pub suite: AblationConfig,
}

/// The whole configuration file. Sampler chain seeds always come from the
/// master `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataSection,
    pub vocab: VocabSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sampler: SamplerConfig,
    pub modules: Modules,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            data: DataSection::default(),
            vocab: VocabSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sampler: SamplerConfig::default(),
            modules: Modules::NONE,
            sample: SampleSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Makes relative input paths relative to `base` (the config's folder).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.vocab.dataset);
        fix(&mut self.train.dataset);
        fix(&mut self.train.vocab);
        fix(&mut self.sample.checkpoint);
        fix(&mut self.sample.vocab);
        fix(&mut self.eval.checkpoint);
        fix(&mut self.eval.vocab);
        fix(&mut self.eval.dataset);
        fix(&mut self.eval.imitation);
        fix(&mut self.ablate.rf_checkpoint);
        fix(&mut self.ablate.rfe_checkpoint);
        fix(&mut self.ablate.vocab);
        fix(&mut self.ablate.dataset);
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.sampler.clone()
        }
    }

    fn dataset_config(&self, counts: &BTreeMap<ScenarioKind, usize>) -> DatasetConfig {
        DatasetConfig {
            counts: counts.clone(),
            seed: self.seed,
        }
    }

    pub fn experiment_spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            name: self.name.clone(),
            seed: self.seed,
            data: self.dataset_config(&self.data.counts),
            eval_data: self.dataset_config(&self.data.eval_counts),
            model: self.model.to_config(),
            train: self.train.train.clone(),
            sampler: self.sampler(),
            modules: self.modules,
            ablation: self.ablate.suite.clone(),
        }
    }
}

enum Failure {
    Usage(String),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Domain(e)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Domain(e.into())
    }
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    hash: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config: Option<&'a RunConfig>,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
    wall_time_s: f64,
}

/// Files produced by a command, written only once everything succeeded.
#[derive(Default)]
struct Outputs {
    files: Vec<(String, Vec<u8>)>,
    inputs: Vec<PathBuf>,
}

impl Outputs {
    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }
}

struct Ctx {
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Failure> {
    p.as_deref()
        .ok_or_else(|| Failure::Usage(format!("config is missing `{key}`")))
}

fn load_dataset(path: &Path, out: &mut Outputs) -> Result<Dataset, Failure> {
    out.input(path);
    Ok(Dataset::read(path)?)
}

fn load_vocab(path: Option<&Path>, out: &mut Outputs) -> Result<Option<AnchorVocab>, Failure> {
    match path {
        None => Ok(None),
        Some(p) => {
            out.input(p);
            Ok(Some(AnchorVocab::read(p)?))
        }
    }
}

fn load_model(path: &Path, out: &mut Outputs) -> Result<VelocityModel, Failure> {
    out.input(path);
    out.input(&crate::flownet::model::sidecar_path(path));
    Ok(VelocityModel::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?)
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable output");
    s.push('\n');
    s.into_bytes()
}

fn gen_data(cfg: &RunConfig, ctx: &Ctx, out: &mut Outputs) -> Result<(), Failure> {
    let train = dataset_build(&cfg.dataset_config(&cfg.data.counts), streams::TRAIN_SCENES)?;
    ctx.say(format!("{} training records", train.len()));
    out.add("dataset.jsonl", train.to_jsonl());
    if cfg.data.eval_counts.values().any(|&c| c > 0) {
        let eval = dataset_build(&cfg.dataset_config(&cfg.data.eval_counts), streams::EVAL_SCENES)?;
        ctx.say(format!("{} evaluation records", eval.len()));
        out.add("eval.jsonl", eval.to_jsonl());
    }
    Ok(())
}

fn build_vocab(cfg: &RunConfig, ctx: &Ctx, out: &mut Outputs) -> Result<(), Failure> {
    let data = load_dataset(need(&cfg.vocab.dataset, "vocab.dataset")?, out)?;
    let trajs: Vec<Trajectory> = data.records.iter().map(|r| r.trajectory.clone()).collect();
    let vocab = fps_build(&trajs, cfg.vocab.size)?;
    ctx.say(format!("{} anchors from {} trajectories", vocab.len(), trajs.len()));
    out.add("vocab.bin", crate::diffcore::checkpoint::encode(&vocab.to_blocks()));
    Ok(())
}

fn save_model_bytes(model: &VelocityModel, stem: &str, out: &mut Outputs) -> Result<(), Failure> {
    out.add(
        format!("{stem}.bin"),
        crate::diffcore::checkpoint::encode(&model.blocks()),
    );
    out.add(format!("{stem}.json"), json_bytes(&model.config));
    Ok(())
}

fn train_cmd(cfg: &RunConfig, ctx: &Ctx, out: &mut Outputs) -> Result<(), Failure> {
    let data = load_dataset(need(&cfg.train.dataset, "train.dataset")?, out)?;
    let vocab = load_vocab(cfg.train.vocab.as_deref(), out)?;
    let mut mc = cfg.model.to_config();
    mc.vocab = cfg
        .train
        .vocab
        .as_ref()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned());
    let trained = train(&mc, &cfg.train.train, &data, vocab.as_ref(), cfg.seed)?;
    for e in &trained.log {
        ctx.say(format!(
            "epoch {:>3}  rf {:.5}  rfe {:.5}",
            e.epoch, e.rf_loss, e.rfe_loss
        ));
    }
    save_model_bytes(&trained.model, "model", out)?;
    out.add("train_log.csv", log_csv(&trained.log));
    if cfg.train.imitation {
        let (baseline, log) = train_imitation(&mc, &cfg.train.train, &data, cfg.seed)?;
        ctx.say(format!(
            "imitation final loss {:.5}",
            log.last().map_or(0.0, |e| e.rf_loss)
        ));
        save_model_bytes(&baseline.model, "imitation", out)?;
        out.add("imitation_log.csv", log_csv(&log));
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleLine<'a> {
    chain: usize,
    anchor: Option<usize>,
    waypoints: &'a [[f64; 2]],
}

fn sample_cmd(cfg: &RunConfig, ctx: &Ctx, out: &mut Outputs) -> Result<(), Failure> {
    let s = &cfg.sample;
    let model = load_model(need(&s.checkpoint, "sample.checkpoint")?, out)?;
    let vocab = load_vocab(s.vocab.as_deref(), out)?;
    let scfg = cfg.modules.apply(&cfg.sampler(), cfg.eval.ras_reward);
    let scfg = SamplerConfig {
        reward: scfg.reward.or(cfg.sampler.reward),
        ..scfg
    };
    let scene = generate_scene(s.kind, s.scene_seed).rounded();
    expert_trajectories(&scene)?;
    let prepared = model.prepare(&scene)?;
    let mut lines = String::new();
    let push = |lines: &mut String, chain: usize, anchor: Option<usize>, t: &Trajectory| {
        let line = SampleLine {
            chain,
            anchor,
            waypoints: &t.waypoints,
        };
        lines.push_str(&serde_json::to_string(&line).expect("sample line"));
        lines.push('\n');
    };
    if s.multimodal {
        let v = vocab
            .as_ref()
            .ok_or_else(|| Failure::Usage("multimodal sampling needs `sample.vocab`".into()))?;
        for (i, (t, a)) in sample_multimodal(&model, &prepared, &scene, v, &scfg)?.iter().enumerate() {
            push(&mut lines, i, Some(*a), t);
        }
    } else {
        if s.count == 0 {
            return Err(Failure::Usage("`sample.count` must be positive".into()));
        }
        let anchor = match (&vocab, scfg.cvf_enabled || scfg.cf_enabled) {
            (Some(v), true) => Some(select_constraint_anchor(v, &scene)),
            (None, true) => {
                return Err(Failure::Usage("CVF/CF sampling needs `sample.vocab`".into()))
            }
            _ => None,
        };
        let conds = vec![conditions_for(&model, None, &scfg); s.count];
        let seeds: Vec<u64> = (0..s.count as u64)
            .map(|i| seed::derive(seed::derive(scfg.seed, streams::SAMPLER), i))
            .collect();
        let chains = sample_chains(&model, &prepared, &scene, &conds, anchor.as_ref(), &scfg, &seeds)?;
        for (i, (t, path)) in chains.iter().enumerate() {
            push(&mut lines, i, None, t);
            out.add(format!("path_{i:03}.jsonl"), path.to_jsonl());
        }
    }
    ctx.say(format!("sampled {} scene seed {}", s.kind, s.scene_seed));
    out.add("samples.jsonl", lines);
    Ok(())
}

fn metrics_table(rows: &[(&str, &Metrics)]) -> String {
    let mut s = String::from("planner,samples,");
    s.push_str(
        "collision_1s,collision_2s,collision_3s,collision_avg,collision_free,road_compliance,ep_mean,composite,expert_distance\n",
    );
    for (name, m) in rows {
        s.push_str(&format!(
            "{name},{},{}\n",
            m.samples,
            crate::harness::ablation::metrics_csv_fields(m)
        ));
    }
    s
}

fn modules_override(cfg: &RunConfig, flag: &Option<String>) -> Result<Modules, Failure> {
    match flag {
        Some(s) => s
            .parse::<Modules>()
            .map_err(|e| Failure::Usage(e.to_string())),
        None => Ok(cfg.modules),
    }
}

fn eval_cmd(cfg: &RunConfig, flag: &Option<String>, ctx: &Ctx, out: &mut Outputs) -> Result<(), Failure> {
    let e = &cfg.eval;
    let modules = modules_override(cfg, flag)?;
    let model = load_model(need(&e.checkpoint, "eval.checkpoint")?, out)?;
    let vocab = load_vocab(e.vocab.as_deref(), out)?;
    let data = load_dataset(need(&e.dataset, "eval.dataset")?, out)?;
    let imitation = match &e.imitation {
        Some(p) => Some(ImitationBaseline {
            model: load_model(p, out)?,
        }),
        None => None,
    };
    let scenes = data.scenes();
    let scfg = modules.apply(&cfg.sampler(), e.ras_reward);
    let flow = evaluate(&model, vocab.as_ref(), &scenes, &scfg, e.samples_per_scene)?;
    ctx.say(format!(
        "{modules}: collision-free {:.3}, composite {:.3}",
        flow.collision_free, flow.composite
    ));
    let mut all: Vec<(String, Metrics)> = vec![("flow".into(), flow)];
    if let Some(b) = &imitation {
        all.push(("imitation".into(), evaluate_imitation(b, &scenes)?));
    }
    if e.random_walk {
        all.push((
            "random_walk".into(),
            evaluate_random_walk(&scenes, e.samples_per_scene, cfg.seed),
        ));
    }
    let rows: Vec<(&str, &Metrics)> = all.iter().map(|(n, m)| (n.as_str(), m)).collect();
    out.add("metrics.csv", metrics_table(&rows));
    let json: BTreeMap<&str, &Metrics> = rows.iter().copied().collect();
    #[derive(Serialize)]
    struct EvalJson<'a> {
        modules: String,
        sampler: &'a SamplerConfig,
        metrics: BTreeMap<&'a str, &'a Metrics>,
    }
    out.add(
        "metrics.json",
        json_bytes(&EvalJson {
            modules: modules.to_string(),
            sampler: &scfg,
            metrics: json,
        }),
    );
    Ok(())
}

fn subset(m: &Modules, allowed: &Modules) -> bool {
    (!m.cvf || allowed.cvf) && (!m.cf || allowed.cf) && (!m.rfe || allowed.rfe) && (!m.ras || allowed.ras)
}

fn ablate_cmd(cfg: &RunConfig, flag: &Option<String>, ctx: &Ctx, out: &mut Outputs) -> Result<(), Failure> {
    let a = &cfg.ablate;
    let rf = load_model(need(&a.rf_checkpoint, "ablate.rf_checkpoint")?, out)?;
    let rfe = match &a.rfe_checkpoint {
        Some(p) => Some(load_model(p, out)?),
        None => None,
    };
    let vocab = load_vocab(a.vocab.as_deref(), out)?;
    let data = load_dataset(need(&a.dataset, "ablate.dataset")?, out)?;
    let mut suite = a.suite.clone();
    if let Some(s) = flag {
        let allowed: Modules = s.parse().map_err(|e: crate::Error| Failure::Usage(e.to_string()))?;
        suite.grid.0.retain(|m| subset(m, &allowed));
    }
    let ck = Checkpoints {
        rf: &rf,
        rfe: rfe.as_ref(),
        vocab: vocab.as_ref(),
    };
    let rows = ablation_suite(&ck, &data.scenes(), &cfg.sampler(), &suite)?;
    for r in &rows {
        ctx.say(format!(
            "{:<8} {:<12} λ={:<4} k_c={:<3} K={:<3} composite {:.4}",
            r.group, r.modules, r.lambda, r.k_c, r.k, r.metrics.composite
        ));
    }
    let spec = ExperimentSpec {
        ablation: suite,
        ..cfg.experiment_spec()
    };
    let hash = spec.hash();
    out.add(format!("ablation_{hash}.csv"), rows_csv(&rows));
    #[derive(Serialize)]
    struct AblationJson<'a> {
        spec: &'a ExperimentSpec,
        hash: &'a str,
        rows: &'a [crate::harness::AblationRow],
    }
    out.add(
        format!("ablation_{hash}.json"),
        json_bytes(&AblationJson {
            spec: &spec,
            hash: &hash,
            rows: &rows,
        }),
    );
    Ok(())
}

/// Decimal text with at most 9 significant digits.
pub fn sig9(v: f64) -> String {
    format!("{}", crate::scenario::trajectory::round_sig9(v))
}

#[derive(Serialize)]
struct FlatRow {
    step: usize,
    t: f64,
    waypoint: usize,
    x: f64,
    y: f64,
}

fn flatten(records: &[PathRecord]) -> Vec<FlatRow> {
    records
        .iter()
        .flat_map(|r| {
            r.waypoints.chunks_exact(2).enumerate().map(move |(i, w)| FlatRow {
                step: r.step,
                t: r.t,
                waypoint: i,
                x: w[0],
                y: w[1],
            })
        })
        .collect()
}

pub fn export_rows(records: &[PathRecord], format: ExportFormat) -> String {
    let rows = flatten(records);
    let mut s = String::new();
    match format {
        ExportFormat::Csv => {
            s.push_str("step,t,waypoint,x,y\n");
            for r in rows {
                s.push_str(&format!("{},{},{},{},{}\n", r.step, sig9(r.t), r.waypoint, sig9(r.x), sig9(r.y)));
            }
        }
        ExportFormat::Jsonl => {
            for r in rows {
                s.push_str(&serde_json::to_string(&r).expect("path row"));
                s.push('\n');
            }
        }
    }
    s
}

fn read_config(common: &Common) -> Result<(RunConfig, Vec<u8>), Failure> {
    let bytes = std::fs::read(&common.config).map_err(|e| {
        Failure::Usage(format!("cannot read config {}: {e}", common.config.display()))
    })?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Failure::Usage(format!("{} is not UTF-8", common.config.display())))?;
    let mut cfg = RunConfig::parse(&text, &common.config).map_err(Failure::Usage)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.resolve_paths(common.config.parent().unwrap_or(Path::new("")));
    cfg.sampler
        .validate()
        .map_err(|e| Failure::Usage(format!("{}: {e}", common.config.display())))?;
    cfg.train
        .train
        .validate()
        .map_err(|e| Failure::Usage(format!("{}: {e}", common.config.display())))?;
    cfg.model
        .to_config()
        .validate()
        .map_err(|e| Failure::Usage(format!("{}: {e}", common.config.display())))?;
    Ok((cfg, bytes))
}

fn write_all(
    dir: &Path,
    command: &str,
    cfg: Option<&RunConfig>,
    config_path: Option<&Path>,
    outputs: Outputs,
    started: Instant,
) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut inputs = Vec::new();
    for p in config_path.into_iter().chain(outputs.inputs.iter().map(PathBuf::as_path)) {
        let bytes = std::fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
        inputs.push(InputRecord {
            path: p.display().to_string(),
            hash: content_hash(&bytes),
        });
    }
    let mut names = Vec::new();
    for (name, bytes) in &outputs.files {
        let p = dir.join(name);
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        names.push(name.clone());
    }
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.map(|c| c.seed),
        config: cfg,
        inputs,
        outputs: names,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let p = dir.join("manifest.json");
    std::fs::write(&p, json_bytes(&manifest)).with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let started = Instant::now();
    let ctx = Ctx { quiet: cli.quiet };
    let mut out = Outputs::default();
    let (name, common, flag) = match &cli.command {
        Command::ExportPath { input, out: dir, format } => {
            out.input(input);
            let records = read_path_records(input)?;
            let ext = match format {
                ExportFormat::Csv => "csv",
                ExportFormat::Jsonl => "jsonl",
            };
            out.add(format!("path.{ext}"), export_rows(&records, *format));
            ctx.say(format!("{} states exported", records.len()));
            return write_all(dir, "export-path", None, None, out, started);
        }
        Command::GenData(c) => ("gen-data", c, None),
        Command::BuildVocab(c) => ("build-vocab", c, None),
        Command::Train(c) => ("train", c, None),
        Command::Sample(c) => ("sample", c, None),
        Command::Eval(w) => ("eval", &w.common, Some(&w.modules)),
        Command::Ablate(w) => ("ablate", &w.common, Some(&w.modules)),
    };
    let (cfg, _) = read_config(common)?;
    match name {
        "gen-data" => gen_data(&cfg, &ctx, &mut out)?,
        "build-vocab" => build_vocab(&cfg, &ctx, &mut out)?,
        "train" => train_cmd(&cfg, &ctx, &mut out)?,
        "sample" => sample_cmd(&cfg, &ctx, &mut out)?,
        "eval" => eval_cmd(&cfg, flag.expect("eval flags"), &ctx, &mut out)?,
        _ => ablate_cmd(&cfg, flag.expect("ablate flags"), &ctx, &mut out)?,
    }
    write_all(&common.out, name, Some(&cfg), Some(&common.config), out, started)
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// domain error, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Domain(e)) => {
            // crate errors already print their io source
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {msg}");
            1
        }
    }
}
