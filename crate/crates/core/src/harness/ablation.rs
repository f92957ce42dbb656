use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::evaluate;
use super::metrics::Metrics;
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::flownet::{ModelConfig, VelocityModel};
use crate::sampler::SamplerConfig;
use crate::scenario::{DatasetConfig, SceneSample};
use crate::vocab::AnchorVocab;

/// Sampling-time modules. `rfe` also selects the energy-trained checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Modules {
    pub cvf: bool,
    pub cf: bool,
    pub rfe: bool,
    pub ras: bool,
}

impl Modules {
    pub const NONE: Modules = Modules {
        cvf: false,
        cf: false,
        rfe: false,
        ras: false,
    };

    /// Sampler settings with these modules switched on; `ras` sets the
    /// reward condition to `reward`.
    pub fn apply(&self, base: &SamplerConfig, reward: f64) -> SamplerConfig {
        SamplerConfig {
            cvf_enabled: self.cvf,
            cf_enabled: self.cf,
            rfe_enabled: self.rfe,
            reward: if self.ras { Some(reward) } else { None },
            ..base.clone()
        }
    }
}

impl fmt::Display for Modules {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.cvf, "cvf"),
            (self.cf, "cf"),
            (self.rfe, "rfe"),
            (self.ras, "ras"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl From<Modules> for String {
    fn from(m: Modules) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Modules {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Parses `none` or names joined by `+` or `,` (`cf+rfe`, `cvf,cf`).
impl FromStr for Modules {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut m = Modules::NONE;
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Ok(m);
        }
        for part in s.split(['+', ',']) {
            match part.trim().to_ascii_lowercase().as_str() {
                "cvf" => m.cvf = true,
                "cf" => m.cf = true,
                "rfe" => m.rfe = true,
                "ras" => m.ras = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown module `{other}` (expected cvf, cf, rfe, ras)"
                    )))
                }
            }
        }
        Ok(m)
    }
}

impl Serialize for ModuleList {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|m| m.to_string()))
    }
}

impl<'de> Deserialize<'de> for ModuleList {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names
            .iter()
            .map(|n| n.parse().map_err(serde::de::Error::custom))
            .collect::<std::result::Result<Vec<Modules>, _>>()
            .map(ModuleList)
    }
}

/// Module combinations written as strings such as `"cf+rfe"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleList(pub Vec<Modules>);

impl Default for ModuleList {
    fn default() -> Self {
        ModuleList(
            ["none", "cvf", "cf", "rfe", "cf+rfe", "cf+rfe+ras"]
                .iter()
                .map(|s| s.parse().expect("builtin grid"))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub grid: ModuleList,
    /// λ values swept with CVF on.
    pub lambdas: Vec<f64>,
    /// Truncation steps swept with CF on.
    pub k_cs: Vec<usize>,
    /// Transport step counts swept with CF on.
    pub ks: Vec<usize>,
    /// Reward condition used when RAS is on.
    pub ras_reward: f64,
    pub samples_per_scene: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            grid: ModuleList::default(),
            lambdas: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            k_cs: vec![10, 20, 30, 40, 50],
            ks: vec![100, 50, 25, 10],
            ras_reward: 1.0,
            samples_per_scene: 4,
        }
    }
}

/// Everything that determines a run; its hash names the result files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub seed: u64,
    pub data: DatasetConfig,
    pub eval_data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub modules: Modules,
    pub ablation: AblationConfig,
}

impl ExperimentSpec {
    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serialises");
        hex12(json.as_bytes())
    }
}

pub fn hex12(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `modules`, `lambda`, `k_c` or `k`.
    pub group: String,
    pub modules: String,
    pub lambda: f64,
    pub k_c: usize,
    pub k: usize,
    pub metrics: Metrics,
}

/// Base checkpoints for the suite.
pub struct Checkpoints<'a> {
    pub rf: &'a VelocityModel,
    /// Energy-trained model; required by any configuration with RFE on.
    pub rfe: Option<&'a VelocityModel>,
    pub vocab: Option<&'a AnchorVocab>,
}

fn run(
    ck: &Checkpoints<'_>,
    scenes: &[SceneSample],
    modules: Modules,
    sampler: SamplerConfig,
    n: usize,
) -> Result<Metrics> {
    let model = if modules.rfe {
        ck.rfe.ok_or_else(|| {
            Error::Config(format!("`{modules}` needs an energy-trained checkpoint"))
        })?
    } else {
        ck.rf
    };
    evaluate(model, ck.vocab, scenes, &sampler, n)
}

/// Module grid followed by the λ, k_c and K sweeps, in that order.
pub fn ablation_suite(
    ck: &Checkpoints<'_>,
    scenes: &[SceneSample],
    base: &SamplerConfig,
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    let n = cfg.samples_per_scene;
    let mut rows = Vec::new();
    let mut push = |group: &str, modules: Modules, s: SamplerConfig| -> Result<()> {
        let metrics = run(ck, scenes, modules, s.clone(), n)?;
        rows.push(AblationRow {
            group: group.into(),
            modules: modules.to_string(),
            lambda: s.lambda,
            k_c: s.k_c,
            k: s.k,
            metrics,
        });
        Ok(())
    };
    for m in &cfg.grid.0 {
        push("modules", *m, m.apply(base, cfg.ras_reward))?;
    }
    let cvf = Modules { cvf: true, ..Modules::NONE };
    for &lambda in &cfg.lambdas {
        push("lambda", cvf, SamplerConfig { lambda, ..cvf.apply(base, cfg.ras_reward) })?;
    }
    let cf = Modules { cf: true, ..Modules::NONE };
    for &k_c in &cfg.k_cs {
        push("k_c", cf, SamplerConfig { k_c, ..cf.apply(base, cfg.ras_reward) })?;
    }
    for &k in &cfg.ks {
        // keep the truncation point at the same fraction of the schedule
        let k_c = ((base.k_c * k) / base.k).clamp(1, k.saturating_sub(1).max(1));
        push("k", cf, SamplerConfig { k, k_c, ..cf.apply(base, cfg.ras_reward) })?;
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "group,modules,lambda,k_c,k,samples,collision_1s,collision_2s,collision_3s,collision_avg,collision_free,road_compliance,ep_mean,composite,expert_distance";

pub fn metrics_csv_fields(m: &Metrics) -> String {
    let c = &m.collision_rate;
    [
        c.s1,
        c.s2,
        c.s3,
        c.avg,
        m.collision_free,
        m.road_compliance_rate,
        m.ep_mean,
        m.composite,
        m.expert_distance,
    ]
    .iter()
    .map(|v| format!("{v:.9}"))
    .collect::<Vec<_>>()
    .join(",")
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.group,
            r.modules,
            r.lambda,
            r.k_c,
            r.k,
            r.metrics.samples,
            metrics_csv_fields(&r.metrics)
        ));
    }
    out
}
