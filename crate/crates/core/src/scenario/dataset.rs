//! JSON-lines dataset of expert demonstrations.
//!
//! One record per line:
//!
//! ```text
//! {"version":1,"index":0,"kind":"fork","mode":0,"command":"left","ep":0.31,
//!  "scene":{...},"trajectory":{"waypoints":[[x,y],...],"dt":0.5}}
//! ```
//!
//! `index` numbers scenes from zero; a scene with several expert modes
//! produces consecutive records sharing the same index and scene. Floats
//! are written with at most 9 significant digits.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ep::ep_reward;
use super::expert::{expert_trajectories, Command};
use super::scene::{generate_scene, ScenarioKind, Scene};
use super::trajectory::{round_sig9, Trajectory};
use crate::error::{Error, Result};
use crate::seed;

pub const DATASET_VERSION: u32 = 1;

/// Attempts per scene slot before giving up on a kind.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub version: u32,
    pub index: usize,
    pub kind: ScenarioKind,
    pub mode: usize,
    pub command: Command,
    pub ep: f64,
    pub scene: Scene,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub counts: BTreeMap<ScenarioKind, usize>,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn single(kind: ScenarioKind, count: usize, seed: u64) -> Self {
        Self {
            counts: BTreeMap::from([(kind, count)]),
            seed,
        }
    }
}

/// A scene and all of its expert demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub index: usize,
    pub scene: Scene,
    pub experts: Vec<(Trajectory, usize)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scenes(&self) -> Vec<SceneSample> {
        let mut out: Vec<SceneSample> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some(s) if s.index == r.index => s.experts.push((r.trajectory.clone(), r.mode)),
                _ => out.push(SceneSample {
                    index: r.index,
                    scene: r.scene.clone(),
                    experts: vec![(r.trajectory.clone(), r.mode)],
                }),
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serialises"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        read_records(BufReader::new(text.as_bytes()), path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        read_records(BufReader::new(f), path)
    }
}

fn read_records<R: BufRead>(reader: R, path: &Path) -> Result<Dataset> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if r.version != DATASET_VERSION {
            return Err(parse_err(format!("unsupported record version {}", r.version)));
        }
        r.scene.validate().map_err(|e| parse_err(e.to_string()))?;
        if !r.trajectory.is_finite() || r.trajectory.is_empty() {
            return Err(parse_err("empty or non-finite trajectory".into()));
        }
        records.push(r);
    }
    Ok(Dataset { records })
}

/// Generates one scene per slot, retrying with fresh seeds when a scene has
/// no feasible expert. Scene seeds come from `(config.seed, stream)`.
pub fn dataset_build(config: &DatasetConfig, stream: u64) -> Result<Dataset> {
    let total: usize = config.counts.values().sum();
    if total == 0 {
        return Err(Error::Config("dataset has 0 scenes".into()));
    }
    let base = seed::derive(config.seed, stream);
    let mut records = Vec::new();
    let mut index = 0;
    for (&kind, &count) in &config.counts {
        for slot in 0..count as u64 {
            let mut attempt = 0;
            let (scene, experts) = loop {
                let s = seed::derive(base, ((kind as u64) << 48) ^ (slot << 8) ^ attempt);
                let scene = generate_scene(kind, s).rounded();
                match expert_trajectories(&scene) {
                    Ok(ex) => break (scene, ex),
                    Err(e) if attempt + 1 >= MAX_ATTEMPTS => return Err(e),
                    Err(_) => attempt += 1,
                }
            };
            for (trajectory, mode) in experts {
                records.push(Record {
                    version: DATASET_VERSION,
                    index,
                    kind,
                    mode,
                    command: Command::of(&trajectory),
                    ep: round_sig9(ep_reward(&trajectory, &scene).value()),
                    scene: scene.clone(),
                    trajectory,
                });
            }
            index += 1;
        }
    }
    Ok(Dataset { records })
}
