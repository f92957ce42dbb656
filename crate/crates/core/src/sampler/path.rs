//! Recorded sampling chains and their JSON-lines export.
//!
//! One line per state: `{"step":k,"t":t,"waypoints":[x1,y1,x2,y2,...]}`
//! with ego-frame meters.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub index: usize,
    pub anchor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowPath {
    /// Flattened waypoints in meters, one entry per step `0..=K+R`.
    pub states: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub truncation: Option<Truncation>,
    /// Steps at which the velocity correction was skipped for a zero reference.
    pub cvf_skipped: Vec<usize>,
    /// The constraint anchor was flagged infeasible, so CVF and CF were off.
    pub constraints_disabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub step: usize,
    pub t: f64,
    pub waypoints: Vec<f64>,
}

impl FlowPath {
    pub fn records(&self) -> Vec<PathRecord> {
        self.states
            .iter()
            .zip(&self.times)
            .enumerate()
            .map(|(step, (w, &t))| PathRecord {
                step,
                t,
                waypoints: w.clone(),
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r).expect("path record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Reads path records; rejects empty files, ragged rows and gaps in `step`.
pub fn read_path_records(path: &Path) -> Result<Vec<PathRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<PathRecord> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: PathRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if r.waypoints.is_empty() || !r.waypoints.len().is_multiple_of(2) {
            return Err(err(format!("{} waypoint values", r.waypoints.len())));
        }
        if let Some(first) = out.first() {
            if first.waypoints.len() != r.waypoints.len() {
                return Err(err("waypoint count differs from the first record".into()));
            }
        }
        if r.step != out.len() {
            return Err(err(format!("expected step {}, found {}", out.len(), r.step)));
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "no path records".into(),
        });
    }
    Ok(out)
}
