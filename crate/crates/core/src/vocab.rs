//! Anchor trajectory vocabulary and constraint-anchor selection.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{checkpoint, Tensor2};
use crate::error::{Error, Result};
use crate::scenario::trajectory::l2;
use crate::scenario::{constraint_eval, ep_reward, ConstraintScore, Scene, Trajectory, Vec2};

/// Total penalty above which the best anchor is flagged as infeasible.
pub const FEASIBLE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorVocab {
    pub anchors: Vec<Trajectory>,
}

impl AnchorVocab {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn to_blocks(&self) -> BTreeMap<String, Tensor2> {
        let cols = self.anchors.first().map_or(0, |a| 2 * a.len());
        let data = self.anchors.iter().flat_map(|a| a.flat()).collect();
        let dt = self.anchors.first().map_or(0.0, |a| a.dt);
        BTreeMap::from([
            (
                "anchors".to_string(),
                Tensor2::from_vec(self.anchors.len(), cols, data).expect("uniform anchors"),
            ),
            ("dt".to_string(), Tensor2::row(vec![dt])),
        ])
    }

    pub fn from_blocks(blocks: &BTreeMap<String, Tensor2>) -> Result<Self> {
        let get = |n: &str| {
            blocks
                .get(n)
                .ok_or_else(|| Error::Format(format!("vocabulary file lacks block `{n}`")))
        };
        let a = get("anchors")?;
        let dt = get("dt")?.data()[0];
        let anchors = (0..a.rows())
            .map(|r| Trajectory::from_flat(a.row_slice(r), dt))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { anchors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_blocks())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_blocks(&checkpoint::read_file(path)?)
    }
}

/// Greedy farthest point sampling in flattened L2. The first pick is the
/// trajectory closest to the mean; later picks maximise the distance to the
/// nearest chosen one. Exact duplicates in the input are dropped first and
/// every tie goes to the lowest index.
pub fn fps_build(trajectories: &[Trajectory], n: usize) -> Result<AnchorVocab> {
    let mut pool: Vec<Vec<f64>> = Vec::new();
    let mut dt = 0.0;
    for t in trajectories {
        let f = t.flat();
        if let Some(first) = pool.first() {
            if first.len() != f.len() {
                return Err(Error::Dimension(format!(
                    "trajectories of {} and {} waypoints",
                    first.len() / 2,
                    f.len() / 2
                )));
            }
        } else {
            dt = t.dt;
        }
        if !pool.contains(&f) {
            pool.push(f);
        }
    }
    if n == 0 || n > pool.len() {
        return Err(Error::Config(format!(
            "vocabulary of {n} anchors from {} distinct trajectories",
            pool.len()
        )));
    }
    let dim = pool[0].len();
    let mut mean = vec![0.0; dim];
    for f in &pool {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / pool.len() as f64;
        }
    }
    let argmax_by = |scores: &[f64]| {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        best
    };
    let neg: Vec<f64> = pool.iter().map(|f| -l2(f, &mean)).collect();
    let first = argmax_by(&neg);
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = pool.iter().map(|f| l2(f, &pool[first])).collect();
    while chosen.len() < n {
        let next = argmax_by(&nearest);
        chosen.push(next);
        for (d, f) in nearest.iter_mut().zip(&pool) {
            *d = d.min(l2(f, &pool[next]));
        }
    }
    let anchors = chosen
        .into_iter()
        .map(|i| Trajectory::from_flat(&pool[i], dt))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnchorVocab { anchors })
}

/// Closest anchor in flattened L2, lowest index on ties.
pub fn nearest_anchor<'v>(vocab: &'v AnchorVocab, gt: &Trajectory) -> (usize, &'v Trajectory) {
    let g = gt.flat();
    let mut best = (0, f64::INFINITY);
    for (i, a) in vocab.anchors.iter().enumerate() {
        let d = l2(&a.flat(), &g);
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, &vocab.anchors[best.0])
}

pub fn goal_from_anchor(anchor: &Trajectory) -> Vec2 {
    if anchor.is_empty() {
        Vec2::ZERO
    } else {
        anchor.last()
    }
}

/// Scores a candidate trajectory in a scene; lower totals are better.
pub trait AnchorScorer {
    fn score(&self, traj: &Trajectory, scene: &Scene) -> ConstraintScore;
}

/// The smooth constraint penalties of [`constraint_eval`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleScorer;

impl AnchorScorer for RuleScorer {
    fn score(&self, traj: &Trajectory, scene: &Scene) -> ConstraintScore {
        constraint_eval(traj, scene)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    Vocab,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintAnchor {
    pub trajectory: Trajectory,
    pub score: ConstraintScore,
    pub source: AnchorSource,
    /// Vocabulary index when `source` is `Vocab`.
    pub index: Option<usize>,
    /// Even the best candidate exceeds [`FEASIBLE_THRESHOLD`].
    pub infeasible: bool,
}

impl ConstraintAnchor {
    pub fn external(trajectory: Trajectory, scene: &Scene) -> Self {
        let score = constraint_eval(&trajectory, scene);
        Self {
            trajectory,
            score,
            source: AnchorSource::External,
            index: None,
            infeasible: score.total() > FEASIBLE_THRESHOLD,
        }
    }
}

pub fn select_constraint_anchor(vocab: &AnchorVocab, scene: &Scene) -> ConstraintAnchor {
    select_with(vocab, scene, &RuleScorer)
}

/// Minimum total penalty. Among zero-penalty anchors the one with the
/// highest ego progress wins, then the lowest index.
pub fn select_with(vocab: &AnchorVocab, scene: &Scene, scorer: &dyn AnchorScorer) -> ConstraintAnchor {
    assert!(!vocab.is_empty(), "empty anchor vocabulary");
    let scores: Vec<ConstraintScore> = vocab.anchors.iter().map(|a| scorer.score(a, scene)).collect();
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i].total() < scores[best].total() {
            best = i;
        }
    }
    if scores[best].total() == 0.0 {
        let mut best_ep = f64::NEG_INFINITY;
        for (i, s) in scores.iter().enumerate() {
            if s.total() == 0.0 {
                let ep = ep_reward(&vocab.anchors[i], scene).value();
                if ep > best_ep {
                    best_ep = ep;
                    best = i;
                }
            }
        }
    }
    ConstraintAnchor {
        trajectory: vocab.anchors[best].clone(),
        score: scores[best],
        source: AnchorSource::Vocab,
        index: Some(best),
        infeasible: scores[best].total() > FEASIBLE_THRESHOLD,
    }
}
