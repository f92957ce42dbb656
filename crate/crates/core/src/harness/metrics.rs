use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scenario::{
    ep_reward, hard_collision, road_compliant, ScenarioKind, SceneSample, Trajectory, EGO_RADIUS,
};

/// Waypoint prefixes for the 1 s, 2 s and 3 s collision horizons at 0.5 s steps.
pub const HORIZON_STEPS: [usize; 3] = [2, 4, 6];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CollisionRates {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub collision_rate: CollisionRates,
    /// Fraction of samples with no hard collision anywhere on the horizon.
    pub collision_free: f64,
    pub road_compliance_rate: f64,
    /// Mode label → share of fork-scene samples assigned to it.
    pub mode_coverage: BTreeMap<usize, f64>,
    /// Mean L2 distance from each sample to its nearest expert.
    pub expert_distance: f64,
    pub ep_mean: f64,
    pub composite: f64,
}

/// Index of the nearest expert in flattened L2 and the distance to it.
pub fn nearest_expert(traj: &Trajectory, experts: &[(Trajectory, usize)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, (e, _)) in experts.iter().enumerate() {
        let d = traj.distance(e);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Geometric mean of `(1 − collision)`, road compliance and progress.
pub fn composite(collision_avg: f64, road: f64, ep: f64) -> f64 {
    ((1.0 - collision_avg).max(0.0) * road.max(0.0) * ep.max(0.0)).cbrt()
}

/// Scores `samples[i]` (any number of trajectories) against `scenes[i]`.
pub fn score(scenes: &[SceneSample], samples: &[Vec<Trajectory>]) -> Metrics {
    assert_eq!(scenes.len(), samples.len(), "one sample list per scene");
    let mut n = 0usize;
    let mut hits = [0usize; 3];
    let mut any_hit = 0usize;
    let mut road = 0usize;
    let mut ep = 0.0;
    let mut dist = 0.0;
    let mut modes: BTreeMap<usize, usize> = BTreeMap::new();
    let mut fork_n = 0usize;
    for (s, trajs) in scenes.iter().zip(samples) {
        for t in trajs {
            n += 1;
            for (h, &steps) in HORIZON_STEPS.iter().enumerate() {
                if hard_collision(t, &s.scene, steps, EGO_RADIUS) {
                    hits[h] += 1;
                }
            }
            if hard_collision(t, &s.scene, t.len(), EGO_RADIUS) {
                any_hit += 1;
            }
            if road_compliant(t, &s.scene) {
                road += 1;
            }
            ep += ep_reward(t, &s.scene).value();
            let (i, d) = nearest_expert(t, &s.experts);
            dist += d;
            if s.scene.kind == ScenarioKind::Fork {
                *modes.entry(s.experts[i].1).or_default() += 1;
                fork_n += 1;
            }
        }
    }
    if n == 0 {
        return Metrics::default();
    }
    let nf = n as f64;
    let rate = |k: usize| k as f64 / nf;
    let avg = (rate(hits[0]) + rate(hits[1]) + rate(hits[2])) / 3.0;
    let road_rate = rate(road);
    let ep_mean = ep / nf;
    Metrics {
        samples: n,
        collision_rate: CollisionRates {
            s1: rate(hits[0]),
            s2: rate(hits[1]),
            s3: rate(hits[2]),
            avg,
        },
        collision_free: 1.0 - rate(any_hit),
        road_compliance_rate: road_rate,
        mode_coverage: modes
            .into_iter()
            .map(|(m, c)| (m, c as f64 / fork_n as f64))
            .collect(),
        expert_distance: dist / nf,
        ep_mean,
        composite: composite(avg, road_rate, ep_mean),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{dataset_build, DatasetConfig, Vec2};

    fn scenes(kind: ScenarioKind, n: usize) -> Vec<SceneSample> {
        dataset_build(&DatasetConfig::single(kind, n, 3), 0).unwrap().scenes()
    }

    #[test]
    fn experts_never_collide() {
        for kind in ScenarioKind::ALL {
            let sc = scenes(kind, 10);
            let samples: Vec<Vec<Trajectory>> = sc
                .iter()
                .map(|s| s.experts.iter().map(|(t, _)| t.clone()).collect())
                .collect();
            let m = score(&sc, &samples);
            assert_eq!(m.collision_rate, CollisionRates::default());
            assert_eq!(m.collision_free, 1.0);
            assert_eq!(m.road_compliance_rate, 1.0);
            assert_eq!(m.expert_distance, 0.0);
        }
    }

    #[test]
    fn pinned_to_obstacle_collides() {
        let sc = scenes(ScenarioKind::ObstacleAvoid, 3);
        let samples: Vec<Vec<Trajectory>> = sc
            .iter()
            .map(|s| {
                let o: Vec2 = s.scene.obstacles[0].position;
                vec![Trajectory::new(vec![[o.x, o.y]; 8], 0.5)]
            })
            .collect();
        let m = score(&sc, &samples);
        assert_eq!(m.collision_rate.s1, 1.0);
        assert_eq!(m.collision_rate.s3, 1.0);
        assert_eq!(m.collision_free, 0.0);
    }

    #[test]
    fn fork_modes_are_counted() {
        let sc = scenes(ScenarioKind::Fork, 4);
        let samples: Vec<Vec<Trajectory>> = sc
            .iter()
            .map(|s| vec![s.experts[0].0.clone(), s.experts[0].0.clone(), s.experts[1].0.clone()])
            .collect();
        let m = score(&sc, &samples);
        assert!((m.mode_coverage[&0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.mode_coverage[&1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn composite_is_monotone_in_collisions() {
        let mut last = -1.0;
        for k in (0..=10).rev() {
            let c = composite(k as f64 / 10.0, 0.9, 0.4);
            assert!(c >= last);
            last = c;
        }
    }
}
