use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::trajectory::Trajectory;
use super::V_MAX;

/// Ego progress in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EpScore(pub f64);

impl EpScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Arc length gained along the lane matched to the final waypoint, from the
/// ego's own projection, normalised by the distance covered at `V_MAX` over
/// the horizon.
pub fn ep_reward(traj: &Trajectory, scene: &Scene) -> EpScore {
    if traj.is_empty() {
        return EpScore(0.0);
    }
    let end = traj.last();
    let lane = scene
        .lanes
        .iter()
        .min_by(|a, b| {
            a.centerline
                .project(end)
                .distance
                .total_cmp(&b.centerline.project(end).distance)
        })
        .expect("scene has lanes");
    let start = lane.centerline.project(scene.ego.position).arc;
    let progress = lane.centerline.project(end).arc - start;
    let horizon = traj.len() as f64 * traj.dt * V_MAX;
    EpScore((progress / horizon).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::geometry::{Polyline, Vec2};
    use crate::scenario::scene::{EgoState, Lane, ScenarioKind};
    use crate::scenario::{DT, HORIZON};

    fn long_road() -> Scene {
        Scene {
            kind: ScenarioKind::Straight,
            seed: 0,
            lanes: vec![Lane {
                centerline: Polyline::new(vec![Vec2::new(-4.0, 0.0), Vec2::new(100.0, 0.0)])
                    .unwrap(),
                half_width: 1.75,
            }],
            obstacles: vec![],
            ego: EgoState {
                position: Vec2::ZERO,
                heading: 0.0,
                speed: 0.0,
            },
        }
    }

    fn at_speed(v: f64) -> Trajectory {
        Trajectory::new((1..=HORIZON).map(|i| [v * DT * i as f64, 0.0]).collect(), DT)
    }

    #[test]
    fn ep_examples() {
        let s = long_road();
        assert_eq!(ep_reward(&Trajectory::zeros(HORIZON, DT), &s).value(), 0.0);
        assert_eq!(ep_reward(&at_speed(V_MAX), &s).value(), 1.0);
        assert!((ep_reward(&at_speed(V_MAX / 2.0), &s).value() - 0.5).abs() < 1e-6);
        assert_eq!(ep_reward(&at_speed(-5.0), &s).value(), 0.0);
    }

    #[test]
    fn ep_is_monotone_in_progress() {
        let s = long_road();
        let mut last = 0.0;
        for k in 0..=40 {
            let v = ep_reward(&at_speed(0.5 * k as f64), &s).value();
            assert!(v >= last);
            last = v;
        }
    }
}
