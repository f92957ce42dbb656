use serde::{Deserialize, Serialize};

use super::constraint::{constraint_eval, ConstraintScore};
use super::geometry::{Polyline, Vec2};
use super::scene::{ScenarioKind, Scene, LEAD_BUFFER, MAX_BRAKE};
use super::trajectory::{Trajectory, DT, HORIZON};
use super::EGO_RADIUS;
use crate::error::{Error, Result};

/// High-level driving command derived from where a trajectory ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Left,
    Straight,
    Right,
}

impl Command {
    pub fn index(self) -> usize {
        match self {
            Command::Left => 0,
            Command::Straight => 1,
            Command::Right => 2,
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    pub fn of(traj: &Trajectory) -> Command {
        let end = traj.last();
        let bearing = end.y.atan2(end.x.max(1e-9));
        if end.norm() < 2.0 {
            Command::Straight
        } else if bearing > 0.12 {
            Command::Left
        } else if bearing < -0.12 {
            Command::Right
        } else {
            Command::Straight
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum SpeedPlan {
    Cruise(f64),
    /// Constant deceleration to a stop after `distance` meters.
    Stop { v0: f64, distance: f64 },
}

impl SpeedPlan {
    fn speed(&self, t: f64) -> f64 {
        match *self {
            SpeedPlan::Cruise(v) => v,
            SpeedPlan::Stop { v0, distance } => {
                let decel = v0 * v0 / (2.0 * distance);
                (v0 - decel * t).max(0.0)
            }
        }
    }
}

const SUBSTEPS: usize = 50;

/// Kinematic pure-pursuit rollout along `path` from the ego origin.
fn pursue(path: &Polyline, plan: SpeedPlan) -> Trajectory {
    let h = DT / SUBSTEPS as f64;
    let mut pos = Vec2::ZERO;
    let mut heading = 0.0f64;
    let mut out = Vec::with_capacity(HORIZON);
    for k in 0..HORIZON * SUBSTEPS {
        let t = k as f64 * h;
        let v = 0.5 * (plan.speed(t) + plan.speed(t + h));
        let lookahead = (0.8 * v).max(4.0);
        let s = path.project(pos).arc;
        let (target, _) = path.at(s + lookahead);
        let mut alpha = (target - pos).angle() - heading;
        while alpha > std::f64::consts::PI {
            alpha -= 2.0 * std::f64::consts::PI;
        }
        while alpha <= -std::f64::consts::PI {
            alpha += 2.0 * std::f64::consts::PI;
        }
        let kappa = (2.0 * alpha.sin() / lookahead).clamp(-0.2, 0.2);
        heading += v * kappa * h;
        pos = pos + Vec2::from_angle(heading).scale(v * h);
        if (k + 1) % SUBSTEPS == 0 {
            out.push([pos.x, pos.y]);
        }
    }
    Trajectory::new(out, DT)
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Lane-following path displaced sideways around the first obstacle.
fn swerve_path(scene: &Scene, side: f64) -> Polyline {
    let lane = &scene.lanes[0].centerline;
    let o = scene.obstacles[0];
    let amp = o.radius + EGO_RADIUS + 1.1;
    let ramp = 11.0;
    let plateau = 3.0;
    let len = lane.length();
    let mut pts = Vec::new();
    let mut s = 0.0;
    while s <= len {
        let (p, t) = lane.at(s);
        let dx = (p.x - o.position.x).abs();
        let w = 1.0 - smoothstep((dx - plateau) / ramp);
        let n = Vec2::new(-t.y, t.x);
        pts.push(p + n.scale(side * amp * w + o.position.y * w));
        s += 1.0;
    }
    Polyline::new(pts).expect("swerve path")
}

/// Expert demonstrations with a mode label per feasible corridor.
pub fn expert_trajectories(scene: &Scene) -> Result<Vec<(Trajectory, usize)>> {
    let v0 = scene.ego.speed;
    let cruise = SpeedPlan::Cruise(v0);
    let experts: Vec<(Trajectory, usize)> = match scene.kind {
        ScenarioKind::Straight | ScenarioKind::Turn => {
            vec![(pursue(&scene.lanes[0].centerline, cruise), 0)]
        }
        ScenarioKind::Fork => scene
            .lanes
            .iter()
            .enumerate()
            .map(|(m, l)| (pursue(&l.centerline, cruise), m))
            .collect(),
        ScenarioKind::ObstacleAvoid => {
            if scene.obstacles.is_empty() {
                return Err(Error::Generation("obstacle_avoid scene without obstacle".into()));
            }
            vec![
                (pursue(&swerve_path(scene, 1.0), cruise), 0),
                (pursue(&swerve_path(scene, -1.0), cruise), 1),
            ]
        }
        ScenarioKind::LeadStop => {
            let lane = &scene.lanes[0].centerline;
            let ego_s = lane.project(scene.ego.position).arc;
            let lead = scene
                .obstacles
                .iter()
                .map(|o| (lane.project(o.position).arc - ego_s, o))
                .filter(|(d, _)| *d > 0.0)
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .ok_or_else(|| Error::Generation("lead_stop scene without a lead".into()))?;
            let distance = lead.0 - lead.1.radius - EGO_RADIUS - LEAD_BUFFER;
            if distance <= 0.0 || v0 * v0 / (2.0 * distance) > MAX_BRAKE {
                return Err(Error::Generation(format!(
                    "cannot stop from {v0:.2} m/s within {distance:.2} m"
                )));
            }
            vec![(pursue(lane, SpeedPlan::Stop { v0, distance }), 0)]
        }
    };

    let mut out = Vec::with_capacity(experts.len());
    for (traj, mode) in experts {
        let traj = traj.rounded();
        let score = constraint_eval(&traj, scene);
        if score != ConstraintScore::default() {
            return Err(Error::Generation(format!(
                "{} scene {}: no constraint-free corridor for mode {mode} ({score:?})",
                scene.kind, scene.seed
            )));
        }
        out.push((traj, mode));
    }
    Ok(out)
}
