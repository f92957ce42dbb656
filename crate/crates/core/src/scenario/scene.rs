use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{Polyline, Vec2};
use super::trajectory::round_sig9;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    Fork,
    Turn,
    ObstacleAvoid,
    LeadStop,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Straight,
        ScenarioKind::Fork,
        ScenarioKind::Turn,
        ScenarioKind::ObstacleAvoid,
        ScenarioKind::LeadStop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::Fork => "fork",
            ScenarioKind::Turn => "turn",
            ScenarioKind::ObstacleAvoid => "obstacle_avoid",
            ScenarioKind::LeadStop => "lead_stop",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub centerline: Polyline,
    pub half_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
}

impl Obstacle {
    /// Constant-velocity position at time `t` seconds.
    pub fn at(&self, t: f64) -> Vec2 {
        self.position + self.velocity.scale(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub lanes: Vec<Lane>,
    pub obstacles: Vec<Obstacle>,
    pub ego: EgoState,
}

/// Lanes start this far behind the ego.
const LANE_START: f64 = -4.0;

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.lanes.is_empty() {
            return Err(Error::Generation("scene has no lanes".into()));
        }
        for lane in &self.lanes {
            if Polyline::new(lane.centerline.points().to_vec()).is_none() || lane.half_width <= 0.0
            {
                return Err(Error::Generation("degenerate lane".into()));
            }
        }
        let near = self
            .lanes
            .iter()
            .map(|l| l.centerline.project(self.ego.position).distance)
            .fold(f64::INFINITY, f64::min);
        if near > 0.5 {
            return Err(Error::Generation(format!(
                "ego is {near:.2} m from the nearest centerline"
            )));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0 && o.radius <= 5.0) || o.velocity.norm() > 20.0 {
                return Err(Error::Generation(format!("obstacle {i} out of range")));
            }
            for p in &self.obstacles[..i] {
                if o.position.dist(p.position) <= o.radius + p.radius {
                    return Err(Error::Generation("overlapping obstacles".into()));
                }
            }
        }
        if !(self.ego.heading > -PI && self.ego.heading <= PI) || self.ego.speed < 0.0 {
            return Err(Error::Generation("ego state out of range".into()));
        }
        Ok(())
    }

    /// Copy with every coordinate rounded to 9 significant digits, the
    /// precision of the dataset file.
    pub fn rounded(&self) -> Scene {
        let rv = |v: Vec2| Vec2::new(round_sig9(v.x), round_sig9(v.y));
        Scene {
            kind: self.kind,
            seed: self.seed,
            lanes: self
                .lanes
                .iter()
                .map(|l| Lane {
                    centerline: Polyline::new(l.centerline.points().iter().map(|&p| rv(p)).collect())
                        .unwrap_or_else(|| l.centerline.clone()),
                    half_width: round_sig9(l.half_width),
                })
                .collect(),
            obstacles: self
                .obstacles
                .iter()
                .map(|o| Obstacle {
                    position: rv(o.position),
                    velocity: rv(o.velocity),
                    radius: round_sig9(o.radius),
                })
                .collect(),
            ego: EgoState {
                position: rv(self.ego.position),
                heading: round_sig9(self.ego.heading),
                speed: round_sig9(self.ego.speed),
            },
        }
    }
}

fn straight_lane(origin: Vec2, angle: f64, length: f64, half_width: f64) -> Lane {
    let dir = Vec2::from_angle(angle);
    let start = origin + dir.scale(LANE_START);
    let pts = (0..=((length / 10.0).ceil() as usize))
        .map(|i| start + dir.scale((i as f64 * 10.0).min(length)))
        .collect::<Vec<_>>();
    let mut dedup: Vec<Vec2> = Vec::with_capacity(pts.len());
    for p in pts {
        if dedup.last() != Some(&p) {
            dedup.push(p);
        }
    }
    Lane {
        centerline: Polyline::new(dedup).expect("straight lane has distinct points"),
        half_width,
    }
}

fn ego(speed: f64) -> EgoState {
    EgoState {
        position: Vec2::ZERO,
        heading: 0.0,
        speed,
    }
}

/// Deterministic synthetic scene for `(kind, seed)`, expressed in the ego
/// frame (ego at the origin facing +x).
pub fn generate_scene(kind: ScenarioKind, seed: u64) -> Scene {
    let mut rng = seed::rng(seed::derive(seed, kind as u64 + 101));
    let scene = match kind {
        ScenarioKind::Straight => {
            let offset = rng.random_range(-0.3..0.3);
            let angle = rng.random_range(-0.03..0.03);
            let hw = rng.random_range(1.6..2.0);
            let lane = straight_lane(Vec2::new(0.0, offset), angle, 80.0, hw);
            let mut obstacles = Vec::new();
            let parked = rng.random_range(0..=2usize);
            for _ in 0..parked {
                let s: f64 = rng.random_range(6.0..60.0);
                let r: f64 = rng.random_range(0.5..1.5);
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let lateral = side * (hw + r + 1.5 + rng.random_range(0.0..3.0));
                let (p, t) = lane.centerline.at(s - LANE_START);
                let n = Vec2::new(-t.y, t.x);
                let cand = Obstacle {
                    position: p + n.scale(lateral),
                    velocity: Vec2::ZERO,
                    radius: r,
                };
                if obstacles
                    .iter()
                    .all(|o: &Obstacle| o.position.dist(cand.position) > o.radius + r + 0.5)
                {
                    obstacles.push(cand);
                }
            }
            Scene {
                kind,
                seed,
                lanes: vec![lane],
                obstacles,
                ego: ego(rng.random_range(2.0..17.0)),
            }
        }
        ScenarioKind::Fork => {
            let stem = rng.random_range(4.0..10.0);
            let theta: f64 = rng.random_range(0.3..0.45);
            let branch = 60.0;
            let hw = 1.75;
            let junction = Vec2::new(stem, 0.0);
            let lane_for = |sign: f64| {
                let dir = Vec2::from_angle(sign * theta);
                let mut pts = vec![Vec2::new(LANE_START, 0.0), junction];
                for i in 1..=6 {
                    pts.push(junction + dir.scale(branch * i as f64 / 6.0));
                }
                Lane {
                    centerline: Polyline::new(pts).expect("fork lane"),
                    half_width: hw,
                }
            };
            Scene {
                kind,
                seed,
                lanes: vec![lane_for(1.0), lane_for(-1.0)],
                obstacles: Vec::new(),
                ego: ego(rng.random_range(7.0..12.0)),
            }
        }
        ScenarioKind::Turn => {
            let stem = rng.random_range(5.0..20.0);
            let radius: f64 = rng.random_range(18.0..35.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut pts = vec![Vec2::new(LANE_START, 0.0), Vec2::new(stem, 0.0)];
            let centre = Vec2::new(stem, sign * radius);
            let steps = (radius * FRAC_PI_2 / 2.0).ceil() as usize;
            for i in 1..=steps {
                let phi = FRAC_PI_2 * i as f64 / steps as f64;
                pts.push(centre + Vec2::new(radius * phi.sin(), -sign * radius * phi.cos()));
            }
            let end = *pts.last().expect("arc");
            for i in 1..=4 {
                pts.push(end + Vec2::new(0.0, sign * 10.0 * i as f64));
            }
            let vmax = (3.5 * radius).sqrt().min(12.0);
            Scene {
                kind,
                seed,
                lanes: vec![Lane {
                    centerline: Polyline::new(pts).expect("turn lane"),
                    half_width: 1.75,
                }],
                obstacles: Vec::new(),
                ego: ego(rng.random_range(4.0..vmax)),
            }
        }
        ScenarioKind::ObstacleAvoid => {
            let lane = straight_lane(Vec2::ZERO, 0.0, 64.0, 4.0);
            let obstacle = Obstacle {
                position: Vec2::new(rng.random_range(16.0..26.0), rng.random_range(-0.3..0.3)),
                velocity: Vec2::ZERO,
                radius: rng.random_range(0.6..1.2),
            };
            Scene {
                kind,
                seed,
                lanes: vec![lane],
                obstacles: vec![obstacle],
                ego: ego(rng.random_range(5.0..10.0)),
            }
        }
        ScenarioKind::LeadStop => {
            let lane = straight_lane(Vec2::ZERO, 0.0, 64.0, 1.75);
            let gap = rng.random_range(10.0..30.0);
            let radius = rng.random_range(0.9..1.2);
            let stop = gap - radius - super::EGO_RADIUS - LEAD_BUFFER;
            let vmax = (2.0 * MAX_BRAKE * 0.9 * stop).sqrt().min(12.0);
            Scene {
                kind,
                seed,
                lanes: vec![lane],
                obstacles: vec![Obstacle {
                    position: Vec2::new(gap, 0.0),
                    velocity: Vec2::ZERO,
                    radius,
                }],
                ego: ego(rng.random_range(3.0..vmax)),
            }
        }
    };
    debug_assert!(scene.validate().is_ok());
    scene
}

/// Free space kept between the stopped ego disk and the lead vehicle.
pub const LEAD_BUFFER: f64 = 1.0;
/// Largest deceleration an expert is allowed to use (m/s²).
pub const MAX_BRAKE: f64 = 6.0;
