//! Smooth constraint penalties for a trajectory in a scene.
//!
//! Each term uses `ψ(z) = max(0, sp(z) − sp(−m))` with `sp(z) = ln(1 + e^{βz}) / β`:
//! exactly zero while the underlying hard check holds with margin `m`,
//! continuous everywhere and differentiable away from `z = −m`.

use serde::{Deserialize, Serialize};

use super::geometry::Vec2;
use super::scene::Scene;
use super::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintParams {
    pub v_max: f64,
    pub kappa_max: f64,
    pub ego_radius: f64,
    pub sharpness: f64,
    pub distance_margin: f64,
    pub speed_margin: f64,
    pub curvature_margin: f64,
    /// Regulariser (m²) inside the segment norms of the curvature estimate.
    pub curvature_eps: f64,
}

impl Default for ConstraintParams {
    fn default() -> Self {
        Self {
            v_max: super::V_MAX,
            kappa_max: super::KAPPA_MAX,
            ego_radius: super::EGO_RADIUS,
            sharpness: 4.0,
            distance_margin: 0.25,
            speed_margin: 0.5,
            curvature_margin: 0.05,
            curvature_eps: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintScore {
    pub collision: f64,
    pub road_departure: f64,
    pub kinematic: f64,
}

impl ConstraintScore {
    pub fn total(&self) -> f64 {
        self.collision + self.road_departure + self.kinematic
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.collision, self.road_departure, self.kinematic]
    }

    pub fn is_zero(&self) -> bool {
        self.total() == 0.0
    }
}

fn softplus(z: f64, beta: f64) -> f64 {
    let bz = beta * z;
    if bz > 30.0 {
        z
    } else {
        bz.exp().ln_1p() / beta
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Margin-shifted softplus and its derivative.
pub fn penalty(z: f64, margin: f64, beta: f64) -> (f64, f64) {
    if z <= -margin {
        return (0.0, 0.0);
    }
    let v = softplus(z, beta) - softplus(-margin, beta);
    (v.max(0.0), sigmoid(beta * z))
}

/// Penalties and their gradient with respect to the flattened waypoints.
#[derive(Debug, Clone)]
pub struct ConstraintEval {
    pub score: ConstraintScore,
    /// 3 rows (collision, road, kinematic) of `2T` partial derivatives.
    pub jacobian: [Vec<f64>; 3],
}

pub fn constraint_eval(traj: &Trajectory, scene: &Scene) -> ConstraintScore {
    evaluate(&traj.flat(), traj.dt, scene, &ConstraintParams::default()).score
}

/// Distance from `p` to the nearest lane centerline minus that lane's
/// half-width, with the unit gradient of the distance.
pub fn road_excess(p: Vec2, scene: &Scene) -> (f64, Vec2) {
    let mut best = (f64::INFINITY, Vec2::ZERO);
    for lane in &scene.lanes {
        let proj = lane.centerline.project(p);
        let z = proj.distance - lane.half_width;
        if z < best.0 {
            let dir = if proj.distance > 0.0 {
                (p - proj.closest).scale(1.0 / proj.distance)
            } else {
                Vec2::ZERO
            };
            best = (z, dir);
        }
    }
    best
}

pub fn evaluate(flat: &[f64], dt: f64, scene: &Scene, cp: &ConstraintParams) -> ConstraintEval {
    let n = flat.len() / 2;
    let beta = cp.sharpness;
    let pt = |i: usize| -> Vec2 {
        if i == 0 {
            Vec2::ZERO
        } else {
            Vec2::new(flat[2 * (i - 1)], flat[2 * (i - 1) + 1])
        }
    };
    let mut score = ConstraintScore::default();
    let mut jac = [vec![0.0; 2 * n], vec![0.0; 2 * n], vec![0.0; 2 * n]];
    // index of waypoint i (1-based, 0 = ego origin) in the flat gradient
    let add = |row: &mut Vec<f64>, i: usize, g: Vec2| {
        if i > 0 {
            row[2 * (i - 1)] += g.x;
            row[2 * (i - 1) + 1] += g.y;
        }
    };

    for i in 1..=n {
        let p = pt(i);
        let t = i as f64 * dt;
        for o in &scene.obstacles {
            let diff = p - o.at(t);
            let d = diff.norm();
            let (v, dv) = penalty(o.radius + cp.ego_radius - d, cp.distance_margin, beta);
            score.collision += v;
            if dv != 0.0 && d > 0.0 {
                add(&mut jac[0], i, diff.scale(-dv / d));
            }
        }

        let (z, dir) = road_excess(p, scene);
        let (v, dv) = penalty(z, cp.distance_margin, beta);
        score.road_departure += v;
        if dv != 0.0 {
            add(&mut jac[1], i, dir.scale(dv));
        }

        let seg = p - pt(i - 1);
        let len = seg.norm();
        let (v, dv) = penalty(len / dt - cp.v_max, cp.speed_margin, beta);
        score.kinematic += v;
        if dv != 0.0 && len > 0.0 {
            let g = seg.scale(dv / (dt * len));
            add(&mut jac[2], i, g);
            add(&mut jac[2], i - 1, g.scale(-1.0));
        }
    }

    for i in 1..n {
        let (p0, p1, p2) = (pt(i - 1), pt(i), pt(i + 1));
        let (a, b) = (p1 - p0, p2 - p1);
        let c = a + b;
        let (na, nb, nc) = (
            (a.dot(a) + cp.curvature_eps).sqrt(),
            (b.dot(b) + cp.curvature_eps).sqrt(),
            (c.dot(c) + cp.curvature_eps).sqrt(),
        );
        let den = na * nb * nc;
        let kappa = 2.0 * a.cross(b) / den;
        let (v1, d1) = penalty(kappa - cp.kappa_max, cp.curvature_margin, beta);
        let (v2, d2) = penalty(-kappa - cp.kappa_max, cp.curvature_margin, beta);
        score.kinematic += v1 + v2;
        let dk = d1 - d2;
        if dk != 0.0 {
            // κ = N / D with N = 2 a×b, D = |a||b||a+b| (regularised)
            let dn_da = Vec2::new(2.0 * b.y, -2.0 * b.x);
            let dn_db = Vec2::new(-2.0 * a.y, 2.0 * a.x);
            let dd_da = (a.scale(1.0 / (na * na)) + c.scale(1.0 / (nc * nc))).scale(den);
            let dd_db = (b.scale(1.0 / (nb * nb)) + c.scale(1.0 / (nc * nc))).scale(den);
            let dk_da = (dn_da - dd_da.scale(kappa)).scale(dk / den);
            let dk_db = (dn_db - dd_db.scale(kappa)).scale(dk / den);
            add(&mut jac[2], i - 1, dk_da.scale(-1.0));
            add(&mut jac[2], i, dk_da - dk_db);
            add(&mut jac[2], i + 1, dk_db);
        }
    }

    ConstraintEval {
        score,
        jacobian: jac,
    }
}

/// Hard checks used by the evaluation metrics.
pub fn hard_collision(traj: &Trajectory, scene: &Scene, steps: usize, ego_radius: f64) -> bool {
    (0..steps.min(traj.len())).any(|i| {
        let t = (i + 1) as f64 * traj.dt;
        let p = traj.point(i);
        scene
            .obstacles
            .iter()
            .any(|o| p.dist(o.at(t)) < o.radius + ego_radius)
    })
}

pub fn road_compliant(traj: &Trajectory, scene: &Scene) -> bool {
    (0..traj.len()).all(|i| road_excess(traj.point(i), scene).0 <= 0.0)
}
