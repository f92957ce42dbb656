//! WebAssembly bindings for the static page in `www/`.
//!
//! Everything crosses the boundary as JSON text or plain numbers so the page
//! needs no bundler.

use cfmplan::sampler::{cvf_correct, epsilon_schedule};
use cfmplan::scenario::{
    constraint_eval, ep_reward, expert_trajectories, generate_scene, hard_collision,
    road_compliant, ConstraintScore, ScenarioKind, Scene, Trajectory, DT, EGO_RADIUS, HORIZON,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct SceneView {
    scene: Scene,
    experts: Vec<Trajectory>,
}

#[derive(Serialize)]
struct PlanScore {
    constraints: ConstraintScore,
    collision: bool,
    on_road: bool,
    progress: f64,
}

fn scene_of(kind: &str, seed: u32) -> Result<Scene, String> {
    let kind: ScenarioKind = kind.parse().map_err(|e: cfmplan::Error| e.to_string())?;
    Ok(generate_scene(kind, seed as u64).rounded())
}

/// Scene geometry plus its expert demonstrations.
pub fn scene_view(kind: &str, seed: u32) -> Result<String, String> {
    let scene = scene_of(kind, seed)?;
    let experts = expert_trajectories(&scene)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    Ok(serde_json::to_string(&SceneView { scene, experts }).expect("scene json"))
}

/// Scores a plan given as `[x0, y0, x1, y1, ...]` (meters, ego frame).
pub fn score_plan(kind: &str, seed: u32, flat: &[f64]) -> Result<String, String> {
    if flat.len() != 2 * HORIZON {
        return Err(format!("expected {} numbers, got {}", 2 * HORIZON, flat.len()));
    }
    let scene = scene_of(kind, seed)?;
    let traj = Trajectory::from_flat(flat, DT).map_err(|e| e.to_string())?;
    let s = PlanScore {
        constraints: constraint_eval(&traj, &scene),
        collision: hard_collision(&traj, &scene, HORIZON, EGO_RADIUS),
        on_road: road_compliant(&traj, &scene),
        progress: ep_reward(&traj, &scene).value(),
    };
    Ok(serde_json::to_string(&s).expect("score json"))
}

/// Velocity correction of a 2-D `v` against reference `c`; returns `[x, y]`.
pub fn correct_velocity(v: [f64; 2], c: [f64; 2], lambda: f64) -> Option<[f64; 2]> {
    if !(0.0..1.0).contains(&lambda) {
        return None;
    }
    cvf_correct(&v, &c, lambda).map(|o| [o[0], o[1]])
}

#[wasm_bindgen(js_name = sceneView)]
pub fn scene_view_js(kind: &str, seed: u32) -> Result<String, JsError> {
    scene_view(kind, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = scorePlan)]
pub fn score_plan_js(kind: &str, seed: u32, flat: &[f64]) -> Result<String, JsError> {
    score_plan(kind, seed, flat).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = correctVelocity)]
pub fn correct_velocity_js(vx: f64, vy: f64, cx: f64, cy: f64, lambda: f64) -> Vec<f64> {
    correct_velocity([vx, vy], [cx, cy], lambda).map_or_else(Vec::new, |o| o.to_vec())
}

/// Energy weight ε(t) used by the refinement phase.
#[wasm_bindgen]
pub fn epsilon(t: f64, tau_star: f64, eps_max: f64) -> f64 {
    epsilon_schedule(t, tau_star, eps_max)
}

#[wasm_bindgen]
pub fn horizon() -> usize {
    HORIZON
}
