use super::scene::Scene;
use crate::diffcore::Tensor2;

pub const TOKEN_DIM: usize = 8;
pub const MAP_SPACING: f64 = 2.0;

/// Raw per-token features fed to the velocity model.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTokens {
    /// One row per obstacle, or a single placeholder row when `agents_null`.
    pub agents: Tensor2,
    /// The scene has no obstacles; the model substitutes its learned null token.
    pub agents_null: bool,
    pub map: Tensor2,
}

/// Agent rows: `(x/20, y/20, vx/10, vy/10, r/2, 1, 0, 0)`.
/// Map rows, lanes resampled every 2 m: `(x/20, y/20, tx, ty, hw/4, lane parity, 1, v/20)`
/// where `v` is the ego speed, so every map token also carries the ego state.
pub fn scene_tokens(scene: &Scene) -> SceneTokens {
    let (agents, agents_null) = if scene.obstacles.is_empty() {
        (Tensor2::zeros(1, TOKEN_DIM), true)
    } else {
        let data = scene
            .obstacles
            .iter()
            .flat_map(|o| {
                [
                    o.position.x / 20.0,
                    o.position.y / 20.0,
                    o.velocity.x / 10.0,
                    o.velocity.y / 10.0,
                    o.radius / 2.0,
                    1.0,
                    0.0,
                    0.0,
                ]
            })
            .collect();
        (
            Tensor2::from_vec(scene.obstacles.len(), TOKEN_DIM, data).expect("agent tokens"),
            false,
        )
    };

    let ego = scene.ego.speed / 20.0;
    let mut map = Vec::new();
    let mut rows = 0;
    for (li, lane) in scene.lanes.iter().enumerate() {
        for (p, t) in lane.centerline.resample(MAP_SPACING) {
            map.extend_from_slice(&[
                p.x / 20.0,
                p.y / 20.0,
                t.x,
                t.y,
                lane.half_width / 4.0,
                (li % 2) as f64,
                1.0,
                ego,
            ]);
            rows += 1;
        }
    }
    SceneTokens {
        agents,
        agents_null,
        map: Tensor2::from_vec(rows, TOKEN_DIM, map).expect("map tokens"),
    }
}
