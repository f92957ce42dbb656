use cfmplan_demo::{correct_velocity, scene_view, score_plan};

#[test]
fn scene_view_lists_experts() {
    let v: serde_json::Value = serde_json::from_str(&scene_view("fork", 3).unwrap()).unwrap();
    assert_eq!(v["experts"].as_array().unwrap().len(), 2);
    assert_eq!(v["scene"]["kind"], "fork");
    assert!(scene_view("roundabout", 0).is_err());
}

#[test]
fn expert_plan_scores_clean() {
    let v: serde_json::Value = serde_json::from_str(&scene_view("obstacle_avoid", 5).unwrap()).unwrap();
    let flat: Vec<f64> = v["experts"][0]["waypoints"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|w| w.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()))
        .collect();
    let s: serde_json::Value = serde_json::from_str(&score_plan("obstacle_avoid", 5, &flat).unwrap()).unwrap();
    assert_eq!(s["collision"], false);
    assert_eq!(s["on_road"], true);
    assert_eq!(s["constraints"]["collision"], 0.0);
    assert!(score_plan("obstacle_avoid", 5, &flat[..4]).is_err());
}

#[test]
fn parallel_velocity_flips_at_one_half() {
    let out = correct_velocity([1.0, 0.0], [1.0, 0.0], 0.5).unwrap();
    assert!(out[0].abs() < 1e-12 && out[1].abs() < 1e-12);
    let same = correct_velocity([0.0, 2.0], [1.0, 0.0], 0.3).unwrap();
    assert_eq!(same, [0.0, 2.0]);
    assert!(correct_velocity([1.0, 0.0], [1.0, 0.0], 1.5).is_none());
}
