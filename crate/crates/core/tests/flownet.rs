use cfmplan::diffcore::{Adam, Tensor2};
use cfmplan::flownet::*;
use cfmplan::scenario::{
    expert_trajectories, generate_scene, scene_tokens, Command, ScenarioKind, Trajectory, Vec2,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(kind: ConditionType, dim: usize) -> VelocityModel {
    VelocityModel::new(
        ModelConfig {
            embed_dim: dim,
            condition: kind,
            ..ModelConfig::default()
        },
        11,
    )
    .unwrap()
}

/// Adds noise to every block so zero-initialised layers become active.
fn jitter(model: &mut VelocityModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for n in names {
        for v in model.params.get_mut(&n).unwrap().data_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
}

fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn anchor_conds(scene_seed: u64) -> ConditionSet {
    let scene = generate_scene(ScenarioKind::Fork, scene_seed);
    let ex = expert_trajectories(&scene).unwrap();
    ConditionSet::from_anchor(ConditionType::Anchor, &ex[0].0).with_reward(0.7)
}

#[test]
fn fresh_model_is_the_zero_field() {
    let m = tiny(ConditionType::Anchor, 16);
    let scene = generate_scene(ScenarioKind::ObstacleAvoid, 3);
    let prep = m.prepare(&scene).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let state = FlowState {
        x: random_row(&mut rng, 16),
        t: 0.3,
    };
    let v = m.velocity(&state, &prep, &anchor_conds(1)).unwrap();
    assert_eq!(v.len(), 16);
    assert!(v.iter().all(|&x| x == 0.0));
}

#[test]
fn encoder_is_deterministic_and_time_separates_grid() {
    let m = tiny(ConditionType::Anchor, 32);
    let x = vec![0.25; 16];
    let a = m.encode_state(&FlowState { x: x.clone(), t: 0.4 }).unwrap();
    let b = m.encode_state(&FlowState { x: x.clone(), t: 0.4 }).unwrap();
    assert_eq!(a, b);
    let k = 100;
    let hs: Vec<Tensor2> = (0..=k)
        .map(|i| {
            m.encode_state(&FlowState {
                x: x.clone(),
                t: i as f64 / k as f64,
            })
            .unwrap()
        })
        .collect();
    for i in 0..hs.len() {
        for j in 0..i {
            assert_ne!(hs[i], hs[j], "t grid points {i} and {j} collide");
        }
    }
}

#[test]
fn zero_encoder_leaves_only_time_projection() {
    let mut m = tiny(ConditionType::Anchor, 16);
    for n in ["enc2.w", "enc2.b"] {
        m.params.get_mut(n).unwrap().data_mut().fill(0.0);
    }
    let t = 0.55;
    let h = m.encode_state(&FlowState { x: vec![3.0; 16], t }).unwrap();
    let emb = cfmplan::diffcore::TimeEmbedding::new(16, m.config.time_base).unwrap();
    let e = Tensor2::row(emb.embed(t));
    let w = m.params.get("time.w").unwrap();
    let mut expect = e.matmul(w).unwrap();
    expect.add_assign(m.params.get("time.b").unwrap());
    assert_eq!(h, expect);
}

#[test]
fn masking_hides_condition_values_exactly() {
    let mut m = tiny(ConditionType::Anchor, 16);
    jitter(&mut m, 2, 0.3);
    let scene = generate_scene(ScenarioKind::Fork, 4);
    let prep = m.prepare(&scene).unwrap();
    let state = FlowState {
        x: vec![0.4; 16],
        t: 0.6,
    };
    let a = ConditionSet {
        intent_mask: true,
        reward_mask: true,
        ..anchor_conds(1)
    };
    let b = ConditionSet {
        intent_mask: true,
        reward_mask: true,
        ..anchor_conds(9).with_reward(0.05)
    };
    let b = ConditionSet {
        intent_mask: true,
        reward_mask: true,
        ..b
    };
    for gamma in [0.0, 1.0, 2.5] {
        assert_eq!(
            m.cfg_velocity(&state, &prep, &a, gamma).unwrap(),
            m.cfg_velocity(&state, &prep, &b, gamma).unwrap()
        );
    }
    let h = m.encode_state(&state).unwrap();
    assert_eq!(m.condition_fuse(&h, &a).unwrap(), m.condition_fuse(&h, &b).unwrap());
    assert_eq!(
        m.condition_fuse(&h, &a).unwrap(),
        m.condition_fuse(&h, &ConditionSet::unconditional()).unwrap()
    );
}

#[test]
fn intent_mask_only_hides_intent() {
    let mut m = tiny(ConditionType::Goal, 16);
    jitter(&mut m, 3, 0.3);
    let prep = m.prepare(&generate_scene(ScenarioKind::Straight, 1)).unwrap();
    let state = FlowState {
        x: vec![0.1; 16],
        t: 0.2,
    };
    let base = ConditionSet {
        goal: Some(Vec2::new(20.0, 1.0)),
        intent_mask: true,
        ..ConditionSet::default()
    }
    .with_reward(0.5);
    let other = ConditionSet {
        goal: Some(Vec2::new(-3.0, 9.0)),
        ..base.clone()
    };
    assert_eq!(
        m.cfg_velocity(&state, &prep, &base, 1.3).unwrap(),
        m.cfg_velocity(&state, &prep, &other, 1.3).unwrap()
    );
    assert_ne!(
        m.cfg_velocity(&state, &prep, &base, 1.0).unwrap(),
        m.cfg_velocity(&state, &prep, &base.clone().with_reward(0.0), 1.0).unwrap()
    );
}

#[test]
fn cfg_is_affine_in_gamma() {
    let mut m = tiny(ConditionType::Command, 16);
    jitter(&mut m, 4, 0.3);
    let prep = m.prepare(&generate_scene(ScenarioKind::Turn, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = ConditionSet {
        command: Some(Command::Left),
        intent_mask: false,
        ..ConditionSet::unconditional()
    };
    for _ in 0..20 {
        let state = FlowState {
            x: random_row(&mut rng, 16),
            t: rng.random_range(0.0..1.0),
        };
        let v0 = m.cfg_velocity(&state, &prep, &c, 0.0).unwrap();
        let v1 = m.cfg_velocity(&state, &prep, &c, 1.0).unwrap();
        assert_eq!(v0, m.velocity(&state, &prep, &c.masked()).unwrap());
        assert_eq!(v1, m.velocity(&state, &prep, &c).unwrap());
        let gamma = rng.random_range(0.0..3.0);
        let vg = m.cfg_velocity(&state, &prep, &c, gamma).unwrap();
        for i in 0..16 {
            assert!((vg[i] - (v0[i] + gamma * (v1[i] - v0[i]))).abs() <= 1e-9);
        }
    }
}

#[test]
fn mismatched_condition_type_is_rejected() {
    let m = tiny(ConditionType::Goal, 16);
    let prep = m.prepare(&generate_scene(ScenarioKind::Straight, 1)).unwrap();
    let state = FlowState {
        x: vec![0.0; 16],
        t: 0.0,
    };
    let err = m.velocity(&state, &prep, &anchor_conds(1)).unwrap_err();
    assert!(matches!(err, cfmplan::Error::Config(_)), "{err}");
}

fn expert_batch(kind: ConditionType, seed: u64, rows: usize) -> (cfmplan::scenario::Scene, FlowBatch) {
    let scene = generate_scene(ScenarioKind::Fork, seed);
    let ex = expert_trajectories(&scene).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x0 = Vec::new();
    let mut x1 = Vec::new();
    let mut ts = Vec::new();
    let mut conds = Vec::new();
    for r in 0..rows {
        let (traj, _) = &ex[r % ex.len()];
        x0.extend((0..16).map(|_| rng.random_range(-1.0..1.0)));
        x1.extend(Normalizer::uniform(16, FLOW_SCALE).to_flow(&traj.flat()));
        ts.push(rng.random_range(0.0..1.0));
        conds.push(ConditionSet::from_anchor(kind, traj).with_reward(0.4));
    }
    (
        scene,
        FlowBatch {
            x0: Tensor2::from_vec(rows, 16, x0).unwrap(),
            x1: Tensor2::from_vec(rows, 16, x1).unwrap(),
            ts,
            conds,
        },
    )
}

#[test]
fn rf_loss_of_zero_field_and_identical_endpoints() {
    let m = tiny(ConditionType::Anchor, 16);
    let (scene, batch) = expert_batch(ConditionType::Anchor, 1, 3);
    let tokens = scene_tokens(&scene);
    let (l, _) = rf_loss(&m, &tokens, &batch).unwrap();
    let mut expect = 0.0;
    for (a, b) in batch.x1.data().iter().zip(batch.x0.data()) {
        expect += (a - b) * (a - b);
    }
    expect /= batch.x0.len() as f64;
    assert!((l - expect).abs() < 1e-12);
    let same = FlowBatch {
        x0: batch.x1.clone(),
        ..batch
    };
    assert_eq!(rf_loss(&m, &tokens, &same).unwrap().0, 0.0);
}

#[test]
fn rf_loss_parameter_gradients_match_finite_differences() {
    let mut m = tiny(ConditionType::Anchor, 4);
    jitter(&mut m, 8, 0.4);
    let (scene, batch) = expert_batch(ConditionType::Anchor, 2, 2);
    let tokens = scene_tokens(&scene);
    let (_, grads) = rf_loss(&m, &tokens, &batch).unwrap();
    let h = 1e-4;
    let mut checked = 0;
    for id in 0..m.params.len() {
        let g = grads.param(id).unwrap().clone();
        for k in 0..g.len() {
            let orig = m.params.value(id).data()[k];
            m.params.value_mut(id).data_mut()[k] = orig + h;
            let lp = rf_loss(&m, &tokens, &batch).unwrap().0;
            m.params.value_mut(id).data_mut()[k] = orig - h;
            let lm = rf_loss(&m, &tokens, &batch).unwrap().0;
            m.params.value_mut(id).data_mut()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.data()[k];
            let scale = fd.abs().max(an.abs());
            assert!(
                (fd - an).abs() <= 1e-4 * scale + 1e-8,
                "{}[{k}]: fd {fd} vs analytic {an}",
                m.params.name(id)
            );
            checked += 1;
        }
    }
    assert!(checked > 200);
}

#[test]
fn rf_loss_overfits_a_single_example() {
    let mut m = tiny(ConditionType::Anchor, 32);
    let (scene, batch) = expert_batch(ConditionType::Anchor, 3, 1);
    let tokens = scene_tokens(&scene);
    let opt = Adam {
        lr: 1e-2,
        ..Adam::default()
    };
    let first = rf_loss(&m, &tokens, &batch).unwrap().0;
    let mut last = first;
    for _ in 0..200 {
        let (l, g) = rf_loss(&m, &tokens, &batch).unwrap();
        last = l;
        m.params.accumulate(&g, 1.0);
        m.params.adam_step(&opt).unwrap();
    }
    assert!(last < 0.01 * first, "{first} -> {last}");
}

#[test]
fn energy_vanishes_for_zero_field_and_is_nonnegative() {
    let m = tiny(ConditionType::Anchor, 16);
    let scene = generate_scene(ScenarioKind::ObstacleAvoid, 5);
    let prep = m.prepare(&scene).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor2::from_vec(4, 16, random_row(&mut rng, 64)).unwrap();
    let conds = vec![ConditionSet::unconditional(); 4];
    let (e, _) = energy(&m, &SceneInput::Prepared(&prep), &scene, &x, &conds).unwrap();
    assert!(e.iter().all(|&v| v == 0.0));

    let mut m = m;
    jitter(&mut m, 7, 0.5);
    let prep = m.prepare(&scene).unwrap();
    let (e, _) = energy(&m, &SceneInput::Prepared(&prep), &scene, &x, &conds).unwrap();
    assert!(e.iter().all(|&v| v >= 0.0));
}

#[test]
fn energy_input_gradient_matches_finite_differences() {
    let mut m = VelocityModel::new(
        ModelConfig {
            embed_dim: 16,
            normalizer: Some(Normalizer {
                mean: (0..16).map(|i| 0.7 * i as f64).collect(),
                scale: (0..16).map(|i| 1.0 + 0.3 * i as f64).collect(),
            }),
            ..ModelConfig::default()
        },
        11,
    )
    .unwrap();
    jitter(&mut m, 9, 0.6);
    m.config.refine_dt = 0.5;
    let scene = generate_scene(ScenarioKind::ObstacleAvoid, 8);
    let prep = m.prepare(&scene).unwrap();
    let sin = SceneInput::Prepared(&prep);
    let conds = vec![ConditionSet::unconditional()];
    // a trajectory through the obstacle so the collision term is active
    let o = scene.obstacles[0].position;
    let meters: Vec<f64> = (1..=8)
        .flat_map(|i| [o.x * i as f64 / 6.0, 0.3 * o.y + 0.05 * i as f64])
        .collect();
    let x = Tensor2::row(m.to_flow(&meters));
    let (e, g) = energy(&m, &sin, &scene, &x, &conds).unwrap();
    assert!(e[0] > 0.0);
    let h = 1e-6;
    for k in 0..16 {
        let mut xp = x.clone();
        xp.data_mut()[k] += h;
        let mut xm = x.clone();
        xm.data_mut()[k] -= h;
        let fd = (energy(&m, &sin, &scene, &xp, &conds).unwrap().0[0]
            - energy(&m, &sin, &scene, &xm, &conds).unwrap().0[0])
            / (2.0 * h);
        let an = g.data()[k];
        assert!(
            (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-9,
            "{k}: {fd} vs {an}"
        );
    }
}

#[test]
fn rfe_loss_zero_cases() {
    let m = tiny(ConditionType::Anchor, 16);
    let scene = generate_scene(ScenarioKind::ObstacleAvoid, 2);
    let tokens = scene_tokens(&scene);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor2::from_vec(2, 16, random_row(&mut rng, 32)).unwrap();
    let b = Tensor2::from_vec(2, 16, random_row(&mut rng, 32)).unwrap();
    let conds = vec![ConditionSet::unconditional(); 2];
    assert_eq!(rfe_loss(&m, &tokens, &scene, &a, &b, &conds).unwrap().0, 0.0);
    let mut m = m;
    jitter(&mut m, 1, 0.5);
    assert_eq!(rfe_loss(&m, &tokens, &scene, &a, &a, &conds).unwrap().0, 0.0);
}

#[test]
fn empirical_mask_rate_matches_p() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let base = ConditionSet::from_anchor(
        ConditionType::Anchor,
        &Trajectory::zeros(8, 0.5),
    )
    .with_reward(0.5);
    let n = 10_000;
    let (mut intent, mut reward) = (0, 0);
    for _ in 0..n {
        let c = base.clone().drop_groups(0.2, &mut rng);
        intent += c.intent_mask as usize;
        reward += c.reward_mask as usize;
    }
    for k in [intent, reward] {
        let f = k as f64 / n as f64;
        assert!((0.18..=0.22).contains(&f), "{f}");
    }
}

#[test]
fn checkpoint_round_trip_keeps_outputs() {
    let mut m = VelocityModel::new(
        ModelConfig {
            embed_dim: 16,
            condition: ConditionType::Goal,
            normalizer: Some(Normalizer {
                mean: (0..16).map(|i| i as f64 / 3.0).collect(),
                scale: vec![1.7; 16],
            }),
            ..ModelConfig::default()
        },
        11,
    )
    .unwrap();
    jitter(&mut m, 5, 0.2);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.bin");
    m.save(&p).unwrap();
    let back = VelocityModel::load(&p).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.blocks(), m.blocks());
    assert_eq!(back.normalizer(), m.normalizer());
    let bytes = std::fs::read(&p).unwrap();
    back.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
}

#[test]
fn normalizer_fit_and_round_trip() {
    let trajs: Vec<Trajectory> = (0..30)
        .flat_map(|s| expert_trajectories(&generate_scene(ScenarioKind::Fork, s)).unwrap())
        .map(|(t, _)| t)
        .collect();
    let n = Normalizer::fit(&trajs).unwrap();
    assert_eq!(n.width(), 16);
    // oracle: two-pass mean and population deviation of coordinate 14
    let xs: Vec<f64> = trajs.iter().map(|t| t.waypoints[7][0]).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    assert!((n.mean[14] - mean).abs() < 1e-9);
    assert!((n.scale[14] - sd).abs() < 1e-9);
    // straight-lane experts never move sideways, so the floor applies
    let straight: Vec<Trajectory> = (0..10)
        .map(|s| expert_trajectories(&generate_scene(ScenarioKind::Straight, s)).unwrap()[0].0.clone())
        .collect();
    assert_eq!(Normalizer::fit(&straight).unwrap().scale[1], MIN_SCALE);
    let back = n.to_meters(&n.to_flow(&trajs[3].flat()));
    for (a, b) in back.iter().zip(trajs[3].flat()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(Normalizer::fit(&[]).is_err());
    let bad = ModelConfig {
        normalizer: Some(Normalizer::uniform(10, 1.0)),
        ..ModelConfig::default()
    };
    assert!(VelocityModel::new(bad, 0).is_err());
}
