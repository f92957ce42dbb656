use cfmplan::diffcore::Tensor2;
use cfmplan::flownet::*;
use cfmplan::sampler::*;
use cfmplan::scenario::{
    expert_trajectories, generate_scene, ScenarioKind, Scene, Trajectory, Vec2,
};
use cfmplan::seed;
use cfmplan::vocab::{fps_build, ConstraintAnchor};
use cfmplan::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn fitted() -> Normalizer {
    let trajs: Vec<Trajectory> = (0..40)
        .flat_map(|s| expert_trajectories(&generate_scene(ScenarioKind::ObstacleAvoid, s)).unwrap())
        .map(|(t, _)| t)
        .collect();
    Normalizer::fit(&trajs).unwrap()
}

fn model(dim: usize, jitter: f64) -> VelocityModel {
    let mut m = VelocityModel::new(
        ModelConfig {
            embed_dim: dim,
            condition: ConditionType::Anchor,
            normalizer: Some(fitted()),
            ..ModelConfig::default()
        },
        5,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let names: Vec<String> = m.params.names().map(str::to_string).collect();
    for n in names {
        for v in m.params.get_mut(&n).unwrap().data_mut() {
            *v += jitter * rng.random_range(-1.0..1.0);
        }
    }
    m
}

fn small_cfg() -> SamplerConfig {
    SamplerConfig {
        k: 10,
        k_c: 5,
        refine_steps: 4,
        ..SamplerConfig::default()
    }
}

fn obstacle_scene() -> (Scene, Vec<(Trajectory, usize)>) {
    let s = generate_scene(ScenarioKind::ObstacleAvoid, 4);
    let ex = expert_trajectories(&s).unwrap();
    (s, ex)
}

fn x0_for(seed_value: u64, n: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed_value);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn zero_field_with_everything_off_returns_the_noise() {
    let m = model(16, 0.0);
    let (scene, _) = obstacle_scene();
    let prep = m.prepare(&scene).unwrap();
    let cfg = SamplerConfig { seed: 9, ..small_cfg() };
    let (traj, path) = sample(&m, &prep, &scene, &ConditionSet::unconditional(), None, &cfg).unwrap();
    let expect = m.to_meters(&x0_for(9, 16));
    assert_eq!(traj.flat(), expect);
    assert_eq!(path.states.len(), cfg.k + 1);
    assert_eq!(path.states[0], expect);
    assert_eq!(*path.times.last().unwrap(), 1.0);
}

#[test]
fn plain_chain_matches_an_independent_euler_loop() {
    let m = model(16, 0.05);
    let (scene, ex) = obstacle_scene();
    let prep = m.prepare(&scene).unwrap();
    let conds = ConditionSet::from_anchor(ConditionType::Anchor, &ex[1].0);
    for s in 0..10u64 {
        let cfg = SamplerConfig { seed: s, gamma: 1.5, ..small_cfg() };
        let (traj, _) = sample(&m, &prep, &scene, &conds, None, &cfg).unwrap();
        let mut x = x0_for(s, 16);
        let dt = 1.0 / cfg.k as f64;
        for k in 0..cfg.k {
            let state = FlowState { x: x.clone(), t: k as f64 * dt };
            let v = m.cfg_velocity(&state, &prep, &conds, cfg.gamma).unwrap();
            for (a, b) in x.iter_mut().zip(&v) {
                *a += dt * b;
            }
        }
        let expect = m.to_meters(&x);
        assert_eq!(traj.flat(), expect, "seed {s}");
    }
}

#[test]
fn truncation_places_the_anchor_exactly() {
    let m = model(16, 0.05);
    let (scene, ex) = obstacle_scene();
    let prep = m.prepare(&scene).unwrap();
    let anchor = ConstraintAnchor::external(ex[0].0.clone(), &scene);
    assert!(!anchor.infeasible);
    let cfg = SamplerConfig { cf_enabled: true, seed: 3, ..small_cfg() };
    let (_, path) = sample(
        &m,
        &prep,
        &scene,
        &ConditionSet::unconditional(),
        Some(&anchor),
        &cfg,
    )
    .unwrap();
    assert_eq!(path.states[cfg.k_c], ex[0].0.flat());
    let tr = path.truncation.as_ref().unwrap();
    assert_eq!(tr.index, cfg.k_c);
    assert_eq!(tr.anchor, ex[0].0.flat());
    assert_eq!(path.states.len(), cfg.k + 1);
    assert!(!path.constraints_disabled);
}

#[test]
fn truncation_from_the_zero_field_keeps_the_anchor() {
    let m = model(16, 0.0);
    let (scene, ex) = obstacle_scene();
    let prep = m.prepare(&scene).unwrap();
    let anchor = ConstraintAnchor::external(ex[1].0.clone(), &scene);
    let cfg = SamplerConfig { cf_enabled: true, ..small_cfg() };
    let (traj, _) = sample(&m, &prep, &scene, &ConditionSet::unconditional(), Some(&anchor), &cfg).unwrap();
    // exact up to the meters → model → meters round trip
    assert!(traj.distance(&ex[1].0) < 1e-9);
}

#[test]
fn refinement_lengthens_the_path() {
    let m = model(16, 0.05);
    let (scene, _) = obstacle_scene();
    let prep = m.prepare(&scene).unwrap();
    let on = SamplerConfig { rfe_enabled: true, ..small_cfg() };
    let (_, p) = sample(&m, &prep, &scene, &ConditionSet::unconditional(), None, &on).unwrap();
    assert_eq!(p.states.len(), on.k + on.refine_steps + 1);
    assert!((p.times.last().unwrap() - (1.0 + on.refine_steps as f64 / on.k as f64)).abs() < 1e-12);
    let off = SamplerConfig { rfe_enabled: false, ..on };
    let (_, p) = sample(&m, &prep, &scene, &ConditionSet::unconditional(), None, &off).unwrap();
    assert_eq!(p.states.len(), off.k + 1);
}

#[test]
fn infeasible_anchor_disables_constraints() {
    let m = model(16, 0.05);
    let (scene, _) = obstacle_scene();
    let prep = m.prepare(&scene).unwrap();
    let o = scene.obstacles[0].position;
    let through = Trajectory::new(vec![[o.x, o.y]; 8], 0.5);
    let anchor = ConstraintAnchor::external(through, &scene);
    assert!(anchor.infeasible);
    let cfg = SamplerConfig { cf_enabled: true, cvf_enabled: true, seed: 2, ..small_cfg() };
    let (t_on, p) = sample(&m, &prep, &scene, &ConditionSet::unconditional(), Some(&anchor), &cfg).unwrap();
    assert!(p.constraints_disabled);
    assert!(p.truncation.is_none());
    let plain = SamplerConfig { cf_enabled: false, cvf_enabled: false, ..cfg };
    let (t_off, _) = sample(&m, &prep, &scene, &ConditionSet::unconditional(), None, &plain).unwrap();
    assert_eq!(t_on, t_off);
}

#[test]
fn missing_anchor_is_a_config_error() {
    let m = model(16, 0.0);
    let (scene, _) = obstacle_scene();
    let prep = m.prepare(&scene).unwrap();
    let cfg = SamplerConfig { cvf_enabled: true, ..small_cfg() };
    let r = sample(&m, &prep, &scene, &ConditionSet::unconditional(), None, &cfg);
    assert!(matches!(r, Err(Error::Config(_))));
    let bad = SamplerConfig { k_c: 10, ..small_cfg() };
    let r = sample(&m, &prep, &scene, &ConditionSet::unconditional(), None, &bad);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn non_finite_weights_are_reported_with_the_step() {
    let mut m = model(16, 0.05);
    m.params.get_mut("dec2.b").unwrap().data_mut()[0] = f64::NAN;
    let (scene, _) = obstacle_scene();
    let prep = m.prepare(&scene).unwrap();
    let r = sample(&m, &prep, &scene, &ConditionSet::unconditional(), None, &small_cfg());
    match r {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn batching_does_not_change_chains() {
    let m = model(16, 0.05);
    let (scene, ex) = obstacle_scene();
    let prep = m.prepare(&scene).unwrap();
    let anchor = ConstraintAnchor::external(ex[0].0.clone(), &scene);
    let cfg = SamplerConfig {
        cvf_enabled: true,
        cf_enabled: true,
        rfe_enabled: true,
        ..small_cfg()
    };
    let conds = vec![
        ConditionSet::unconditional(),
        ConditionSet::from_anchor(ConditionType::Anchor, &ex[1].0),
        ConditionSet::unconditional().with_reward(0.9),
    ];
    let seeds = [11, 12, 13];
    let batched = sample_chains(&m, &prep, &scene, &conds, Some(&anchor), &cfg, &seeds).unwrap();
    for i in 0..3 {
        let single = sample_chains(
            &m,
            &prep,
            &scene,
            &conds[i..i + 1],
            Some(&anchor),
            &cfg,
            &seeds[i..i + 1],
        )
        .unwrap();
        assert_eq!(batched[i].0, single[0].0);
        assert_eq!(batched[i].1, single[0].1);
    }
}

#[test]
fn refinement_never_raises_the_energy() {
    let m = model(16, 0.08);
    let (scene, ex) = obstacle_scene();
    let prep = m.prepare(&scene).unwrap();
    let conds = ConditionSet::unconditional();
    let cfg = SamplerConfig { eta_scale: 50.0, ..small_cfg() };
    let start = ex[0].0.translated(0.0, 1.5);
    let e = |t: &Trajectory| {
        energy(
            &m,
            &SceneInput::Prepared(&prep),
            &scene,
            &Tensor2::row(m.to_flow(&t.flat())),
            std::slice::from_ref(&conds),
        )
        .unwrap()
        .0[0]
    };
    let out = refine_only(&m, &prep, &scene, &start, &conds, 10, &cfg).unwrap();
    assert!(e(&out) <= e(&start));
    assert_ne!(out, start);
}

#[test]
fn zero_energy_is_a_fixed_point() {
    let m = model(16, 0.0);
    let (scene, ex) = obstacle_scene();
    let prep = m.prepare(&scene).unwrap();
    let out = refine_only(&m, &prep, &scene, &ex[0].0, &ConditionSet::unconditional(), 5, &small_cfg()).unwrap();
    assert!(out.distance(&ex[0].0) < 1e-9);
    assert!(matches!(
        refine_only(&m, &prep, &scene, &ex[0].0, &ConditionSet::unconditional(), 0, &small_cfg()),
        Err(Error::Config(_))
    ));
}

#[test]
fn multimodal_sampling_covers_the_vocabulary() {
    let m = model(16, 0.05);
    let trajs: Vec<Trajectory> = (0..20)
        .flat_map(|s| expert_trajectories(&generate_scene(ScenarioKind::Fork, s)).unwrap())
        .map(|(t, _)| t)
        .collect();
    let vocab = fps_build(&trajs, 6).unwrap();
    let scene = generate_scene(ScenarioKind::Fork, 99);
    let prep = m.prepare(&scene).unwrap();
    let cfg = SamplerConfig { cf_enabled: true, seed: 4, ..small_cfg() };
    let a = sample_multimodal(&m, &prep, &scene, &vocab, &cfg).unwrap();
    let b = sample_multimodal(&m, &prep, &scene, &vocab, &cfg).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|(_, i)| *i).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
}

/// `E(x, y) = (x² − 1)² + y²/2`.
struct DoubleWell;

impl EnergyFn for DoubleWell {
    fn energy_and_grad(&self, x: &Tensor2) -> cfmplan::Result<(Vec<f64>, Tensor2)> {
        let mut e = Vec::with_capacity(x.rows());
        let mut g = Tensor2::zeros(x.rows(), 2);
        for r in 0..x.rows() {
            let (a, b) = (x.get(r, 0), x.get(r, 1));
            e.push((a * a - 1.0).powi(2) + 0.5 * b * b);
            g.set(r, 0, 4.0 * a * (a * a - 1.0));
            g.set(r, 1, b);
        }
        Ok((e, g))
    }
}

#[test]
fn langevin_refinement_reaches_the_boltzmann_marginal() {
    let chains = 10_000;
    let eps = 0.5;
    let cfg = SamplerConfig {
        k: 100,
        langevin: true,
        eta_scale: 1.0,
        ..SamplerConfig::default()
    };
    let mut rng = seed::rng(1);
    let start: Vec<f64> = (0..2 * chains).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = Tensor2::from_vec(chains, 2, start).unwrap();
    let seeds: Vec<u64> = (0..chains as u64).map(|i| seed::derive(21, i)).collect();
    let out = refine_with(&DoubleWell, &x, 3000, &cfg, 0.8, eps, &seeds).unwrap();

    let (lo, hi, bins) = (-2.5f64, 2.5f64, 25usize);
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0.0; bins];
    for r in 0..chains {
        let b = ((out.get(r, 0) - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            hist[b as usize] += 1.0 / chains as f64;
        }
    }
    // reference marginal in x by midpoint quadrature
    let fine = 200;
    let density = |a: f64| (-(a * a - 1.0).powi(2) / eps).exp();
    let mut mass = vec![0.0; bins];
    for (b, m) in mass.iter_mut().enumerate() {
        for j in 0..fine {
            let a = lo + width * (b as f64 + (j as f64 + 0.5) / fine as f64);
            *m += density(a) * width / fine as f64;
        }
    }
    let z: f64 = mass.iter().sum();
    let tv: f64 = 0.5 * hist.iter().zip(&mass).map(|(h, m)| (h - m / z).abs()).sum::<f64>();
    assert!(tv < 0.1, "total variation {tv}");
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #[test]
    fn corrected_norm_identity(
        v in prop::collection::vec(-5.0f64..5.0, 6),
        c in prop::collection::vec(-5.0f64..5.0, 6),
        lambda in 0.0f64..1.0,
    ) {
        prop_assume!(dot(&c, &c).sqrt() > 1e-3);
        let out = cvf_correct(&v, &c, lambda).unwrap();
        let nc = dot(&c, &c).sqrt();
        let proj = dot(&v, &c) / nc;
        let expect = dot(&v, &v) - 4.0 * lambda * (1.0 - lambda) * proj * proj;
        prop_assert!((dot(&out, &out) - expect).abs() <= 1e-9 * (1.0 + dot(&v, &v)));
    }

    #[test]
    fn orthogonal_velocity_is_unchanged(a in -5.0f64..5.0, b in -5.0f64..5.0, lambda in 0.0f64..1.0) {
        prop_assume!(b.abs() > 1e-6);
        let out = cvf_correct(&[a, 0.0], &[0.0, b], lambda).unwrap();
        prop_assert_eq!(out, vec![a, 0.0]);
    }

    #[test]
    fn reference_scales_with_the_anchor(x in prop::collection::vec(-2.0f64..2.0, 4), s in 0.1f64..4.0) {
        let anchor = [1.0, -1.0, 0.5, 2.0];
        let far: Vec<f64> = anchor.iter().zip(&x).map(|(a, x0)| x0 + s * (a - x0)).collect();
        let r1 = cvf_reference(&x, &anchor);
        let r2 = cvf_reference(&x, &far);
        for (p, q) in r1.iter().zip(&r2) {
            prop_assert!((s * p - q).abs() < 1e-9);
        }
    }
}

#[test]
fn correction_pulls_toward_or_away_per_sign() {
    let v = [1.0, 1.0];
    let c = [1.0, 0.0];
    let paper = cvf_correct_signed(&v, &c, 0.25, CvfSign::Paper).unwrap();
    assert_eq!(paper, vec![0.5, 1.0]);
    let attract = cvf_correct_signed(&v, &c, 0.25, CvfSign::Attract).unwrap();
    assert_eq!(attract, vec![1.0, 0.5]);
    let _ = Vec2::ZERO;
}
