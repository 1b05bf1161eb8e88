//! Randomised invariants across the simulator, geometry and policy stack.

use mocap_core::baselines::{rule_based_formation, FormationConfig};
use mocap_core::crowdworld::{
    skeleton_of, step_world, translation_levels, AgentAction, Level, WorldConfig, WorldState,
};
use mocap_core::env::MocapEnv;
use mocap_core::config::RunConfig;
use mocap_core::geometry3d::{
    geman_mcclure, mpjpe, project, triangulate_dlt, triangulate_ransac, CameraIntrinsics, CameraPose, RansacParams,
    Skeleton3D, Vec3, View, NUM_JOINTS,
};
use mocap_core::neural::mdn::{MixtureSpec, MixtureDensityOutput};
use mocap_core::neural::ActionDistribution;
use mocap_core::perception::{broadcast, reconstruct_human, CameraSet, PerceptionConfig, Triangulator};
use mocap_core::safety::{ema_smooth, obstacles_for, oca_filter};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn vec3(r: std::ops::Range<f64>) -> impl Strategy<Value = Vec3> {
    (r.clone(), r.clone(), r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn camera_around(centre: Vec3) -> impl Strategy<Value = CameraPose> {
    (0.0..std::f64::consts::TAU, 2.5f64..8.0, 0.2f64..4.0).prop_map(move |(a, r, h)| {
        CameraPose::looking_at(centre + Vec3::new(r * a.cos(), r * a.sin(), h), centre)
    })
}

fn skeleton() -> impl Strategy<Value = Skeleton3D> {
    prop::collection::vec(vec3(-2.0..2.0), NUM_JOINTS).prop_map(|v| Skeleton3D::new(v.try_into().unwrap()))
}

fn action() -> impl Strategy<Value = AgentAction> {
    (0usize..27, 0usize..3, 0usize..3).prop_map(|(t, p, y)| AgentAction {
        translation: translation_levels(t),
        rotation: [Level::from_index(p), Level::from_index(y)],
    })
}

fn world(cams: usize, humans: usize, seed: u64) -> WorldState {
    let cfg = WorldConfig {
        num_cameras: cams,
        human_count: [humans, humans],
        ..WorldConfig::default()
    };
    let poses = mocap_core::baselines::fixed_formation(cams, &cfg).unwrap();
    WorldState::reset(Arc::new(cfg), seed, &poses)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dlt_round_trip(point in vec3(-1.0..1.0), poses in prop::collection::vec(camera_around(Vec3::zeros()), 2..6)) {
        let intr = CameraIntrinsics::default();
        let views: Vec<View> = poses
            .into_iter()
            .filter_map(|pose| project(&pose, &intr, &point).map(|pixel| View { pose, intrinsics: intr, pixel }))
            .collect();
        prop_assume!(views.len() >= 2);
        let est = triangulate_dlt(&views).unwrap();
        prop_assert!((est - point).norm() < 1e-6, "error {}", (est - point).norm());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn geman_mcclure_monotone(a in 0.0f64..1e4, b in 0.0f64..1e4, c in 1.0f64..200.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(geman_mcclure(lo, c) <= geman_mcclure(hi, c));
    }
}

proptest! {
    #[test]
    fn mpjpe_is_a_metric(a in skeleton(), b in skeleton(), c in skeleton()) {
        prop_assert_eq!(mpjpe(&a, &b), mpjpe(&b, &a));
        prop_assert!(mpjpe(&a, &c) <= mpjpe(&a, &b) + mpjpe(&b, &c) + 1e-9);
        prop_assert_eq!(mpjpe(&a, &a), 0.0);
    }

    #[test]
    fn ransac_without_outliers_no_worse_than_dlt(point in vec3(-2.0..2.0), poses in prop::collection::vec(camera_around(Vec3::zeros()), 3..6), seed in any::<u64>()) {
        let intr = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views: Vec<View> = poses
            .into_iter()
            .filter_map(|pose| {
                project(&pose, &intr, &point).map(|px| View {
                    pose,
                    intrinsics: intr,
                    pixel: px + mocap_core::geometry3d::Pixel::new(
                        rand::Rng::random_range(&mut rng, -1.5..1.5),
                        rand::Rng::random_range(&mut rng, -1.5..1.5),
                    ),
                })
            })
            .collect();
        prop_assume!(views.len() >= 3);
        let residual = |p: &Vec3| views.iter().map(|v| v.reprojection_error(p).unwrap_or(f64::INFINITY).powi(2)).sum::<f64>();
        let dlt = triangulate_dlt(&views).unwrap();
        let ransac = triangulate_ransac(&views, &RansacParams { inlier_threshold: 10.0, iterations: 50 }, &mut rng).unwrap();
        prop_assert!(residual(&ransac) <= residual(&dlt) + 1e-9);
    }

    #[test]
    fn world_is_deterministic_and_contained(seed in any::<u64>(), humans in 1usize..=7, actions in prop::collection::vec(prop::collection::vec(action(), 3), 200)) {
        let mut a = world(3, humans, seed);
        let mut b = world(3, humans, seed);
        let cfg = a.config.clone();
        let [hx, hy] = cfg.half_extent();
        let m = cfg.flight_margin;
        for acts in &actions {
            a = step_world(&a, acts).unwrap();
            b = step_world(&b, acts).unwrap();
            prop_assert_eq!(&a.humans, &b.humans);
            prop_assert_eq!(&a.cameras, &b.cameras);
            prop_assert_eq!(a.humans.iter().filter(|h| h.is_target).count(), 1);
            for h in &a.humans {
                prop_assert!(h.position.x.abs() <= hx && h.position.y.abs() <= hy);
            }
            for c in &a.cameras {
                let p = c.pose.position;
                prop_assert!(p.x.abs() <= hx + m + 1e-9 && p.y.abs() <= hy + m + 1e-9);
                prop_assert!(p.z >= cfg.altitude_range[0] - 1e-9 && p.z <= cfg.altitude_range[1] + 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_reconstruction_any_pair(seed in any::<u64>(), poses in prop::collection::vec(camera_around(Vec3::new(0.0, 0.0, 0.9)), 2..5)) {
        let mut w = world(poses.len(), 1, seed);
        for (c, p) in w.cameras.iter_mut().zip(&poses) {
            c.pose = *p;
        }
        w.humans[0].position = Vec3::zeros();
        let cfg = PerceptionConfig { noise_sigma: 0.0, ..PerceptionConfig::default() };
        let packets = broadcast(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let truth = skeleton_of(&w.humans[0]);
        let n = poses.len();
        for mask in 1u32..(1 << n) {
            let set = CameraSet(mask);
            if set.len() < 2 {
                continue;
            }
            let est = reconstruct_human(&packets, set, 0, &Triangulator::dlt(), None);
            prop_assert!(est.is_some());
            prop_assert!(mpjpe(&est.unwrap().skeleton, &truth) < 1.0);
        }
    }

    #[test]
    fn mixture_weights_normalised(raw in prop::collection::vec(-20.0f64..20.0, 16 * 5)) {
        let m = MixtureDensityOutput::from_raw(MixtureSpec { components: 16, dim: 2 }, &raw);
        prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(m.sigmas.iter().all(|&s| s >= 1e-3));
    }

    #[test]
    fn action_log_probs_normalised(logits in prop::collection::vec(-10.0f64..10.0, 15)) {
        let d = ActionDistribution::from_logits(&logits);
        let mut total = 0.0;
        for t in 0..27 {
            for p in 0..3 {
                for y in 0..3 {
                    let a = AgentAction { translation: translation_levels(t), rotation: [Level::from_index(p), Level::from_index(y)] };
                    total += d.log_prob(&a).exp();
                }
            }
        }
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn oca_filter_idempotent(seed in any::<u64>(), humans in 1usize..=7, a in action(), cam in 0usize..3) {
        let w = world(3, humans, seed);
        let obs = obstacles_for(&w, cam);
        let pose = w.cameras[cam].pose;
        let once = oca_filter(a, &pose, &obs, 0.8);
        prop_assert_eq!(oca_filter(once, &pose, &obs, 0.8), once);
    }

    #[test]
    fn ema_unit_eta_is_identity(seq in prop::collection::vec(prop::array::uniform5(-1.0f64..1.0), 1..50)) {
        let mut prev = [0.0; 5];
        for x in &seq {
            prev = ema_smooth(&prev, x, 1.0);
            prop_assert_eq!(&prev, x);
        }
    }
}

#[test]
fn episode_ends_exactly_at_limit() {
    let mut env = MocapEnv::new(Arc::new(RunConfig::paper().env_config()), 3).unwrap();
    for t in 1..=500 {
        let r = env.step(&vec![AgentAction::IDLE; 3]).unwrap();
        assert_eq!(r.done, t == 500, "step {t}");
    }
}

#[test]
fn observation_length_constant() {
    let mut env = MocapEnv::new(Arc::new(RunConfig::paper().env_config()), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        for o in env.observations() {
            assert_eq!(o.0.len(), 5 * 9 + 7 * 18);
        }
        let acts: Vec<AgentAction> = (0..3)
            .map(|_| AgentAction {
                translation: translation_levels(rand::Rng::random_range(&mut rng, 0..27)),
                rotation: [Level::Zero; 2],
            })
            .collect();
        if env.step(&acts).unwrap().done {
            env.reset();
        }
    }
}

#[test]
fn rule_based_keeps_triangle_on_stationary_target() {
    let mut run = RunConfig::paper();
    run.world.human_count = [1, 1];
    run.world.speed_range = [1e-9, 1e-9];
    run.perception.noise_sigma = 0.0;
    let env_cfg = {
        let mut c = run.env_config();
        c.world.pitch_yaw_mode = mocap_core::crowdworld::PitchYawMode::RuleBased;
        c
    };
    let mut env = MocapEnv::new(Arc::new(env_cfg), 5).unwrap();
    let f = FormationConfig::default();
    for _ in 0..50 {
        let target = env.tracks.get(env.target_id()).map_or(Vec3::zeros(), |t| t.position);
        let poses: Vec<CameraPose> = env.world.cameras.iter().map(|c| c.pose).collect();
        let acts = rule_based_formation(&env.config.world, &poses, &target, &f);
        env.step(&acts).unwrap();
    }
    let t = env.world.target().position;
    let bearings: Vec<f64> = env
        .world
        .cameras
        .iter()
        .map(|c| (c.pose.position.y - t.y).atan2(c.pose.position.x - t.x))
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            let d = mocap_core::geometry3d::wrap_angle(bearings[i] - bearings[j]).abs().to_degrees();
            assert!((d - 120.0).abs() <= 10.0, "cameras {i},{j} at {d:.1} degrees");
        }
    }
}
