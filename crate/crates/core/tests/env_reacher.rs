use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safelayer::env::{layout, EnvConfig, Reacher2d};
use safelayer::robot::LinkPair;

#[test]
fn resets_never_start_in_contact() {
    let mut env = Reacher2d::new(EnvConfig::default(), 11).unwrap();
    let robot = env.config().robot.clone();
    let r = env.config().sample_half_range;
    for _ in 0..10_000 {
        let obs = env.reset().unwrap();
        assert_eq!(obs.len(), layout::LEN);
        assert!(obs.iter().all(|v| v.is_finite()));
        assert!(robot.min_distance(env.theta(), &env.obstacle()) > 0.0);
        let (t, o) = (env.target(), env.obstacle().center);
        assert!(t.x.abs() <= r && t.y.abs() <= r && o.x.abs() <= r && o.y.abs() <= r);
        assert_eq!(env.theta(), Vector2::zeros());
    }
}

#[test]
fn observation_matches_robot_queries() {
    let mut env = Reacher2d::new(EnvConfig::default(), 12).unwrap();
    let robot = env.config().robot.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    env.reset().unwrap();
    for _ in 0..200 {
        let a = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
        let step = env.step(&a).unwrap();
        let s = &step.observation;
        let theta = env.theta();
        let (p_fa, p_ee) = robot.forward_kinematics(theta);
        assert_eq!(&s[layout::FOREARM_BASE..layout::FOREARM_BASE + 3], p_fa.as_slice());
        assert_eq!(&s[layout::END_EFFECTOR..layout::END_EFFECTOR + 3], p_ee.as_slice());
        assert_eq!(s[layout::THETA_ELBOW], theta[1]);
        let (h, c) = robot.mass_matrix_and_bias(theta, env.theta_dot());
        for r in 0..2 {
            for k in 0..8 {
                assert_eq!(s[layout::MASS_ROWS + 8 * r + k], h[(r, k)]);
            }
            assert_eq!(s[layout::BIAS + r], c[r]);
        }
        for (i, pair) in LinkPair::ALL.into_iter().enumerate() {
            let cp = robot.closest_pair(theta, &env.obstacle(), pair);
            assert_eq!(s[layout::PAIRS + layout::PAIR_STRIDE * i], cp.distance);
        }
        let min = LinkPair::ALL
            .iter()
            .map(|&p| robot.closest_pair(theta, &env.obstacle(), p).distance)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(step.info.min_distance, min);
        if step.terminated || step.truncated {
            env.reset().unwrap();
        }
    }
}

#[test]
fn reward_decomposes_into_its_terms() {
    let config = EnvConfig {
        beta_coll: 3.0,
        ..EnvConfig::default()
    };
    let mut env = Reacher2d::new(config.clone(), 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut seen = [false; 3];
    for _ in 0..300 {
        env.reset().unwrap();
        // Aim at the target half the time so the proximity bonus shows up.
        let toward = rng.random_bool(0.5);
        loop {
            let a = if toward {
                let t = env.target();
                let phi = t.y.atan2(t.x);
                let reach = t.norm().min(0.199);
                let elbow = (reach * reach / 0.02 - 1.0).clamp(-1.0, 1.0).acos();
                let want = Vector2::new(phi - elbow / 2.0, elbow);
                let d = want - env.theta();
                [d[0].clamp(-0.06, 0.06), d[1].clamp(-0.06, 0.06)]
            } else {
                [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]
            };
            let s = env.step(&a).unwrap();
            let i = s.info;
            assert_eq!(s.reward, i.r_dist + i.r_coll + i.r_prox);
            assert_eq!(i.r_dist, -i.target_distance);
            assert_eq!(i.collision, i.min_distance <= 0.0);
            assert_eq!(i.r_coll, if i.collision { -20.0 * 3.0 } else { 0.0 });
            assert_eq!(i.r_prox, if i.target_distance <= 0.03 { 2.0 } else { 0.0 });
            assert_eq!(s.terminated, i.collision);
            seen[0] |= i.collision;
            seen[1] |= i.r_prox > 0.0;
            seen[2] |= s.truncated;
            if s.terminated || s.truncated {
                assert!(s.terminated != s.truncated);
                break;
            }
        }
    }
    assert_eq!(seen, [true; 3], "collision, proximity and truncation all exercised");
}
