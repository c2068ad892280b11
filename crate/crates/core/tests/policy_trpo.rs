use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safelayer::policy::{gaussian_log_prob, PolicyParams};
use safelayer::trpo::{
    fisher_vector_product, policy_gradient, surrogate_loss, Batch, EpisodeEnd, Segment, Trpo,
    TrpoConfig, Updater,
};

fn tiny(seed: u64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = PolicyParams::init(2, 2, &[3], -0.3, &mut rng);
    p.mean = p.mean_net().init(&mut rng, 1.0, 1.0);
    p
}

fn random_obs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn perturbed(p: &PolicyParams, dir: &[f64], h: f64) -> PolicyParams {
    let mut q = p.clone();
    let v: Vec<f64> = p.policy_vector().iter().zip(dir).map(|(a, b)| a + h * b).collect();
    q.set_policy_vector(&v);
    q
}

#[test]
fn fisher_product_matches_kl_hessian() {
    let p = tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let obs = random_obs(&mut rng, 7, 2);
    let n = p.n_policy_params();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fv = fisher_vector_product(&p, &obs, &v);

    // e_kᵀ H v from the mixed second difference of KL(p ‖ ·).
    let h = 1e-4;
    let kl = |a: f64, ek: usize, b: f64| {
        let mut dir = v.iter().map(|x| b * x).collect::<Vec<_>>();
        dir[ek] += a;
        p.kl(&perturbed(&p, &dir, 1.0), &obs).unwrap()
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..n {
        let hv = (kl(h, k, h) - kl(h, k, -h) - kl(-h, k, h) + kl(-h, k, -h)) / (4.0 * h * h);
        num += (hv - fv[k]).powi(2);
        den += fv[k].powi(2);
    }
    let rel = (num / den).sqrt();
    assert!(rel < 1e-4, "relative error {rel}");
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let p = tiny(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let obs = random_obs(&mut rng, 9, 2);
    let acts = random_obs(&mut rng, 9, 2);
    let adv: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
    let g = policy_gradient(&p, &obs, &acts, &adv);
    let h = 1e-6;
    for k in 0..p.n_policy_params() {
        let mut e = vec![0.0; p.n_policy_params()];
        e[k] = 1.0;
        let fp = surrogate_loss(&perturbed(&p, &e, h), &p, &obs, &acts, &adv);
        let fm = surrogate_loss(&perturbed(&p, &e, -h), &p, &obs, &acts, &adv);
        let fd = (fp - fm) / (2.0 * h);
        let tol = 1e-4 * fd.abs().max(1e-3);
        assert!((fd - g[k]).abs() < tol, "param {k}: fd {fd} analytic {}", g[k]);
    }
    let mean_adv = adv.iter().sum::<f64>() / 9.0;
    assert!((surrogate_loss(&p, &p, &obs, &acts, &adv) - mean_adv).abs() < 1e-14);
    assert_eq!(surrogate_loss(&p, &tiny(9), &obs, &acts, &[0.0; 9]), 0.0);
}

#[test]
fn sample_statistics() {
    let p = tiny(5);
    let obs = [0.2, -0.4];
    let out = p.forward(&obs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 100_000;
    let mut sum = [0.0; 2];
    for _ in 0..n {
        let (a, lp) = p.sample(&obs, &mut rng).unwrap();
        let check = gaussian_log_prob(&out.mean, &p.log_std, &a);
        assert!((lp - check).abs() < 1e-10);
        assert!((lp - p.log_prob(&obs, &a).unwrap()).abs() < 1e-10);
        sum[0] += a[0];
        sum[1] += a[1];
    }
    for k in 0..2 {
        let bound = 3.0 * out.std[k] / (n as f64).sqrt();
        assert!((sum[k] / n as f64 - out.mean[k]).abs() < bound);
    }

    let mut sharp = p.clone();
    sharp.log_std = vec![-20.0; 2];
    let (a, _) = sharp.sample(&obs, &mut rng).unwrap();
    assert!((a[0] - out.mean[0]).abs() < 1e-7 && (a[1] - out.mean[1]).abs() < 1e-7);
}

#[test]
fn kl_of_shifted_mean() {
    let mut p = PolicyParams::zeros(2, 2, &[4]);
    let obs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let mut q = p.clone();
    // Output bias sits at the end of the mean vector.
    let nm = q.mean.len();
    q.mean[nm - 2] = 0.3;
    q.mean[nm - 1] = -0.4;
    assert!((p.kl(&q, &obs).unwrap() - 0.125).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        p = PolicyParams::init(2, 2, &[4], rng.random_range(-2.0..1.0), &mut rng);
        q = PolicyParams::init(2, 2, &[4], rng.random_range(-2.0..1.0), &mut rng);
        assert!(p.kl(&q, &obs).unwrap() >= 0.0);
    }
}

#[test]
fn heads_share_no_parameters() {
    let p = tiny(8);
    let obs = [0.3, 0.1];
    let base = p.forward(&obs).unwrap();
    let mut q = p.clone();
    q.value.iter_mut().for_each(|v| *v += 0.5);
    let out = q.forward(&obs).unwrap();
    assert_eq!(out.mean, base.mean);
    assert_ne!(out.value, base.value);
    let mut r = p.clone();
    r.mean.iter_mut().for_each(|v| *v += 0.5);
    assert_eq!(r.forward(&obs).unwrap().value, base.value);
}

fn random_batch(p: &PolicyParams, seed: u64, n: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observations = random_obs(&mut rng, n, p.obs_dim());
    let actions = observations
        .iter()
        .map(|o| p.sample(o, &mut rng).unwrap().0)
        .collect();
    let rewards = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let values = observations.iter().map(|o| p.state_value(o).unwrap()).collect();
    Batch {
        observations,
        actions,
        rewards,
        values,
        segments: vec![
            Segment { len: n / 2, end: EpisodeEnd::Terminated },
            Segment { len: n - n / 2, end: EpisodeEnd::Truncated { bootstrap: 0.5 } },
        ],
    }
}

#[test]
fn update_respects_trust_region_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p0 = PolicyParams::init(5, 2, &[32, 32], -1.0, &mut rng);
    let batch = random_batch(&p0, 11, 300);
    let config = TrpoConfig::default();
    let mut a = p0.clone();
    let stats = Trpo::new(config.clone()).unwrap().update(&mut a, &batch).unwrap();
    let kl = p0.kl(&a, &batch.observations).unwrap();
    assert!(kl <= config.delta_kl + 1e-5, "kl {kl}");
    assert!((kl - stats.mean_kl).abs() < 1e-12);
    if stats.accepted {
        assert!(stats.surrogate_improvement > 0.0);
    }
    let mut b = p0.clone();
    Trpo::new(config).unwrap().update(&mut b, &batch).unwrap();
    assert_eq!(a, b);
}

#[test]
fn share_shrinks_the_trust_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p0 = PolicyParams::init(5, 2, &[32, 32], -1.0, &mut rng);
    let batch = random_batch(&p0, 15, 300);
    let config = TrpoConfig::default();
    let mut p = p0.clone();
    let stats = Trpo::new(config.clone()).unwrap().update_share(&mut p, &batch, 0.5).unwrap();
    assert!(stats.accepted);
    assert!(p0.kl(&p, &batch.observations).unwrap() <= 0.5 * config.delta_kl + 1e-5);
}

#[test]
fn zero_advantage_leaves_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p0 = PolicyParams::init(3, 2, &[8], -1.0, &mut rng);
    let mut batch = random_batch(&p0, 13, 40);
    // Rewards equal to values with γ = 0 give identically zero advantages.
    batch.rewards = batch.values.clone();
    let config = TrpoConfig {
        gamma: 0.0,
        ..TrpoConfig::default()
    };
    let mut p = p0.clone();
    let stats = Trpo::new(config).unwrap().update(&mut p, &batch).unwrap();
    assert!(!stats.accepted);
    assert_eq!(p, p0);
}

#[test]
fn bandit_reward_improves() {
    // One-step episodes, reward −(a − 2)²; the policy mean is w·1 + b.
    let mut p = PolicyParams::zeros(1, 1, &[]);
    assert_eq!(p.mean.len(), 2);
    let expected = |p: &PolicyParams| {
        let m = p.action_mean(&[1.0]).unwrap()[0];
        -(m - 2.0).powi(2) - (2.0 * p.log_std[0]).exp()
    };
    let initial = expected(&p);
    let mut trpo = Trpo::new(TrpoConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let n = 256;
        let mut batch = Batch::default();
        for _ in 0..n {
            let (a, _) = p.sample(&[1.0], &mut rng).unwrap();
            batch.rewards.push(-(a[0] - 2.0).powi(2));
            batch.actions.push(a);
            batch.observations.push(vec![1.0]);
            batch.values.push(p.state_value(&[1.0]).unwrap());
            batch.segments.push(Segment { len: 1, end: EpisodeEnd::Terminated });
        }
        trpo.update(&mut p, &batch).unwrap();
    }
    let last = expected(&p);
    assert!(last > initial + 2.0, "expected reward {initial} -> {last}");
}
