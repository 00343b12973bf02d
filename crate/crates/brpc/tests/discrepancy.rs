use brpc::discrepancy::*;
use brpc::gaussian::{gram, GaussianState, KernelConfig, SupportSet};
use brpc::seed::rng_from;
use brpc::simulator::SimulatorSpec;
use brpc::stream::Batch;
use brpc::theta::ParticleCloud;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn random_scalars(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Latent covariance with the nugget on coincident points.
fn cov_matrix(a: &SupportSet, b: &SupportSet, kernel: &KernelConfig) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let (p, q) = (a.point(i), b.point(j));
        let same = p.iter().zip(q).all(|(u, v)| (u - v).abs() < 1e-12);
        kernel.eval(p, q) + if same { kernel.jitter } else { 0.0 }
    })
}

/// Plain GP regression at `targets` given noisy values at `xs`, solved by LU.
fn gp_regression(
    targets: &SupportSet,
    xs: &SupportSet,
    y: &DVector<f64>,
    kernel: &KernelConfig,
    noise_var: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let ktt = cov_matrix(targets, targets, kernel);
    let ktx = cov_matrix(targets, xs, kernel);
    let mut kxx = cov_matrix(xs, xs, kernel);
    for i in 0..xs.len() {
        kxx[(i, i)] += noise_var;
    }
    let lu = kxx.lu();
    let mean = &ktx * lu.solve(y).unwrap();
    let cov = ktt - &ktx * lu.solve(&ktx.transpose()).unwrap();
    (mean, cov)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

#[test]
fn sequential_updates_on_fixed_support_match_batch_regression() {
    let mut rng = rng_from(11);
    let kernel = KernelConfig::with_jitter(1.0, 0.3, 1e-8).unwrap();
    let noise = 0.1_f64;
    for _ in 0..20 {
        let n = 8;
        let support = SupportSet::from_scalars(&random_scalars(&mut rng, n));
        let mut state = GaussianState::new(DVector::zeros(n), gram(&support, &kernel)).unwrap();
        let mut all_rows = Vec::new();
        let mut all_y = Vec::new();
        for _ in 0..4 {
            let rows: Vec<usize> = (0..3).map(|_| rng.random_range(0..n)).collect();
            let y: Vec<f64> = rows.iter().map(|_| rng.random::<f64>() - 0.5).collect();
            let mut g = DMatrix::zeros(rows.len(), n);
            for (k, &r) in rows.iter().enumerate() {
                g[(k, r)] = 1.0;
            }
            let r_eff = DMatrix::identity(rows.len(), rows.len()) * (noise * noise);
            state = assimilate(&state, &g, &r_eff, &DVector::from_vec(y.clone()), 1.0).unwrap();
            all_rows.extend(rows);
            all_y.extend(y);
        }
        let xs = support.select(&all_rows);
        let (mean, cov) = gp_regression(&support, &xs, &DVector::from_vec(all_y), &kernel, noise * noise);
        assert!((state.mean - mean).amax() < 1e-8);
        assert!(max_abs(&(state.covariance - cov)) < 1e-8);
    }
}

#[test]
fn proximal_gradient_vanishes_at_the_update() {
    let mut rng = rng_from(12);
    for _ in 0..20 {
        let n = 5;
        let k = 3;
        let p = random_spd(&mut rng, n);
        let a = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let g = DMatrix::from_fn(k, n, |_, _| rng.random::<f64>() - 0.5);
        let r_eff = random_spd(&mut rng, k);
        let r = DVector::from_fn(k, |_, _| rng.random::<f64>() - 0.5);
        let eta = 0.3 + rng.random::<f64>();
        let pre = GaussianState::new(a.clone(), p.clone()).unwrap();
        let post = assimilate(&pre, &g, &r_eff, &r, eta).unwrap();
        let rinv = r_eff.clone().try_inverse().unwrap();
        let pinv = p.clone().try_inverse().unwrap();
        let grad = g.transpose() * &rinv * (&g * &post.mean - &r) * eta + &pinv * (&post.mean - &a);
        assert!(grad.norm() <= 1e-8, "gradient norm {}", grad.norm());
        let (j, _) = post.information_form().unwrap();
        let expected = &pinv + g.transpose() * &rinv * &g * eta;
        assert!(max_abs(&(j.clone() - expected)) < 1e-7 * max_abs(&j));
        let gap = (j - pinv).symmetric_eigen().eigenvalues.min();
        assert!(gap > -1e-8);
    }
}

fn one_d_batch(rng: &mut impl Rng, k: usize) -> ResidualBatch {
    ResidualBatch {
        inputs: SupportSet::from_scalars(&random_scalars(rng, k)),
        residuals: DVector::from_fn(k, |_, _| 0.2 * (rng.random::<f64>() - 0.5)),
        source: ResidualSource::Shared,
    }
}

#[test]
fn growing_support_matches_regression_on_union() {
    let mut rng = rng_from(13);
    let cfg = DiscrepancyUpdateConfig {
        kernel: KernelConfig::with_jitter(1.0, 0.3, 1e-8).unwrap(),
        residual_noise_sd: 0.1,
        ..Default::default()
    };
    let mut state = DiscrepancyState::fresh(&cfg, 1, 1).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..4 {
        let b = one_d_batch(&mut rng, 5);
        xs.extend_from_slice(b.inputs.coords());
        ys.extend(b.residuals.iter());
        state = state.update(&b, None, &cfg).unwrap().0;
    }
    let data = SupportSet::from_scalars(&xs);
    let (mean, cov) = gp_regression(&state.support, &data, &DVector::from_vec(ys), &cfg.kernel, 0.01);
    assert_eq!(state.support.len(), 20);
    assert!((state.gaussian.mean - mean).amax() < 1e-6);
    assert!(max_abs(&(state.gaussian.covariance - cov)) < 1e-6);
}

fn run_variant(cfg: &DiscrepancyUpdateConfig, seed: u64, steps: usize) -> Vec<DiscrepancyState> {
    let mut rng = rng_from(seed);
    let mut state = DiscrepancyState::fresh(cfg, 1, 1).unwrap();
    let mut out = Vec::new();
    for _ in 0..steps {
        let b = one_d_batch(&mut rng, 6);
        state = state.update(&b, None, cfg).unwrap().0;
        out.push(state.clone());
    }
    out
}

#[test]
fn variant_p_tracks_variant_e() {
    for kernel in [
        KernelConfig::with_jitter(1.0, 0.3, 1e-6).unwrap(),
        DiscrepancyUpdateConfig::default().kernel,
    ] {
        let e = DiscrepancyUpdateConfig {
            kernel,
            ..Default::default()
        };
        let p = DiscrepancyUpdateConfig {
            variant: Variant::P,
            ..e.clone()
        };
        for seed in 0..5 {
            for (se, sp) in run_variant(&e, seed, 6).iter().zip(run_variant(&p, seed, 6)) {
                assert_eq!(se.support, sp.support);
                assert!((&se.gaussian.mean - &sp.gaussian.mean).amax() < 1e-6);
                assert!(max_abs(&(&se.gaussian.covariance - &sp.gaussian.covariance)) < 1e-6);
            }
        }
    }
}

#[test]
fn variant_p_tracks_variant_e_through_pruning() {
    for kernel in [
        KernelConfig::with_jitter(1.0, 0.2, 1e-6).unwrap(),
        DiscrepancyUpdateConfig::default().kernel,
    ] {
        let e = DiscrepancyUpdateConfig {
            kernel,
            max_support: 15,
            ..Default::default()
        };
        let p = DiscrepancyUpdateConfig {
            variant: Variant::P,
            ..e.clone()
        };
        for seed in 0..4 {
            for (se, sp) in run_variant(&e, seed, 10).iter().zip(run_variant(&p, seed, 10)) {
                assert_eq!(se.support, sp.support);
                assert!((&se.gaussian.mean - &sp.gaussian.mean).amax() < 1e-6);
                assert!(max_abs(&(&se.gaussian.covariance - &sp.gaussian.covariance)) < 1e-6);
            }
        }
    }
}

#[test]
fn proxy_round_trip() {
    let mut rng = rng_from(14);
    let kernel = KernelConfig::with_jitter(1.0, 0.3, 1e-6).unwrap();
    let cfg = DiscrepancyUpdateConfig {
        kernel,
        ..Default::default()
    };
    for _ in 0..10 {
        let mut state = DiscrepancyState::fresh(&cfg, 1, 1).unwrap();
        for _ in 0..2 {
            state = state.update(&one_d_batch(&mut rng, 4), None, &cfg).unwrap().0;
        }
        let proxy = proxy_encode(&state).unwrap();
        let back = proxy_decode(&proxy, &state.support, &kernel).unwrap();
        assert!((&back.mean - &state.gaussian.mean).amax() < 1e-8);
        assert!(max_abs(&(&back.covariance - &state.gaussian.covariance)) < 1e-8);
    }
}

#[test]
fn inflation_free_f_propagation_is_identity() {
    let cfg = DiscrepancyUpdateConfig {
        variant: Variant::F,
        fixed_support_size: 8,
        ..Default::default()
    };
    let mut rng = rng_from(15);
    let state = DiscrepancyState::fresh(&cfg, 1, 1).unwrap();
    let state = state.update(&one_d_batch(&mut rng, 5), None, &cfg).unwrap().0;
    let prop = state.propagate_state(&SupportSet::from_scalars(&[0.3]), &cfg).unwrap();
    assert_eq!(prop.pre, state.gaussian);
}

#[test]
fn existing_points_do_not_grow_the_support() {
    let cfg = DiscrepancyUpdateConfig::default();
    let b = ResidualBatch {
        inputs: SupportSet::from_scalars(&[0.1, 0.5, 0.9]),
        residuals: DVector::from_vec(vec![0.01, -0.02, 0.03]),
        source: ResidualSource::Shared,
    };
    let state = DiscrepancyState::fresh(&cfg, 1, 1).unwrap().update(&b, None, &cfg).unwrap().0;
    let prop = state.propagate_state(&SupportSet::from_scalars(&[0.9, 0.1]), &cfg).unwrap();
    assert_eq!(prop.support, state.support);
    let mut want = DMatrix::zeros(2, 3);
    want[(0, 2)] = 1.0;
    want[(1, 0)] = 1.0;
    assert_eq!(prop.g, want);
}

fn synthetic_batch(xs: &[f64], theta: f64, offset: f64) -> Batch {
    let sim = SimulatorSpec::synthetic1d();
    let y: Vec<f64> = xs.iter().map(|&x| sim.eval(&[x], &[theta]) + offset).collect();
    Batch::new(SupportSet::from_scalars(xs), DVector::from_vec(y)).unwrap()
}

#[test]
fn shared_residual_examples() {
    let sim = SimulatorSpec::synthetic1d();
    let b = synthetic_batch(&[0.2, 0.6], 1.4, 0.0);
    let single = ParticleCloud::uniform_weights(1, vec![1.4]).unwrap();
    assert!(shared_residual(&b, &single, &sim).residuals.amax() < 1e-15);
    let pair = ParticleCloud::uniform_weights(1, vec![0.5, 2.5]).unwrap();
    let r = shared_residual(&b, &pair, &sim).residuals;
    for (k, &x) in [0.2, 0.6].iter().enumerate() {
        let want = b.observations[k] - 0.5 * (sim.eval(&[x], &[0.5]) + sim.eval(&[x], &[2.5]));
        assert!((r[k] - want).abs() < 1e-14);
    }
    let mut rng = rng_from(16);
    let thetas: Vec<f64> = (0..7).map(|_| 3.0 * rng.random::<f64>()).collect();
    let ws: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
    let cloud = ParticleCloud::new(1, thetas.clone(), ws.clone()).unwrap();
    let total: f64 = ws.iter().sum();
    let r = shared_residual(&b, &cloud, &sim).residuals;
    for (k, &x) in [0.2, 0.6].iter().enumerate() {
        let mut fit = 0.0;
        for (t, w) in thetas.iter().zip(&ws) {
            fit += w / total * sim.eval(&[x], &[*t]);
        }
        assert!((r[k] - (b.observations[k] - fit)).abs() < 1e-13);
    }
}

#[test]
fn rra_examples() {
    let sim = SimulatorSpec::synthetic1d();
    let cfg = DiscrepancyUpdateConfig {
        kernel: KernelConfig::with_jitter(1.0, 0.3, 1e-8).unwrap(),
        residual_noise_sd: 0.1,
        ..Default::default()
    };
    let cloud = ParticleCloud::uniform_weights(1, vec![1.2, 1.3]).unwrap();
    let zero = ParticleCloud::uniform_weights(1, vec![1.25]).unwrap();
    let flat = rra_refit(&[synthetic_batch(&[0.1, 0.7], 1.25, 0.0)], &zero, &sim, &cfg).unwrap();
    assert!(flat.gaussian.mean.amax() < 1e-14);

    let b1 = synthetic_batch(&[0.1, 0.4, 0.7], 1.0, 0.05);
    let b2 = synthetic_batch(&[0.2, 0.9], 1.1, -0.03);
    let one = rra_refit(std::slice::from_ref(&b1), &cloud, &sim, &cfg).unwrap();
    let direct = DiscrepancyState::fresh(&cfg, 1, 2)
        .unwrap()
        .update(&shared_residual(&b1, &cloud, &sim), None, &cfg)
        .unwrap()
        .0;
    assert_eq!(one.gaussian, direct.gaussian);

    let two = rra_refit(&[b1.clone(), b2.clone()], &cloud, &sim, &cfg).unwrap();
    let xs = SupportSet::from_scalars(&[0.1, 0.4, 0.7, 0.2, 0.9]);
    let mut y = shared_residual(&b1, &cloud, &sim).residuals.as_slice().to_vec();
    y.extend(shared_residual(&b2, &cloud, &sim).residuals.iter());
    let (mean, cov) = gp_regression(&xs, &xs, &DVector::from_vec(y), &cfg.kernel, 0.01);
    assert!((&two.gaussian.mean - mean).amax() < 1e-8);
    assert!(max_abs(&(&two.gaussian.covariance - cov)) < 1e-8);
}

#[test]
fn predictive_law_examples() {
    let sim = SimulatorSpec::synthetic1d();
    let cfg = DiscrepancyUpdateConfig {
        kernel: KernelConfig::with_jitter(1.0, 0.3, 1e-8).unwrap(),
        residual_noise_sd: 0.1,
        ..Default::default()
    };
    let xstar = SupportSet::from_scalars(&[0.15, 0.55, 0.8]);
    let cloud = ParticleCloud::new(1, vec![0.5, 1.5, 2.5], vec![0.2, 0.3, 0.5]).unwrap();
    for variant in [Variant::E, Variant::F, Variant::P] {
        let c = DiscrepancyUpdateConfig { variant, ..cfg.clone() };
        let fresh = DiscrepancyState::fresh(&c, 1, 3).unwrap();
        let mix = predictive_law(&fresh, &cloud, &xstar, &sim, 0.1).unwrap();
        let mut want = gram(&xstar, &c.kernel);
        for i in 0..3 {
            want[(i, i)] += 0.01;
        }
        assert!(max_abs(&(mix.component_cov(0) - want)) < 1e-6, "{variant:?}");
    }

    let single = ParticleCloud::uniform_weights(1, vec![1.3]).unwrap();
    let b = synthetic_batch(&[0.1, 0.4, 0.7, 0.95], 1.0, 0.05);
    let resid = shared_residual(&b, &single, &sim);
    let state = DiscrepancyState::fresh(&cfg, 1, 1).unwrap().update(&resid, None, &cfg).unwrap().0;
    let mix = predictive_law(&state, &single, &xstar, &sim, 0.1).unwrap();
    let (gp_mean, _) = gp_regression(&xstar, &resid.inputs, &resid.residuals, &cfg.kernel, 0.01);
    let want = sim.eval_batch(&xstar, &[1.3]) + gp_mean;
    assert!((mix.mean() - want).amax() < 1e-8);
}

#[test]
fn particle_specific_means_follow_their_own_residuals() {
    let sim = SimulatorSpec::synthetic1d();
    let cfg = DiscrepancyUpdateConfig {
        kernel: KernelConfig::with_jitter(1.0, 0.3, 1e-8).unwrap(),
        residual_noise_sd: 0.1,
        representation: Representation::ParticleSpecific,
        ..Default::default()
    };
    let cloud = ParticleCloud::new(1, vec![0.8, 1.6], vec![0.5, 0.5]).unwrap();
    let b = synthetic_batch(&[0.1, 0.5, 0.9], 1.2, 0.0);
    let res = particle_residuals(&b, &cloud, &sim);
    let state = DiscrepancyState::fresh(&cfg, 1, 2).unwrap();
    let (next, _) = state.update(&shared_residual(&b, &cloud, &sim), Some(&res), &cfg).unwrap();
    let means = next.particle_means.as_ref().unwrap();
    for i in 0..2 {
        let (m, _) = gp_regression(&next.support, &b.inputs, &res.column(i).into_owned(), &cfg.kernel, 0.01);
        assert!((means.column(i) - m).amax() < 1e-8);
    }
    let mut swapped = next.clone();
    swapped.resample_particles(&[1, 1]);
    let sm = swapped.particle_means.unwrap();
    assert_eq!(sm.column(0), means.column(1));
    assert_eq!(sm.column(1), means.column(1));
}

#[test]
fn kernel_refresh_reconditions_proxy() {
    let k1 = KernelConfig::with_jitter(1.0, 0.3, 1e-6).unwrap();
    let k2 = KernelConfig::with_jitter(0.5, 0.2, 1e-6).unwrap();
    let cfg = DiscrepancyUpdateConfig {
        variant: Variant::P,
        kernel: k1,
        ..Default::default()
    };
    let mut rng = rng_from(17);
    let state = DiscrepancyState::fresh(&cfg, 1, 1).unwrap();
    let b = one_d_batch(&mut rng, 5);
    let mut state = state.update(&b, None, &cfg).unwrap().0;
    state.refresh_kernel(k2).unwrap();
    let (mean, cov) = gp_regression(&state.support, &b.inputs, &b.residuals, &k2, 0.0025);
    assert!((&state.gaussian.mean - mean).amax() < 1e-6);
    assert!(max_abs(&(&state.gaussian.covariance - cov)) < 1e-6);
    let mut e = DiscrepancyState::fresh(&DiscrepancyUpdateConfig::default(), 1, 1).unwrap();
    assert!(e.refresh_kernel(k2).is_err());
}
