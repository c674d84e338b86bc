//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and fails if any criterion fails. Set CPAMP_ACCEPTANCE_ONLY=1,4 to run a subset.

use cpamp::amp::{run_amp_along, AmpConfig};
use cpamp::denoise::ThetaChannel;
use cpamp::experiment::{mean, Experiment, Scenario, TrialSummary};
use cpamp::inference::{hausdorff, posterior_from_table, Estimator, ExactLikelihood, LogLikTable};
use cpamp::linalg::min_eigenvalue;
use cpamp::model::{eta_to_psi, psi_to_eta, ChangePointVector, ModelKind};
use cpamp::priors::{default_grid_stride, f_star, f_star_jacobian, ChangePointPrior, PriorSpec, SignalPrior};
use cpamp::rng::{derive_seed, rng_from_seed, std_normal};
use cpamp::se::{sample_limit_iterates, SeConfig, StateEvolution};
use nalgebra::DMatrix;
use rand::Rng;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn linear_two_cp(p: usize, delta: usize, stride: Option<usize>, iterations: usize) -> Scenario {
    let n = p * delta;
    let stride = stride.unwrap_or_else(|| default_grid_stride(n));
    Scenario {
        n,
        p,
        model: ModelKind::Linear { noise_sd: 0.1 },
        prior: PriorSpec {
            signal: SignalPrior::isotropic(3, 1.0),
            changepoint: ChangePointPrior::exactly(n, 3, 2, n / 5, stride).unwrap(),
        },
        truth: ChangePointVector::from_fractions(&[1.0 / 3.0, 8.0 / 15.0], n).unwrap(),
        iterations,
        tol: 0.0,
        estimator: Estimator::PosteriorArgmax,
        se: SeConfig { mc_samples: 1000, max_strata: 64, seed: 17 },
        onsager: true,
    }
}

/// Criteria 1 and 2 share their trials.
fn criteria_1_2() -> (Outcome, Outcome) {
    let start = Instant::now();
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    let mut pass1 = true;
    let mut pass2 = true;
    for delta in [1, 2] {
        let exp = Experiment::new(linear_two_cp(400, delta, None, 10)).unwrap();
        let trials: Vec<TrialSummary> = exp.run(10, 1000 + delta as u64).unwrap();
        let rel: Vec<f64> = trials.iter().map(|t| (t.amp_mse - t.se_mse).abs() / t.se_mse).collect();
        let within = rel.iter().filter(|&&r| r <= 0.10).count();
        pass1 &= within >= 8;
        d1.push(format!("delta={delta}: {within}/10 within 10% (SE mse {:.4}, max rel err {:.3})", trials[0].se_mse, rel.iter().cloned().fold(0.0, f64::max)));

        let h_amp = mean(&trials.iter().map(|t| t.amp_hausdorff).collect::<Vec<_>>());
        let h_se = mean(&trials.iter().map(|t| t.se_hausdorff).collect::<Vec<_>>());
        pass2 &= (h_amp - h_se).abs() < 0.03;
        d2.push(format!("delta={delta}: AMP {h_amp:.4} vs SE {h_se:.4} (gap {:.4})", (h_amp - h_se).abs()));

        // Onsager ablation: dropping the memory term must visibly break the SE match.
        let mut broken = 0;
        for k in 0..3u64 {
            let seed = derive_seed(1000 + delta as u64, &[k]);
            let tr = exp.trial(seed).unwrap();
            let sc = &exp.scenario;
            let cfg = AmpConfig { max_iter: sc.iterations, tol: 0.0, seed: derive_seed(seed, &[2]), se: sc.se, onsager: false };
            let run = run_amp_along(&tr.dataset, &sc.prior, &cfg, &exp.se, &exp.ensemble);
            let b = &tr.dataset.truth.as_ref().unwrap().signal.entries;
            let dev = match run {
                Ok(r) => ((&r.state.b_hat - b).norm_squared() / sc.p as f64 - tr.summary.se_mse).abs() / tr.summary.se_mse,
                Err(_) => f64::INFINITY,
            };
            broken += usize::from(dev > 0.5);
        }
        pass1 &= broken >= 2;
        d1.push(format!("no-Onsager deviates >50% in {broken}/3"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass1 &= secs < 300.0;
    d1.push(format!("{secs:.0}s"));
    (outcome(pass1, d1.join("; ")), outcome(pass2, d2.join("; ")))
}

fn count_scenario(model: ModelKind, signal_scale: f64) -> Scenario {
    let (p, delta) = (600, 1.25);
    let n = (p as f64 * delta) as usize;
    Scenario {
        n,
        p,
        model,
        prior: PriorSpec {
            signal: SignalPrior::isotropic(3, signal_scale * delta),
            changepoint: ChangePointPrior::uniform_over_counts(n, 3, n / 10, default_grid_stride(n)).unwrap(),
        },
        truth: ChangePointVector::from_fractions(&[0.6], n).unwrap(),
        iterations: 10,
        tol: 0.0,
        estimator: Estimator::PosteriorArgmax,
        se: SeConfig { mc_samples: 1000, max_strata: 64, seed: 23 },
        onsager: true,
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let stats = |exp: &Experiment, master: u64| {
        let counts: Vec<f64> = exp.run(10, master).unwrap().iter().map(|t| t.amp_estimate.len() as f64).collect();
        let m = mean(&counts);
        let sd = (counts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / counts.len() as f64).sqrt();
        (m, sd)
    };
    let relu = Experiment::new(count_scenario(ModelKind::RectifiedLinear { noise_sd: 0.3 }, 1.0)).unwrap();
    let (rm, rsd) = stats(&relu, 31);
    let logit = Experiment::new(count_scenario(ModelKind::Logistic, 50.0)).unwrap();
    let (lm, lsd) = stats(&logit, 37);
    let secs = start.elapsed().as_secs_f64();
    let pass = (rm - 1.0).abs() <= 0.2 && rsd <= 0.3 && (0.8..=1.4).contains(&lm) && secs < 1800.0;
    outcome(pass, format!("ReLU mean {rm:.2} sd {rsd:.2}; logistic mean {lm:.2} sd {lsd:.2}; {secs:.0}s"))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let sc = linear_two_cp(400, 3, Some(10), 10);
    let exp = Experiment::new(sc.clone()).unwrap();
    let reduced = StateEvolution::new(&sc.prior, sc.model, sc.delta(), SeConfig { mc_samples: 300, max_strata: 16, seed: 29 }).unwrap();
    let exact = ExactLikelihood::new(&reduced, &exp.ensemble, sc.iterations).unwrap();
    let t = sc.iterations;
    let mut gaps = Vec::new();
    let mut tvs = Vec::new();
    for k in 0..10u64 {
        let seed = derive_seed(41, &[k]);
        let tr = exp.trial(seed).unwrap();
        let amp_post = exact.posterior(&tr.run.state.theta, &tr.dataset.response, &sc.prior.changepoint).unwrap();
        let psi = &tr.dataset.truth.as_ref().unwrap().config.psi;
        let b = &tr.dataset.truth.as_ref().unwrap().signal.entries;
        let lim = sample_limit_iterates(&exp.oracle.params[t], b, psi, sc.model, derive_seed(seed, &[5])).unwrap();
        let se_post = exact.posterior(&lim.v_theta, &lim.y, &sc.prior.changepoint).unwrap();
        gaps.push(amp_post.mean_abs_gap(&se_post).unwrap());
        tvs.push(amp_post.total_variation(&se_post).unwrap());
    }
    let g = mean(&gaps);
    outcome(
        g < 0.05,
        format!(
            "mean |gap| {g:.2e} over {} candidates (mean TV {:.3}, {} oracle runs); {:.0}s",
            sc.prior.changepoint.enumerate_configs().unwrap().len(),
            mean(&tvs),
            exact.oracle_runs(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_5() -> Outcome {
    let n = 600;
    let mut pass = true;
    let mut detail = Vec::new();
    for (model, scale) in [
        (ModelKind::Linear { noise_sd: 0.1 }, 1.0),
        (ModelKind::Logistic, 20.0),
        (ModelKind::RectifiedLinear { noise_sd: 0.3 }, 1.0),
    ] {
        let delta = 2.0;
        let prior = PriorSpec {
            signal: SignalPrior::isotropic(3, scale * delta),
            changepoint: ChangePointPrior::exactly(n, 3, 2, n / 5, default_grid_stride(n)).unwrap(),
        };
        let se = StateEvolution::new(&prior, model, delta, SeConfig { mc_samples: 5000, max_strata: 64, seed: 53 }).unwrap();
        let traj = se.run_ensemble(5).unwrap();
        let zk = traj.stats.iter().map(|s| s.kappa_theta_identity.max_z()).fold(0.0, f64::max);
        let zb = traj.stats.iter().map(|s| s.nu_b_minus_kappa_b.max_z()).fold(0.0, f64::max);
        let ok = zk < 3.0 && zb < 3.0;
        pass &= ok;
        detail.push(format!("{}: kappa_Theta max z {zk:.2}, nu_B-kappa_B max z {zb:.2}{}", model.name(), if ok { "" } else { " (over)" }));
    }
    outcome(pass, detail.join("; "))
}

/// E[Z | V, u] - E[Z | V] over cov(Z | V), by trapezoidal integration in z.
fn quadrature_g(rho: f64, nu: f64, kappa: f64, v: f64, u: f64, lik: impl Fn(f64, f64) -> f64) -> f64 {
    let sigma_v = nu * nu / rho + kappa;
    let mu = nu * v / sigma_v;
    let c = rho - nu * nu / sigma_v;
    let sd = c.sqrt();
    let m = 40_001;
    let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
    let h = (hi - lo) / (m - 1) as f64;
    let (mut w0, mut w1) = (0.0, 0.0);
    for k in 0..m {
        let z = lo + h * k as f64;
        let trap = if k == 0 || k == m - 1 { 0.5 } else { 1.0 };
        let w = trap * (-(z - mu).powi(2) / (2.0 * c)).exp() * lik(z, u);
        w0 += w;
        w1 += w * z;
    }
    (w1 / w0 - mu) / c
}

fn criterion_6() -> Outcome {
    let (rho, nu): (f64, f64) = (1.0, 0.6);
    let kappa = nu - nu * nu / rho;
    let sd_v = (nu * nu / rho + kappa).sqrt();
    let one = DMatrix::from_element(1, 1, 1.0);
    let mat = |x: f64| DMatrix::from_element(1, 1, x);
    let vs: Vec<f64> = (0..41).map(|k| -2.0 * sd_v + 4.0 * sd_v * k as f64 / 40.0).collect();
    let sigma = 0.3;
    let gauss = move |x: f64| (-x * x / (2.0 * sigma * sigma)).exp();
    let cases: Vec<(ModelKind, Vec<f64>, f64, Box<dyn Fn(f64, f64) -> f64>)> = vec![
        (ModelKind::Linear { noise_sd: sigma }, vec![-1.2, -0.1, 0.4, 1.7], 1e-4, Box::new(move |z, u| gauss(u - z))),
        (ModelKind::RectifiedLinear { noise_sd: sigma }, vec![-0.4, 0.0, 0.3, 1.5], 1e-4, Box::new(move |z, u| gauss(u - z.max(0.0)))),
        (
            ModelKind::Logistic,
            vec![0.0, 1.0],
            2e-2,
            Box::new(|z: f64, u: f64| {
                let s = 1.0 / (1.0 + (-z).exp());
                if u > 0.5 {
                    s
                } else {
                    1.0 - s
                }
            }),
        ),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (model, us, tol, lik) in cases {
        let ch = ThetaChannel::new(&one, &mat(nu), &mat(kappa), model).unwrap();
        let mut worst: f64 = 0.0;
        for &v in &vs {
            for &u in &us {
                let got = ch.g_star(&[v], u, &[1.0])[0];
                worst = worst.max((got - quadrature_g(rho, nu, kappa, v, u, &lik)).abs());
            }
        }
        pass &= worst <= tol;
        detail.push(format!("{}: max err {worst:.2e} (tol {tol:.0e})", model.name()));
    }
    outcome(pass, detail.join("; "))
}

fn fd_jac(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.len(), x.len());
    for b in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[b] += h;
        xm[b] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for a in 0..x.len() {
            out[(a, b)] = (fp[a] - fm[a]) / (2.0 * h);
        }
    }
    out
}

fn criterion_7() -> Outcome {
    let l = 3;
    let mut rng = rng_from_seed(71);
    let priors = vec![
        SignalPrior::isotropic(l, 1.0),
        SignalPrior::BernoulliGaussian { alpha: 0.3, cov: vec![vec![2.0, 0.5, 0.0], vec![0.5, 2.0, 0.3], vec![0.0, 0.3, 1.0]] },
        SignalPrior::DiscreteRows { atoms: vec![vec![1.0, -1.0, 0.0], vec![0.0, 0.5, 2.0], vec![-1.0, 0.0, 1.0]], weights: vec![0.5, 0.3, 0.2] },
        SignalPrior::SparseDifference { kappa2: 1.0, sigma_w2: 1.0, alpha: 0.4 },
    ];
    let nu_b = DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.0, 0.05, 0.7, 0.1, 0.0, 0.1, 0.9]);
    let kappa_b = DMatrix::from_row_slice(3, 3, &[0.6, 0.1, 0.0, 0.1, 0.5, 0.05, 0.0, 0.05, 0.7]);
    let mut worst: f64 = 0.0;
    let mut ratios = Vec::new();
    for prior in &priors {
        let f = |x: &[f64]| {
            let row = DMatrix::from_row_slice(1, l, x);
            f_star(&row, &nu_b, &kappa_b, prior).unwrap().row(0).iter().cloned().collect::<Vec<_>>()
        };
        for _ in 0..25 {
            let x: Vec<f64> = (0..l).map(|_| 1.5 * std_normal(&mut rng)).collect();
            let an = f_star_jacobian(&x, &nu_b, &kappa_b, prior).unwrap();
            worst = worst.max((fd_jac(f, &x, 1e-5) - &an).abs().max());
            let e1 = (fd_jac(f, &x, 4e-2) - &an).abs().max();
            let e2 = (fd_jac(f, &x, 2e-2) - &an).abs().max();
            if e2 > 1e-8 {
                ratios.push(e1 / e2);
            }
        }
    }
    let rho = DMatrix::identity(l, l);
    let nu = DMatrix::from_row_slice(3, 3, &[0.5, 0.05, 0.0, 0.05, 0.4, 0.05, 0.0, 0.05, 0.6]);
    let kappa = DMatrix::from_row_slice(3, 3, &[0.3, 0.02, 0.0, 0.02, 0.3, 0.02, 0.0, 0.02, 0.25]);
    let ch = ThetaChannel::new(&rho, &nu, &kappa, ModelKind::Linear { noise_sd: 0.3 }).unwrap();
    for _ in 0..100 {
        let v: Vec<f64> = (0..l).map(|_| std_normal(&mut rng)).collect();
        let u = 1.5 * std_normal(&mut rng);
        let a = rng.random::<f64>();
        let marg = [a * 0.5, 0.5 - a * 0.5, 0.5];
        let g = |x: &[f64]| ch.g_star(x, u, &marg);
        let an = ch.g_jacobian_linear(&v, u, &marg);
        worst = worst.max((fd_jac(g, &v, 1e-5) - &an).abs().max());
        let e1 = (fd_jac(g, &v, 4e-2) - &an).abs().max();
        let e2 = (fd_jac(g, &v, 2e-2) - &an).abs().max();
        if e2 > 1e-8 {
            ratios.push(e1 / e2);
        }
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = ratios[ratios.len() / 2];
    let pass = worst < 1e-4 && (3.0..=5.0).contains(&median);
    outcome(pass, format!("max |FD - analytic| {worst:.2e}; median step-halving error ratio {median:.2} over {} inputs", ratios.len()))
}

fn criterion_8() -> Outcome {
    let mut rng = rng_from_seed(83);
    let mut fails = Vec::new();

    // Posterior normalization.
    let mut worst_norm: f64 = 0.0;
    for k in 0..50 {
        let n = 30 + k;
        let rows = DMatrix::from_fn(n, 3, |_, _| 5.0 * std_normal(&mut rng));
        let prior = ChangePointPrior::uniform_over_counts(n, 3, 4, 1 + k % 3).unwrap();
        let post = posterior_from_table(&LogLikTable::from_rows(&rows).unwrap(), &prior).unwrap();
        worst_norm = worst_norm.max((post.prob.iter().sum::<f64>() - 1.0).abs());
    }
    if worst_norm > 1e-9 {
        fails.push(format!("normalization {worst_norm:.1e}"));
    }

    // Hausdorff metric axioms on random triples.
    let n = 200;
    let random_set = |rng: &mut cpamp::rng::SimRng| {
        let k = rng.random_range(0..5);
        let mut s: Vec<usize> = (0..k).map(|_| rng.random_range(2..=n)).collect();
        s.sort_unstable();
        s.dedup();
        ChangePointVector::new(s, n).unwrap()
    };
    let mut metric_bad = 0;
    for _ in 0..1000 {
        let (a, b, c) = (random_set(&mut rng), random_set(&mut rng), random_set(&mut rng));
        let ab = hausdorff(&a, &b).unwrap();
        let ok = ab == hausdorff(&b, &a).unwrap()
            && hausdorff(&a, &a).unwrap() == 0
            && (ab == 0) == (a == b)
            && ab <= hausdorff(&a, &c).unwrap() + hausdorff(&c, &b).unwrap();
        metric_bad += usize::from(!ok);
    }
    if metric_bad > 0 {
        fails.push(format!("{metric_bad} Hausdorff violations"));
    }

    // psi <-> eta round trips.
    let mut trip_bad = 0;
    for _ in 0..1000 {
        let eta = random_set(&mut rng);
        let psi = eta_to_psi(&eta, n, 5).unwrap();
        trip_bad += usize::from(psi_to_eta(&psi).unwrap() != eta || eta_to_psi(&psi_to_eta(&psi).unwrap(), n, 5).unwrap() != psi);
    }
    if trip_bad > 0 {
        fails.push(format!("{trip_bad} round-trip failures"));
    }

    // PSD kappa trajectories.
    let mut min_eig = f64::INFINITY;
    for model in [ModelKind::Linear { noise_sd: 0.1 }, ModelKind::Logistic, ModelKind::RectifiedLinear { noise_sd: 0.3 }] {
        let n = 300;
        let prior = PriorSpec {
            signal: SignalPrior::isotropic(3, 2.0),
            changepoint: ChangePointPrior::uniform_over_configs(n, 3, n / 5, default_grid_stride(n)).unwrap(),
        };
        let se = StateEvolution::new(&prior, model, 2.0, SeConfig { mc_samples: 500, max_strata: 32, seed: 3 }).unwrap();
        let ens = se.run_ensemble(6).unwrap();
        let ora = se.run_oracle(&ens, &ChangePointVector::new(vec![101, 201], n).unwrap()).unwrap();
        for p in ens.params.iter().chain(&ora.params) {
            let scale = p.kappa_theta.trace().abs().max(p.kappa_b.trace().abs()).max(1e-300);
            min_eig = min_eig.min(min_eigenvalue(&p.kappa_theta) / scale).min(min_eigenvalue(&p.kappa_b) / scale);
        }
    }
    if min_eig < -1e-10 {
        fails.push(format!("kappa min eigenvalue {min_eig:.1e}"));
    }

    // Bit-exact reproducibility, serial pool against the default pool.
    let sc = linear_two_cp(100, 2, None, 4);
    let exp = Experiment::new(sc.clone()).unwrap();
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let a = serial.install(|| {
        let e = Experiment::new(sc.clone()).unwrap();
        (e.ensemble.clone(), e.run(2, 5).unwrap(), e.trial(99).unwrap().run.state)
    });
    let b = serial.install(|| (exp.ensemble.clone(), exp.run(2, 5).unwrap(), exp.trial(99).unwrap().run.state));
    let c = (exp.ensemble.clone(), exp.run(2, 5).unwrap(), exp.trial(99).unwrap().run.state);
    let bits = |x: &(cpamp::se::SeTrajectory, Vec<TrialSummary>, cpamp::amp::AmpState)| {
        let mut v: Vec<u64> = x.2.theta.iter().chain(x.2.b_hat.iter()).map(|f| f.to_bits()).collect();
        v.extend(x.0.params.iter().flat_map(|p| p.kappa_theta.iter().map(|f| f.to_bits())));
        v.extend(x.1.iter().map(|s| s.amp_mse.to_bits()));
        v
    };
    if bits(&a) != bits(&b) || bits(&a) != bits(&c) || a.1 != b.1 {
        fails.push("seeded runs differ".into());
    }

    let detail = format!(
        "normalization err {worst_norm:.1e}, 1000 Hausdorff triples, 1000 round trips, min kappa eig/trace {min_eig:.1e}, serial bit-exact{}",
        if fails.is_empty() { String::new() } else { format!("; failures: {}", fails.join(", ")) }
    );
    outcome(fails.is_empty(), detail)
}

#[test]
fn acceptance() {
    let only: Option<Vec<usize>> =
        std::env::var("CPAMP_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    if wanted(1) || wanted(2) {
        let (c1, c2) = criteria_1_2();
        if wanted(1) {
            results.push((1, "SE-AMP signal MSE agreement", c1));
        }
        if wanted(2) {
            results.push((2, "Hausdorff match AMP vs SE", c2));
        }
    }
    let rest: [(usize, &str, fn() -> Outcome); 6] = [
        (3, "change-point count (ReLU, logistic)", criterion_3),
        (4, "posterior match AMP vs SE", criterion_4),
        (5, "SE identities under f*, g*", criterion_5),
        (6, "scalar g* vs quadrature", criterion_6),
        (7, "Jacobians vs finite differences", criterion_7),
        (8, "invariant suites", criterion_8),
    ];
    for (k, name, f) in rest {
        if wanted(k) {
            results.push((k, name, f()));
        }
    }
    println!();
    for (k, name, o) in &results {
        println!("criterion {k} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
