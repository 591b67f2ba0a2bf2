//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p resq-harness --test acceptance`.

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use resq::data::{SplitRole, SynthSpec};
use resq::forecast::{EnsembleForecast, EnsembleSource, PredictiveDistribution, QuantileForecast, QuantileLevels};
use resq::hmc::{leapfrog, run_chain, FnDensity, HmcConfig, PhasePoint, SsvsTarget};
use resq::metrics::{
    calibration_curve, calibration_error, crps, extract_quantiles, fit_recalibrator, interval_metrics, recalibrate,
    CalibrationCurve,
};
use resq::prior::{softplus_inv, WeightPrior};
use resq::quantile::{predict_quantiles, train_qr};
use resq::readout::{loss_and_gradient, Activation, Loss, Mlp, MlpSpec, OptimizerConfig};
use resq::reservoir::{Reservoir, ReservoirConfig};
use resq::rng::seeded;
use resq::variational::{fit_vi, LikelihoodModel, LowRankGaussian, NoiseModel, ViConfig, MIN_DIAG};
use resq_harness::{compare_methods, default_study, DataSource, ExperimentConfig, HmcSettings, Method, MethodParams};
use statrs::distribution::{ContinuousCDF, Normal};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------- 1. gradients

fn numeric_gradient(spec: &MlpSpec, params: &[f64], x: &DMatrix<f64>, y: &[f64], loss: &Loss, h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = loss_and_gradient(spec, &p, x, y, loss, None).unwrap().0;
            p[i] = orig - h;
            let down = loss_and_gradient(spec, &p, x, y, loss, None).unwrap().0;
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn gradient_suite() -> Outcome {
    let mut rng = seeded(31);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let input = rng.random_range(1..=8);
        let depth = rng.random_range(1..=3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=64)).collect();
        let act = if trial % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let pinball = trial % 4 >= 2;
        let spec = MlpSpec::uniform(input, &hidden, act, if pinball { 3 } else { 1 }).unwrap();
        let mut layers = Mlp::init(spec.clone(), &mut rng).layers();
        for layer in &mut layers {
            layer.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let mlp = Mlp::from_layers(spec.clone(), &layers).unwrap();
        let x = DMatrix::from_fn(6, input, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let loss = if pinball { Loss::Pinball(vec![0.1, 0.5, 0.9]) } else { Loss::Mse };
        let analytic = loss_and_gradient(&spec, &mlp.params, &x, &y, &loss, None).unwrap().1;
        let numeric = numeric_gradient(&spec, &mlp.params, &x, &y, &loss, 1e-6);
        let err = relative_error(&analytic, &numeric);
        if !(err < 1e-6) {
            return Err(format!("trial {trial} ({act}, hidden {hidden:?}, pinball {pinball}): relative error {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(format!("100 networks, worst relative error {worst:.2e}"))
}

// ---------- 2. echo state

/// Residual `|(W - lambda I) x| / |x|` after complex inverse iteration.
fn eigen_residual(w: &DMatrix<f64>, lambda: Complex<f64>) -> f64 {
    let n = w.nrows();
    let a = DMatrix::from_fn(n, n, |i, j| Complex::new(w[(i, j)], 0.0) - if i == j { lambda } else { Complex::new(0.0, 0.0) });
    let lu = a.clone().lu();
    let mut rng = seeded(77);
    let mut x = DVector::from_fn(n, |_, _| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    for _ in 0..3 {
        x = lu.solve(&x).expect("shifted matrix is numerically nonsingular");
        let norm = x.norm();
        x /= Complex::new(norm, 0.0);
    }
    (&a * &x).norm()
}

fn echo_state_suite() -> Outcome {
    let cfg = ReservoirConfig { n_units: 500, spectral_radius: 0.9, seed: 42, ..ReservoirConfig::default() };
    let res = Reservoir::new(cfg).map_err(|e| e.to_string())?;
    let w = res.w();
    let dominant = w.complex_eigenvalues().iter().copied().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap();
    let radius_gap = (dominant.norm() - 0.9).abs();
    let residual = eigen_residual(w, dominant);
    // ratio of iterate norms bounds the dominant modulus from an independent direction
    let mut v = DVector::from_element(500, 1.0);
    let mut log_growth = Vec::new();
    for _ in 0..2000 {
        v = w * v;
        let n = v.norm();
        log_growth.push(n.ln());
        v /= n;
    }
    let power = (log_growth[1000..].iter().sum::<f64>() / 1000.0).exp();

    let input = resq::data::synth_seasonal(&SynthSpec { length: 1000, period: 24, trend: 0.0, noise_std: 0.1, seed: 3 })
        .map_err(|e| e.to_string())?;
    let mut rng = seeded(9);
    let start: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let a = res.run_from(input.values(), &vec![0.0; 500], 200).map_err(|e| e.to_string())?;
    let b = res.run_from(input.values(), &start, 200).map_err(|e| e.to_string())?;
    let gap = (&a.states - &b.states).amax();
    check(
        radius_gap < 1e-6 && residual < 1e-8 && (power - 0.9).abs() < 0.01 && gap < 1e-6,
        format!("|rho-0.9| {radius_gap:.1e}, eigen residual {residual:.1e}, power estimate {power:.4}, state gap {gap:.1e}"),
    )
}

// ---------- 3. quantile regression

fn empirical_quantile(values: &[f64], tau: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * tau;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn qr_suite() -> Outcome {
    let mut rng = seeded(7);
    let n = 5000;
    let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let held_out: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let x = DMatrix::from_element(n, 1, 1.0);
    let levels = QuantileLevels::new(vec![0.1, 0.5, 0.9]).unwrap();
    let opt = OptimizerConfig { learning_rate: 1e-2, steps: 3000, ..OptimizerConfig::default() };
    let model = train_qr(MlpSpec::linear(1, 3), &x, &y, &levels, &opt).map_err(|e| e.to_string())?;
    let f = predict_quantiles(&model, &x.rows(0, 1).into_owned()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (k, &tau) in levels.as_slice().iter().enumerate() {
        worst = worst.max((f.step(0)[k] - empirical_quantile(&y, tau)).abs());
    }
    let q90 = f.step(0)[2];
    let coverage = held_out.iter().filter(|&&v| v <= q90).count() as f64 / n as f64;
    check(
        worst <= 0.05 && (coverage - 0.9).abs() <= 0.03,
        format!("max head error {worst:.4}, held-out 0.9 coverage {coverage:.4}"),
    )
}

// ---------- 4. HMC

fn hmc_suite() -> Outcome {
    let mut rng = seeded(5);
    let (n, d) = (100, 3);
    let sigma: f64 = 0.5;
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let beta = DVector::from_vec(vec![1.0, -0.5, 0.25]);
    let y = &x * &beta + DVector::from_fn(n, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
    let precision = x.transpose() * &x / (sigma * sigma) + DMatrix::identity(d, d);
    let exact = precision.cholesky().unwrap().solve(&(x.transpose() * &y / (sigma * sigma)));
    let target = FnDensity {
        dim: d,
        f: |q: &[f64], g: &mut [f64]| {
            let b = DVector::from_column_slice(q);
            let r = &y - &x * &b;
            let grad = x.transpose() * &r / (sigma * sigma) - &b;
            g.copy_from_slice(grad.as_slice());
            -0.5 * r.norm_squared() / (sigma * sigma) - 0.5 * b.norm_squared()
        },
    };
    let chain = run_chain(&target, &[0.0; 3], &HmcConfig::default(), &mut seeded(6)).map_err(|e| e.to_string())?;
    let (mean, sd) = (chain.mean(), chain.std());
    let mut worst_z: f64 = 0.0;
    for j in 0..d {
        worst_z = worst_z.max((mean[j] - exact[j]).abs() / (sd[j] / chain.ess[j].sqrt()));
    }

    let start = PhasePoint::new(&target, vec![0.3, -1.2, 2.0]);
    let p0 = vec![0.5, 0.1, -0.7];
    let mut p = p0.clone();
    let mid = leapfrog(&target, &start, &mut p, 0.01, 50).map_err(|e| e.to_string())?;
    p.iter_mut().for_each(|v| *v = -*v);
    let back = leapfrog(&target, &mid, &mut p, 0.01, 50).map_err(|e| e.to_string())?;
    let reversal = (0..d).map(|i| (back.q[i] - start.q[i]).abs().max((p[i] + p0[i]).abs())).fold(0.0, f64::max);

    let gauss = FnDensity {
        dim: 2,
        f: |q: &[f64], g: &mut [f64]| {
            g[0] = -q[0];
            g[1] = -q[1];
            -0.5 * (q[0] * q[0] + q[1] * q[1])
        },
    };
    let g_chain = run_chain(&gauss, &[0.5, 0.5], &HmcConfig::default(), &mut seeded(2)).map_err(|e| e.to_string())?;
    let acc = g_chain.acceptance_rate;
    check(
        worst_z <= 3.0 && reversal < 1e-10 && (0.6..=0.95).contains(&acc),
        format!("posterior mean max |z| {worst_z:.2} (limit 3), reversal error {reversal:.1e}, 2-D acceptance {acc:.3}"),
    )
}

// ---------- 5. VI

fn dense_kl(mean: &DVector<f64>, cov: &DMatrix<f64>, std: f64) -> f64 {
    let d = mean.len() as f64;
    let s2 = std * std;
    let chol = cov.clone().cholesky().unwrap();
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    0.5 * (cov.trace() / s2 + mean.norm_squared() / s2 - d + d * s2.ln() - log_det)
}

fn vi_suite() -> Outcome {
    let mut rng = seeded(4);
    let ys: Vec<f64> = (0..50).map(|_| 2.0 + rng.sample::<f64, _>(StandardNormal)).collect();
    let x = DMatrix::zeros(50, 1);
    let model = LikelihoodModel {
        readout: MlpSpec::linear(1, 1),
        prior: WeightPrior::Normal { std: 1.0 },
        noise: NoiseModel::Fixed(1.0),
    };
    let post_var = 1.0 / (ys.len() as f64 + 1.0);
    let post_mean = post_var * ys.iter().sum::<f64>();
    let cfg = ViConfig { steps: 4000, learning_rate: 1e-2, n_mc: 16, seed: 3, ..ViConfig::default() };
    let fit = fit_vi(&model, &x, &ys, &cfg).map_err(|e| e.to_string())?;
    let mean_err = (fit.q.mean[1] - post_mean).abs() / post_mean.abs();
    let var_err = (fit.q.covariance()[(1, 1)] - post_var).abs() / post_var;

    // q equal to the isotropic reference distribution itself
    let d = 5;
    let same = LowRankGaussian::new(
        DVector::zeros(d),
        DMatrix::zeros(d, 2),
        DVector::from_element(d, softplus_inv(1.0 - MIN_DIAG)),
    )
    .map_err(|e| e.to_string())?;
    let self_kl = same.kl_to_isotropic(1.0).map_err(|e| e.to_string())?.0.abs();

    let mut worst_kl: f64 = 0.0;
    for d in 1..=5 {
        for r in 1..=d {
            let mut rng = seeded((d * 10 + r) as u64);
            let q = LowRankGaussian::new(
                DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
                DMatrix::from_fn(d, r, |_, _| rng.random_range(-0.8..0.8)),
                DVector::from_fn(d, |_, _| rng.random_range(-2.0..1.0)),
            )
            .map_err(|e| e.to_string())?;
            for std in [0.3, 1.0, 10.0] {
                let kl = q.kl_to_isotropic(std).map_err(|e| e.to_string())?.0;
                worst_kl = worst_kl.max((kl - dense_kl(&q.mean, &q.covariance(), std)).abs());
            }
        }
    }
    check(
        mean_err < 0.02 && var_err < 0.10 && self_kl < 1e-10 && worst_kl < 1e-8,
        format!(
            "mean rel err {mean_err:.4}, variance rel err {var_err:.4}, KL(q||q) {self_kl:.1e}, low-rank vs dense KL {worst_kl:.1e}"
        ),
    )
}

// ---------- 6. SSVS

fn ssvs_suite() -> Outcome {
    let mut rng = seeded(13);
    let (n, p) = (200, 50);
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut beta = vec![0.0; p];
    for i in [3, 11, 24, 37, 45] {
        beta[i] = if i % 2 == 0 { 3.0 } else { -3.0 };
    }
    let y: Vec<f64> = (0..n)
        .map(|i| (0..p).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let target = SsvsTarget::new(x, y).map_err(|e| e.to_string())?;
    let chain = run_chain(&target, &target.default_init(), &HmcConfig::default(), &mut seeded(14)).map_err(|e| e.to_string())?;
    let draws: Vec<_> = chain.samples.row_iter().map(|r| target.constrain(&r.iter().copied().collect::<Vec<_>>())).collect();
    let abs_mean = |j: usize| draws.iter().map(|d| d.beta[j].abs()).sum::<f64>() / draws.len() as f64;
    let weakest = (0..p).filter(|&j| beta[j] != 0.0).map(abs_mean).fold(f64::INFINITY, f64::min);
    let strongest_zero = (0..p).filter(|&j| beta[j] == 0.0).map(abs_mean).fold(0.0, f64::max);

    let prior = SsvsTarget::prior_only(0);
    let cfg = HmcConfig { n_samples: 5000, ..HmcConfig::default() };
    let tau_chain = run_chain(&prior, &prior.default_init(), &cfg, &mut seeded(15)).map_err(|e| e.to_string())?;
    let mut tau: Vec<f64> = tau_chain.column(0).iter().map(|v| v.exp()).collect();
    tau.sort_by(f64::total_cmp);
    let median = tau[tau.len() / 2];
    check(
        weakest > strongest_zero && (median - 1.0).abs() <= 0.15,
        format!("weakest signal |beta| {weakest:.3} vs largest null {strongest_zero:.3}, prior tau median {median:.3}"),
    )
}

// ---------- 7. metrics

fn step_cdf(q: &[f64], levels: &[f64], x: f64) -> f64 {
    if x < q[0] {
        return 0.0;
    }
    if x >= q[q.len() - 1] {
        return 1.0;
    }
    levels[q.partition_point(|&v| v <= x) - 1]
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: usize) -> f64 {
    let m = 0.5 * (a + b);
    let s = |a: f64, b: f64| (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b));
    let (l, r) = (s(a, m), s(m, b));
    if depth == 0 || (l + r - whole).abs() <= 15.0 * tol {
        return l + r + (l + r - whole) / 15.0;
    }
    simpson(f, a, m, l, tol / 2.0, depth - 1) + simpson(f, m, b, r, tol / 2.0, depth - 1)
}

fn crps_by_quadrature(q: &[f64], levels: &[f64], y: f64) -> f64 {
    let mut knots = q.to_vec();
    knots.push(y);
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let f = |x: f64| (step_cdf(q, levels, x) - if x >= y { 1.0 } else { 0.0 }).powi(2);
    knots
        .windows(2)
        .map(|w| {
            let eps = (w[1] - w[0]) * 1e-12;
            let (a, b) = (w[0] + eps, w[1] - eps);
            let whole = (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b));
            simpson(&f, a, b, whole, 1e-13, 30) * (w[1] - w[0]) / (b - a)
        })
        .sum()
}

fn metric_suite() -> Outcome {
    let levels = QuantileLevels::default_grid();
    let mut rng = seeded(1);
    let mut worst_crps: f64 = 0.0;
    for _ in 0..200 {
        let mut q: Vec<f64> = (0..levels.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
        q.sort_by(f64::total_cmp);
        let y = rng.random_range(-4.0..4.0);
        let closed = crps(&q, levels.as_slice(), y).map_err(|e| e.to_string())?;
        worst_crps = worst_crps.max((closed - crps_by_quadrature(&q, levels.as_slice(), y)).abs());
    }

    let perfect = CalibrationCurve { levels: levels.as_slice().to_vec(), observed: levels.as_slice().to_vec(), n_steps: 100 };
    let perfect_cal = calibration_error(&perfect, None).map_err(|e| e.to_string())?;

    let t = 10_000;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let row: Vec<f64> = levels.as_slice().iter().map(|&p| normal.inverse_cdf(p)).collect();
    let f = QuantileForecast::new(levels.clone(), row.iter().copied().cycle().take(t * levels.len()).collect())
        .map_err(|e| e.to_string())?;
    let mut rng = seeded(2);
    let truths: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
    let coverage = interval_metrics(&f, &truths).map_err(|e| e.to_string())?.1;

    let hand = CalibrationCurve { levels: vec![0.25, 0.75], observed: vec![0.75, 0.25], n_steps: 4 };
    let hand_cal = calibration_error(&hand, Some(&[1.0, 1.0])).map_err(|e| e.to_string())?;
    check(
        worst_crps < 1e-9 && perfect_cal == 0.0 && (coverage - 0.95).abs() <= 0.01 && hand_cal == 0.5,
        format!("CRPS vs quadrature {worst_crps:.1e}, perfect cal {perfect_cal}, coverage {coverage:.4}, hand example {hand_cal}"),
    )
}

// ---------- 8. recalibration

fn overconfident(t: usize, m: usize, shrink: f64, rng: &mut impl Rng) -> (EnsembleForecast, Vec<f64>) {
    let mut values = Vec::with_capacity(t * m);
    let mut truths = Vec::with_capacity(t);
    for _ in 0..t {
        let center: f64 = rng.random_range(-2.0..2.0);
        truths.push(center + rng.sample::<f64, _>(StandardNormal));
        values.extend((0..m).map(|_| center + shrink * rng.sample::<f64, _>(StandardNormal)));
    }
    (EnsembleForecast::new(m, values, EnsembleSource::Vi).unwrap(), truths)
}

fn recalibration_suite() -> Outcome {
    let levels = QuantileLevels::default_grid();
    let mut improved = 0;
    let (mut before_sum, mut after_sum) = (0.0, 0.0);
    for trial in 0..10 {
        let mut rng = seeded(500 + trial);
        let (cal_ens, cal_y) = overconfident(500, 200, 0.4, &mut rng);
        let (test_ens, test_y) = overconfident(500, 200, 0.4, &mut rng);
        let err = |e: resq::metrics::MetricsError| e.to_string();
        let cal_curve = calibration_curve(&extract_quantiles(&cal_ens, &levels).map_err(err)?, &cal_y).map_err(err)?;
        let map = fit_recalibrator(&cal_curve, SplitRole::Calibration).map_err(err)?;
        let raw = extract_quantiles(&test_ens, &levels).map_err(err)?;
        let before = calibration_error(&calibration_curve(&raw, &test_y).map_err(err)?, None).map_err(err)?;
        let recal = recalibrate(&map, &PredictiveDistribution::Ensemble(test_ens), &levels).map_err(err)?;
        let after = calibration_error(&calibration_curve(&recal, &test_y).map_err(err)?, None).map_err(err)?;
        improved += usize::from(after < before);
        before_sum += before;
        after_sum += after;
    }
    check(
        improved >= 9,
        format!("{improved}/10 trials improved, mean cal {:.3} -> {:.3}", before_sum / 10.0, after_sum / 10.0),
    )
}

// ---------- 9. default study ordering

fn ordering_suite() -> Outcome {
    let cfgs = default_study(0);
    let cmp = compare_methods(&cfgs, 0).map_err(|e| e.to_string())?;
    let row = |m: Method| cmp.row(m).ok_or(format!("missing {m}"));
    let qr = row(Method::Qr)?;
    let dropout = row(Method::Dropout)?;
    let hmc_secs = row(Method::Mcmc)?.train_secs.mean.min(row(Method::McmcPca)?.train_secs.mean);
    let ratio = hmc_secs / qr.train_secs.mean;
    let fastest = cmp.rows.iter().min_by(|a, b| a.train_secs.mean.total_cmp(&b.train_secs.mean)).unwrap();
    let times: Vec<String> = cmp.rows.iter().map(|r| format!("{} {:.2}s", r.label, r.train_secs.mean)).collect();
    check(
        ratio >= 10.0 && fastest.method == Method::Dropout && qr.test.cal.mean <= dropout.test.cal.mean,
        format!(
            "hmc/qr time {ratio:.1}x, fastest {}, qr cal {:.4} vs dropout cal {:.4} [{}]",
            fastest.label,
            qr.test.cal.mean,
            dropout.test.cal.mean,
            times.join(", ")
        ),
    )
}

// ---------- 10. determinism

fn small_config(method: Method) -> ExperimentConfig {
    let mut cfg = default_study(3).into_iter().find(|c| c.method == method).unwrap();
    cfg.data = DataSource::Synthetic(SynthSpec { length: 600, period: 7, trend: 0.001, noise_std: 0.2, seed: 3 });
    cfg.reservoir.n_units = 40;
    cfg.washout = 50;
    cfg.n_runs = 2;
    cfg.n_samples = 200;
    let short = Some(HmcSettings { n_leapfrog: Some(8), n_warmup: Some(100), n_samples: Some(100), ..HmcSettings::default() });
    cfg.params = match method {
        Method::Qr | Method::Dropout | Method::Vi => MethodParams { steps: Some(200), ..cfg.params },
        _ => MethodParams { hmc: short, ..cfg.params },
    };
    cfg
}

fn determinism_suite() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_resq");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for method in Method::ALL {
        let path = dir.path().join(format!("{method}.json"));
        std::fs::write(&path, small_config(method).to_json()).map_err(|e| e.to_string())?;
        let mut outputs = Vec::new();
        for attempt in 0..2 {
            let out = dir.path().join(format!("{method}_{attempt}"));
            let status = Command::new(bin)
                .args(["run", path.to_str().unwrap(), "--seed", "11", "--out", out.to_str().unwrap()])
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!("{method}: {}", String::from_utf8_lossy(&status.stderr)));
            }
            outputs.push(std::fs::read(out.join("metrics.json")).map_err(|e| e.to_string())?);
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{method}: metrics.json differs between identical runs"));
        }
    }
    Ok(format!("{} methods, metrics.json byte-identical across repeated runs", Method::ALL.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, u64); 10] = [
        ("gradient suite", gradient_suite, 30),
        ("echo-state suite", echo_state_suite, 10),
        ("QR statistical suite", qr_suite, 60),
        ("HMC oracle suite", hmc_suite, 120),
        ("VI oracle suite", vi_suite, 60),
        ("SSVS suite", ssvs_suite, 300),
        ("metric suite", metric_suite, 20),
        ("recalibration suite", recalibration_suite, 60),
        ("ordering on the default synthetic study", ordering_suite, 900),
        ("determinism of run", determinism_suite, 300),
    ];
    let mut failures = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = f();
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > Duration::from_secs(*limit) => Err(format!("{d}; over the {limit} s budget")),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failures += usize::from(outcome.is_err());
        println!("{tag} [{}] {name} ({:.1} s): {detail}", i + 1, elapsed.as_secs_f64());
    }
    println!("{}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
