//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. `ACCEPTANCE_ONLY=3,5` runs a subset.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use funcval::calibration::{
    bias_conditional, log_marginal_terms, model_conditional, read_draws, run_mcmc, sample_sigma2, CalibrationModel,
    FieldSummary, McmcConfig,
};
use funcval::curve::Curve;
use funcval::design::generate_lhd;
use funcval::emulator::{correlation, fit_gasp, FitOptions, GaspFit, GaspHyper, NUGGET};
use funcval::iumap::{IuMap, Prior};
use funcval::pipeline::{Pipeline, RunConfig, Stage};
use funcval::prediction::{
    extrapolate_delta_shift, extrapolate_same_type, predict_new_field_run, predict_reality, transfer_bias, BandMode,
    BiasTransfer,
};
use funcval::registration::{locate_curve_anchors, register_curve, resample_dyadic, AnchorSet, GridCurve, GridSpec};
use funcval::rng::{purpose, stream};
use funcval::synth::{synth_testbed, BiasKind, SynthSpec, Truth};
use funcval::wavelet::{dwt, idwt, threshold_union, CoeffIndex, CoeffSet, RetainedIndexSet};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// State shared between criteria: the seed-1 end-to-end run is reused by the
/// extrapolation checks.
#[derive(Default)]
struct Ctx {
    _keep: Vec<tempfile::TempDir>,
    e2e_config: Option<PathBuf>,
}

type Criterion = fn(&mut Ctx) -> Outcome;

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(&str, Criterion); 13] = [
        ("wavelet round trip", c01_wavelet_round_trip),
        ("thresholding structure", c02_thresholding),
        ("emulator interpolation and oracle", c03_gasp_oracle),
        ("emulator leave-one-out quality", c04_loo),
        ("noise-variance posterior", c05_sigma2),
        ("conditional conjugacy", c06_conjugacy),
        ("marginal likelihood vs quadrature", c07_marginal_likelihood),
        ("prior recovery under a flat likelihood", c08_prior_recovery),
        ("end-to-end synthetic recovery", c09_end_to_end),
        ("extrapolation identities and ordering", c10_extrapolation),
        ("multiplicative vs additive transfer", c11_multiplicative),
        ("registration", c12_registration),
        ("determinism", c13_determinism),
    ];
    let mut ctx = Ctx::default();
    let mut failed = Vec::new();
    for (k, (name, f)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut ctx)))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            });
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Gaussian elimination with partial pivoting.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn kernel(a: &[f64], b: &[f64], h: &GaspHyper) -> f64 {
    let c = (-(0..a.len())
        .map(|p| h.beta[p] * (a[p] - b[p]).abs().powf(2.0 - h.alpha[p]))
        .sum::<f64>())
    .exp();
    if a == b {
        c + NUGGET
    } else {
        c
    }
}

/// Kriging mean and variance by dense solves.
fn dense_predict(design: &[Vec<f64>], y: &[f64], h: &GaspHyper, z: &[f64]) -> (f64, f64) {
    let r_mat: Vec<Vec<f64>> = design.iter().map(|a| design.iter().map(|b| kernel(a, b, h)).collect()).collect();
    let r: Vec<f64> = design.iter().map(|row| kernel(z, row, h)).collect();
    let resid: Vec<f64> = y.iter().map(|w| w - h.mu).collect();
    let a = dense_solve(r_mat.clone(), resid);
    let b = dense_solve(r_mat, r.clone());
    (h.mu + dot(&r, &a), (1.0 - dot(&r, &b)).max(0.0) / h.lambda)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// `(lower, upper)` columns of a band CSV.
fn read_band(path: &Path) -> (Vec<f64>, Vec<f64>) {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        lo.push(v[2]);
        hi.push(v[3]);
    }
    (lo, hi)
}

fn coverage(band: &(Vec<f64>, Vec<f64>), truth: &[f64]) -> f64 {
    let inside = band.0.iter().zip(&band.1).zip(truth).filter(|((l, u), v)| *l <= *v && *v <= *u).count();
    inside as f64 / truth.len() as f64
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- criteria

fn c01_wavelet_round_trip(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let grid = GridSpec::new(12, 0.0, 1.0).unwrap();
    let (mut max_err, mut max_rel) = (0.0f64, 0.0f64);
    for c in 0..100 {
        let mut rng = stream(1, 100, c);
        let (a, f) = (rng.random::<f64>() * 5.0, 1.0 + rng.random::<f64>() * 20.0);
        let y: Vec<f64> = grid.times().iter().map(|&s| a * (f * s).sin() + normal(&mut rng)).collect();
        let energy: f64 = y.iter().map(|v| v * v).sum();
        let g = GridCurve::new(grid, y).unwrap();
        let w = dwt(&g).unwrap();
        let back = idwt(&w, None).unwrap();
        max_err = max_err.max(back.y.iter().zip(&g.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        max_rel = max_rel.max((w.energy() - energy).abs() / energy);
    }
    let el = t.elapsed();
    outcome(
        max_err <= 1e-10 && max_rel <= 1e-9 && el < Duration::from_secs(5),
        format!("max reconstruction error {max_err:.2e}, max Parseval relative error {max_rel:.2e}, {:.2} s", secs(el)),
    )
}

fn c02_thresholding(_: &mut Ctx) -> Outcome {
    let base_ok = (4..=12).all(|j| {
        let b = RetainedIndexSet::base(j, 3);
        b.flat_indices().collect::<Vec<_>>() == (0..8).collect::<Vec<_>>()
    });
    let mut mismatches = 0;
    for s in 0..20u64 {
        let mut rng = stream(2, 100, s);
        let levels = rng.random_range(5..=9);
        let grid = GridSpec::new(levels, 0.0, 1.0).unwrap();
        let n = grid.len();
        let pct = rng.random_range(0.01..0.3);
        let curves: Vec<CoeffSet> = (0..rng.random_range(1..8))
            .map(|_| {
                let scale: Vec<f64> = (0..n).map(|_| log_uniform(&mut rng, 1e-3, 10.0)).collect();
                let y: Vec<f64> = scale.iter().map(|sc| sc * normal(&mut rng)).collect();
                dwt(&GridCurve::new(grid, y).unwrap()).unwrap()
            })
            .collect();
        let got: BTreeSet<usize> = threshold_union(&curves, 3, pct).unwrap().flat_indices().collect();
        // brute force: a coefficient is kept by a curve when fewer than
        // floor(pct N) of that curve's coefficients are strictly larger
        let n_top = (pct * n as f64).floor() as usize;
        let mut want: BTreeSet<usize> = (0..8).collect();
        for c in &curves {
            for f in 8..n {
                let larger = c.coeffs.iter().filter(|v| v.abs() > c.coeffs[f].abs()).count();
                if larger < n_top {
                    want.insert(f);
                }
            }
        }
        if got != want {
            mismatches += 1;
        }
    }
    outcome(
        base_ok && mismatches == 0,
        format!("base set is indices 0..8 for J=4..12: {base_ok}; union mismatches vs brute force: {mismatches}/20"),
    )
}

/// GP sample at `points` with the given hyperparameters.
fn gp_sample(points: &[Vec<f64>], h: &GaspHyper, seed: u64) -> Vec<f64> {
    let n = points.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = correlation(&points[i], &points[j], &h.alpha, &h.beta).unwrap();
            if i == j {
                s += 1e-10;
            }
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
        }
    }
    let mut rng = stream(seed, 100, 0);
    let e: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    (0..n).map(|i| h.mu + (0..=i).map(|k| l[i][k] * e[k]).sum::<f64>() / h.lambda.sqrt()).collect()
}

fn c03_gasp_oracle(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let design = generate_lhd(21, 3, 8, 3).unwrap().points;
    let truth = GaspHyper {
        mu: 1.0,
        lambda: 4.0,
        alpha: vec![0.1, 0.3, 0.0],
        beta: vec![2.0, 4.0, 1.0],
    };
    let y = gp_sample(&design, &truth, 3);
    let fit = fit_gasp(&design, &y, &FitOptions::default()).unwrap();
    let h = fit.hyper().clone();
    let scale = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let (mut interp, mut var_ratio) = (0.0f64, 0.0f64);
    for (z, w) in design.iter().zip(&y) {
        let (m, v) = fit.predict(z);
        interp = interp.max((m - w).abs() / w.abs().max(1e-3 * scale));
        var_ratio = var_ratio.max(v * h.lambda);
    }

    let mut rng = stream(3, 100, 1);
    let probes: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let mut oracle = 0.0f64;
    for z in &probes {
        let (m, v) = fit.predict(z);
        let (mo, vo) = dense_predict(&design, &y, &h, z);
        oracle = oracle.max((m - mo).abs()).max((v - vo).abs());
    }

    let z_star = vec![0.37, 0.61, 0.12];
    let w_star = fit.predict(&z_star).0 + 0.25;
    let mut d2 = design.clone();
    d2.push(z_star.clone());
    let mut y2 = y.clone();
    y2.push(w_star);
    let refit = GaspFit::with_hyper(&d2, &y2, h.clone()).unwrap();
    let mut aug = 0.0f64;
    for z in probes.iter().chain([&z_star]) {
        let (m, v) = fit.predict_augmented(&z_star, w_star, z).unwrap();
        let (mr, vr) = refit.predict(z);
        aug = aug.max((m - mr).abs()).max((v - vr).abs());
    }
    let el = t.elapsed();
    outcome(
        interp <= 1e-6 && var_ratio <= 1e-8 && oracle <= 1e-8 && aug <= 1e-8 && el < Duration::from_secs(30),
        format!(
            "interpolation rel err {interp:.1e}, max var·λ at design {var_ratio:.1e}, dense oracle diff {oracle:.1e}, augmented vs refit {aug:.1e}, {:.2} s",
            secs(el)
        ),
    )
}

fn c04_loo(_: &mut Ctx) -> Outcome {
    let (mut inside, mut total) = (0usize, 0usize);
    let mut per_seed = Vec::new();
    for seed in 0..10u64 {
        let mut rng = stream(4, 100, seed);
        let a: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..3.0)).collect();
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let b = rng.random_range(-1.0..1.0);
        let f = |z: &[f64]| (a[0] * z[0] + a[1] * z[1] + phase).sin() + b * z[2] * z[2] + 0.5 * (a[2] * z[0] * z[2]).cos();
        let design = generate_lhd(25, 3, 8, 40 + seed).unwrap().points;
        let y: Vec<f64> = design.iter().map(|z| f(z)).collect();
        let fit = fit_gasp(&design, &y, &FitOptions { seed, ..FitOptions::default() }).unwrap();
        let loo = fit.loo();
        let k = loo.iter().filter(|r| r.studentized.abs() <= 2.0).count();
        per_seed.push(k);
        inside += k;
        total += loo.len();
    }
    let frac = inside as f64 / total as f64;
    outcome(
        frac >= 0.9,
        format!("{inside}/{total} = {frac:.3} of studentized residuals within ±2 (per seed of 25: {per_seed:?})"),
    )
}

/// Least-squares polynomial fit of `y` on `x`, lowest degree first.
fn polyfit(x: &[f64], y: &[f64], w: &[f64], degree: usize) -> Vec<f64> {
    let p = degree + 1;
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for ((xi, yi), wi) in x.iter().zip(y).zip(w) {
        let pw: Vec<f64> = (0..p).map(|k| xi.powi(k as i32)).collect();
        for r in 0..p {
            b[r] += wi * pw[r] * yi;
            for c in 0..p {
                a[r][c] += wi * pw[r] * pw[c];
            }
        }
    }
    dense_solve(a, b)
}

fn c05_sigma2(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let draws = sample_sigma2(4.0, 7, 100_000, &mut stream(5, purpose::SIGMA2, 0));
    let (mean, _) = mean_var(&draws);
    // mode: quartic fit to the log histogram around the peak
    let (lo, width, nbins) = (0.05, 0.01, 200);
    let mut counts = vec![0.0f64; nbins];
    for d in &draws {
        let k = ((d - lo) / width).floor();
        if k >= 0.0 && (k as usize) < nbins {
            counts[k as usize] += 1.0;
        }
    }
    let peak = counts.iter().cloned().fold(0.0, f64::max);
    let (mut xs, mut ys, mut ws) = (Vec::new(), Vec::new(), Vec::new());
    for (k, c) in counts.iter().enumerate() {
        if *c >= 0.3 * peak {
            xs.push(lo + (k as f64 + 0.5) * width);
            ys.push(c.ln());
            ws.push(*c);
        }
    }
    let coef = polyfit(&xs, &ys, &ws, 4);
    let poly = |x: f64| coef.iter().enumerate().map(|(k, c)| c * x.powi(k as i32)).sum::<f64>();
    let (a, b) = (xs[0], xs[xs.len() - 1]);
    let mode = (0..=10_000)
        .map(|i| a + (b - a) * i as f64 / 10_000.0)
        .max_by(|x, y| poly(*x).total_cmp(&poly(*y)))
        .unwrap();
    let el = t.elapsed();
    outcome(
        (mean - 1.0).abs() <= 0.01 && (mode - 0.5).abs() <= 0.05 * 0.5 && el < Duration::from_secs(2),
        format!("mean {mean:.4} (target 1.00 ± 1%), mode {mode:.4} (target 0.50 ± 5%), {:.2} s", secs(el)),
    )
}

/// Mean and variance of `x_a` given `x_b = v` for a zero-mean-offset Gaussian
/// vector with mean `mu` and covariance `cov`.
fn gaussian_condition(mu: &[f64], cov: &[Vec<f64>], a: usize, b: &[usize], v: &[f64]) -> (f64, f64) {
    let s_bb: Vec<Vec<f64>> = b.iter().map(|&i| b.iter().map(|&j| cov[i][j]).collect()).collect();
    let s_ab: Vec<f64> = b.iter().map(|&j| cov[a][j]).collect();
    let resid: Vec<f64> = b.iter().zip(v).map(|(&j, x)| x - mu[j]).collect();
    let k = dense_solve(s_bb.clone(), resid);
    let g = dense_solve(s_bb, s_ab.clone());
    (mu[a] + dot(&s_ab, &k), cov[a][a] - dot(&s_ab, &g))
}

fn c06_conjugacy(_: &mut Ctx) -> Outcome {
    let n = 100_000;
    let (mut worst_form, mut worst_mean, mut worst_var) = (0.0f64, 0.0f64, 0.0f64);
    let mut over = 0;
    let mut limits_ok = true;
    for s in 0..50u64 {
        let mut rng = stream(6, 100, s);
        let wbar = 2.0 * normal(&mut rng);
        let m = normal(&mut rng);
        let v = log_uniform(&mut rng, 1e-3, 1.0);
        let noise = log_uniform(&mut rng, 1e-3, 1.0);
        let tau2 = log_uniform(&mut rng, 1e-3, 1.0);

        // (w_b, w_M, w̄) with w̄ = w_M + w_b + e
        let mu = [0.0, m, m];
        let cov = vec![
            vec![tau2, 0.0, tau2],
            vec![0.0, v, v],
            vec![tau2, v, tau2 + v + noise],
        ];
        let (mb, vb) = bias_conditional(wbar, m, v, noise, tau2);
        let (ob, ovb) = gaussian_condition(&mu, &cov, 0, &[2], &[wbar]);
        let probe_b = mb + 0.3 * vb.sqrt();
        let (mm, vm) = model_conditional(wbar, probe_b, m, v, noise);
        let (om, ovm) = gaussian_condition(&mu, &cov, 1, &[0, 2], &[probe_b, wbar]);
        for (x, o) in [(mb, ob), (vb, ovb), (mm, om), (vm, ovm)] {
            worst_form = worst_form.max((x - o).abs() / o.abs().max(1e-12));
        }

        // draws from each displayed conditional, as the sampler makes them
        let mut rb = stream(s, purpose::BIAS_DRAW, 0);
        let mut rm = stream(s, purpose::MODEL_DRAW, 0);
        let xb: Vec<f64> = (0..n).map(|_| mb + vb.sqrt() * normal(&mut rb)).collect();
        let xm: Vec<f64> = (0..n).map(|_| mm + vm.sqrt() * normal(&mut rm)).collect();
        for (xs, (em, ev)) in [(&xb, (ob, ovb)), (&xm, (om, ovm))] {
            let (sm, sv) = mean_var(xs);
            let (dm, dv) = ((sm - em).abs() / em.abs().max(ev.sqrt()), (sv - ev).abs() / ev);
            over += (dm > 0.01) as usize + (dv > 0.01) as usize;
            worst_mean = worst_mean.max(dm);
            worst_var = worst_var.max(dv);
        }

        limits_ok &= bias_conditional(wbar, m, v, noise, 0.0) == (0.0, 0.0);
        limits_ok &= model_conditional(wbar, probe_b, m, 0.0, noise) == (m, 0.0);
    }
    outcome(
        worst_form < 1e-10 && worst_mean <= 0.01 && worst_var <= 0.01 && limits_ok,
        format!(
            "closed forms vs Gaussian conditioning {worst_form:.1e}; worst relative mean error {:.2}%, variance error {:.2}% over 50 settings x 1e5 draws ({over}/200 moment checks outside 1%); exact limits {limits_ok}",
            100.0 * worst_mean,
            100.0 * worst_var
        ),
    )
}

fn c07_marginal_likelihood(_: &mut Ctx) -> Outcome {
    let wbar = [0.7, -1.2, 0.05];
    let m = [0.5, -0.4, 0.3];
    let v = [0.2, 0.05, 0.6];
    let noise = [0.1, 0.3, 0.02];
    let tau2 = [0.4, 0.4, 0.15];
    let ours = log_marginal_terms(&wbar, &m, &v, &noise, &tau2) - 1.5 * (std::f64::consts::TAU).ln();
    let pdf = |x: f64, mean: f64, var: f64| (-(x - mean).powi(2) / (2.0 * var)).exp() / (std::f64::consts::TAU * var).sqrt();
    let mut quad = 0.0;
    for i in 0..3 {
        // trapezoid over ±12 sd in w_b and w_M
        let n = 1201;
        let (sb, sm) = (tau2[i].sqrt(), v[i].sqrt());
        let (hb, hm) = (24.0 * sb / (n - 1) as f64, 24.0 * sm / (n - 1) as f64);
        let mut acc = 0.0;
        for a in 0..n {
            let wb = -12.0 * sb + a as f64 * hb;
            let fa = pdf(wb, 0.0, tau2[i]) * if a == 0 || a == n - 1 { 0.5 } else { 1.0 };
            for b in 0..n {
                let wm = m[i] - 12.0 * sm + b as f64 * hm;
                let fb = if b == 0 || b == n - 1 { 0.5 } else { 1.0 };
                acc += fa * fb * pdf(wm, m[i], v[i]) * pdf(wbar[i], wm + wb, noise[i]);
            }
        }
        quad += (acc * hb * hm).ln();
    }
    let diff = (ours - quad).abs();
    outcome(
        diff <= 1e-4,
        format!("closed form {ours:.8}, quadrature {quad:.8}, |diff| {diff:.1e} (constant -½ln 2π per index restored)"),
    )
}

fn prior_toy() -> CalibrationModel {
    let map = IuMap::parse(
        r#"
[[parameter]]
name = "x1"
role = "variation"
range = [0.2, 0.8]
sd = 0.1
bound = 0.3

[[parameter]]
name = "x2"
role = "variation"
range = [0.2, 0.8]
sd = 0.05
bound = 0.2

[[parameter]]
name = "u1"
role = "calibration"
range = [0.125, 0.875]

[[parameter]]
name = "u2"
role = "calibration"
range = [0.0, 2.0]
"#,
    )
    .unwrap();
    let design = generate_lhd(12, 4, 4, 8).unwrap().points;
    let keep = RetainedIndexSet::from_indices(
        3,
        [(0, 0), (1, 0), (2, 0), (2, 1), (3, 2)].map(|(level, pos)| CoeffIndex { level, pos }),
    )
    .unwrap();
    let fits = (0..keep.len())
        .map(|c| {
            let w: Vec<f64> = design.iter().map(|z| (z[0] + c as f64 * z[2]).sin() + z[1] * z[3]).collect();
            let hyper = GaspHyper {
                mu: 0.0,
                lambda: 2.0,
                alpha: vec![0.0; 4],
                beta: vec![1.0; 4],
            };
            GaspFit::with_hyper(&design, &w, hyper).unwrap()
        })
        .collect();
    let summary = FieldSummary {
        wbar: vec![0.4, -0.2, 0.1, 0.3, 0.0],
        s2: vec![0.6, 0.3, 0.2, 0.25, 0.1],
        n_rep: 7,
        s2_floor: 1e-12,
    };
    CalibrationModel::new(map, summary, fits, &keep).unwrap()
}

fn c08_prior_recovery(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let model = prior_toy();
    let max_scale = 100.0;
    let cfg = McmcConfig {
        n_saved: 1000,
        thin: 200,
        seed: 8,
        flat_likelihood: true,
        tau2_max_scale: Some(max_scale),
        ..McmcConfig::default()
    };
    let (draws, _) = run_mcmc(&model, &cfg).unwrap();
    let ps = [0.1, 0.5, 0.9];
    let ecdf = |xs: &[f64], q: f64| xs.iter().filter(|x| **x <= q).count() as f64 / xs.len() as f64;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    let mut report = Vec::new();

    for (k, prior) in model.delta_priors().iter().enumerate() {
        let xs: Vec<f64> = draws.draws().iter().map(|d| d.delta[k]).collect();
        let Prior::TruncNormal { mean, sd, bound } = *prior else { panic!("unexpected δ prior") };
        let (fl, fh) = (std_normal.cdf(-bound / sd), std_normal.cdf(bound / sd));
        let e = ps
            .iter()
            .map(|p| (ecdf(&xs, mean + sd * std_normal.inverse_cdf(fl + p * (fh - fl))) - p).abs())
            .fold(0.0, f64::max);
        worst = worst.max(e);
        report.push(format!("δ{} {e:.3}", k + 1));
    }
    for (k, prior) in model.u_priors().iter().enumerate() {
        let xs: Vec<f64> = draws.draws().iter().map(|d| d.u[k]).collect();
        let (lo, hi) = prior.support();
        let e = ps.iter().map(|p| (ecdf(&xs, lo + p * (hi - lo)) - p).abs()).fold(0.0, f64::max);
        worst = worst.max(e);
        report.push(format!("u{} {e:.3}", k + 1));
    }
    for (j, level) in model.levels().iter().enumerate() {
        // τ²/c has CDF ln(1 + x)/ln(1 + M) on [0, M]
        let xs: Vec<f64> = draws
            .draws()
            .iter()
            .map(|d| d.tau2[j] / model.level_scales(&d.sigma2)[j])
            .collect();
        let e = ps
            .iter()
            .map(|p| (ecdf(&xs, (1.0 + max_scale).powf(*p) - 1.0) - p).abs())
            .fold(0.0, f64::max);
        worst = worst.max(e);
        report.push(format!("τ²[{level}] {e:.3}"));
    }
    let el = t.elapsed();
    outcome(
        worst <= 0.03 && el < Duration::from_secs(120),
        format!(
            "max |F̂(q_p) - p| at p = 0.1/0.5/0.9: {worst:.3} ({}), {:.1} s",
            report.join(", "),
            secs(el)
        ),
    )
}

/// Synthetic bed plus a pipeline run through every stage.
fn run_bed(ctx: &mut Ctx, spec: &SynthSpec, seed: u64) -> (PathBuf, Truth, Duration) {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_testbed(spec, seed, dir.path()).unwrap();
    let t = Instant::now();
    Pipeline::new(data.config.clone()).unwrap().run_all().unwrap();
    let el = t.elapsed();
    let path = data.config_path.clone();
    ctx._keep.push(dir);
    (path, data.truth, el)
}

fn c09_end_to_end(ctx: &mut Ctx) -> Outcome {
    let spec = SynthSpec::default();
    let mut wins = 0;
    let mut slowest = Duration::ZERO;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let (config, truth, el) = run_bed(ctx, &spec, seed);
        slowest = slowest.max(el);
        let cfg = RunConfig::load(&config).unwrap();
        let out = cfg.output_dir();
        let bias = coverage(&read_band(&out.join("bias_band.csv")), &truth.bias);
        let reality = coverage(&read_band(&out.join("reality_band.csv")), &truth.reality);
        let (_, u) = read_draws(&out.join("draws.csv")).unwrap().mean_du();
        let iumap = IuMap::load(&cfg.resolve(&cfg.paths.iumap)).unwrap();
        let closer = iumap
            .u_priors()
            .iter()
            .zip(&u)
            .zip(&truth.spec.true_u)
            .any(|((p, post), tru)| (post - tru).abs() < (p.median() - tru).abs());
        let ok = bias >= 0.85 && reality >= 0.85 && closer;
        wins += ok as usize;
        let keep = std::fs::read_to_string(out.join("coeffs_field.csv")).unwrap();
        let n_keep = keep.lines().next().unwrap().split(',').count() - 1;
        lines.push(format!(
            "seed {seed}: bias {bias:.3}, reality {reality:.3}, u [{}] {}, |I| {n_keep}, {:.0} s",
            u.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", "),
            if ok { "ok" } else { "miss" },
            secs(el)
        ));
        if seed == 1 {
            ctx.e2e_config = Some(config);
        }
    }
    outcome(
        wins >= 3 && slowest < Duration::from_secs(600),
        format!("{wins}/5 seeds meet (a), (b) and (c) [true u {:?}]; {}", spec.true_u, lines.join("; ")),
    )
}

fn c10_extrapolation(ctx: &mut Ctx) -> Outcome {
    let config = match &ctx.e2e_config {
        Some(c) => c.clone(),
        None => {
            let (c, _, _) = run_bed(ctx, &SynthSpec::default(), 1);
            c
        }
    };
    let cfg = RunConfig::load(&config).unwrap();
    let p = Pipeline::new(cfg.clone()).unwrap();
    let grid = cfg.grid;
    let draws = read_draws(&p.artifact("draws.csv")).unwrap();
    let (keep, fits) = p.load_fits().unwrap();
    let iumap = IuMap::load(&cfg.resolve(&cfg.paths.iumap)).unwrap();
    let (alpha, mode) = (0.1, BandMode::Symmetric);

    let (re, rb) = predict_reality(&draws, &keep, grid, alpha, mode).unwrap();
    let nominal = resample_dyadic(
        &Curve::read(&cfg.resolve(&cfg.extrapolate.delta_shift.as_ref().unwrap().nominal_run)).unwrap(),
        grid,
    )
    .unwrap();
    let (se0, sb0) = extrapolate_delta_shift((&re, &rb), &nominal, &nominal).unwrap();
    let identity = se0.curves == re.curves && sb0.lower == rb.lower && sb0.upper == rb.upper && sb0.center == rb.center;

    let (_, fb) = predict_new_field_run(&draws, &keep, grid, cfg.seed, alpha, mode).unwrap();
    let (_, tb) = extrapolate_same_type(&draws, &fits, &iumap, &keep, grid, cfg.seed, alpha, mode).unwrap();
    let ratio = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x / y).fold(f64::INFINITY, f64::min);
    let field_vs_reality = ratio(&fb.width(), &rb.width());
    let same_vs_field = ratio(&tb.width(), &fb.width());

    let mut rng = stream(10, 100, 0);
    let mut constant_ok = true;
    for _ in 0..200 {
        let c = (1.0 + 9.0 * rng.random::<f64>()) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let y_m = vec![c; grid.len()];
        let y_r: Vec<f64> = (0..grid.len()).map(|_| c + normal(&mut rng)).collect();
        let (a, _) = transfer_bias(&y_m, &y_r, &y_m, BiasTransfer::Additive, 1e-3);
        let (m, fallbacks) = transfer_bias(&y_m, &y_r, &y_m, BiasTransfer::Multiplicative, 1e-3);
        constant_ok &= a == m && fallbacks == 0;
    }
    outcome(
        identity && field_vs_reality >= 0.98 && same_vs_field >= 0.98 && constant_ok,
        format!(
            "zero shift is the identity: {identity}; min width ratio new-field-run/reality {field_vs_reality:.4}; same-type/new-field-run {same_vs_field:.4}; constant model multiplicative == additive: {constant_ok}"
        ),
    )
}

fn c11_multiplicative(ctx: &mut Ctx) -> Outcome {
    let spec = SynthSpec {
        bias: BiasKind::Multiplicative,
        ..SynthSpec::default()
    };
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_testbed(&spec, seed, dir.path()).unwrap();
        let mut cfg = data.config.clone();
        cfg.extrapolate.same_type = false;
        cfg.extrapolate.delta_shift = None;
        let mut cov = Vec::new();
        for (k, m) in [BiasTransfer::Multiplicative, BiasTransfer::Additive].into_iter().enumerate() {
            cfg.extrapolate.new_nominals.as_mut().unwrap().mode = m;
            let p = Pipeline::new(cfg.clone()).unwrap();
            if k == 0 {
                p.run_all().unwrap();
            } else {
                p.run_stage(Stage::Extrapolate).unwrap();
            }
            cov.push(coverage(&read_band(&p.artifact("new_nominals_band.csv")), &data.truth.reality_b));
        }
        let ok = cov[0] >= cov[1];
        wins += ok as usize;
        lines.push(format!("seed {seed}: multiplicative {:.3}, additive {:.3}", cov[0], cov[1]));
        ctx._keep.push(dir);
    }
    outcome(wins >= 3, format!("{wins}/5 seeds with multiplicative ≥ additive coverage; {}", lines.join("; ")))
}

fn read_anchor_row(path: &Path, label: &str, shape: &AnchorSet) -> AnchorSet {
    let text = std::fs::read_to_string(path).unwrap();
    let row = text.lines().find(|l| l.split(',').next() == Some(label)).unwrap();
    let mut vals = row.split(',').skip(1).map(|v| v.parse::<f64>().unwrap());
    AnchorSet {
        windows: shape.windows.iter().map(|w| w.iter().map(|_| vals.next().unwrap()).collect()).collect(),
    }
}

fn c12_registration(ctx: &mut Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_testbed(&SynthSpec::default(), 12, dir.path()).unwrap();
    let p = Pipeline::new(data.config.clone()).unwrap();
    p.run_stage(Stage::Register).unwrap();
    let windows = &data.config.registration.windows;
    let step = data.config.grid.step();
    let max_jitter = data.truth.jitter.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));

    let mut files: Vec<PathBuf> = std::fs::read_dir(p.artifact("registered"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let (mut worst_anchor, mut worst_twice) = (0.0f64, 0.0f64);
    let mut values_equal = true;
    let mut reference = None;
    for f in &files {
        let curve = Curve::read(f).unwrap();
        let found = locate_curve_anchors(&curve, windows).unwrap();
        let reference = reference.get_or_insert_with(|| read_anchor_row(&p.artifact("anchors.csv"), "reference", &found));
        for (a, b) in found.flat().iter().zip(reference.flat()) {
            worst_anchor = worst_anchor.max((a - b).abs());
        }
        let again = register_curve(&curve, &found, reference).unwrap();
        for (a, b) in again.t.iter().zip(&curve.t) {
            worst_twice = worst_twice.max((a - b).abs());
        }
        values_equal &= again.y == curve.y;
    }
    ctx._keep.push(dir);
    outcome(
        !files.is_empty() && worst_anchor <= step + 1e-12 && worst_twice <= 1e-9 && values_equal,
        format!(
            "{} replicates (max planted jitter {max_jitter:.3}): worst anchor offset {worst_anchor:.2e} vs grid step {step:.4}; second registration moves times by at most {worst_twice:.1e}",
            files.len()
        ),
    )
}

fn c13_determinism(_: &mut Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_funcval");
    let spec = SynthSpec {
        levels: 6,
        n_runs: 16,
        model_points: 150,
        noise: SynthSpec::band_noise(6, 0.005, 0.05, 0.003),
        event_width_steps: 3,
        ..SynthSpec::default()
    };
    let spec_path = dir.path().join("synth.toml");
    std::fs::write(&spec_path, toml::to_string(&spec).unwrap()).unwrap();
    let data_dir = dir.path().join("data");
    let status = Command::new(exe)
        .args(["synth", "--seed", "13", "--config"])
        .arg(&spec_path)
        .arg("--out")
        .arg(&data_dir)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let config = data_dir.join("config.toml");
    let mut cfg = RunConfig::load(&config).unwrap();
    cfg.mcmc.n_saved = 200;
    cfg.mcmc.thin = 20;
    cfg.write(&config).unwrap();

    let run = |out: &str, threads: &str| {
        let o = Command::new(exe)
            .args(["all", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(out))
            .env("RAYON_NUM_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("a", "4");
    run("b", "4");
    run("c", "1");
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n == "draws.csv" || n == "chain.csv" || n.ends_with("_band.csv"))
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for n in &names {
        let a = std::fs::read(dir.path().join("a").join(n)).unwrap();
        for other in ["b", "c"] {
            if std::fs::read(dir.path().join(other).join(n)).unwrap() != a {
                differing.push(format!("{other}/{n}"));
            }
        }
    }
    outcome(
        names.len() >= 7 && differing.is_empty(),
        format!(
            "{} draw/band files compared across two 4-thread runs and one 1-thread run; differing: {:?}",
            names.len(),
            differing
        ),
    )
}
