//! Gaussian-process (GASP) emulator for one wavelet coefficient.
//!
//! Correlation is the power-exponential family
//! `c(z, z') = exp(-Σ_p β_p |z_p - z'_p|^(2 - α_p))` on unit-cube inputs. The
//! mean `μ` and precision `λ` are profiled out in closed form; `(α, β)` are
//! fitted by multi-start Nelder–Mead on the profile log-likelihood.
//!
//! A nugget of [`NUGGET`] is added to the correlation diagonal. It is treated
//! as part of the kernel at zero distance, so predictions at a design row
//! reproduce the response exactly.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::random_lhd;
use crate::error::{Error, Result};
use crate::optimize::NelderMead;
use crate::rng::{purpose, stream};

pub const NUGGET: f64 = 1e-8;

/// Plug-in hyperparameters of one coefficient's GASP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaspHyper {
    pub mu: f64,
    /// Precision, the reciprocal of the process variance.
    pub lambda: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GaspHyper {
    fn check(&self, d: usize) -> Result<()> {
        if self.alpha.len() != d || self.beta.len() != d {
            return Err(Error::Argument(format!("hyperparameters are not {d}-dimensional")));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!("precision {} must be positive", self.lambda)));
        }
        if self.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Argument("alpha must lie in [0, 1]".into()));
        }
        if self.beta.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::Argument("beta must be nonnegative".into()));
        }
        Ok(())
    }
}

#[inline]
fn power_term(diff: f64, alpha: f64) -> f64 {
    let a = diff.abs();
    if alpha == 0.0 {
        a * a
    } else if alpha == 1.0 {
        a
    } else if a == 0.0 {
        0.0
    } else {
        a.powf(2.0 - alpha)
    }
}

#[inline]
fn corr_unchecked(z: &[f64], zp: &[f64], alpha: &[f64], beta: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in 0..z.len() {
        if beta[p] != 0.0 {
            s += beta[p] * power_term(z[p] - zp[p], alpha[p]);
        }
    }
    (-s).exp()
}

/// Power-exponential correlation between two points.
pub fn correlation(z: &[f64], zp: &[f64], alpha: &[f64], beta: &[f64]) -> Result<f64> {
    let d = z.len();
    if zp.len() != d || alpha.len() != d || beta.len() != d {
        return Err(Error::Argument("dimension mismatch in correlation".into()));
    }
    if beta.iter().any(|b| *b < 0.0) {
        return Err(Error::Argument("beta must be nonnegative".into()));
    }
    Ok(corr_unchecked(z, zp, alpha, beta))
}

/// In-place lower Cholesky factor of a row-major `n × n` matrix.
/// Returns `false` if a pivot is not positive.
fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

/// Solve `L x = b` for row-major lower-triangular `L`.
fn forward(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let s: f64 = row.iter().zip(&x[..i]).map(|(a, v)| a * v).sum();
        x[i] = (x[i] - s) / l[i * n + i];
    }
    x
}

/// Solve `Lᵀ x = b`.
fn backward_t(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Profiled likelihood quantities for fixed `(α, β)`.
struct Profile {
    mu: f64,
    lambda: f64,
    log_lik: f64,
    chol: Vec<f64>,
}

fn corr_matrix(design: &[Vec<f64>], alpha: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = design.len();
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        r[i * n + i] = 1.0 + NUGGET;
        for j in 0..i {
            let c = corr_unchecked(&design[i], &design[j], alpha, beta);
            r[i * n + j] = c;
            r[j * n + i] = c;
        }
    }
    r
}

fn profile(design: &[Vec<f64>], response: &[f64], alpha: &[f64], beta: &[f64]) -> Option<Profile> {
    let n = design.len();
    let mut chol = corr_matrix(design, alpha, beta);
    if !cholesky(&mut chol, n) {
        return None;
    }
    let ones = vec![1.0; n];
    let l1 = forward(&chol, n, &ones);
    let lw = forward(&chol, n, response);
    let mu = dot(&l1, &lw) / dot(&l1, &l1);
    let whitened: Vec<f64> = lw.iter().zip(&l1).map(|(w, o)| w - mu * o).collect();
    let q = dot(&whitened, &whitened);
    let scale = response.iter().map(|w| w * w).sum::<f64>() / n as f64;
    let sigma2 = (q / n as f64).max(1e-14 * scale).max(f64::MIN_POSITIVE);
    let log_det: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum::<f64>() * 2.0;
    let log_lik = -0.5 * n as f64 * sigma2.ln() - 0.5 * log_det;
    if !log_lik.is_finite() || !mu.is_finite() {
        return None;
    }
    Some(Profile {
        mu,
        lambda: 1.0 / sigma2,
        log_lik,
        chol,
    })
}

/// Profile log-likelihood `-(K/2) log σ̂² - ½ log|R|` with the GLS mean and
/// its precision `1/σ̂²`; `None` if the correlation matrix is not positive
/// definite.
pub fn profile_log_lik(design: &[Vec<f64>], response: &[f64], alpha: &[f64], beta: &[f64]) -> Option<(f64, f64, f64)> {
    profile(design, response, alpha, beta).map(|p| (p.log_lik, p.mu, p.lambda))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub seed: u64,
    /// Multi-start count; 0 means `2d + 1`.
    pub n_starts: usize,
    pub max_evals: usize,
    pub log_beta_min: f64,
    pub log_beta_max: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            seed: 0,
            n_starts: 0,
            max_evals: 600,
            log_beta_min: (1e-6f64).ln(),
            log_beta_max: (1e3f64).ln(),
        }
    }
}

/// Leave-one-out prediction at one design row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LooResidual {
    pub mean: f64,
    pub var: f64,
    pub studentized: f64,
}

/// Fitted emulator. Immutable and shareable across threads.
#[derive(Clone, Debug)]
pub struct GaspFit {
    hyper: GaspHyper,
    design: Vec<Vec<f64>>,
    response: Vec<f64>,
    /// Row-major lower Cholesky factor of the correlation matrix.
    chol: Vec<f64>,
    /// `R⁻¹ (w - μ)`.
    kinv_resid: Vec<f64>,
    /// `L⁻¹ (w - μ)`.
    whitened: Vec<f64>,
    log_lik: f64,
}

fn check_data(design: &[Vec<f64>], response: &[f64]) -> Result<usize> {
    let k = design.len();
    if k < 2 {
        return Err(Error::Argument("a GASP needs at least two runs".into()));
    }
    if response.len() != k {
        return Err(Error::Argument(format!("{k} design rows but {} responses", response.len())));
    }
    let d = design[0].len();
    if d == 0 || design.iter().any(|r| r.len() != d) {
        return Err(Error::Argument("design rows must share a positive dimension".into()));
    }
    if design.iter().flatten().chain(response).any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite design or response value".into()));
    }
    for i in 0..k {
        for j in 0..i {
            if design[i] == design[j] {
                return Err(Error::Argument(format!("design rows {j} and {i} coincide")));
            }
        }
    }
    Ok(d)
}

static WARNED_OUTSIDE: AtomicBool = AtomicBool::new(false);

impl GaspFit {
    fn assemble(design: &[Vec<f64>], response: &[f64], hyper: GaspHyper, chol: Vec<f64>, log_lik: f64) -> Self {
        let n = design.len();
        let resid: Vec<f64> = response.iter().map(|w| w - hyper.mu).collect();
        let whitened = forward(&chol, n, &resid);
        let kinv_resid = backward_t(&chol, n, &whitened);
        GaspFit {
            hyper,
            design: design.to_vec(),
            response: response.to_vec(),
            chol,
            kinv_resid,
            whitened,
            log_lik,
        }
    }

    /// Emulator with fully specified hyperparameters (no fitting).
    pub fn with_hyper(design: &[Vec<f64>], response: &[f64], hyper: GaspHyper) -> Result<Self> {
        let d = check_data(design, response)?;
        hyper.check(d)?;
        let n = design.len();
        let mut chol = corr_matrix(design, &hyper.alpha, &hyper.beta);
        if !cholesky(&mut chol, n) {
            return Err(Error::Conditioning(format!("{n}-run correlation matrix is not positive definite")));
        }
        Ok(Self::assemble(design, response, hyper, chol, f64::NAN))
    }

    pub fn hyper(&self) -> &GaspHyper {
        &self.hyper
    }

    pub fn design(&self) -> &[Vec<f64>] {
        &self.design
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn n_runs(&self) -> usize {
        self.design.len()
    }

    pub fn dim(&self) -> usize {
        self.hyper.alpha.len()
    }

    /// Profile log-likelihood at the fitted hyperparameters (NaN if not fitted).
    pub fn log_lik(&self) -> f64 {
        self.log_lik
    }

    fn kernel_vec(&self, z: &[f64]) -> Vec<f64> {
        self.design
            .iter()
            .map(|row| {
                let c = corr_unchecked(z, row, &self.hyper.alpha, &self.hyper.beta);
                if row.as_slice() == z {
                    c + NUGGET
                } else {
                    c
                }
            })
            .collect()
    }

    fn warn_if_outside(z: &[f64]) {
        if z.iter().any(|v| !(0.0..=1.0).contains(v)) && !WARNED_OUTSIDE.swap(true, Ordering::Relaxed) {
            log::warn!("emulator evaluated outside the unit cube at {z:?}");
        }
    }

    /// Predictive mean and variance at `z`.
    pub fn predict(&self, z: &[f64]) -> (f64, f64) {
        Self::warn_if_outside(z);
        let r = self.kernel_vec(z);
        let mean = self.hyper.mu + dot(&r, &self.kinv_resid);
        let v = forward(&self.chol, self.n_runs(), &r);
        let var = (1.0 - dot(&v, &v)).max(0.0) / self.hyper.lambda;
        (mean, var)
    }

    pub fn predict_mean(&self, z: &[f64]) -> f64 {
        self.hyper.mu + dot(&self.kernel_vec(z), &self.kinv_resid)
    }

    /// Prediction at `z_new` after adding the point `(z_star, w_star)` to the
    /// runs, with the hyperparameters held fixed.
    pub fn predict_augmented(&self, z_star: &[f64], w_star: f64, z_new: &[f64]) -> Result<(f64, f64)> {
        if self.design.iter().any(|row| row.as_slice() == z_star) {
            return Ok(self.predict(z_new));
        }
        Self::warn_if_outside(z_new);
        let n = self.n_runs();
        let (alpha, beta) = (&self.hyper.alpha, &self.hyper.beta);
        let l = forward(&self.chol, n, &self.kernel_vec(z_star));
        let s2 = 1.0 + NUGGET - dot(&l, &l);
        if !(s2 > 0.0) {
            return Err(Error::Conditioning(format!(
                "augmented correlation matrix is not positive definite (pivot {s2:e})"
            )));
        }
        let s = s2.sqrt();
        let y_star = (w_star - self.hyper.mu - dot(&l, &self.whitened)) / s;

        let v = forward(&self.chol, n, &self.kernel_vec(z_new));
        let mut r_star = corr_unchecked(z_new, z_star, alpha, beta);
        if z_new == z_star {
            r_star += NUGGET;
        }
        let v_star = (r_star - dot(&l, &v)) / s;
        let mean = self.hyper.mu + dot(&v, &self.whitened) + v_star * y_star;
        let var = (1.0 - dot(&v, &v) - v_star * v_star).max(0.0) / self.hyper.lambda;
        Ok((mean, var))
    }

    /// Closed-form leave-one-out predictions with hyperparameters held fixed.
    pub fn loo(&self) -> Vec<LooResidual> {
        let n = self.n_runs();
        // diag(R⁻¹) = squared column norms of L⁻¹
        let mut diag = vec![0.0; n];
        for k in 0..n {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            let col = forward(&self.chol, n, &e);
            diag[k] = dot(&col, &col);
        }
        (0..n)
            .map(|k| {
                let a = self.kinv_resid[k];
                let mean = self.response[k] - a / diag[k];
                let var = (1.0 / diag[k] - NUGGET).max(0.0) / self.hyper.lambda;
                LooResidual {
                    mean,
                    var,
                    studentized: (self.response[k] - mean) / var.sqrt(),
                }
            })
            .collect()
    }

    pub fn loo_rmse(&self) -> f64 {
        let loo = self.loo();
        let ss: f64 = loo.iter().zip(&self.response).map(|(l, w)| (l.mean - w).powi(2)).sum();
        (ss / loo.len() as f64).sqrt()
    }
}

fn unpack(theta: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let beta = theta[..d].iter().map(|v| v.exp()).collect();
    let alpha = theta[d..].to_vec();
    (alpha, beta)
}

fn fit_with_rng<R: Rng>(design: &[Vec<f64>], response: &[f64], opts: &FitOptions, rng: &mut R) -> Result<GaspFit> {
    let d = check_data(design, response)?;
    if !(opts.log_beta_min < opts.log_beta_max) {
        return Err(Error::config("fit.log_beta_min", "must be below log_beta_max"));
    }
    let n_starts = if opts.n_starts == 0 { 2 * d + 1 } else { opts.n_starts };
    let objective = |theta: &[f64]| -> f64 {
        let (alpha, beta) = unpack(theta, d);
        profile(design, response, &alpha, &beta).map_or(f64::INFINITY, |p| -p.log_lik)
    };

    let mut lower = vec![opts.log_beta_min; d];
    lower.extend(vec![0.0; d]);
    let mut upper = vec![opts.log_beta_max; d];
    upper.extend(vec![1.0; d]);
    let mut step = vec![1.0; d];
    step.extend(vec![0.25; d]);
    let nm = NelderMead {
        lower: lower.clone(),
        upper,
        step,
        max_evals: opts.max_evals,
        ftol: 1e-10,
    };

    // starting points: cell centres of a random LHD in (log β, α)
    let (lb_lo, lb_hi) = ((0.05f64).ln().max(opts.log_beta_min), (50.0f64).ln().min(opts.log_beta_max));
    let ranks = random_lhd(n_starts, 2 * d, rng);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in 0..n_starts {
        let x0: Vec<f64> = (0..2 * d)
            .map(|c| {
                let u = (ranks[c][s] as f64 + 0.5) / n_starts as f64;
                if c < d {
                    lb_lo + u * (lb_hi - lb_lo)
                } else {
                    u
                }
            })
            .collect();
        let m = nm.minimize(objective, &x0);
        if m.f.is_finite() && best.as_ref().is_none_or(|(_, f)| m.f < *f) {
            best = Some((m.x, m.f));
        }
    }
    let (mut theta, mut f_best) = best.ok_or_else(|| Error::Fit {
        index: String::new(),
        msg: "no starting point gave a finite likelihood".into(),
    })?;

    // Prefer an inactive input when switching it off costs nothing.
    for p in 0..d {
        if theta[p] > opts.log_beta_min {
            let mut trial = theta.clone();
            trial[p] = opts.log_beta_min;
            let f = objective(&trial);
            if f <= f_best + 1e-4 {
                theta = trial;
                f_best = f.min(f_best);
            }
        }
    }

    let (alpha, beta) = unpack(&theta, d);
    let prof = profile(design, response, &alpha, &beta)
        .ok_or_else(|| Error::Conditioning("correlation matrix at the fitted hyperparameters".into()))?;
    let hyper = GaspHyper {
        mu: prof.mu,
        lambda: prof.lambda,
        alpha,
        beta,
    };
    Ok(GaspFit::assemble(design, response, hyper, prof.chol, prof.log_lik))
}

/// Maximum-likelihood GASP fit; deterministic given `opts.seed`.
pub fn fit_gasp(design: &[Vec<f64>], response: &[f64], opts: &FitOptions) -> Result<GaspFit> {
    fit_with_rng(design, response, opts, &mut stream(opts.seed, purpose::GASP_STARTS, 0))
}

/// Independent fits for every response column, in parallel.
/// `responses[i]` holds coefficient `i` across the runs.
pub fn fit_all(design: &[Vec<f64>], responses: &[Vec<f64>], labels: &[String], opts: &FitOptions) -> Result<Vec<GaspFit>> {
    responses
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut rng = stream(opts.seed, purpose::GASP_STARTS, i as u64);
            fit_with_rng(design, w, opts, &mut rng).map_err(|e| Error::Fit {
                index: labels.get(i).cloned().unwrap_or_else(|| i.to_string()),
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Diagnostics table: one row per coefficient.
pub fn fit_dump_csv(labels: &[String], fits: &[GaspFit]) -> String {
    let d = fits.first().map_or(0, GaspFit::dim);
    let mut out = String::from("index,mu,lambda");
    for p in 1..=d {
        let _ = write!(out, ",alpha.{p}");
    }
    for p in 1..=d {
        let _ = write!(out, ",beta.{p}");
    }
    out.push_str(",loo_rmse\n");
    for (label, f) in labels.iter().zip(fits) {
        let h = f.hyper();
        let _ = write!(out, "{label},{},{}", h.mu, h.lambda);
        for a in &h.alpha {
            let _ = write!(out, ",{a}");
        }
        for b in &h.beta {
            let _ = write!(out, ",{b}");
        }
        let _ = writeln!(out, ",{}", f.loo_rmse());
    }
    out
}

/// Parse the hyperparameters back out of a [`fit_dump_csv`] table.
pub fn read_fit_dump(path: &std::path::Path) -> Result<Vec<(String, GaspHyper)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty fit table"))?
        .split(',')
        .collect();
    if header.len() < 4 || header[0] != "index" || header[header.len() - 1] != "loo_rmse" || (header.len() - 4) % 2 != 0 {
        return Err(Error::parse(path, "unexpected fit table header"));
    }
    let d = (header.len() - 4) / 2;
    let mut out = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != header.len() {
            return Err(Error::parse(path, format!("length mismatch at row {}", k + 1)));
        }
        let nums = cols[1..]
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(path, format!("bad number at row {}", k + 1)))?;
        out.push((
            cols[0].to_string(),
            GaspHyper {
                mu: nums[0],
                lambda: nums[1],
                alpha: nums[2..2 + d].to_vec(),
                beta: nums[2 + d..2 + 2 * d].to_vec(),
            },
        ));
    }
    Ok(out)
}
