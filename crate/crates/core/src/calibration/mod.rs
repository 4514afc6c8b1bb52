//! Calibration: replicate summaries, the noise-variance posterior, the
//! marginal likelihood of `(δ, u, τ²)` and the closed-form conditionals of the
//! bias and model coefficients.
//!
//! Noise variances are handled modularly: their posterior uses the replicate
//! scatter `s²` only and never sees the calibration likelihood.

mod mcmc;

pub use mcmc::{
    mh_step_du, mh_step_tau, read_draws, run_mcmc, run_mcmc_with_sigma2, sample_sigma2_matrix, ChainDiagnostics,
    ChainState, Draw, McmcConfig, PosteriorDraws,
};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::emulator::GaspFit;
use crate::error::{Error, Result};
use crate::iumap::{IuMap, Prior};
use crate::wavelet::RetainedIndexSet;

/// Per-coefficient replicate mean and scatter of the field curves.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSummary {
    pub wbar: Vec<f64>,
    /// `Σ_r (w_ir - w̄_i)²`.
    pub s2: Vec<f64>,
    pub n_rep: usize,
    /// Substitute for a zero scatter.
    pub s2_floor: f64,
}

/// Sufficient statistics from an `n_rep × |I|` matrix of field coefficients.
pub fn field_summaries(field_coeffs: &[Vec<f64>]) -> Result<FieldSummary> {
    let n_rep = field_coeffs.len();
    if n_rep < 2 {
        return Err(Error::Validation(format!(
            "{n_rep} field replicate(s); at least 2 are needed to estimate noise"
        )));
    }
    let m = field_coeffs[0].len();
    if field_coeffs.iter().any(|r| r.len() != m) {
        return Err(Error::Argument("field coefficient rows differ in length".into()));
    }
    let mut wbar = vec![0.0; m];
    for row in field_coeffs {
        for (a, v) in wbar.iter_mut().zip(row) {
            *a += v;
        }
    }
    wbar.iter_mut().for_each(|a| *a /= n_rep as f64);
    let mut s2 = vec![0.0; m];
    for row in field_coeffs {
        for ((s, v), mean) in s2.iter_mut().zip(row).zip(&wbar) {
            *s += (v - mean).powi(2);
        }
    }
    let energy: f64 = field_coeffs.iter().flatten().map(|v| v * v).sum::<f64>() / n_rep as f64;
    let s2_floor = (1e-12 * energy / m.max(1) as f64).max(f64::MIN_POSITIVE);
    Ok(FieldSummary {
        wbar,
        s2,
        n_rep,
        s2_floor,
    })
}

/// `h` draws from the noise-variance posterior, density
/// `∝ (σ²)^(-(n_rep-1)/2 - 1) exp(-s²/(2σ²))`: inverse gamma with shape
/// `(n_rep-1)/2` and rate `s²/2`.
pub fn sample_sigma2<R: Rng + ?Sized>(s2: f64, n_rep: usize, h: usize, rng: &mut R) -> Vec<f64> {
    let shape = (n_rep as f64 - 1.0) / 2.0;
    let gamma = Gamma::new(shape, 1.0).expect("shape is positive for n_rep >= 2");
    (0..h).map(|_| 0.5 * s2 / gamma.sample(rng)).collect()
}

/// Mean and variance of `w^b_i` given everything else (the bias is shrunk
/// toward zero by its level variance `τ²`).
pub fn bias_conditional(wbar: f64, m_hat: f64, v_hat: f64, noise_var: f64, tau2: f64) -> (f64, f64) {
    if tau2 == 0.0 {
        return (0.0, 0.0);
    }
    let base = v_hat + noise_var;
    let total = base + tau2;
    (tau2 / total * (wbar - m_hat), tau2 * base / total)
}

/// Mean and variance of the model coefficient `w^M_i(δ, u)` given the bias
/// draw; `noise_var` is `σ²/n_rep`.
pub fn model_conditional(wbar: f64, wb: f64, m_hat: f64, v_hat: f64, noise_var: f64) -> (f64, f64) {
    if v_hat == 0.0 {
        return (m_hat, 0.0);
    }
    let total = v_hat + noise_var;
    (
        v_hat / total * (wbar - wb) + noise_var / total * m_hat,
        v_hat * noise_var / total,
    )
}

/// `Σ_i [-½ log S_i - ½ (w̄_i - m̂_i)² / S_i]` with `S_i = V̂_i + σ_i²/n + τ²_{j(i)}`.
pub fn log_marginal_terms(wbar: &[f64], m_hat: &[f64], v_hat: &[f64], noise_var: &[f64], tau2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..wbar.len() {
        let s = v_hat[i] + noise_var[i] + tau2[i];
        let r = wbar[i] - m_hat[i];
        acc += -0.5 * s.ln() - 0.5 * r * r / s;
    }
    acc
}

/// Everything the sampler needs: priors, emulators and field statistics.
#[derive(Clone, Debug)]
pub struct CalibrationModel {
    pub iumap: IuMap,
    pub summary: FieldSummary,
    pub fits: Vec<GaspFit>,
    pub labels: Vec<String>,
    /// Resolution levels that have at least one retained coefficient.
    levels: Vec<u32>,
    /// Position in `levels` of each coefficient's level.
    slot: Vec<usize>,
    delta_priors: Vec<Prior>,
    u_priors: Vec<Prior>,
}

impl CalibrationModel {
    pub fn new(iumap: IuMap, summary: FieldSummary, fits: Vec<GaspFit>, keep: &RetainedIndexSet) -> Result<Self> {
        let m = keep.len();
        if summary.wbar.len() != m || fits.len() != m {
            return Err(Error::Argument(format!(
                "{} retained coefficients but {} field statistics and {} emulators",
                m,
                summary.wbar.len(),
                fits.len()
            )));
        }
        if let Some(f) = fits.iter().find(|f| f.dim() != iumap.dim()) {
            return Err(Error::Argument(format!(
                "emulator has {} inputs but the I/U map has {}",
                f.dim(),
                iumap.dim()
            )));
        }
        let level_map = keep.level_map();
        let mut levels = level_map.clone();
        levels.dedup();
        let slot = level_map
            .iter()
            .map(|l| levels.iter().position(|v| v == l).unwrap_or(0))
            .collect();
        Ok(CalibrationModel {
            delta_priors: iumap.delta_priors(),
            u_priors: iumap.u_priors(),
            iumap,
            summary,
            fits,
            labels: keep.labels(),
            levels,
            slot,
        })
    }

    pub fn n_coeffs(&self) -> usize {
        self.fits.len()
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn slot_of(&self, i: usize) -> usize {
        self.slot[i]
    }

    pub fn delta_priors(&self) -> &[Prior] {
        &self.delta_priors
    }

    pub fn u_priors(&self) -> &[Prior] {
        &self.u_priors
    }

    /// Emulator means and variances at `(x_nom + δ, u)`.
    pub fn emulate(&self, delta: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z = self.iumap.to_unit(delta, u);
        let pairs: Vec<(f64, f64)> = if self.fits.len() >= 64 {
            self.fits.par_iter().map(|f| f.predict(&z)).collect()
        } else {
            self.fits.iter().map(|f| f.predict(&z)).collect()
        };
        pairs.into_iter().unzip()
    }

    /// Log prior of `(δ, u)` up to a constant; `-inf` outside the supports.
    pub fn log_prior_du(&self, delta: &[f64], u: &[f64]) -> f64 {
        let a: f64 = self.delta_priors.iter().zip(delta).map(|(p, v)| p.log_density(*v)).sum();
        let b: f64 = self.u_priors.iter().zip(u).map(|(p, v)| p.log_density(*v)).sum();
        a + b
    }

    /// Prior scale `σ̄_j² / n_rep` per level slot, where `σ̄_j²` averages the
    /// noise variances of the coefficients at level `j`.
    pub fn level_scales(&self, sigma2: &[f64]) -> Vec<f64> {
        let mut sum = vec![0.0; self.levels.len()];
        let mut count = vec![0usize; self.levels.len()];
        for (i, s) in sigma2.iter().enumerate() {
            sum[self.slot[i]] += s;
            count[self.slot[i]] += 1;
        }
        sum.iter()
            .zip(&count)
            .map(|(s, c)| s / *c as f64 / self.summary.n_rep as f64)
            .collect()
    }

    /// `Σ_j -log(τ_j² + scale_j)`, optionally restricted to `τ_j² ≤ max_scale · scale_j`.
    pub fn log_prior_tau(&self, tau2: &[f64], scales: &[f64], max_scale: Option<f64>) -> f64 {
        let mut acc = 0.0;
        for (t, c) in tau2.iter().zip(scales) {
            if !(*t > 0.0) || max_scale.is_some_and(|m| *t > m * c) {
                return f64::NEG_INFINITY;
            }
            acc -= (t + c).ln();
        }
        acc
    }

    /// Log marginal likelihood given cached emulator output.
    pub fn log_likelihood(&self, m_hat: &[f64], v_hat: &[f64], sigma2: &[f64], tau2: &[f64]) -> f64 {
        let n = self.summary.n_rep as f64;
        let noise: Vec<f64> = sigma2.iter().map(|s| s / n).collect();
        let t: Vec<f64> = (0..self.n_coeffs()).map(|i| tau2[self.slot[i]]).collect();
        log_marginal_terms(&self.summary.wbar, m_hat, v_hat, &noise, &t)
    }

    /// Log marginal likelihood at `(δ, u, τ², σ²)`.
    pub fn log_marginal_likelihood(&self, delta: &[f64], u: &[f64], tau2: &[f64], sigma2: &[f64]) -> f64 {
        let (m, v) = self.emulate(delta, u);
        self.log_likelihood(&m, &v, sigma2, tau2)
    }
}
