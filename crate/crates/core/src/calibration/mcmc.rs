//! Metropolis–Hastings sampler for `(δ, u, τ²)` with modular noise variances,
//! followed by conjugate draws of the bias and model coefficients.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{bias_conditional, model_conditional, sample_sigma2, CalibrationModel, FieldSummary};
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    /// Saved joint draws `H`.
    pub n_saved: usize,
    /// Sampler cycles between saved draws.
    pub thin: usize,
    pub seed: u64,
    /// Cycles discarded before the first block.
    pub burn_in: usize,
    /// Half-width of the local uniform proposal for `δ` and `u`.
    pub local_step: f64,
    /// Half-width of the log-uniform `τ²` proposal.
    pub tau_half_width: f64,
    /// Optional cap `τ_j² ≤ tau2_max_scale · σ̄_j²/n_rep`, which makes the `τ²`
    /// prior proper.
    pub tau2_max_scale: Option<f64>,
    /// Replace the likelihood by a constant (prior-sampling diagnostic).
    pub flat_likelihood: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_saved: 1000,
            thin: 200,
            seed: 0,
            burn_in: 0,
            local_step: 0.05,
            tau_half_width: 0.7,
            tau2_max_scale: None,
            flat_likelihood: false,
        }
    }
}

impl McmcConfig {
    fn validate(&self) -> Result<()> {
        if self.n_saved == 0 {
            return Err(Error::config("mcmc.n_saved", "must be positive"));
        }
        if self.thin == 0 {
            return Err(Error::config("mcmc.thin", "must be positive"));
        }
        if !(self.local_step > 0.0) {
            return Err(Error::config("mcmc.local_step", "must be positive"));
        }
        if !(self.tau_half_width > 0.0) {
            return Err(Error::config("mcmc.tau_half_width", "must be positive"));
        }
        if self.tau2_max_scale.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::config("mcmc.tau2_max_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Current sampler position with cached emulator output at `(δ, u)`.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub delta: Vec<f64>,
    pub u: Vec<f64>,
    /// One entry per populated level.
    pub tau2: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// `σ̄_j²/n_rep` per level for the current `σ²`.
    pub scales: Vec<f64>,
    pub m_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub log_lik: f64,
    pub log_prior_du: f64,
    pub log_prior_tau: f64,
}

impl ChainState {
    pub fn log_post(&self) -> f64 {
        self.log_lik + self.log_prior_du + self.log_prior_tau
    }

    /// State at the prior centre: `δ = 0`, `u` at range midpoints, `τ_j²` at
    /// the prior scale.
    pub fn initial(model: &CalibrationModel, sigma2: Vec<f64>, cfg: &McmcConfig) -> Result<Self> {
        let delta: Vec<f64> = model.delta_priors().iter().map(|p| p.median()).collect();
        let u: Vec<f64> = model.u_priors().iter().map(|p| p.median()).collect();
        let scales = model.level_scales(&sigma2);
        let tau2 = scales.clone();
        let (m_hat, v_hat) = model.emulate(&delta, &u);
        let mut state = ChainState {
            log_prior_du: model.log_prior_du(&delta, &u),
            log_prior_tau: model.log_prior_tau(&tau2, &scales, cfg.tau2_max_scale),
            delta,
            u,
            tau2,
            sigma2,
            scales,
            m_hat,
            v_hat,
            log_lik: 0.0,
        };
        state.log_lik = log_lik(model, cfg, &state.m_hat, &state.v_hat, &state.sigma2, &state.tau2);
        if !state.log_post().is_finite() {
            return Err(Error::Init(format!(
                "log posterior is {} at δ = {:?}, u = {:?}",
                state.log_post(),
                state.delta,
                state.u
            )));
        }
        Ok(state)
    }

    /// Install a new block of noise variances.
    fn set_sigma2(&mut self, model: &CalibrationModel, cfg: &McmcConfig, sigma2: Vec<f64>) {
        let scales = model.level_scales(&sigma2);
        if cfg.tau2_max_scale.is_some() {
            // keep τ² inside the moving cap by following the prior scale
            for ((t, new), old) in self.tau2.iter_mut().zip(&scales).zip(&self.scales) {
                *t *= new / old;
            }
        }
        self.sigma2 = sigma2;
        self.scales = scales;
        self.log_prior_tau = model.log_prior_tau(&self.tau2, &self.scales, cfg.tau2_max_scale);
        self.log_lik = log_lik(model, cfg, &self.m_hat, &self.v_hat, &self.sigma2, &self.tau2);
    }
}

fn log_lik(model: &CalibrationModel, cfg: &McmcConfig, m: &[f64], v: &[f64], sigma2: &[f64], tau2: &[f64]) -> f64 {
    if cfg.flat_likelihood {
        0.0
    } else {
        model.log_likelihood(m, v, sigma2, tau2)
    }
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    log_ratio >= 0.0 || u.ln() < log_ratio
}

/// Joint log-uniform proposal for all `τ_j²`; returns whether it was accepted.
pub fn mh_step_tau<R: Rng + ?Sized>(model: &CalibrationModel, state: &mut ChainState, cfg: &McmcConfig, rng: &mut R) -> bool {
    let hw = cfg.tau_half_width;
    let mut log_hastings = 0.0;
    let prop: Vec<f64> = state
        .tau2
        .iter()
        .map(|t| {
            let e = rng.random_range(-hw..=hw);
            log_hastings += e;
            t * e.exp()
        })
        .collect();
    let lp = model.log_prior_tau(&prop, &state.scales, cfg.tau2_max_scale);
    if lp == f64::NEG_INFINITY {
        let _: f64 = rng.random();
        return false;
    }
    let ll = log_lik(model, cfg, &state.m_hat, &state.v_hat, &state.sigma2, &prop);
    let ratio = ll + lp - state.log_lik - state.log_prior_tau + log_hastings;
    if accept(ratio, rng) {
        state.tau2 = prop;
        state.log_lik = ll;
        state.log_prior_tau = lp;
        true
    } else {
        false
    }
}

/// Density of the per-coordinate proposal mixture: half uniform on the
/// support, half uniform on the support within `step` of `from`.
pub(crate) fn du_proposal_density(to: f64, from: f64, support: (f64, f64), step: f64) -> f64 {
    let (a, b) = support;
    let (lo, hi) = ((from - step).max(a), (from + step).min(b));
    let local = if to >= lo && to <= hi { 0.5 / (hi - lo) } else { 0.0 };
    0.5 / (b - a) + local
}

/// Mixture proposal for `(δ, u)`, accepted jointly.
pub fn mh_step_du<R: Rng + ?Sized>(model: &CalibrationModel, state: &mut ChainState, cfg: &McmcConfig, rng: &mut R) -> bool {
    let supports: Vec<(f64, f64)> = model
        .delta_priors()
        .iter()
        .chain(model.u_priors())
        .map(|p| p.support())
        .collect();
    let current: Vec<f64> = state.delta.iter().chain(&state.u).copied().collect();
    let step = cfg.local_step;
    let mut log_q = 0.0;
    let prop: Vec<f64> = current
        .iter()
        .zip(&supports)
        .map(|(&x, &(a, b))| {
            let y = if rng.random::<bool>() {
                rng.random_range(a..=b)
            } else {
                rng.random_range((x - step).max(a)..=(x + step).min(b))
            };
            log_q += du_proposal_density(x, y, (a, b), step).ln() - du_proposal_density(y, x, (a, b), step).ln();
            y
        })
        .collect();
    let nd = state.delta.len();
    let (delta, u) = prop.split_at(nd);
    let lp = model.log_prior_du(delta, u);
    if lp == f64::NEG_INFINITY {
        let _: f64 = rng.random();
        return false;
    }
    let (m, v) = model.emulate(delta, u);
    let ll = log_lik(model, cfg, &m, &v, &state.sigma2, &state.tau2);
    let ratio = ll + lp - state.log_lik - state.log_prior_du + log_q;
    if accept(ratio, rng) {
        state.delta = delta.to_vec();
        state.u = u.to_vec();
        state.m_hat = m;
        state.v_hat = v;
        state.log_lik = ll;
        state.log_prior_du = lp;
        true
    } else {
        false
    }
}

/// One saved joint posterior draw. Components are only ever handled together.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub delta: Vec<f64>,
    pub u: Vec<f64>,
    /// Per populated level, matching [`PosteriorDraws::levels`].
    pub tau2: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub wb: Vec<f64>,
    /// Model coefficients at `(x_nom + δ, u)`.
    pub wm: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    pub delta_names: Vec<String>,
    pub u_names: Vec<String>,
    pub levels: Vec<u32>,
    pub labels: Vec<String>,
    draws: Vec<Draw>,
}

impl PosteriorDraws {
    pub fn new(delta_names: Vec<String>, u_names: Vec<String>, levels: Vec<u32>, labels: Vec<String>, draws: Vec<Draw>) -> Result<Self> {
        for (h, d) in draws.iter().enumerate() {
            if d.delta.len() != delta_names.len()
                || d.u.len() != u_names.len()
                || d.tau2.len() != levels.len()
                || d.sigma2.len() != labels.len()
                || d.wb.len() != labels.len()
                || d.wm.len() != labels.len()
            {
                return Err(Error::Argument(format!("draw {h} has inconsistent component lengths")));
            }
        }
        Ok(PosteriorDraws {
            delta_names,
            u_names,
            levels,
            labels,
            draws,
        })
    }

    pub fn draws(&self) -> &[Draw] {
        &self.draws
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn n_coeffs(&self) -> usize {
        self.labels.len()
    }

    /// Posterior means of `δ` and `u`.
    pub fn mean_du(&self) -> (Vec<f64>, Vec<f64>) {
        let h = self.draws.len() as f64;
        let mut delta = vec![0.0; self.delta_names.len()];
        let mut u = vec![0.0; self.u_names.len()];
        for d in &self.draws {
            delta.iter_mut().zip(&d.delta).for_each(|(a, v)| *a += v / h);
            u.iter_mut().zip(&d.u).for_each(|(a, v)| *a += v / h);
        }
        (delta, u)
    }

    fn header(&self) -> Vec<String> {
        let mut cols = Vec::new();
        cols.extend(self.delta_names.iter().map(|n| format!("delta.{n}")));
        cols.extend(self.u_names.iter().map(|n| format!("u.{n}")));
        cols.extend(self.levels.iter().map(|j| format!("tau2.level{j}")));
        for prefix in ["sigma2", "wb", "wM"] {
            cols.extend(self.labels.iter().map(|l| format!("{prefix}.{l}")));
        }
        cols
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for d in &self.draws {
            let mut first = true;
            for v in d.delta.iter().chain(&d.u).chain(&d.tau2).chain(&d.sigma2).chain(&d.wb).chain(&d.wm) {
                if !first {
                    out.push(',');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Parse a draws file written by [`PosteriorDraws::write`].
pub fn read_draws(path: &Path) -> Result<PosteriorDraws> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty draws file"))?
        .split(',')
        .collect();
    let mut names: [Vec<String>; 3] = Default::default();
    let mut levels = Vec::new();
    let mut blocks: [Vec<String>; 3] = Default::default();
    for col in &header {
        if let Some(n) = col.strip_prefix("delta.") {
            names[0].push(n.to_string());
        } else if let Some(n) = col.strip_prefix("u.") {
            names[1].push(n.to_string());
        } else if let Some(j) = col.strip_prefix("tau2.level") {
            levels.push(j.parse().map_err(|_| Error::parse(path, format!("bad level column `{col}`")))?);
        } else if let Some(l) = col.strip_prefix("sigma2.") {
            blocks[0].push(l.to_string());
        } else if let Some(l) = col.strip_prefix("wb.") {
            blocks[1].push(l.to_string());
        } else if let Some(l) = col.strip_prefix("wM.") {
            blocks[2].push(l.to_string());
        } else {
            return Err(Error::parse(path, format!("unknown column `{col}`")));
        }
    }
    let [sigma_labels, wb_labels, wm_labels] = blocks;
    if sigma_labels != wb_labels || wb_labels != wm_labels {
        return Err(Error::parse(path, "coefficient columns disagree between sigma2, wb and wM"));
    }
    let [delta_names, u_names, _] = names;
    let (nd, nu, nl, m) = (delta_names.len(), u_names.len(), levels.len(), sigma_labels.len());
    let mut draws = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(path, format!("bad number at row {}", k + 1)))?;
        if vals.len() != header.len() {
            return Err(Error::parse(path, format!("length mismatch at row {}", k + 1)));
        }
        let mut it = vals.into_iter();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        draws.push(Draw {
            delta: take(nd),
            u: take(nu),
            tau2: take(nl),
            sigma2: take(m),
            wb: take(m),
            wm: take(m),
        });
    }
    PosteriorDraws::new(delta_names, u_names, levels, sigma_labels, draws)
}

/// Per-block acceptance rates and log posterior trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub accept_tau: Vec<f64>,
    pub accept_du: Vec<f64>,
    pub log_post: Vec<f64>,
}

impl ChainDiagnostics {
    pub fn mean_accept_tau(&self) -> f64 {
        mean(&self.accept_tau)
    }

    pub fn mean_accept_du(&self) -> f64 {
        mean(&self.accept_du)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,accept_tau,accept_du,log_post\n");
        for h in 0..self.log_post.len() {
            let _ = writeln!(out, "{h},{},{},{}", self.accept_tau[h], self.accept_du[h], self.log_post[h]);
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Noise-variance draws, `[h][i]`. Each coefficient has its own stream, so
/// the draws depend on the seed and `s²` only.
pub fn sample_sigma2_matrix(summary: &FieldSummary, n_saved: usize, seed: u64) -> Vec<Vec<f64>> {
    let columns: Vec<Vec<f64>> = summary
        .s2
        .iter()
        .enumerate()
        .map(|(i, &s2)| {
            let s2 = if s2 > 0.0 {
                s2
            } else {
                log::warn!("coefficient {i} has zero replicate scatter; using floor {:e}", summary.s2_floor);
                summary.s2_floor
            };
            sample_sigma2(s2, summary.n_rep, n_saved, &mut stream(seed, purpose::SIGMA2, i as u64))
        })
        .collect();
    (0..n_saved).map(|h| columns.iter().map(|c| c[h]).collect()).collect()
}

/// Full sampler: per block, fresh noise variances, `thin` cycles of the
/// `τ²` and `(δ, u)` steps, then conjugate bias and model coefficient draws.
pub fn run_mcmc(model: &CalibrationModel, cfg: &McmcConfig) -> Result<(PosteriorDraws, ChainDiagnostics)> {
    cfg.validate()?;
    let sigma = sample_sigma2_matrix(&model.summary, cfg.n_saved, cfg.seed);
    run_mcmc_with_sigma2(model, cfg, &sigma)
}

/// [`run_mcmc`] with caller-supplied noise-variance blocks (one per saved draw).
pub fn run_mcmc_with_sigma2(model: &CalibrationModel, cfg: &McmcConfig, sigma: &[Vec<f64>]) -> Result<(PosteriorDraws, ChainDiagnostics)> {
    cfg.validate()?;
    let m = model.n_coeffs();
    if sigma.is_empty() || sigma.iter().any(|s| s.len() != m) {
        return Err(Error::Argument(format!("noise variance blocks must each hold {m} values")));
    }
    let mut state = ChainState::initial(model, sigma[0].clone(), cfg)?;
    let mut rng = stream(cfg.seed, purpose::CHAIN, 0);
    for _ in 0..cfg.burn_in {
        mh_step_tau(model, &mut state, cfg, &mut rng);
        mh_step_du(model, &mut state, cfg, &mut rng);
    }

    let n = model.summary.n_rep as f64;
    let mut draws = Vec::with_capacity(sigma.len());
    let mut diag = ChainDiagnostics::default();
    for (h, s) in sigma.iter().enumerate() {
        if h > 0 {
            state.set_sigma2(model, cfg, s.clone());
        }
        let (mut at, mut ad) = (0usize, 0usize);
        for _ in 0..cfg.thin {
            at += usize::from(mh_step_tau(model, &mut state, cfg, &mut rng));
            ad += usize::from(mh_step_du(model, &mut state, cfg, &mut rng));
        }
        diag.accept_tau.push(at as f64 / cfg.thin as f64);
        diag.accept_du.push(ad as f64 / cfg.thin as f64);
        diag.log_post.push(state.log_post());

        let mut rb = stream(cfg.seed, purpose::BIAS_DRAW, h as u64);
        let mut rm = stream(cfg.seed, purpose::MODEL_DRAW, h as u64);
        let mut wb = Vec::with_capacity(m);
        let mut wm = Vec::with_capacity(m);
        for i in 0..m {
            let noise = state.sigma2[i] / n;
            let wbar = model.summary.wbar[i];
            let (m2, v2) = bias_conditional(wbar, state.m_hat[i], state.v_hat[i], noise, state.tau2[model.slot_of(i)]);
            let z: f64 = StandardNormal.sample(&mut rb);
            let b = m2 + v2.sqrt() * z;
            let (m1, v1) = model_conditional(wbar, b, state.m_hat[i], state.v_hat[i], noise);
            let z: f64 = StandardNormal.sample(&mut rm);
            wb.push(b);
            wm.push(m1 + v1.sqrt() * z);
        }
        draws.push(Draw {
            delta: state.delta.clone(),
            u: state.u.clone(),
            tau2: state.tau2.clone(),
            sigma2: state.sigma2.clone(),
            wb,
            wm,
        });
    }
    let delta_names = model.iumap.variation().map(|e| e.name.clone()).collect();
    let u_names = model.iumap.calibration().map(|e| e.name.clone()).collect();
    let out = PosteriorDraws::new(delta_names, u_names, model.levels().to_vec(), model.labels.clone(), draws)?;
    Ok((out, diag))
}
