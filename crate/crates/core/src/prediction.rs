//! Posterior curve ensembles and pointwise tolerance bands: bias, reality,
//! new field runs, and extrapolation to new units or new nominal inputs.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::PosteriorDraws;
use crate::emulator::GaspFit;
use crate::error::{Error, Result};
use crate::iumap::IuMap;
use crate::registration::{GridCurve, GridSpec};
use crate::rng::{purpose, stream};
use crate::wavelet::{reconstruct, RetainedIndexSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKind {
    Bias,
    Reality,
    Field,
    Model,
    Difference,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandMode {
    /// Pointwise `α/2` and `1 - α/2` quantiles.
    #[default]
    Symmetric,
    /// Pointwise narrowest interval holding `⌈(1 - α)H⌉` curves.
    Shortest,
}

/// How the estimated bias carries over to a system with new nominal inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasTransfer {
    #[default]
    Additive,
    Multiplicative,
}

/// `H` curves on a common dyadic grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveEnsemble {
    pub grid: GridSpec,
    pub kind: EnsembleKind,
    pub curves: Vec<Vec<f64>>,
}

impl CurveEnsemble {
    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        let h = self.curves.len() as f64;
        let mut out = vec![0.0; self.grid.len()];
        for c in &self.curves {
            out.iter_mut().zip(c).for_each(|(a, v)| *a += v / h);
        }
        out
    }

    /// Ensemble minus a fixed curve, e.g. reality draws minus the pure-model prediction.
    pub fn minus(&self, curve: &[f64]) -> CurveEnsemble {
        CurveEnsemble {
            grid: self.grid,
            kind: EnsembleKind::Difference,
            curves: self
                .curves
                .iter()
                .map(|c| c.iter().zip(curve).map(|(a, b)| a - b).collect())
                .collect(),
        }
    }

    /// Column-per-draw CSV: `t,h0,h1,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for h in 0..self.curves.len() {
            let _ = write!(out, ",h{h}");
        }
        out.push('\n');
        for (k, t) in self.grid.times().iter().enumerate() {
            let _ = write!(out, "{t}");
            for c in &self.curves {
                let _ = write!(out, ",{}", c[k]);
            }
            out.push('\n');
        }
        out
    }
}

/// Pointwise tolerance band.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub grid: GridSpec,
    pub center: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub mode: BandMode,
}

impl Band {
    pub fn width(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }

    /// Fraction of grid points where `truth` lies inside the band.
    pub fn coverage(&self, truth: &[f64]) -> f64 {
        let inside = truth
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .filter(|(v, (l, u))| **v >= **l && **v <= **u)
            .count();
        inside as f64 / truth.len() as f64
    }

    pub fn center_curve(&self) -> GridCurve {
        GridCurve {
            grid: self.grid,
            y: self.center.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,center,lower,upper\n");
        for (k, t) in self.grid.times().iter().enumerate() {
            let _ = writeln!(out, "{t},{},{},{}", self.center[k], self.lower[k], self.upper[k]);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    fn shifted(&self, d: &[f64]) -> Band {
        let add = |v: &[f64]| v.iter().zip(d).map(|(a, b)| a + b).collect();
        Band {
            grid: self.grid,
            center: add(&self.center),
            lower: add(&self.lower),
            upper: add(&self.upper),
            alpha: self.alpha,
            mode: self.mode,
        }
    }
}

/// Curves for each row of retained-coefficient draws.
pub fn reconstruct_ensemble(coeff_draws: &[Vec<f64>], keep: &RetainedIndexSet, grid: GridSpec, kind: EnsembleKind) -> Result<CurveEnsemble> {
    let curves = coeff_draws
        .par_iter()
        .map(|w| reconstruct(w, keep, grid).map(|g| g.y))
        .collect::<Result<Vec<_>>>()?;
    Ok(CurveEnsemble { grid, kind, curves })
}

/// Sample quantile by linear interpolation between order statistics
/// (`x[(n-1)p]`); `sorted` must be ascending.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Pointwise band with the ensemble mean as centre.
pub fn tolerance_band(e: &CurveEnsemble, alpha: f64, mode: BandMode) -> Result<Band> {
    let h = e.curves.len();
    if h < 2 {
        return Err(Error::Argument(format!("a band needs at least 2 curves, got {h}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha {alpha} must be in (0, 1)")));
    }
    let n = e.grid.len();
    let window = (((1.0 - alpha) * h as f64).ceil() as usize).clamp(1, h);
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut col = vec![0.0; h];
    for k in 0..n {
        for (c, curve) in col.iter_mut().zip(&e.curves) {
            *c = curve[k];
        }
        col.sort_by(f64::total_cmp);
        match mode {
            BandMode::Symmetric => {
                lower[k] = quantile(&col, alpha / 2.0);
                upper[k] = quantile(&col, 1.0 - alpha / 2.0);
            }
            BandMode::Shortest => {
                let best = (0..=h - window)
                    .min_by(|&a, &b| (col[a + window - 1] - col[a]).total_cmp(&(col[b + window - 1] - col[b])))
                    .unwrap_or(0);
                lower[k] = col[best];
                upper[k] = col[best + window - 1];
            }
        }
    }
    Ok(Band {
        grid: e.grid,
        center: e.mean(),
        lower,
        upper,
        alpha,
        mode,
    })
}

fn check_draws(draws: &PosteriorDraws, keep: &RetainedIndexSet) -> Result<()> {
    if draws.n_coeffs() != keep.len() || draws.labels != keep.labels() {
        return Err(Error::Argument(format!(
            "draws carry {} coefficients that do not match the {} retained indices",
            draws.n_coeffs(),
            keep.len()
        )));
    }
    if draws.is_empty() {
        return Err(Error::Argument("no posterior draws".into()));
    }
    Ok(())
}

fn sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Independent noise coefficients `ε_i^h ~ N(0, σ_i^{2h})` for draw `h`.
fn noise_coeffs(sigma2: &[f64], seed: u64, h: usize) -> Vec<f64> {
    let mut rng = stream(seed, purpose::FIELD_NOISE, h as u64);
    sigma2
        .iter()
        .map(|s| {
            let z: f64 = StandardNormal.sample(&mut rng);
            s.sqrt() * z
        })
        .collect()
}

/// Bias curves `b^h(t)`.
pub fn predict_bias(draws: &PosteriorDraws, keep: &RetainedIndexSet, grid: GridSpec, alpha: f64, mode: BandMode) -> Result<(CurveEnsemble, Band)> {
    check_draws(draws, keep)?;
    let rows: Vec<Vec<f64>> = draws.draws().iter().map(|d| d.wb.clone()).collect();
    let e = reconstruct_ensemble(&rows, keep, grid, EnsembleKind::Bias)?;
    let b = tolerance_band(&e, alpha, mode)?;
    Ok((e, b))
}

/// Bias-corrected reality: model coefficients plus bias, per draw.
pub fn predict_reality(draws: &PosteriorDraws, keep: &RetainedIndexSet, grid: GridSpec, alpha: f64, mode: BandMode) -> Result<(CurveEnsemble, Band)> {
    check_draws(draws, keep)?;
    let rows: Vec<Vec<f64>> = draws.draws().iter().map(|d| sum(&d.wm, &d.wb)).collect();
    let e = reconstruct_ensemble(&rows, keep, grid, EnsembleKind::Reality)?;
    let b = tolerance_band(&e, alpha, mode)?;
    Ok((e, b))
}

/// Emulator-mean curve at unit-cube input `z`.
pub fn emulator_curve(fits: &[GaspFit], keep: &RetainedIndexSet, grid: GridSpec, z: &[f64]) -> Result<GridCurve> {
    if fits.len() != keep.len() {
        return Err(Error::Argument(format!("{} emulators for {} retained coefficients", fits.len(), keep.len())));
    }
    let w: Vec<f64> = fits.iter().map(|f| f.predict_mean(z)).collect();
    reconstruct(&w, keep, grid)
}

/// Model prediction at the posterior-mean inputs, without bias correction.
pub fn pure_model_prediction(draws: &PosteriorDraws, fits: &[GaspFit], iumap: &IuMap, keep: &RetainedIndexSet, grid: GridSpec) -> Result<GridCurve> {
    check_draws(draws, keep)?;
    let (delta, u) = draws.mean_du();
    emulator_curve(fits, keep, grid, &iumap.to_unit(&delta, &u))
}

/// Reality plus fresh replicate noise: a new field run of the same unit.
pub fn predict_new_field_run(
    draws: &PosteriorDraws,
    keep: &RetainedIndexSet,
    grid: GridSpec,
    seed: u64,
    alpha: f64,
    mode: BandMode,
) -> Result<(CurveEnsemble, Band)> {
    check_draws(draws, keep)?;
    let rows: Vec<Vec<f64>> = draws
        .draws()
        .par_iter()
        .enumerate()
        .map(|(h, d)| {
            let eps = noise_coeffs(&d.sigma2, seed, h);
            sum(&sum(&d.wm, &d.wb), &eps)
        })
        .collect();
    let e = reconstruct_ensemble(&rows, keep, grid, EnsembleKind::Field)?;
    let b = tolerance_band(&e, alpha, mode)?;
    Ok((e, b))
}

/// Translate an ensemble and its band by `D(t) = y_shifted(t) - y_nominal(t)`.
pub fn extrapolate_delta_shift(
    base: (&CurveEnsemble, &Band),
    run_at_shifted: &GridCurve,
    run_at_nominal: &GridCurve,
) -> Result<(CurveEnsemble, Band)> {
    let (e, band) = base;
    if run_at_shifted.grid != e.grid || run_at_nominal.grid != e.grid || band.grid != e.grid {
        return Err(Error::GridMismatch("shift runs must be resampled onto the ensemble grid".into()));
    }
    let d: Vec<f64> = run_at_shifted.y.iter().zip(&run_at_nominal.y).map(|(a, b)| a - b).collect();
    let curves = e.curves.iter().map(|c| sum(c, &d)).collect();
    Ok((
        CurveEnsemble {
            grid: e.grid,
            kind: e.kind,
            curves,
        },
        band.shifted(&d),
    ))
}

/// New unit of the same type: fresh manufacturing variation from its prior,
/// model coefficients from the emulator augmented with the calibrated point,
/// plus the unit's bias and replicate noise.
#[allow(clippy::too_many_arguments)]
pub fn extrapolate_same_type(
    draws: &PosteriorDraws,
    fits: &[GaspFit],
    iumap: &IuMap,
    keep: &RetainedIndexSet,
    grid: GridSpec,
    seed: u64,
    alpha: f64,
    mode: BandMode,
) -> Result<(CurveEnsemble, Band)> {
    check_draws(draws, keep)?;
    if fits.len() != keep.len() {
        return Err(Error::Argument("one emulator per retained coefficient is required".into()));
    }
    let priors = iumap.delta_priors();
    let rows = draws
        .draws()
        .par_iter()
        .enumerate()
        .map(|(h, d)| -> Result<Vec<f64>> {
            let mut rng = stream(seed, purpose::EXTRAP_SAME_TYPE, h as u64);
            let delta_new: Vec<f64> = priors.iter().map(|p| p.sample(&mut rng)).collect();
            let z_star = iumap.to_unit(&d.delta, &d.u);
            let z_new = iumap.to_unit(&delta_new, &d.u);
            let eps = noise_coeffs(&d.sigma2, seed, h);
            fits.iter()
                .enumerate()
                .map(|(i, f)| {
                    let (m, v) = f
                        .predict_augmented(&z_star, d.wm[i], &z_new)
                        .map_err(|e| Error::Conditioning(format!("draw {h}, coefficient {}: {e}", draws.labels[i])))?;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    Ok(m + v.sqrt() * z + d.wb[i] + eps[i])
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let e = reconstruct_ensemble(&rows, keep, grid, EnsembleKind::Field)?;
    let b = tolerance_band(&e, alpha, mode)?;
    Ok((e, b))
}

/// Carry the original system's bias to a new system.
///
/// Additive: `y_new = y_bm + (y_r - y_m)`. Multiplicative: `y_new = y_r · y_bm / y_m`,
/// falling back to additive wherever `|y_m| < eps_guard`. Returns the curve
/// and the number of fallback points.
pub fn transfer_bias(y_bm: &[f64], y_r: &[f64], y_m: &[f64], mode: BiasTransfer, eps_guard: f64) -> (Vec<f64>, usize) {
    let mut fallbacks = 0;
    let out = y_bm
        .iter()
        .zip(y_r.iter().zip(y_m))
        .map(|(&bm, (&r, &m))| match mode {
            BiasTransfer::Multiplicative if m.abs() >= eps_guard => r * (bm / m),
            BiasTransfer::Multiplicative => {
                fallbacks += 1;
                r + (bm - m)
            }
            BiasTransfer::Additive => r + (bm - m),
        })
        .collect();
    (out, fallbacks)
}

/// Default multiplicative guard: `1e-3 · max_t |ŷ^M(t)|`.
pub fn default_eps_guard(pure_model: &GridCurve) -> f64 {
    1e-3 * pure_model.y.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

#[derive(Clone, Debug)]
pub struct NewNominalPrediction {
    pub ensemble: CurveEnsemble,
    pub band: Band,
    /// Grid points (over all draws) where multiplicative mode fell back to additive.
    pub fallbacks: usize,
}

/// Prediction for a system with new nominal inputs (described by `iumap_b`,
/// emulated by `fits_b` on the same retained set), reusing the original
/// system's bias and calibration draws jointly.
#[allow(clippy::too_many_arguments)]
pub fn extrapolate_new_nominals(
    draws: &PosteriorDraws,
    fits_b: &[GaspFit],
    iumap_b: &IuMap,
    keep: &RetainedIndexSet,
    grid: GridSpec,
    mode: BiasTransfer,
    eps_guard: f64,
    seed: u64,
    alpha: f64,
    band_mode: BandMode,
) -> Result<NewNominalPrediction> {
    check_draws(draws, keep)?;
    if fits_b.len() != keep.len() {
        return Err(Error::Argument("one new-system emulator per retained coefficient is required".into()));
    }
    if iumap_b.n_calibration() != draws.u_names.len() {
        return Err(Error::Argument("new-system I/U map has a different number of calibration inputs".into()));
    }
    let priors = iumap_b.delta_priors();
    let results = draws
        .draws()
        .par_iter()
        .enumerate()
        .map(|(h, d)| -> Result<(Vec<f64>, usize)> {
            let mut rng = stream(seed, purpose::EXTRAP_NEW_NOMINALS, h as u64);
            let delta_b: Vec<f64> = priors.iter().map(|p| p.sample(&mut rng)).collect();
            let z_b = iumap_b.to_unit(&delta_b, &d.u);
            let w_bm: Vec<f64> = fits_b
                .iter()
                .map(|f| {
                    let (m, v) = f.predict(&z_b);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + v.sqrt() * z
                })
                .collect();
            let eps = noise_coeffs(&d.sigma2, seed, h);
            let eps_curve = reconstruct(&eps, keep, grid)?.y;
            let y_bm = reconstruct(&w_bm, keep, grid)?.y;
            let y_m = reconstruct(&d.wm, keep, grid)?.y;
            let y_r = reconstruct(&sum(&d.wm, &d.wb), keep, grid)?.y;
            let (y, n_fb) = transfer_bias(&y_bm, &y_r, &y_m, mode, eps_guard);
            Ok((sum(&y, &eps_curve), n_fb))
        })
        .collect::<Result<Vec<_>>>()?;
    let fallbacks = results.iter().map(|r| r.1).sum();
    if fallbacks > 0 {
        log::info!("multiplicative bias fell back to additive at {fallbacks} grid points");
    }
    let ensemble = CurveEnsemble {
        grid,
        kind: EnsembleKind::Field,
        curves: results.into_iter().map(|r| r.0).collect(),
    };
    let band = tolerance_band(&ensemble, alpha, band_mode)?;
    Ok(NewNominalPrediction { ensemble, band, fallbacks })
}
