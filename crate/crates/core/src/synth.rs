//! Synthetic test bed with known ground truth.
//!
//! The simulator is a two-event response on `[t0, t1]`: each event is a dip
//! followed by a peak (a derivative-of-Gaussian bump) and then a damped
//! oscillating tail. Variation input `x1` sets the overall level, `x2` a tilt
//! and the event amplitudes; calibration inputs `u1`, `u2` set the tail
//! damping and frequency. Event centres sit on grid nodes so reference anchors
//! are exact grid times.
//!
//! Field replicates are the true reality (model at the true inputs plus a
//! planted bias) plus noise drawn level by level in the wavelet domain, with
//! each event's timing jittered by a piecewise-linear time warp.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curve::Curve;
use crate::design::{generate_lhd, DesignMatrix};
use crate::error::{Error, Result};
use crate::iumap::{IuMap, Prior};
use crate::pipeline::{DeltaShiftConfig, ExtrapolateConfig, NewNominalsConfig, PathsConfig, RunConfig};
use crate::prediction::BiasTransfer;
use crate::registration::{EventWindow, Feature, GridSpec};
use crate::rng::{purpose, stream};
use crate::wavelet::{idwt, CoeffIndex, CoeffSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasKind {
    Zero,
    #[default]
    Additive,
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub levels: u32,
    pub t0: f64,
    pub t1: f64,
    /// Model runs `K`.
    pub n_runs: usize,
    pub n_rep: usize,
    /// Samples per model run, on an evenly spaced (non-dyadic) grid.
    pub model_points: usize,
    pub true_u: Vec<f64>,
    pub true_delta: Vec<f64>,
    /// Manufacturing variation of the unit tested under condition B.
    pub true_delta_b: Vec<f64>,
    pub bias: BiasKind,
    pub bias_scale: f64,
    /// Noise sd of the level-`j` wavelet coefficients, `j = 0..=levels`.
    pub noise: Vec<f64>,
    /// Event times of each replicate move by up to this much.
    pub jitter: f64,
    /// Offset of the `x1` range under condition B.
    pub b_shift: f64,
    /// Input shift used for the delta-shift extrapolation runs.
    pub shift: Vec<f64>,
    pub design_restarts: usize,
    /// Distance from event centre to dip and to peak, in grid steps.
    pub event_width_steps: usize,
    /// Thresholding fraction written into the generated run config.
    pub threshold_pct: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            levels: 8,
            t0: 0.0,
            t1: 16.0,
            n_runs: 40,
            n_rep: 7,
            model_points: 400,
            true_u: vec![0.3, 0.7],
            true_delta: vec![0.08, -0.06],
            true_delta_b: vec![0.05, 0.03],
            bias: BiasKind::Additive,
            bias_scale: 1.0,
            noise: SynthSpec::band_noise(8, 0.005, 0.05, 0.003),
            jitter: 0.1,
            b_shift: 1.5,
            shift: vec![0.1, 0.0],
            design_restarts: 8,
            event_width_steps: 8,
            threshold_pct: 0.125,
        }
    }
}

impl SynthSpec {
    /// Per-level coefficient sds with pointwise sd `mid` from each of levels
    /// 4 and 5, `coarse` from each of levels 0-3 and `fine` from each finer level.
    pub fn band_noise(levels: u32, coarse: f64, mid: f64, fine: f64) -> Vec<f64> {
        let n = (1u64 << levels) as f64;
        (0..=levels)
            .map(|j| {
                let count = if j == 0 { 1.0 } else { (1u64 << (j - 1)) as f64 };
                let pointwise = match j {
                    0..=3 => coarse,
                    4 | 5 => mid,
                    _ => fine,
                };
                pointwise * (n / count).sqrt()
            })
            .collect()
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.levels, self.t0, self.t1)
    }

    pub fn iumap(&self) -> IuMap {
        iumap_with_x1(0.2, 0.8)
    }

    /// Condition B: same inputs, `x1` range moved by `b_shift`.
    pub fn iumap_b(&self) -> IuMap {
        iumap_with_x1(0.2 + self.b_shift, 0.8 + self.b_shift)
    }

    fn validate(&self) -> Result<()> {
        let map = self.iumap();
        let check = |what: &str, values: &[f64], priors: &[Prior]| -> Result<()> {
            if values.len() != priors.len() {
                return Err(Error::config(format!("synth.{what}"), format!("expected {} values", priors.len())));
            }
            for (v, p) in values.iter().zip(priors) {
                let (lo, hi) = p.support();
                if !(lo..=hi).contains(v) {
                    return Err(Error::config(format!("synth.{what}"), format!("{v} lies outside its prior support [{lo}, {hi}]")));
                }
            }
            Ok(())
        };
        check("true_u", &self.true_u, &map.u_priors())?;
        check("true_delta", &self.true_delta, &map.delta_priors())?;
        check("true_delta_b", &self.true_delta_b, &self.iumap_b().delta_priors())?;
        if self.shift.len() != 2 {
            return Err(Error::config("synth.shift", "expected 2 values"));
        }
        if self.n_rep < 2 || self.n_runs < 2 || self.model_points < 2 {
            return Err(Error::config("synth", "need at least 2 replicates, runs and model points"));
        }
        if self.noise.len() != self.levels as usize + 1 {
            return Err(Error::config("synth.noise", format!("expected one sd per level, {} values", self.levels + 1)));
        }
        if !(self.noise.iter().all(|s| *s >= 0.0) && self.jitter >= 0.0 && self.bias_scale.is_finite()) {
            return Err(Error::config("synth", "noise and jitter must be nonnegative"));
        }
        Ok(())
    }
}

fn iumap_with_x1(lo: f64, hi: f64) -> IuMap {
    IuMap::parse(&format!(
        "[[parameter]]\nname = \"x1\"\nrole = \"variation\"\nrange = [{lo:?}, {hi:?}]\n\n\
         [[parameter]]\nname = \"x2\"\nrole = \"variation\"\nrange = [0.2, 0.8]\n\n\
         [[parameter]]\nname = \"u1\"\nrole = \"calibration\"\nrange = [0.125, 0.875]\n\n\
         [[parameter]]\nname = \"u2\"\nrole = \"calibration\"\nrange = [0.125, 0.875]\n"
    ))
    .expect("built-in I/U map is valid")
}

/// The analytic simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoEventSimulator {
    pub centers: [f64; 2],
    /// Distance from an event centre to its dip and to its peak.
    pub width: f64,
}

impl TwoEventSimulator {
    /// Events near 3/16 and 9.5/16 of the interval, centred on grid nodes,
    /// with the dip and peak `steps` grid steps either side.
    pub fn on_grid(grid: GridSpec, steps: usize) -> Self {
        let snap = |frac: f64| {
            let k = (frac * (grid.len() - 1) as f64).round() as usize;
            grid.time(k)
        };
        TwoEventSimulator {
            centers: [snap(3.0 / 16.0), snap(9.5 / 16.0)],
            width: steps as f64 * grid.step(),
        }
    }

    /// Dip and peak time of each event, in order.
    pub fn anchors(&self) -> Vec<f64> {
        self.centers.iter().flat_map(|c| [c - self.width, c + self.width]).collect()
    }

    pub fn windows(&self) -> Vec<EventWindow> {
        self.centers
            .iter()
            .map(|c| EventWindow {
                lo: c - 2.2 * self.width,
                hi: c + 2.2 * self.width,
                features: vec![Feature::Min, Feature::Max],
            })
            .collect()
    }

    /// Response at physical inputs `x = (x1, x2)`, `u = (u1, u2)` over `[t0, t1]`.
    pub fn eval(&self, x: &[f64], u: &[f64], t: f64, span: (f64, f64)) -> f64 {
        let (t0, t1) = span;
        let s = self.width;
        let level = 1.5 + x[0];
        let tilt = 0.2 * (x[1] - 0.5) * (std::f64::consts::TAU * (t - t0) / (t1 - t0)).sin();
        let damping = 0.6 + 1.2 * u[0];
        let freq = 0.15 + 0.15 * u[1];
        let amp = [0.18, 0.15];
        let mut shape = 1.0 + tilt;
        for (c, a) in self.centers.iter().zip(amp) {
            let d = (t - c) / s;
            shape += a * (1.0 + 0.3 * (x[1] - 0.5)) * d * (0.5 - 0.5 * d * d).exp();
            let tail_start = c + 3.0 * s;
            if t > tail_start {
                let r = t - tail_start;
                let ramp = 1.0 - (-(r / s).powi(2)).exp();
                shape += 0.15 * ramp * (-damping * r).exp() * (std::f64::consts::TAU * freq * r).sin();
            }
        }
        level * shape
    }

    pub fn curve(&self, x: &[f64], u: &[f64], times: &[f64], span: (f64, f64)) -> Vec<f64> {
        times.iter().map(|&t| self.eval(x, u, t, span)).collect()
    }
}

fn additive_bias(t: f64, span: (f64, f64), scale: f64) -> f64 {
    let s = (t - span.0) / (span.1 - span.0);
    scale * (0.15 * (std::f64::consts::TAU * s).cos() + 0.08 * (2.0 * std::f64::consts::TAU * s).sin())
}

fn multiplicative_bias(t: f64, span: (f64, f64), scale: f64) -> f64 {
    let s = (t - span.0) / (span.1 - span.0);
    scale * (0.075 * (std::f64::consts::TAU * s).cos() + 0.04 * (2.0 * std::f64::consts::TAU * s).sin())
}

/// Reality given the model curve on `times`.
pub fn apply_bias(kind: BiasKind, scale: f64, model: &[f64], times: &[f64], span: (f64, f64)) -> Vec<f64> {
    model
        .iter()
        .zip(times)
        .map(|(&m, &t)| match kind {
            BiasKind::Zero => m,
            BiasKind::Additive => m + additive_bias(t, span, scale),
            BiasKind::Multiplicative => m * (1.0 + multiplicative_bias(t, span, scale)),
        })
        .collect()
}

/// Everything planted in a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    pub spec: SynthSpec,
    pub grid: GridSpec,
    pub simulator: TwoEventSimulator,
    /// Anchor times in the registered frame.
    pub anchors: Vec<f64>,
    /// Per replicate, the time offset of each event.
    pub jitter: Vec<[f64; 2]>,
    /// Curves on the dyadic grid, registered frame.
    pub model_at_truth: Vec<f64>,
    pub bias: Vec<f64>,
    pub reality: Vec<f64>,
    pub reality_b: Vec<f64>,
    /// Pointwise sd of the replicate noise.
    pub noise_sd: Vec<f64>,
}

impl Truth {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dir: PathBuf,
    pub config_path: PathBuf,
    pub config: RunConfig,
    pub truth: Truth,
}

fn level_sd(spec: &SynthSpec, flat: usize) -> f64 {
    spec.noise[CoeffIndex::from_flat(flat).level as usize]
}

/// One replicate's noise curve on the grid.
pub fn noise_curve<R: Rng + ?Sized>(spec: &SynthSpec, grid: GridSpec, rng: &mut R) -> Result<Vec<f64>> {
    let coeffs: Vec<f64> = (0..grid.len())
        .map(|f| {
            let z: f64 = StandardNormal.sample(rng);
            level_sd(spec, f) * z
        })
        .collect();
    let c = CoeffSet {
        grid,
        coeffs,
        source_label: String::new(),
    };
    Ok(idwt(&c, None)?.y)
}

fn jitter_warp(anchors: &[f64], offsets: [f64; 2], span: (f64, f64)) -> impl Fn(f64) -> f64 {
    let mut src = vec![span.0];
    src.extend_from_slice(anchors);
    src.push(span.1);
    let mut dst = vec![span.0];
    dst.extend(anchors.iter().enumerate().map(|(k, a)| a + offsets[k / 2]));
    dst.push(span.1);
    move |t: f64| {
        let k = src.partition_point(|&s| s <= t).clamp(1, src.len() - 1) - 1;
        dst[k] + (t - src[k]) * (dst[k + 1] - dst[k]) / (src[k + 1] - src[k])
    }
}

fn physical(map: &IuMap, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (delta, u) = map.from_unit(z);
    let x = map.variation().zip(&delta).map(|(e, d)| e.nominal().unwrap() + d).collect();
    (x, u)
}

fn nominal_x(map: &IuMap, delta: &[f64]) -> Vec<f64> {
    map.variation().zip(delta).map(|(e, d)| e.nominal().unwrap() + d).collect()
}

fn write_runs(dir: &Path, sim: &TwoEventSimulator, map: &IuMap, design: &DesignMatrix, times: &[f64], span: (f64, f64)) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, z) in design.points.iter().enumerate() {
        let (x, u) = physical(map, z);
        let label = format!("run_{k:03}");
        Curve::new(label.clone(), times.to_vec(), sim.curve(&x, &u, times, span))?.write(&dir.join(format!("{label}.csv")))?;
    }
    Ok(())
}

/// Generate model runs, field replicates, condition-B runs, delta-shift runs,
/// a truth record and a pipeline config under `dir`.
pub fn synth_testbed(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<SynthDataset> {
    spec.validate()?;
    let grid = spec.grid()?;
    let span = (spec.t0, spec.t1);
    let sim = TwoEventSimulator::on_grid(grid, spec.event_width_steps);
    let map = spec.iumap();
    let map_b = spec.iumap_b();
    let anchors = sim.anchors();
    if spec.jitter >= 0.5 * sim.width {
        return Err(Error::config("synth.jitter", "jitter must stay below half the event width"));
    }

    let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mk(dir)?;
    let model_times: Vec<f64> = (0..spec.model_points)
        .map(|k| spec.t0 + (spec.t1 - spec.t0) * k as f64 / (spec.model_points - 1) as f64)
        .collect();

    let design = generate_lhd(spec.n_runs, map.dim(), spec.design_restarts, seed)?;
    let design = DesignMatrix::new(design.points, map.names())?;
    design.write(&dir.join("design.csv"))?;
    write_runs(&dir.join("model"), &sim, &map, &design, &model_times, span)?;
    let design_b = DesignMatrix::new(design.points.clone(), map_b.names())?;
    design_b.write(&dir.join("design_b.csv"))?;
    write_runs(&dir.join("model_b"), &sim, &map_b, &design_b, &model_times, span)?;
    std::fs::write(dir.join("iumap.toml"), map.to_toml()).map_err(|e| Error::io(dir.join("iumap.toml"), e))?;
    std::fs::write(dir.join("iumap_b.toml"), map_b.to_toml()).map_err(|e| Error::io(dir.join("iumap_b.toml"), e))?;

    // Delta-shift runs at the prior-median calibration value.
    let shift_dir = dir.join("shift");
    mk(&shift_dir)?;
    let u_nom: Vec<f64> = map.u_priors().iter().map(Prior::median).collect();
    let x_nom = nominal_x(&map, &[0.0, 0.0]);
    let x_shift = nominal_x(&map, &spec.shift);
    Curve::new("run_nominal", model_times.clone(), sim.curve(&x_nom, &u_nom, &model_times, span))?.write(&shift_dir.join("run_nominal.csv"))?;
    Curve::new("run_shifted", model_times.clone(), sim.curve(&x_shift, &u_nom, &model_times, span))?.write(&shift_dir.join("run_shifted.csv"))?;

    let times = grid.times();
    let x_true = nominal_x(&map, &spec.true_delta);
    let model_at_truth = sim.curve(&x_true, &spec.true_u, &times, span);
    let reality = apply_bias(spec.bias, spec.bias_scale, &model_at_truth, &times, span);
    let bias: Vec<f64> = reality.iter().zip(&model_at_truth).map(|(r, m)| r - m).collect();
    let x_b = nominal_x(&map_b, &spec.true_delta_b);
    let model_b = sim.curve(&x_b, &spec.true_u, &times, span);
    let reality_b = apply_bias(spec.bias, spec.bias_scale, &model_b, &times, span);

    let field_dir = dir.join("field");
    mk(&field_dir)?;
    let mut rng = stream(seed, purpose::SYNTH, 0);
    let mut jitter = Vec::with_capacity(spec.n_rep);
    for r in 0..spec.n_rep {
        let offsets = [rng.random_range(-1.0..=1.0) * spec.jitter, rng.random_range(-1.0..=1.0) * spec.jitter];
        jitter.push(offsets);
        let noise = noise_curve(spec, grid, &mut rng)?;
        let warp = jitter_warp(&anchors, offsets, span);
        let t: Vec<f64> = times.iter().map(|&t| warp(t)).collect();
        let y: Vec<f64> = reality.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let label = format!("rep_{}", r + 1);
        Curve::new(label.clone(), t, y)?.write(&field_dir.join(format!("{label}.csv")))?;
    }

    // Pointwise noise sd: sqrt(Σ_i σ_i² Ψ_i(t)²).
    let mut var = vec![0.0; grid.len()];
    for f in 0..grid.len() {
        let psi = crate::wavelet::basis_function(grid, CoeffIndex::from_flat(f));
        let s2 = level_sd(spec, f).powi(2);
        var.iter_mut().zip(&psi).for_each(|(v, p)| *v += s2 * p * p);
    }
    let truth = Truth {
        seed,
        spec: spec.clone(),
        grid,
        simulator: sim.clone(),
        anchors,
        jitter,
        model_at_truth,
        bias,
        reality,
        reality_b,
        noise_sd: var.into_iter().map(f64::sqrt).collect(),
    };
    let truth_path = dir.join("truth.json");
    let json = serde_json::to_string_pretty(&truth).map_err(|e| Error::parse(&truth_path, e.to_string()))?;
    std::fs::write(&truth_path, json).map_err(|e| Error::io(&truth_path, e))?;

    let mut config = RunConfig::new(
        seed,
        PathsConfig {
            iumap: "iumap.toml".into(),
            field_dir: "field".into(),
            model_dir: "model".into(),
            design: "design.csv".into(),
            output_dir: "out".into(),
        },
        grid,
    );
    config.registration.windows = sim.windows();
    config.wavelet.pct = spec.threshold_pct;
    config.extrapolate = ExtrapolateConfig {
        same_type: true,
        delta_shift: Some(DeltaShiftConfig {
            shifted_run: "shift/run_shifted.csv".into(),
            nominal_run: "shift/run_nominal.csv".into(),
        }),
        new_nominals: Some(NewNominalsConfig {
            iumap: "iumap_b.toml".into(),
            model_dir: "model_b".into(),
            design: "design_b.csv".into(),
            mode: match spec.bias {
                BiasKind::Multiplicative => BiasTransfer::Multiplicative,
                _ => BiasTransfer::Additive,
            },
            eps_guard: None,
        }),
    };
    let config_path = dir.join("config.toml");
    config.write(&config_path)?;
    let config = RunConfig::load(&config_path)?;
    Ok(SynthDataset {
        dir: dir.to_path_buf(),
        config_path,
        config,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::field_summaries;
    use crate::curve::{load_curves, CurveKind};
    use crate::registration::{locate_anchors, locate_curve_anchors, register_curve, resample_dyadic, AnchorSet, GridCurve};
    use crate::wavelet::dwt;

    #[test]
    fn simulator_anchors_are_grid_extrema() {
        let grid = GridSpec::new(8, 0.0, 16.0).unwrap();
        let times = grid.times();
        for (steps, (x, u)) in [3, 5, 8].into_iter().zip( [([0.2, 0.2], [0.125, 0.125]), ([0.8, 0.8], [0.875, 0.875]), ([0.5, 0.3], [0.4, 0.6])]) {
            let sim = TwoEventSimulator::on_grid(grid, steps);
            let y = sim.curve(&x, &u, &times, (0.0, 16.0));
            let a = locate_anchors(&times, &y, "run", &sim.windows()).unwrap();
            for (got, want) in a.flat().iter().zip(sim.anchors()) {
                assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn truth_outside_support_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            true_u: vec![0.9, 0.5],
            ..SynthSpec::default()
        };
        assert!(matches!(synth_testbed(&spec, 1, dir.path()), Err(Error::Config { .. })));
    }

    #[test]
    fn noiseless_unbiased_replicates_register_onto_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            bias: BiasKind::Zero,
            noise: vec![0.0; 9],
            n_runs: 6,
            ..SynthSpec::default()
        };
        let data = synth_testbed(&spec, 3, dir.path()).unwrap();
        let truth = &data.truth;
        let target = AnchorSet {
            windows: truth.anchors.chunks(2).map(|c| c.to_vec()).collect(),
        };
        for c in load_curves(&dir.path().join("field"), CurveKind::Field).unwrap() {
            let src = locate_curve_anchors(&c, &truth.simulator.windows()).unwrap();
            let reg = register_curve(&c, &src, &target).unwrap();
            let g = resample_dyadic(&reg, truth.grid).unwrap();
            for (a, b) in g.y.iter().zip(&truth.model_at_truth) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert_eq!(truth.reality, truth.model_at_truth);
    }

    #[test]
    fn replicate_scatter_has_chi_square_mean() {
        let spec = SynthSpec {
            levels: 5,
            noise: vec![0.2; 6],
            ..SynthSpec::default()
        };
        let grid = spec.grid().unwrap();
        let mut rng = stream(5, 0, 0);
        let mut total = vec![0.0; 32];
        let trials = 400;
        for _ in 0..trials {
            let rows: Vec<Vec<f64>> = (0..spec.n_rep)
                .map(|_| {
                    let y = noise_curve(&spec, grid, &mut rng).unwrap();
                    dwt(&GridCurve::new(grid, y).unwrap()).unwrap().coeffs
                })
                .collect();
            let s = field_summaries(&rows).unwrap();
            total.iter_mut().zip(&s.s2).for_each(|(a, v)| *a += v / trials as f64);
        }
        // E[s²] = (n_rep - 1) s², sd of the average ≈ sqrt(2 · 6 / 400) · 6 s² / 6
        let want = (spec.n_rep - 1) as f64 * 0.04;
        let avg = total.iter().sum::<f64>() / 32.0;
        assert!((avg - want).abs() < 0.03 * want, "{avg} vs {want}");
        for v in total {
            assert!((v - want).abs() < 0.25 * want);
        }
    }

    #[test]
    fn multiplicative_bias_scales_with_level() {
        let times = [0.0, 4.0, 8.0];
        let r = apply_bias(BiasKind::Multiplicative, 1.0, &[2.0, 2.0, 4.0], &times, (0.0, 16.0));
        assert!((r[0] - 2.0 * 1.075).abs() < 1e-12);
        assert!((r[1] - 2.0).abs() < 1e-12);
        assert!((r[2] - 4.0 * 0.925).abs() < 1e-12);
    }
}
