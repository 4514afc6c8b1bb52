//! Run configuration and the six pipeline stages.
//!
//! Every stage reads its inputs from files and writes its outputs into the
//! run's output directory, so any stage can be rerun on its own once its
//! predecessors have run. Each stage also records a section in
//! `manifest.json`.
//!
//! | stage         | writes                                                        |
//! |---------------|---------------------------------------------------------------|
//! | `register`    | `reference.csv`, `anchors.csv`, `registered/*.reg.csv`        |
//! | `decompose`   | `coeffs_model.csv`, `coeffs_field.csv`, `design_used.csv`     |
//! | `fit`         | `gasp.csv`                                                    |
//! | `calibrate`   | `draws.csv`, `chain.csv`                                      |
//! | `predict`     | `bias_band.csv`, `reality_band.csv`, `field_run_band.csv`, `pure_model.csv`, `reality_vs_model_band.csv` |
//! | `extrapolate` | `same_type_band.csv`, `delta_shift_band.csv`, `gasp_b.csv`, `new_nominals_band.csv` (as configured) |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::calibration::{field_summaries, read_draws, run_mcmc, CalibrationModel, McmcConfig, PosteriorDraws};
use crate::curve::{load_curves, Curve, CurveKind};
use crate::design::DesignMatrix;
use crate::emulator::{fit_all, fit_dump_csv, read_fit_dump, FitOptions, GaspFit};
use crate::error::{Error, Result};
use crate::iumap::IuMap;
use crate::prediction::{
    default_eps_guard, extrapolate_delta_shift, extrapolate_new_nominals, extrapolate_same_type, predict_bias,
    predict_new_field_run, predict_reality, pure_model_prediction, tolerance_band, BandMode, BiasTransfer, CurveEnsemble,
};
use crate::registration::{
    build_reference_curve, check_windows, locate_curve_anchors, locate_grid_anchors, register_curve, resample_dyadic,
    EventWindow, GridCurve, GridSpec,
};
use crate::wavelet::{coeff_matrix_csv, dwt_labeled, read_coeff_matrix, restrict, threshold_union, RetainedIndexSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub iumap: PathBuf,
    pub field_dir: PathBuf,
    pub model_dir: PathBuf,
    /// Unit-cube design, one row per design point; model file `run_017.csv` is row 17.
    pub design: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// No windows means no registration: field curves are only resampled.
    pub windows: Vec<EventWindow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveletConfig {
    pub keep_levels: u32,
    pub pct: f64,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        WaveletConfig {
            keep_levels: 3,
            pct: 0.025,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmulatorConfig {
    pub n_starts: usize,
    pub max_evals: usize,
    pub log_beta_min: f64,
    pub log_beta_max: f64,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        let d = FitOptions::default();
        EmulatorConfig {
            n_starts: d.n_starts,
            max_evals: d.max_evals,
            log_beta_min: d.log_beta_min,
            log_beta_max: d.log_beta_max,
        }
    }
}

impl EmulatorConfig {
    pub fn options(&self, seed: u64) -> FitOptions {
        FitOptions {
            seed,
            n_starts: self.n_starts,
            max_evals: self.max_evals,
            log_beta_min: self.log_beta_min,
            log_beta_max: self.log_beta_max,
        }
    }
}

/// Sampler settings; the seed comes from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSection {
    pub n_saved: usize,
    pub thin: usize,
    pub burn_in: usize,
    pub local_step: f64,
    pub tau_half_width: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau2_max_scale: Option<f64>,
}

impl Default for McmcSection {
    fn default() -> Self {
        let d = McmcConfig::default();
        McmcSection {
            n_saved: d.n_saved,
            thin: d.thin,
            burn_in: d.burn_in,
            local_step: d.local_step,
            tau_half_width: d.tau_half_width,
            tau2_max_scale: d.tau2_max_scale,
        }
    }
}

impl McmcSection {
    pub fn to_config(&self, seed: u64) -> McmcConfig {
        McmcConfig {
            n_saved: self.n_saved,
            thin: self.thin,
            seed,
            burn_in: self.burn_in,
            local_step: self.local_step,
            tau_half_width: self.tau_half_width,
            tau2_max_scale: self.tau2_max_scale,
            flat_likelihood: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandConfig {
    pub alpha: f64,
    pub mode: BandMode,
}

impl Default for BandConfig {
    fn default() -> Self {
        BandConfig {
            alpha: 0.1,
            mode: BandMode::Symmetric,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Also write every ensemble curve (`*_draws.csv`).
    pub write_ensembles: bool,
    /// Model run at the posterior-mean inputs, used instead of the emulator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pure_model_run: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaShiftConfig {
    pub shifted_run: PathBuf,
    pub nominal_run: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewNominalsConfig {
    pub iumap: PathBuf,
    pub model_dir: PathBuf,
    pub design: PathBuf,
    #[serde(default)]
    pub mode: BiasTransfer,
    /// Multiplicative denominator guard; default `1e-3 · max|pure model|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_guard: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrapolateConfig {
    pub same_type: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_shift: Option<DeltaShiftConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_nominals: Option<NewNominalsConfig>,
}

/// Whole-run configuration. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub grid: GridSpec,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub wavelet: WaveletConfig,
    #[serde(default)]
    pub emulator: EmulatorConfig,
    #[serde(default)]
    pub mcmc: McmcSection,
    #[serde(default)]
    pub band: BandConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub extrapolate: ExtrapolateConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn new(seed: u64, paths: PathsConfig, grid: GridSpec) -> Self {
        RunConfig {
            seed,
            paths,
            grid,
            registration: RegistrationConfig::default(),
            wavelet: WaveletConfig::default(),
            emulator: EmulatorConfig::default(),
            mcmc: McmcSection::default(),
            band: BandConfig::default(),
            predict: PredictConfig::default(),
            extrapolate: ExtrapolateConfig::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, e.message().trim().to_string())
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.paths.output_dir)
    }

    /// Check every setting and that every referenced input exists.
    pub fn validate(&self) -> Result<()> {
        GridSpec::new(self.grid.levels, self.grid.t0, self.grid.t1)
            .map_err(|e| Error::config("grid", e.to_string()))?;
        if !self.registration.windows.is_empty() {
            check_windows(&self.registration.windows)?;
        }
        if self.wavelet.keep_levels > self.grid.levels {
            return Err(Error::config("wavelet.keep_levels", "exceeds grid levels"));
        }
        if !(self.wavelet.pct > 0.0 && self.wavelet.pct < 1.0) {
            return Err(Error::config("wavelet.pct", "must be in (0, 1)"));
        }
        if !(self.band.alpha > 0.0 && self.band.alpha < 1.0) {
            return Err(Error::config("band.alpha", "must be in (0, 1)"));
        }
        if self.mcmc.n_saved < 2 || self.mcmc.thin == 0 {
            return Err(Error::config("mcmc", "n_saved must be at least 2 and thin positive"));
        }
        let mut required: Vec<(&str, &Path)> = vec![
            ("paths.iumap", &self.paths.iumap),
            ("paths.field_dir", &self.paths.field_dir),
            ("paths.model_dir", &self.paths.model_dir),
            ("paths.design", &self.paths.design),
        ];
        if let Some(p) = &self.predict.pure_model_run {
            required.push(("predict.pure_model_run", p));
        }
        if let Some(d) = &self.extrapolate.delta_shift {
            required.push(("extrapolate.delta_shift.shifted_run", &d.shifted_run));
            required.push(("extrapolate.delta_shift.nominal_run", &d.nominal_run));
        }
        if let Some(n) = &self.extrapolate.new_nominals {
            required.push(("extrapolate.new_nominals.iumap", &n.iumap));
            required.push(("extrapolate.new_nominals.model_dir", &n.model_dir));
            required.push(("extrapolate.new_nominals.design", &n.design));
            if n.eps_guard.is_some_and(|g| !(g >= 0.0)) {
                return Err(Error::config("extrapolate.new_nominals.eps_guard", "must be nonnegative"));
            }
        }
        for (field, p) in required {
            let full = self.resolve(p);
            if !full.exists() {
                return Err(Error::config(field, format!("{} does not exist", full.display())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Register,
    Decompose,
    Fit,
    Calibrate,
    Predict,
    Extrapolate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Register,
        Stage::Decompose,
        Stage::Fit,
        Stage::Calibrate,
        Stage::Predict,
        Stage::Extrapolate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Register => "register",
            Stage::Decompose => "decompose",
            Stage::Fit => "fit",
            Stage::Calibrate => "calibrate",
            Stage::Predict => "predict",
            Stage::Extrapolate => "extrapolate",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown stage `{s}`")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const MANIFEST: &str = "manifest.json";

/// A validated run: config plus output directory.
#[derive(Clone, Debug)]
pub struct Pipeline {
    cfg: RunConfig,
    grid: GridSpec,
    out: PathBuf,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn strip_reg(label: &str) -> &str {
    label.strip_suffix(".reg").unwrap_or(label)
}

fn columns(rows: &[Vec<f64>], m: usize) -> Vec<Vec<f64>> {
    (0..m).map(|i| rows.iter().map(|r| r[i]).collect()).collect()
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = GridSpec::new(cfg.grid.levels, cfg.grid.t0, cfg.grid.t1)?;
        let out = cfg.output_dir();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Pipeline { cfg, grid, out })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn run_all(&self) -> Result<()> {
        self.run_from(Stage::Register)
    }

    /// Run `first` and every later stage.
    pub fn run_from(&self, first: Stage) -> Result<()> {
        for stage in Stage::ALL.into_iter().filter(|s| *s >= first) {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        log::info!("stage {stage}");
        let section = match stage {
            Stage::Register => self.register(),
            Stage::Decompose => self.decompose(),
            Stage::Fit => self.fit(),
            Stage::Calibrate => self.calibrate(),
            Stage::Predict => self.predict(),
            Stage::Extrapolate => self.extrapolate(),
        }
        .map_err(|e| e.in_stage(stage.name()))?;
        self.record(stage, section).map_err(|e| e.in_stage(stage.name()))
    }

    pub fn read_manifest(&self) -> Result<Map<String, Value>> {
        let path = self.artifact(MANIFEST);
        if !path.exists() {
            return Ok(Map::new());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(m)) => Ok(m),
            _ => Err(Error::parse(&path, "manifest is not a JSON object")),
        }
    }

    fn record(&self, stage: Stage, section: Value) -> Result<()> {
        let mut m = self.read_manifest()?;
        m.insert("seed".into(), json!(self.cfg.seed));
        m.insert("grid".into(), json!({"levels": self.grid.levels, "t0": self.grid.t0, "t1": self.grid.t1, "points": self.grid.len()}));
        let stages = m.entry("stages").or_insert_with(|| Value::Object(Map::new()));
        if let Value::Object(s) = stages {
            s.insert(stage.name().into(), section);
        }
        let path = self.artifact(MANIFEST);
        let text = serde_json::to_string_pretty(&Value::Object(m)).map_err(|e| Error::parse(&path, e.to_string()))?;
        write_file(&path, &(text + "\n"))
    }

    fn model_curves(&self) -> Result<Vec<Curve>> {
        load_curves(&self.cfg.resolve(&self.cfg.paths.model_dir), CurveKind::Model)
    }

    fn register(&self) -> Result<Value> {
        let model = self.model_curves()?;
        let reference = build_reference_curve(&model, self.grid)?;
        write_file(&self.artifact("reference.csv"), &reference.to_curve("reference").to_csv())?;
        let field = load_curves(&self.cfg.resolve(&self.cfg.paths.field_dir), CurveKind::Field)?;
        let reg_dir = self.artifact("registered");
        fresh_dir(&reg_dir)?;
        let windows = &self.cfg.registration.windows;
        let mut anchors_csv = String::from("label");
        let mut ref_anchors = Vec::new();
        if !windows.is_empty() {
            let target = locate_grid_anchors(&reference, windows)?;
            ref_anchors = target.flat();
            for k in 0..ref_anchors.len() {
                let _ = write!(anchors_csv, ",a{}", k + 1);
            }
            anchors_csv.push('\n');
            let row = |label: &str, a: &[f64]| {
                let mut s = label.to_string();
                for v in a {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
                s
            };
            anchors_csv.push_str(&row("reference", &ref_anchors));
            for c in &field {
                let src = locate_curve_anchors(c, windows)?;
                anchors_csv.push_str(&row(&c.label, &src.flat()));
                let reg = register_curve(c, &src, &target)?;
                reg.write(&reg_dir.join(format!("{}.reg.csv", c.label)))?;
            }
        } else {
            anchors_csv.push('\n');
            for c in &field {
                c.write(&reg_dir.join(format!("{}.reg.csv", c.label)))?;
            }
        }
        write_file(&self.artifact("anchors.csv"), &anchors_csv)?;
        let mut artifacts = vec![json!("reference.csv"), json!("anchors.csv")];
        artifacts.extend(field.iter().map(|c| json!(format!("registered/{}.reg.csv", c.label))));
        Ok(json!({
            "n_model_runs": model.len(),
            "n_field_curves": field.len(),
            "reference_anchors": ref_anchors,
            "artifacts": artifacts,
        }))
    }

    fn decompose(&self) -> Result<Value> {
        let mut model = self.model_curves()?;
        model.sort_by_key(|c| c.design_row);
        let design = DesignMatrix::read(&self.cfg.resolve(&self.cfg.paths.design))?;
        let rows: Vec<usize> = model.iter().map(|c| c.design_row.unwrap_or(usize::MAX)).collect();
        if let Some(w) = rows.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!("two model runs claim design row {}", w[0])));
        }
        let used = design.select_rows(&rows)?;
        let field = load_curves(&self.artifact("registered"), CurveKind::Field)?;
        if field.len() < 2 {
            return Err(Error::Validation(format!("{} field curves; at least 2 replicates are needed", field.len())));
        }
        let to_coeffs = |curves: &[Curve]| -> Result<Vec<_>> {
            curves
                .iter()
                .map(|c| dwt_labeled(&resample_dyadic(c, self.grid)?, strip_reg(&c.label)))
                .collect()
        };
        let mc = to_coeffs(&model)?;
        let fc = to_coeffs(&field)?;
        let all: Vec<_> = mc.iter().chain(&fc).cloned().collect();
        let keep = threshold_union(&all, self.cfg.wavelet.keep_levels, self.cfg.wavelet.pct)?;
        let restrict_all = |cs: &[crate::wavelet::CoeffSet]| -> Result<(Vec<String>, Vec<Vec<f64>>)> {
            let labels = cs.iter().map(|c| c.source_label.clone()).collect();
            let rows = cs.iter().map(|c| restrict(c, &keep)).collect::<Result<Vec<_>>>()?;
            Ok((labels, rows))
        };
        let (ml, mr) = restrict_all(&mc)?;
        let (fl, fr) = restrict_all(&fc)?;
        write_file(&self.artifact("coeffs_model.csv"), &coeff_matrix_csv(&ml, &mr, &keep))?;
        write_file(&self.artifact("coeffs_field.csv"), &coeff_matrix_csv(&fl, &fr, &keep))?;
        used.write(&self.artifact("design_used.csv"))?;
        let mut per_level = vec![0usize; self.grid.levels as usize + 1];
        for j in keep.level_map() {
            per_level[j as usize] += 1;
        }
        Ok(json!({
            "retained": keep.len(),
            "retained_per_level": per_level,
            "retained_labels": keep.labels(),
            "n_model_runs": used.n_runs(),
            "design_dim": used.dim(),
            "n_rep": field.len(),
            "artifacts": ["coeffs_model.csv", "coeffs_field.csv", "design_used.csv"],
        }))
    }

    fn model_coeffs(&self) -> Result<(RetainedIndexSet, Vec<Vec<f64>>, DesignMatrix)> {
        let (_, rows, keep) = read_coeff_matrix(&self.artifact("coeffs_model.csv"), self.grid.levels)?;
        let design = DesignMatrix::read(&self.artifact("design_used.csv"))?;
        if design.n_runs() != rows.len() {
            return Err(Error::Validation("model coefficients and design rows disagree".into()));
        }
        Ok((keep, rows, design))
    }

    fn fit(&self) -> Result<Value> {
        let (keep, rows, design) = self.model_coeffs()?;
        let labels = keep.labels();
        let fits = fit_all(&design.points, &columns(&rows, keep.len()), &labels, &self.cfg.emulator.options(self.cfg.seed))?;
        write_file(&self.artifact("gasp.csv"), &fit_dump_csv(&labels, &fits))?;
        Ok(json!({
            "n_emulators": fits.len(),
            "mean_loo_rmse": mean(fits.iter().map(GaspFit::loo_rmse)),
            "loo_within_2": loo_fraction(&fits),
            "artifacts": ["gasp.csv"],
        }))
    }

    /// Emulators rebuilt from the fitted hyperparameters.
    pub fn load_fits(&self) -> Result<(RetainedIndexSet, Vec<GaspFit>)> {
        let (keep, rows, design) = self.model_coeffs()?;
        let hypers = read_fit_dump(&self.artifact("gasp.csv"))?;
        rebuild_fits(&keep, &rows, &design, hypers)
    }

    fn calibrate(&self) -> Result<Value> {
        let (keep, fits) = self.load_fits()?;
        let (_, field_rows, field_keep) = read_coeff_matrix(&self.artifact("coeffs_field.csv"), self.grid.levels)?;
        if field_keep != keep {
            return Err(Error::Validation("field and model coefficients use different retained sets".into()));
        }
        let summary = field_summaries(&field_rows)?;
        let n_rep = summary.n_rep;
        let iumap = IuMap::load(&self.cfg.resolve(&self.cfg.paths.iumap))?;
        if iumap.dim() != fits.first().map_or(0, GaspFit::dim) {
            return Err(Error::Validation("I/U map and design differ in dimension".into()));
        }
        let model = CalibrationModel::new(iumap, summary, fits, &keep)?;
        let mcmc = self.cfg.mcmc.to_config(self.cfg.seed);
        let (draws, diag) = run_mcmc(&model, &mcmc)?;
        draws.write(&self.artifact("draws.csv"))?;
        write_file(&self.artifact("chain.csv"), &diag.to_csv())?;
        let (delta, u) = draws.mean_du();
        Ok(json!({
            "n_saved": draws.len(),
            "thin": mcmc.thin,
            "n_rep": n_rep,
            "accept_tau": diag.mean_accept_tau(),
            "accept_du": diag.mean_accept_du(),
            "posterior_mean_delta": delta,
            "posterior_mean_u": u,
            "artifacts": ["draws.csv", "chain.csv"],
        }))
    }

    fn load_draws(&self) -> Result<PosteriorDraws> {
        read_draws(&self.artifact("draws.csv"))
    }

    fn pure_model(&self, draws: &PosteriorDraws, keep: &RetainedIndexSet, fits: &[GaspFit]) -> Result<GridCurve> {
        match &self.cfg.predict.pure_model_run {
            Some(p) => resample_dyadic(&Curve::read(&self.cfg.resolve(p))?, self.grid),
            None => {
                let iumap = IuMap::load(&self.cfg.resolve(&self.cfg.paths.iumap))?;
                pure_model_prediction(draws, fits, &iumap, keep, self.grid)
            }
        }
    }

    fn predict(&self) -> Result<Value> {
        let (keep, fits) = self.load_fits()?;
        let draws = self.load_draws()?;
        let (alpha, mode) = (self.cfg.band.alpha, self.cfg.band.mode);
        let mut artifacts = Vec::new();
        let mut emit = |name: &str, e: &CurveEnsemble, b: &crate::prediction::Band| -> Result<()> {
            b.write(&self.artifact(&format!("{name}_band.csv")))?;
            artifacts.push(json!(format!("{name}_band.csv")));
            if self.cfg.predict.write_ensembles {
                write_file(&self.artifact(&format!("{name}_draws.csv")), &e.to_csv())?;
                artifacts.push(json!(format!("{name}_draws.csv")));
            }
            Ok(())
        };
        let (be, bb) = predict_bias(&draws, &keep, self.grid, alpha, mode)?;
        emit("bias", &be, &bb)?;
        let (re, rb) = predict_reality(&draws, &keep, self.grid, alpha, mode)?;
        emit("reality", &re, &rb)?;
        let (fe, fb) = predict_new_field_run(&draws, &keep, self.grid, self.cfg.seed, alpha, mode)?;
        emit("field_run", &fe, &fb)?;
        let pure = self.pure_model(&draws, &keep, &fits)?;
        let de = re.minus(&pure.y);
        let db = tolerance_band(&de, alpha, mode)?;
        emit("reality_vs_model", &de, &db)?;
        write_file(&self.artifact("pure_model.csv"), &pure.to_curve("pure_model").to_csv())?;
        artifacts.push(json!("pure_model.csv"));
        Ok(json!({
            "alpha": alpha,
            "n_draws": draws.len(),
            "mean_width": {
                "bias": mean(bb.width()),
                "reality": mean(rb.width()),
                "field_run": mean(fb.width()),
            },
            "artifacts": artifacts,
        }))
    }

    fn extrapolate(&self) -> Result<Value> {
        let ex = &self.cfg.extrapolate;
        let mut section = Map::new();
        let mut artifacts = Vec::new();
        if !ex.same_type && ex.delta_shift.is_none() && ex.new_nominals.is_none() {
            section.insert("artifacts".into(), json!(artifacts));
            return Ok(Value::Object(section));
        }
        let (keep, fits) = self.load_fits()?;
        let draws = self.load_draws()?;
        let (alpha, mode, seed) = (self.cfg.band.alpha, self.cfg.band.mode, self.cfg.seed);
        let iumap = IuMap::load(&self.cfg.resolve(&self.cfg.paths.iumap))?;
        if ex.same_type {
            let (_, b) = extrapolate_same_type(&draws, &fits, &iumap, &keep, self.grid, seed, alpha, mode)?;
            b.write(&self.artifact("same_type_band.csv"))?;
            artifacts.push(json!("same_type_band.csv"));
            section.insert("same_type_mean_width".into(), json!(mean(b.width())));
        }
        if let Some(ds) = &ex.delta_shift {
            let shifted = resample_dyadic(&Curve::read(&self.cfg.resolve(&ds.shifted_run))?, self.grid)?;
            let nominal = resample_dyadic(&Curve::read(&self.cfg.resolve(&ds.nominal_run))?, self.grid)?;
            let (re, rb) = predict_reality(&draws, &keep, self.grid, alpha, mode)?;
            let (_, b) = extrapolate_delta_shift((&re, &rb), &shifted, &nominal)?;
            b.write(&self.artifact("delta_shift_band.csv"))?;
            artifacts.push(json!("delta_shift_band.csv"));
        }
        if let Some(nn) = &ex.new_nominals {
            let iumap_b = IuMap::load(&self.cfg.resolve(&nn.iumap))?;
            let fits_b = self.fit_condition_b(nn, &keep)?;
            let labels = keep.labels();
            write_file(&self.artifact("gasp_b.csv"), &fit_dump_csv(&labels, &fits_b))?;
            artifacts.push(json!("gasp_b.csv"));
            let guard = match nn.eps_guard {
                Some(g) => g,
                None => default_eps_guard(&self.pure_model(&draws, &keep, &fits)?),
            };
            let p = extrapolate_new_nominals(&draws, &fits_b, &iumap_b, &keep, self.grid, nn.mode, guard, seed, alpha, mode)?;
            p.band.write(&self.artifact("new_nominals_band.csv"))?;
            artifacts.push(json!("new_nominals_band.csv"));
            section.insert(
                "new_nominals".into(),
                json!({
                    "mode": match nn.mode { BiasTransfer::Additive => "additive", BiasTransfer::Multiplicative => "multiplicative" },
                    "eps_guard": guard,
                    "fallback_points": p.fallbacks,
                    "loo_within_2": loo_fraction(&fits_b),
                }),
            );
        }
        section.insert("artifacts".into(), json!(artifacts));
        Ok(Value::Object(section))
    }

    /// Emulators for condition-B runs, restricted to the original retained set.
    pub fn fit_condition_b(&self, nn: &NewNominalsConfig, keep: &RetainedIndexSet) -> Result<Vec<GaspFit>> {
        let mut runs = load_curves(&self.cfg.resolve(&nn.model_dir), CurveKind::Model)?;
        runs.sort_by_key(|c| c.design_row);
        let rows: Vec<usize> = runs.iter().map(|c| c.design_row.unwrap_or(usize::MAX)).collect();
        let design = DesignMatrix::read(&self.cfg.resolve(&nn.design))?.select_rows(&rows)?;
        let coeffs = runs
            .iter()
            .map(|c| restrict(&dwt_labeled(&resample_dyadic(c, self.grid)?, &c.label)?, keep))
            .collect::<Result<Vec<_>>>()?;
        fit_all(&design.points, &columns(&coeffs, keep.len()), &keep.labels(), &self.cfg.emulator.options(self.cfg.seed))
    }
}

/// Fraction of leave-one-out studentized residuals within ±2, pooled over emulators.
pub fn loo_fraction(fits: &[GaspFit]) -> f64 {
    let r: Vec<f64> = fits.iter().flat_map(|f| f.loo()).map(|l| l.studentized).collect();
    if r.is_empty() {
        return 1.0;
    }
    r.iter().filter(|s| s.abs() <= 2.0).count() as f64 / r.len() as f64
}

fn rebuild_fits(
    keep: &RetainedIndexSet,
    rows: &[Vec<f64>],
    design: &DesignMatrix,
    hypers: Vec<(String, crate::emulator::GaspHyper)>,
) -> Result<(RetainedIndexSet, Vec<GaspFit>)> {
    let labels = keep.labels();
    if hypers.len() != labels.len() || hypers.iter().zip(&labels).any(|((a, _), b)| a != b) {
        return Err(Error::Validation("emulator table does not match the retained coefficients".into()));
    }
    let cols = columns(rows, keep.len());
    let fits = hypers
        .into_iter()
        .zip(&cols)
        .map(|((label, h), w)| {
            GaspFit::with_hyper(&design.points, w, h).map_err(|e| Error::Fit {
                index: label,
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((keep.clone(), fits))
}
