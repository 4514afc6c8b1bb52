//! Input/uncertainty map: which inputs are calibration parameters, which are
//! nominal values subject to manufacturing variation, their ranges and priors.
//!
//! File grammar (TOML):
//!
//! ```toml
//! [[parameter]]
//! name = "damping1"
//! role = "calibration"        # prior is Uniform(range)
//! range = [0.125, 0.875]
//!
//! [[parameter]]
//! name = "x5"
//! role = "variation"          # nominal = range midpoint
//! range = [0.3529, 0.6471]
//! sd = 0.04903                # optional, default (hi - lo) / 6
//! bound = 0.1471              # optional, default (hi - lo) / 2
//! ```
//!
//! Design and emulator inputs live on the unit cube; entry `p` maps its range
//! affinely onto `[0, 1]`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Calibration,
    Variation,
}

/// Prior on a calibration value `u` or on a variation `δ` (deviation from nominal).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prior {
    Uniform { lo: f64, hi: f64 },
    /// `N(mean, sd²)` truncated to `[mean - bound, mean + bound]`.
    TruncNormal { mean: f64, sd: f64, bound: f64 },
}

impl Prior {
    /// Interval on which the density is positive.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Prior::Uniform { lo, hi } => (lo, hi),
            Prior::TruncNormal { mean, bound, .. } => (mean - bound, mean + bound),
        }
    }

    /// Log density up to an additive constant; `-inf` outside the support.
    pub fn log_density(&self, v: f64) -> f64 {
        let (lo, hi) = self.support();
        if !(lo..=hi).contains(&v) {
            return f64::NEG_INFINITY;
        }
        match *self {
            Prior::Uniform { .. } => 0.0,
            Prior::TruncNormal { mean, sd, .. } => {
                let z = (v - mean) / sd;
                -0.5 * z * z
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => rng.random_range(lo..=hi),
            Prior::TruncNormal { mean, sd, bound } => {
                if bound < sd {
                    // Narrow box relative to sd: uniform proposal, accept with the normal kernel.
                    loop {
                        let x = rng.random_range(-bound..=bound);
                        let accept = (-0.5 * (x / sd).powi(2)).exp();
                        if rng.random::<f64>() < accept {
                            return mean + x;
                        }
                    }
                }
                loop {
                    let z: f64 = StandardNormal.sample(rng);
                    let x = z * sd;
                    if x.abs() <= bound {
                        return mean + x;
                    }
                }
            }
        }
    }

    /// Median of the prior (the centre of the box for both families).
    pub fn median(&self) -> f64 {
        let (lo, hi) = self.support();
        0.5 * (lo + hi)
    }
}

/// One row of the I/U map.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSpec {
    pub name: String,
    pub role: Role,
    pub range: (f64, f64),
    pub prior: Prior,
}

impl ParameterSpec {
    /// Nominal value of a variation input (the range midpoint); `None` for calibration inputs.
    pub fn nominal(&self) -> Option<f64> {
        match self.role {
            Role::Variation => Some(0.5 * (self.range.0 + self.range.1)),
            Role::Calibration => None,
        }
    }

    /// Map a physical-coded input value onto `[0, 1]`.
    pub fn to_unit(&self, value: f64) -> f64 {
        (value - self.range.0) / (self.range.1 - self.range.0)
    }

    pub fn from_unit(&self, unit: f64) -> f64 {
        self.range.0 + unit * (self.range.1 - self.range.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IuMap {
    pub entries: Vec<ParameterSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMap {
    #[serde(default)]
    parameter: Vec<RawEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    name: String,
    role: Role,
    range: [f64; 2],
    sd: Option<f64>,
    bound: Option<f64>,
}

impl IuMap {
    pub fn new(entries: Vec<ParameterSpec>) -> Result<Self> {
        let map = IuMap { entries };
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawMap = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("parameter")
                .to_string();
            Error::config(field, e.message().to_string())
        })?;
        let mut entries = Vec::with_capacity(raw.parameter.len());
        for (k, r) in raw.parameter.into_iter().enumerate() {
            let [lo, hi] = r.range;
            if !(lo < hi) {
                return Err(Error::Validation(format!(
                    "parameter {} (`{}`): range lower bound {lo} must be below upper bound {hi}",
                    k, r.name
                )));
            }
            let prior = match r.role {
                Role::Calibration => {
                    if r.sd.is_some() || r.bound.is_some() {
                        return Err(Error::config(
                            format!("parameter[{k}].sd"),
                            "calibration inputs take a uniform prior on their range",
                        ));
                    }
                    Prior::Uniform { lo, hi }
                }
                Role::Variation => Prior::TruncNormal {
                    mean: 0.0,
                    sd: r.sd.unwrap_or((hi - lo) / 6.0),
                    bound: r.bound.unwrap_or(0.5 * (hi - lo)),
                },
            };
            entries.push(ParameterSpec {
                name: r.name,
                role: r.role,
                range: (lo, hi),
                prior,
            });
        }
        Self::new(entries)
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str("[[parameter]]\n");
            out.push_str(&format!("name = \"{}\"\n", e.name));
            let role = match e.role {
                Role::Calibration => "calibration",
                Role::Variation => "variation",
            };
            out.push_str(&format!("role = \"{role}\"\n"));
            out.push_str(&format!("range = [{:?}, {:?}]\n", e.range.0, e.range.1));
            if let Prior::TruncNormal { sd, bound, .. } = e.prior {
                out.push_str(&format!("sd = {sd:?}\nbound = {bound:?}\n"));
            }
            out.push('\n');
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Validation("I/U map has no parameters".into()));
        }
        for e in &self.entries {
            let (lo, hi) = e.range;
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Validation(format!(
                    "`{}`: range [{lo}, {hi}] is not a proper interval",
                    e.name
                )));
            }
            match (e.role, e.prior) {
                (Role::Calibration, Prior::Uniform { .. }) => {}
                (Role::Variation, Prior::TruncNormal { mean, sd, bound }) => {
                    if mean != 0.0 {
                        return Err(Error::Validation(format!(
                            "`{}`: variation prior must be centred at zero",
                            e.name
                        )));
                    }
                    if !(sd > 0.0) || !sd.is_finite() {
                        return Err(Error::Validation(format!("`{}`: sd must be positive", e.name)));
                    }
                    let half = 0.5 * (hi - lo);
                    if !(bound > 0.0) || bound > half * (1.0 + 1e-12) {
                        return Err(Error::Validation(format!(
                            "`{}`: truncation bound {bound} must lie in (0, {half}]",
                            e.name
                        )));
                    }
                }
                _ => {
                    return Err(Error::Validation(format!(
                        "`{}`: prior family does not match role",
                        e.name
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn calibration(&self) -> impl Iterator<Item = &ParameterSpec> {
        self.entries.iter().filter(|e| e.role == Role::Calibration)
    }

    pub fn variation(&self) -> impl Iterator<Item = &ParameterSpec> {
        self.entries.iter().filter(|e| e.role == Role::Variation)
    }

    pub fn n_calibration(&self) -> usize {
        self.calibration().count()
    }

    pub fn n_variation(&self) -> usize {
        self.variation().count()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Priors on `δ` (variation entries, in map order).
    pub fn delta_priors(&self) -> Vec<Prior> {
        self.variation().map(|e| e.prior).collect()
    }

    /// Priors on `u` (calibration entries, in map order).
    pub fn u_priors(&self) -> Vec<Prior> {
        self.calibration().map(|e| e.prior).collect()
    }

    /// Unit-cube emulator input for `x = x_nom + δ` and calibration value `u`.
    pub fn to_unit(&self, delta: &[f64], u: &[f64]) -> Vec<f64> {
        debug_assert_eq!(delta.len(), self.n_variation());
        debug_assert_eq!(u.len(), self.n_calibration());
        let (mut kd, mut ku) = (0, 0);
        self.entries
            .iter()
            .map(|e| match e.role {
                Role::Variation => {
                    let v = e.nominal().unwrap() + delta[kd];
                    kd += 1;
                    e.to_unit(v)
                }
                Role::Calibration => {
                    let v = u[ku];
                    ku += 1;
                    e.to_unit(v)
                }
            })
            .collect()
    }

    /// Inverse of [`IuMap::to_unit`].
    pub fn from_unit(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut delta = Vec::new();
        let mut u = Vec::new();
        for (e, &zp) in self.entries.iter().zip(z) {
            let v = e.from_unit(zp);
            match e.role {
                Role::Variation => delta.push(v - e.nominal().unwrap()),
                Role::Calibration => u.push(v),
            }
        }
        (delta, u)
    }
}
