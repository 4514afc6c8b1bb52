//! Landmark registration of field curves onto a model-run reference.
//!
//! Curves are first sampled on a uniform grid of `2^J` points (endpoints
//! included). The reference is the pointwise mean of the model runs. Each
//! field curve's peaks and valleys inside configured event windows are
//! located and its time axis is warped piecewise linearly so those anchors
//! land on the reference anchors. The domain endpoints stay fixed.

use serde::{Deserialize, Serialize};

use crate::curve::Curve;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of wavelet levels; the grid has `2^levels` points.
    pub levels: u32,
    pub t0: f64,
    pub t1: f64,
}

impl GridSpec {
    pub fn new(levels: u32, t0: f64, t1: f64) -> Result<Self> {
        if levels == 0 || levels > 24 {
            return Err(Error::Argument(format!("grid levels must be in 1..=24, got {levels}")));
        }
        if !(t0 < t1) {
            return Err(Error::Argument(format!("grid interval [{t0}, {t1}] is empty")));
        }
        Ok(GridSpec { levels, t0, t1 })
    }

    pub fn len(&self) -> usize {
        1usize << self.levels
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        (self.t1 - self.t0) / (self.len() - 1) as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k + 1 == self.len() {
            self.t1
        } else {
            self.t0 + k as f64 * self.step()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }
}

/// Curve sampled on a dyadic grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCurve {
    pub grid: GridSpec,
    pub y: Vec<f64>,
}

impl GridCurve {
    pub fn new(grid: GridSpec, y: Vec<f64>) -> Result<Self> {
        if y.len() != grid.len() {
            return Err(Error::Argument(format!(
                "grid curve needs {} values, got {}",
                grid.len(),
                y.len()
            )));
        }
        Ok(GridCurve { grid, y })
    }

    pub fn to_curve(&self, label: impl Into<String>) -> Curve {
        Curve {
            t: self.grid.times(),
            y: self.y.clone(),
            label: label.into(),
            design_row: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Min,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventWindow {
    pub lo: f64,
    pub hi: f64,
    pub features: Vec<Feature>,
}

/// Validate that windows are proper, ordered and disjoint.
pub fn check_windows(windows: &[EventWindow]) -> Result<()> {
    for (k, w) in windows.iter().enumerate() {
        if !(w.lo < w.hi) {
            return Err(Error::config(
                format!("registration.windows[{k}]"),
                format!("empty window [{}, {}]", w.lo, w.hi),
            ));
        }
        if w.features.is_empty() {
            return Err(Error::config(format!("registration.windows[{k}].features"), "no features"));
        }
    }
    if let Some(k) = windows.windows(2).position(|p| p[1].lo < p[0].hi) {
        return Err(Error::config(
            format!("registration.windows[{}]", k + 1),
            "windows must be ordered and disjoint",
        ));
    }
    Ok(())
}

/// Anchor times, one list per window in feature order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub windows: Vec<Vec<f64>>,
}

impl AnchorSet {
    pub fn flat(&self) -> Vec<f64> {
        self.windows.iter().flatten().copied().collect()
    }

    fn same_shape(&self, other: &AnchorSet) -> bool {
        self.windows.len() == other.windows.len()
            && self.windows.iter().zip(&other.windows).all(|(a, b)| a.len() == b.len())
    }
}

fn resample_at(curve: &Curve, grid: &GridSpec) -> Result<Vec<f64>> {
    let (lo, hi) = curve.domain();
    if lo > grid.t0 || hi < grid.t1 {
        return Err(Error::Coverage {
            label: curve.label.clone(),
            t0: grid.t0,
            t1: grid.t1,
        });
    }
    // single forward sweep; grid times are increasing
    let mut out = Vec::with_capacity(grid.len());
    let mut k = 0usize;
    for s in grid.times() {
        while k + 2 < curve.t.len() && curve.t[k + 1] <= s {
            k += 1;
        }
        let (t0, t1) = (curve.t[k], curve.t[k + 1]);
        let v = if s == t0 {
            curve.y[k]
        } else if s == t1 {
            curve.y[k + 1]
        } else {
            let w = (s - t0) / (t1 - t0);
            curve.y[k] + w * (curve.y[k + 1] - curve.y[k])
        };
        out.push(v);
    }
    Ok(out)
}

/// Sample `curve` at the `2^levels` grid points by linear interpolation.
pub fn resample_dyadic(curve: &Curve, grid: GridSpec) -> Result<GridCurve> {
    Ok(GridCurve {
        grid,
        y: resample_at(curve, &grid)?,
    })
}

/// Pointwise mean of the model runs on the grid.
pub fn build_reference_curve(model_runs: &[Curve], grid: GridSpec) -> Result<GridCurve> {
    if model_runs.is_empty() {
        return Err(Error::Argument("reference curve needs at least one model run".into()));
    }
    let mut sum = vec![0.0; grid.len()];
    for run in model_runs {
        for (s, v) in sum.iter_mut().zip(resample_at(run, &grid)?) {
            *s += v;
        }
    }
    let k = model_runs.len() as f64;
    Ok(GridCurve {
        grid,
        y: sum.into_iter().map(|s| s / k).collect(),
    })
}

/// Time of each window's extrema; ties go to the earliest sample.
pub fn locate_anchors(t: &[f64], y: &[f64], label: &str, windows: &[EventWindow]) -> Result<AnchorSet> {
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        let start = t.partition_point(|&s| s < w.lo);
        let end = t.partition_point(|&s| s <= w.hi);
        if start >= end {
            return Err(Error::Window {
                lo: w.lo,
                hi: w.hi,
                label: label.to_string(),
            });
        }
        let anchors = w
            .features
            .iter()
            .map(|f| {
                let mut best = start;
                for k in start + 1..end {
                    let better = match f {
                        Feature::Max => y[k] > y[best],
                        Feature::Min => y[k] < y[best],
                    };
                    if better {
                        best = k;
                    }
                }
                t[best]
            })
            .collect();
        out.push(anchors);
    }
    Ok(AnchorSet { windows: out })
}

pub fn locate_curve_anchors(curve: &Curve, windows: &[EventWindow]) -> Result<AnchorSet> {
    locate_anchors(&curve.t, &curve.y, &curve.label, windows)
}

pub fn locate_grid_anchors(curve: &GridCurve, windows: &[EventWindow]) -> Result<AnchorSet> {
    locate_anchors(&curve.grid.times(), &curve.y, "reference", windows)
}

/// Piecewise-linear time map sending `src` knots to `dst` knots.
#[derive(Clone, Debug)]
pub struct Warp {
    src: Vec<f64>,
    dst: Vec<f64>,
}

impl Warp {
    fn new(src: Vec<f64>, dst: Vec<f64>) -> Result<Self> {
        for (name, knots) in [("source", &src), ("target", &dst)] {
            if let Some(k) = knots.windows(2).position(|w| !(w[1] > w[0])) {
                return Err(Error::DegenerateWarp(format!(
                    "{name} knots {} and {} ({} , {}) are not strictly increasing",
                    k,
                    k + 1,
                    knots[k],
                    knots[k + 1]
                )));
            }
        }
        Ok(Warp { src, dst })
    }

    pub fn apply(&self, t: f64) -> f64 {
        let n = self.src.len();
        let k = self.src.partition_point(|&s| s <= t).clamp(1, n - 1) - 1;
        let (s0, s1, d0, d1) = (self.src[k], self.src[k + 1], self.dst[k], self.dst[k + 1]);
        if s0 == d0 && s1 == d1 {
            return t;
        }
        d0 + (t - s0) * ((d1 - d0) / (s1 - s0))
    }
}

/// Warp `curve`'s time axis so every `src` anchor lands on its `dst` anchor.
/// Values are unchanged; the domain endpoints are fixed.
pub fn register_curve(curve: &Curve, src: &AnchorSet, dst: &AnchorSet) -> Result<Curve> {
    if !src.same_shape(dst) {
        return Err(Error::Argument("source and target anchors differ in structure".into()));
    }
    let (lo, hi) = curve.domain();
    let mut s = vec![lo];
    s.extend(src.flat());
    s.push(hi);
    let mut d = vec![lo];
    d.extend(dst.flat());
    d.push(hi);
    let warp = Warp::new(s, d)?;
    let t: Vec<f64> = curve.t.iter().map(|&v| warp.apply(v)).collect();
    if let Some(k) = t.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::DegenerateWarp(format!(
            "warped times collapse at row {} of `{}`",
            k + 2,
            curve.label
        )));
    }
    Ok(Curve {
        t,
        y: curve.y.clone(),
        label: curve.label.clone(),
        design_row: curve.design_row,
    })
}
