//! Periodic orthonormal Daubechies (two vanishing moments, 4-tap) wavelet
//! transform and the union thresholding rule.
//!
//! Coefficients are stored flat, coarse to fine: index 0 is the level-0
//! scaling coefficient and level `j >= 1` holds `2^(j-1)` details at flat
//! indices `2^(j-1) .. 2^j`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::registration::{GridCurve, GridSpec};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const NORM: f64 = 5.656_854_249_492_380_6; // 4 * sqrt(2)

/// D4 low-pass filter.
pub const D4_LOW: [f64; 4] = [
    (1.0 + SQRT3) / NORM,
    (3.0 + SQRT3) / NORM,
    (3.0 - SQRT3) / NORM,
    (1.0 - SQRT3) / NORM,
];

/// D4 high-pass filter, `g[k] = (-1)^k h[3 - k]`.
pub const D4_HIGH: [f64; 4] = [D4_LOW[3], -D4_LOW[2], D4_LOW[1], -D4_LOW[0]];

/// Position of a coefficient in the multiresolution layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CoeffIndex {
    pub level: u32,
    pub pos: usize,
}

impl CoeffIndex {
    pub fn from_flat(flat: usize) -> Self {
        if flat == 0 {
            return CoeffIndex { level: 0, pos: 0 };
        }
        let level = usize::BITS - flat.leading_zeros();
        CoeffIndex {
            level,
            pos: flat - (1usize << (level - 1)),
        }
    }

    pub fn flat(&self) -> usize {
        if self.level == 0 {
            0
        } else {
            (1usize << (self.level - 1)) + self.pos
        }
    }

    pub fn label(&self) -> String {
        format!("{}.{}", self.level, self.pos)
    }

    pub fn parse(label: &str) -> Option<Self> {
        let (j, p) = label.trim().split_once('.')?;
        let idx = CoeffIndex {
            level: j.parse().ok()?,
            pos: p.parse().ok()?,
        };
        let valid = if idx.level == 0 {
            idx.pos == 0
        } else {
            idx.pos < 1usize << (idx.level - 1)
        };
        valid.then_some(idx)
    }
}

/// Full wavelet decomposition of one grid curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffSet {
    pub grid: GridSpec,
    pub coeffs: Vec<f64>,
    pub source_label: String,
}

impl CoeffSet {
    pub fn scaling(&self) -> f64 {
        self.coeffs[0]
    }

    /// Detail coefficients of level `j` (`1..=J`).
    pub fn detail(&self, level: u32) -> &[f64] {
        let start = 1usize << (level - 1);
        &self.coeffs[start..2 * start]
    }

    pub fn get(&self, idx: CoeffIndex) -> f64 {
        self.coeffs[idx.flat()]
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }
}

/// Coefficients shared by every curve in an analysis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetainedIndexSet {
    pub levels: u32,
    indices: BTreeSet<usize>,
}

impl RetainedIndexSet {
    pub fn all(levels: u32) -> Self {
        RetainedIndexSet {
            levels,
            indices: (0..1usize << levels).collect(),
        }
    }

    pub fn from_indices(levels: u32, indices: impl IntoIterator<Item = CoeffIndex>) -> Result<Self> {
        let n = 1usize << levels;
        let mut set = BTreeSet::new();
        for idx in indices {
            let flat = idx.flat();
            if idx.level > levels || flat >= n {
                return Err(Error::Argument(format!(
                    "coefficient {} outside a {levels}-level layout",
                    idx.label()
                )));
            }
            set.insert(flat);
        }
        Ok(RetainedIndexSet { levels, indices: set })
    }

    /// All coefficients of levels `0..=keep_levels`.
    pub fn base(levels: u32, keep_levels: u32) -> Self {
        let top = 1usize << keep_levels.min(levels);
        RetainedIndexSet {
            levels,
            indices: (0..top).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, idx: CoeffIndex) -> bool {
        self.indices.contains(&idx.flat())
    }

    /// Flat indices in increasing (coarse-to-fine) order.
    pub fn flat_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn indices(&self) -> impl Iterator<Item = CoeffIndex> + '_ {
        self.indices.iter().map(|&f| CoeffIndex::from_flat(f))
    }

    /// Resolution level of each retained coefficient, in retained order.
    pub fn level_map(&self) -> Vec<u32> {
        self.indices().map(|i| i.level).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.indices().map(|i| i.label()).collect()
    }

    fn check_layout(&self, grid: &GridSpec) -> Result<()> {
        if grid.levels != self.levels {
            return Err(Error::Argument(format!(
                "retained set is for {} levels, coefficients have {}",
                self.levels, grid.levels
            )));
        }
        Ok(())
    }
}

fn analysis_step(input: &[f64], approx: &mut [f64], detail: &mut [f64]) {
    let n = input.len();
    let half = n / 2;
    for k in 0..half {
        let (mut a, mut d) = (0.0, 0.0);
        for m in 0..4 {
            let x = input[(2 * k + m) % n];
            a += D4_LOW[m] * x;
            d += D4_HIGH[m] * x;
        }
        approx[k] = a;
        detail[k] = d;
    }
}

fn synthesis_step(approx: &[f64], detail: &[f64], out: &mut [f64]) {
    let n = 2 * approx.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..approx.len() {
        for m in 0..4 {
            out[(2 * k + m) % n] += D4_LOW[m] * approx[k] + D4_HIGH[m] * detail[k];
        }
    }
}

fn forward(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut out = vec![0.0; n];
    let mut approx = y.to_vec();
    let mut len = n;
    while len > 1 {
        let half = len / 2;
        let mut a = vec![0.0; half];
        analysis_step(&approx[..len], &mut a, &mut out[half..len]);
        approx = a;
        len = half;
    }
    out[0] = approx[0];
    out
}

fn inverse(coeffs: &[f64]) -> Vec<f64> {
    let n = coeffs.len();
    let mut approx = vec![coeffs[0]];
    let mut len = 1;
    while len < n {
        let mut next = vec![0.0; 2 * len];
        synthesis_step(&approx, &coeffs[len..2 * len], &mut next);
        approx = next;
        len *= 2;
    }
    approx
}

/// Full orthonormal decomposition of a dyadic-length curve.
pub fn dwt(g: &GridCurve) -> Result<CoeffSet> {
    dwt_labeled(g, "")
}

pub fn dwt_labeled(g: &GridCurve, label: &str) -> Result<CoeffSet> {
    let n = g.y.len();
    if n < 2 || !n.is_power_of_two() || n != g.grid.len() {
        return Err(Error::Argument(format!("curve length {n} is not the grid's dyadic length")));
    }
    Ok(CoeffSet {
        grid: g.grid,
        coeffs: forward(&g.y),
        source_label: label.to_string(),
    })
}

/// Inverse transform, zeroing coefficients outside `keep` when given.
pub fn idwt(c: &CoeffSet, keep: Option<&RetainedIndexSet>) -> Result<GridCurve> {
    if c.coeffs.len() != c.grid.len() {
        return Err(Error::Argument("coefficient count does not match the grid".into()));
    }
    let y = match keep {
        None => inverse(&c.coeffs),
        Some(keep) => {
            keep.check_layout(&c.grid)?;
            let mut masked = vec![0.0; c.coeffs.len()];
            for f in keep.flat_indices() {
                masked[f] = c.coeffs[f];
            }
            inverse(&masked)
        }
    };
    GridCurve::new(c.grid, y)
}

/// Curve with the given retained-coefficient values and zeros elsewhere.
pub fn reconstruct(values: &[f64], keep: &RetainedIndexSet, grid: GridSpec) -> Result<GridCurve> {
    keep.check_layout(&grid)?;
    if values.len() != keep.len() {
        return Err(Error::Argument(format!(
            "{} values for {} retained coefficients",
            values.len(),
            keep.len()
        )));
    }
    let mut full = vec![0.0; grid.len()];
    for (f, v) in keep.flat_indices().zip(values) {
        full[f] = *v;
    }
    GridCurve::new(grid, inverse(&full))
}

/// Basis function `Ψ_i` sampled on the grid.
pub fn basis_function(grid: GridSpec, idx: CoeffIndex) -> Vec<f64> {
    let mut e = vec![0.0; grid.len()];
    e[idx.flat()] = 1.0;
    inverse(&e)
}

/// Retained-coefficient values of `c`, in coarse-to-fine order.
pub fn restrict(c: &CoeffSet, keep: &RetainedIndexSet) -> Result<Vec<f64>> {
    keep.check_layout(&c.grid)?;
    Ok(keep.flat_indices().map(|f| c.coeffs[f]).collect())
}

/// Per curve keep levels `0..=keep_levels` plus any finer coefficient whose
/// magnitude ranks in the top `pct` fraction of all that curve's coefficients;
/// return the union over curves.
pub fn threshold_union(curves: &[CoeffSet], keep_levels: u32, pct: f64) -> Result<RetainedIndexSet> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Argument("thresholding needs at least one curve".into()))?;
    if !(pct > 0.0 && pct < 1.0) {
        return Err(Error::Argument(format!("threshold fraction {pct} must be in (0, 1)")));
    }
    let levels = first.grid.levels;
    if curves.iter().any(|c| c.grid.levels != levels) {
        return Err(Error::Argument("curves disagree on the number of levels".into()));
    }
    let n = 1usize << levels;
    let n_top = (pct * n as f64).floor() as usize;
    let mut set = RetainedIndexSet::base(levels, keep_levels);
    let first_free = 1usize << keep_levels.min(levels);
    for c in curves {
        let mut order: Vec<usize> = (0..n).filter(|&f| c.coeffs[f] != 0.0).collect();
        order.sort_by(|&a, &b| c.coeffs[b].abs().total_cmp(&c.coeffs[a].abs()).then(a.cmp(&b)));
        set.indices
            .extend(order.into_iter().take(n_top).filter(|&f| f >= first_free));
    }
    Ok(set)
}

/// Coefficient matrix CSV: one row per curve, one column per retained index.
pub fn coeff_matrix_csv(labels: &[String], rows: &[Vec<f64>], keep: &RetainedIndexSet) -> String {
    let mut out = String::from("label");
    for l in keep.labels() {
        out.push(',');
        out.push_str(&l);
    }
    out.push('\n');
    for (label, row) in labels.iter().zip(rows) {
        out.push_str(label);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parse a coefficient matrix written by [`coeff_matrix_csv`].
pub fn read_coeff_matrix(path: &Path, levels: u32) -> Result<(Vec<String>, Vec<Vec<f64>>, RetainedIndexSet)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(path, "empty coefficient file"))?;
    let mut cols = header.split(',');
    if cols.next() != Some("label") {
        return Err(Error::parse(path, "first column must be `label`"));
    }
    let idx = cols
        .map(|c| CoeffIndex::parse(c).ok_or_else(|| Error::parse(path, format!("bad coefficient label `{c}`"))))
        .collect::<Result<Vec<_>>>()?;
    let keep = RetainedIndexSet::from_indices(levels, idx.iter().copied())?;
    if keep.indices().ne(idx.iter().copied()) {
        return Err(Error::parse(path, "coefficient columns must be unique and coarse-to-fine"));
    }
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split(',');
        labels.push(f.next().unwrap_or_default().to_string());
        let row = f
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(path, format!("bad number at row {}", k + 1)))?;
        if row.len() != keep.len() {
            return Err(Error::parse(path, format!("length mismatch at row {}", k + 1)));
        }
        rows.push(row);
    }
    Ok((labels, rows, keep))
}
