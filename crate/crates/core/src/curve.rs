//! Sampled curves and their two-column CSV files.
//!
//! A curve file is `t,y` with a header row; the label is the file stem. Values
//! are written with Rust's shortest round-trip float formatting, so a
//! written file reloads to the identical bits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub label: String,
    /// Row of the design matrix that produced this run (model curves only).
    pub design_row: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveKind {
    Field,
    Model,
}

impl Curve {
    pub fn new(label: impl Into<String>, t: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let label = label.into();
        check_samples(&t, &y).map_err(|msg| Error::Argument(format!("curve `{label}`: {msg}")))?;
        Ok(Curve {
            t,
            y,
            label,
            design_row: None,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t[0], self.t[self.t.len() - 1])
    }

    /// Linear interpolation at `s`; `None` outside the sampled domain.
    pub fn interpolate(&self, s: f64) -> Option<f64> {
        let (lo, hi) = self.domain();
        if s < lo || s > hi {
            return None;
        }
        // index of the first sample strictly greater than s
        let k = self.t.partition_point(|&v| v <= s);
        if k == self.t.len() {
            return Some(self.y[k - 1]);
        }
        let (t0, t1) = (self.t[k - 1], self.t[k]);
        let w = (s - t0) / (t1 - t0);
        Some(self.y[k - 1] + w * (self.y[k] - self.y[k - 1]))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 24 + 4);
        out.push_str("t,y\n");
        for (t, y) in self.t.iter().zip(&self.y) {
            let _ = writeln!(out, "{t},{y}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse_csv(&text, label).map_err(|msg| Error::parse(path, msg))
    }

    fn parse_csv(text: &str, label: String) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty file")?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["t", "y"] {
            return Err(format!("expected header `t,y`, found `{header}`"));
        }
        let mut t = Vec::new();
        let mut y = Vec::new();
        for (k, line) in lines.enumerate() {
            let row = k + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 2 {
                return Err(format!("length mismatch at row {row}: expected 2 columns, found {}", fields.len()));
            }
            let tv: f64 = fields[0].parse().map_err(|_| format!("bad time at row {row}"))?;
            let yv: f64 = fields[1].parse().map_err(|_| format!("bad value at row {row}"))?;
            if !tv.is_finite() || !yv.is_finite() {
                return Err(format!("non-finite value at row {row}"));
            }
            if let Some(&prev) = t.last() {
                if tv <= prev {
                    return Err(format!("non-monotone time at row {row}"));
                }
            }
            t.push(tv);
            y.push(yv);
        }
        if t.len() < 2 {
            return Err("a curve needs at least two samples".into());
        }
        Ok(Curve {
            t,
            y,
            label,
            design_row: None,
        })
    }
}

fn check_samples(t: &[f64], y: &[f64]) -> std::result::Result<(), String> {
    if t.len() != y.len() {
        return Err(format!("length mismatch: {} times, {} values", t.len(), y.len()));
    }
    if t.len() < 2 {
        return Err("a curve needs at least two samples".into());
    }
    if let Some(k) = t.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(format!("non-monotone time at row {}", k + 2));
    }
    Ok(())
}

/// Trailing integer in a label, e.g. `run_017` -> 17.
fn trailing_index(label: &str) -> Option<usize> {
    let digits: String = label
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Load every `*.csv` curve in `dir`, sorted by label.
///
/// Model curves take their design-row index from the trailing digits of the
/// file name (`run_017.csv` is design row 17).
pub fn load_curves(dir: &Path, kind: CurveKind) -> Result<Vec<Curve>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut curves = paths
        .iter()
        .map(|p| Curve::read(p))
        .collect::<Result<Vec<_>>>()?;
    if kind == CurveKind::Model {
        for (c, p) in curves.iter_mut().zip(&paths) {
            let row = trailing_index(&c.label).ok_or_else(|| {
                Error::parse(p, "model curve file name must end in its design-row index")
            })?;
            c.design_row = Some(row);
        }
    }
    curves.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(curves)
}
