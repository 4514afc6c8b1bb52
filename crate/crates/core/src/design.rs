//! Maximin Latin hypercube designs on the unit cube.
//!
//! Points sit at cell centres `(rank + 0.5) / K`. Each restart draws a random
//! Latin hypercube and improves it by coordinate exchange: swapping two rows'
//! ranks within one column, accepting only swaps that increase the minimum
//! pairwise distance or keep it while reducing the number of pairs attaining it.
//! Distances are tracked as exact integers in rank units.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    /// `K` rows of `d` coordinates in `[0, 1]`.
    pub points: Vec<Vec<f64>>,
    pub column_names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(points: Vec<Vec<f64>>, column_names: Vec<String>) -> Result<Self> {
        let d = column_names.len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::Argument(format!("design rows must all have {d} columns")));
        }
        Ok(DesignMatrix {
            points,
            column_names,
        })
    }

    pub fn n_runs(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.column_names.len()
    }

    pub fn min_distance(&self) -> f64 {
        min_pairwise_distance(&self.points)
    }

    /// Keep only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let points = rows
            .iter()
            .map(|&r| {
                self.points
                    .get(r)
                    .cloned()
                    .ok_or_else(|| Error::Argument(format!("design row {r} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        DesignMatrix::new(points, self.column_names.clone())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.column_names.join(",");
        out.push('\n');
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(path, "empty design file"))?;
        let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut points = Vec::new();
        for (k, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(path, format!("bad number at row {}", k + 1)))?;
            if row.len() != names.len() {
                return Err(Error::parse(path, format!("length mismatch at row {}", k + 1)));
            }
            points.push(row);
        }
        DesignMatrix::new(points, names)
    }
}

pub fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d2: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d2);
        }
    }
    best.sqrt()
}

/// Uniformly random cell-centred Latin hypercube.
pub fn random_lhd<R: rand::Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..d)
        .map(|_| {
            let mut col: Vec<usize> = (0..k).collect();
            col.shuffle(rng);
            col
        })
        .collect()
}

pub(crate) fn ranks_to_points(ranks: &[Vec<usize>], k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| ranks.iter().map(|col| (col[i] as f64 + 0.5) / k as f64).collect())
        .collect()
}

/// Approximately maximin LHD with `k` runs in `d` dimensions.
pub fn generate_lhd(k: usize, d: usize, n_restarts: usize, seed: u64) -> Result<DesignMatrix> {
    if k < 2 {
        return Err(Error::Argument(format!("a design needs at least 2 runs, got {k}")));
    }
    if d < 1 {
        return Err(Error::Argument("a design needs at least one dimension".into()));
    }
    let restarts = n_restarts.max(1);
    let results: Vec<Search> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, rng::purpose::LHD, r as u64);
            let ranks = random_lhd(k, d, &mut rng);
            exchange_search(ranks)
        })
        .collect();
    let best = results
        .into_iter()
        .reduce(|a, b| if b.score() > a.score() { b } else { a })
        .expect("at least one restart");
    let names = (1..=d).map(|p| format!("z{p}")).collect();
    DesignMatrix::new(ranks_to_points(&best.ranks, k), names)
}

pub(crate) struct Search {
    pub ranks: Vec<Vec<usize>>,
    pub min_d2: i64,
    pub n_min: usize,
    /// Minimum squared rank distance after each accepted exchange.
    #[cfg_attr(not(test), allow(dead_code))]
    pub trace: Vec<i64>,
}

impl Search {
    fn score(&self) -> (i64, std::cmp::Reverse<usize>) {
        (self.min_d2, std::cmp::Reverse(self.n_min))
    }
}

fn sq_rank_dist(ranks: &[Vec<usize>], i: usize, j: usize) -> i64 {
    ranks
        .iter()
        .map(|col| {
            let diff = col[i] as i64 - col[j] as i64;
            diff * diff
        })
        .sum()
}

fn min_pairs(dist: &[Vec<i64>]) -> (i64, Vec<(usize, usize)>) {
    let k = dist.len();
    let mut m = i64::MAX;
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let v = dist[i][j];
            if v < m {
                m = v;
                pairs.clear();
            }
            if v == m {
                pairs.push((i, j));
            }
        }
    }
    (m, pairs)
}

pub(crate) fn exchange_search(mut ranks: Vec<Vec<usize>>) -> Search {
    let k = ranks[0].len();
    let mut dist = vec![vec![0i64; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let v = sq_rank_dist(&ranks, i, j);
            dist[i][j] = v;
            dist[j][i] = v;
        }
    }
    let (mut m, mut pairs) = min_pairs(&dist);
    let mut trace = vec![m];
    if k == 2 {
        return Search {
            ranks,
            min_d2: m,
            n_min: pairs.len(),
            trace,
        };
    }
    let max_iter = 50 * k * ranks.len();
    let mut new_i = vec![0i64; k];
    let mut new_j = vec![0i64; k];
    'outer: for _ in 0..max_iter {
        let mut critical: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        critical.sort_unstable();
        critical.dedup();
        let n_min = pairs.len();
        for &i in &critical {
            for c in 0..ranks.len() {
                for j in 0..k {
                    if j == i {
                        continue;
                    }
                    let (ri, rj) = (ranks[c][i] as i64, ranks[c][j] as i64);
                    // distances from i and j to every other row after swapping column c
                    let mut cand_min = i64::MAX;
                    let mut cand_cnt = 0usize;
                    for l in 0..k {
                        if l == i || l == j {
                            continue;
                        }
                        let rl = ranks[c][l] as i64;
                        new_i[l] = dist[i][l] - (ri - rl).pow(2) + (rj - rl).pow(2);
                        new_j[l] = dist[j][l] - (rj - rl).pow(2) + (ri - rl).pow(2);
                        for v in [new_i[l], new_j[l]] {
                            if v < cand_min {
                                cand_min = v;
                                cand_cnt = 0;
                            }
                            if v == cand_min {
                                cand_cnt += 1;
                            }
                        }
                    }
                    // the (i, j) pair itself is unchanged by the swap
                    let dij = dist[i][j];
                    if dij < cand_min {
                        cand_min = dij;
                        cand_cnt = 0;
                    }
                    if dij == cand_min {
                        cand_cnt += 1;
                    }
                    if cand_min < m {
                        continue;
                    }
                    let rest_at_m = pairs
                        .iter()
                        .filter(|&&(a, b)| a != i && a != j && b != i && b != j)
                        .count();
                    let improves = if rest_at_m > 0 {
                        let at_m = rest_at_m + if cand_min == m { cand_cnt } else { 0 };
                        at_m < n_min
                    } else if cand_min == m {
                        cand_cnt < n_min
                    } else {
                        true
                    };
                    if !improves {
                        continue;
                    }
                    ranks[c].swap(i, j);
                    for l in 0..k {
                        if l == i || l == j {
                            continue;
                        }
                        dist[i][l] = new_i[l];
                        dist[l][i] = new_i[l];
                        dist[j][l] = new_j[l];
                        dist[l][j] = new_j[l];
                    }
                    let (m2, p2) = min_pairs(&dist);
                    debug_assert!(m2 >= m);
                    m = m2;
                    pairs = p2;
                    trace.push(m);
                    continue 'outer;
                }
            }
        }
        break;
    }
    Search {
        ranks,
        min_d2: m,
        n_min: pairs.len(),
        trace,
    }
}
