//! Histogram-based similarity between two sample sets: sampling L1 distance
//! and the Jaccard index of occupied bins.

use std::collections::BTreeMap;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_TRIM_PERCENTILE: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("sample set {0} is empty")]
    EmptySamples(&'static str),
    #[error("dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("need at least 2 bins per dimension, got {0}")]
    TooFewBins(usize),
    #[error("mass tables were built on a different grid")]
    GridMismatch,
    #[error("both mass tables are empty")]
    BothEmpty,
    #[error("percentile {0} outside [0, 50)")]
    InvalidPercentile(f64),
    #[error("trimming at percentile {p} left sample set {set} empty")]
    TrimmedEmpty { p: f64, set: &'static str },
    #[error("non-finite sample value")]
    NonFinite,
}

/// Uniform partition of the bounding box of two sample sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramGrid {
    pub bins_per_dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Dimensions where every sample shares one value; they get a single
    /// bin and are left out of the volume.
    pub degenerate: Vec<bool>,
    /// Volume of one cell, `prod_j (M_j - m_j) / w` over non-degenerate `j`.
    pub volume: f64,
}

impl HistogramGrid {
    pub fn dimension(&self) -> usize {
        self.lower.len()
    }

    pub fn bins_in(&self, j: usize) -> usize {
        if self.degenerate[j] {
            1
        } else {
            self.bins_per_dim
        }
    }

    pub fn total_bins(&self) -> f64 {
        (0..self.dimension()).map(|j| self.bins_in(j) as f64).product()
    }

    pub fn has_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }

    /// Edges `s_0 < ... < s_w` of dimension `j`; the last equals the upper
    /// bound exactly.
    pub fn edges(&self, j: usize) -> Vec<f64> {
        let w = self.bins_in(j);
        let (m, big_m) = (self.lower[j], self.upper[j]);
        (0..=w)
            .map(|k| {
                if k == w {
                    big_m
                } else {
                    m + (big_m - m) * k as f64 / w as f64
                }
            })
            .collect()
    }

    /// Cell containing `row`, or `None` when it lies outside the bounds.
    /// Cells are half-open except the last in each dimension.
    pub fn bin_of(&self, row: &[f64]) -> Option<Vec<u32>> {
        let mut idx = Vec::with_capacity(row.len());
        for (j, &x) in row.iter().enumerate() {
            let (m, big_m) = (self.lower[j], self.upper[j]);
            if self.degenerate[j] {
                if x != m {
                    return None;
                }
                idx.push(0);
                continue;
            }
            if !(x >= m && x <= big_m) {
                return None;
            }
            let w = self.bins_per_dim;
            let width = (big_m - m) / w as f64;
            let mut k = (((x - m) / width).floor() as usize).min(w - 1);
            // Reconcile the floor estimate with the explicit edges.
            while k > 0 && x < self.edge(j, k) {
                k -= 1;
            }
            while k + 1 < w && x >= self.edge(j, k + 1) {
                k += 1;
            }
            idx.push(k as u32);
        }
        Some(idx)
    }

    fn edge(&self, j: usize, k: usize) -> f64 {
        let w = self.bins_per_dim;
        if k == w {
            self.upper[j]
        } else {
            self.lower[j] + (self.upper[j] - self.lower[j]) * k as f64 / w as f64
        }
    }
}

/// Sparse per-cell sample counts; the mass of a cell is `count / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MassTable {
    grid: HistogramGrid,
    pub counts: BTreeMap<Vec<u32>, usize>,
    pub n: usize,
    pub out_of_bounds: usize,
}

impl MassTable {
    pub fn mass(&self, cell: &[u32]) -> f64 {
        self.counts
            .get(cell)
            .map_or(0.0, |&c| c as f64 / self.n as f64)
    }

    pub fn masses(&self) -> impl Iterator<Item = (&Vec<u32>, f64)> + '_ {
        let n = self.n as f64;
        self.counts.iter().map(move |(k, &c)| (k, c as f64 / n))
    }

    pub fn occupied(&self) -> usize {
        self.counts.len()
    }

    pub fn grid(&self) -> &HistogramGrid {
        &self.grid
    }

    pub fn has_out_of_bounds(&self) -> bool {
        self.out_of_bounds > 0
    }
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<(), MetricsError> {
    if a.nrows() == 0 {
        return Err(MetricsError::EmptySamples("a"));
    }
    if b.nrows() == 0 {
        return Err(MetricsError::EmptySamples("b"));
    }
    if a.ncols() != b.ncols() || a.ncols() == 0 {
        return Err(MetricsError::DimensionMismatch {
            a: a.ncols(),
            b: b.ncols(),
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

/// Grid over the per-dimension min/max of both sets together.
pub fn build_partition(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    bins_per_dim: usize,
) -> Result<HistogramGrid, MetricsError> {
    check_pair(a, b)?;
    if bins_per_dim < 2 {
        return Err(MetricsError::TooFewBins(bins_per_dim));
    }
    let d = a.ncols();
    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for row in a.rows().into_iter().chain(b.rows()) {
        for (j, &x) in row.iter().enumerate() {
            lower[j] = lower[j].min(x);
            upper[j] = upper[j].max(x);
        }
    }
    let degenerate: Vec<bool> = lower.iter().zip(&upper).map(|(m, mm)| m == mm).collect();
    let volume = (0..d)
        .filter(|&j| !degenerate[j])
        .map(|j| (upper[j] - lower[j]) / bins_per_dim as f64)
        .product();
    Ok(HistogramGrid {
        bins_per_dim,
        lower,
        upper,
        degenerate,
        volume,
    })
}

pub fn histogram_mass(grid: &HistogramGrid, samples: ArrayView2<f64>) -> MassTable {
    let mut counts = BTreeMap::new();
    let mut out_of_bounds = 0;
    for row in samples.axis_iter(Axis(0)) {
        let row = row.to_vec();
        match (row.len() == grid.dimension())
            .then(|| grid.bin_of(&row))
            .flatten()
        {
            Some(cell) => *counts.entry(cell).or_insert(0) += 1,
            None => out_of_bounds += 1,
        }
    }
    if out_of_bounds > 0 {
        log::warn!("{out_of_bounds} samples fell outside the histogram grid");
    }
    MassTable {
        grid: grid.clone(),
        counts,
        n: samples.nrows(),
        out_of_bounds,
    }
}

/// Cells occupied by either table in ascending index order, with both
/// masses.
pub fn union_masses(a: &MassTable, b: &MassTable) -> Vec<(Vec<u32>, f64, f64)> {
    let mut keys: Vec<&Vec<u32>> = a.counts.keys().chain(b.counts.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|k| (k.clone(), a.mass(k), b.mass(k)))
        .collect()
}

/// `L * sum_k |h_a(C_k) - h_b(C_k)|`, summed in cell-index order.
pub fn l1_distance(
    grid: &HistogramGrid,
    a: &MassTable,
    b: &MassTable,
) -> Result<f64, MetricsError> {
    if a.grid != *grid || b.grid != *grid {
        return Err(MetricsError::GridMismatch);
    }
    let sum: f64 = union_masses(a, b)
        .iter()
        .map(|(_, ma, mb)| (ma - mb).abs())
        .sum();
    Ok(grid.volume * sum)
}

/// Shared occupied cells over all occupied cells.
pub fn jaccard_index(
    grid: &HistogramGrid,
    a: &MassTable,
    b: &MassTable,
) -> Result<f64, MetricsError> {
    if a.grid != *grid || b.grid != *grid {
        return Err(MetricsError::GridMismatch);
    }
    if a.counts.is_empty() && b.counts.is_empty() {
        return Err(MetricsError::BothEmpty);
    }
    let shared = a.counts.keys().filter(|k| b.counts.contains_key(*k)).count();
    let union = a.counts.len() + b.counts.len() - shared;
    Ok(shared as f64 / union as f64)
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Drops rows of each set that fall below the pooled `p`-th percentile in
/// any dimension, then computes the Jaccard index on a fresh grid.
pub fn jaccard_from_percentile(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    bins_per_dim: usize,
    p: f64,
) -> Result<f64, MetricsError> {
    if !(0.0..50.0).contains(&p) {
        return Err(MetricsError::InvalidPercentile(p));
    }
    check_pair(a, b)?;
    let d = a.ncols();
    let cut: Vec<f64> = (0..d)
        .map(|j| {
            let mut pooled: Vec<f64> = a.column(j).iter().chain(b.column(j)).copied().collect();
            percentile(&mut pooled, p)
        })
        .collect();
    let trim = |s: ArrayView2<f64>, set: &'static str| {
        let keep: Vec<usize> = (0..s.nrows())
            .filter(|&i| s.row(i).iter().zip(&cut).all(|(x, c)| x >= c))
            .collect();
        if keep.is_empty() {
            return Err(MetricsError::TrimmedEmpty { p, set });
        }
        Ok(s.select(Axis(0), &keep))
    };
    let ta = trim(a, "a")?;
    let tb = trim(b, "b")?;
    let grid = build_partition(ta.view(), tb.view(), bins_per_dim)?;
    let ma = histogram_mass(&grid, ta.view());
    let mb = histogram_mass(&grid, tb.view());
    jaccard_index(&grid, &ma, &mb)
}

/// The three per-comparison metrics tracked during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub l1: f64,
    pub jaccard: f64,
    pub jaccard_p1: f64,
}

pub fn similarity(
    real: ArrayView2<f64>,
    synth: ArrayView2<f64>,
    bins_per_dim: usize,
) -> Result<Similarity, MetricsError> {
    let grid = build_partition(real, synth, bins_per_dim)?;
    let ma = histogram_mass(&grid, real);
    let mb = histogram_mass(&grid, synth);
    Ok(Similarity {
        l1: l1_distance(&grid, &ma, &mb)?,
        jaccard: jaccard_index(&grid, &ma, &mb)?,
        jaccard_p1: jaccard_from_percentile(real, synth, bins_per_dim, DEFAULT_TRIM_PERCENTILE)?,
    })
}

/// Occupied cells of either set ordered by real mass ascending (ties by
/// cell index): `(rank, mass_real, mass_synth)`.
pub fn sorted_comparison(
    real: ArrayView2<f64>,
    synth: ArrayView2<f64>,
    bins_per_dim: usize,
) -> Result<Vec<(usize, f64, f64)>, MetricsError> {
    let grid = build_partition(real, synth, bins_per_dim)?;
    let ma = histogram_mass(&grid, real);
    let mb = histogram_mass(&grid, synth);
    let mut rows = union_masses(&ma, &mb);
    rows.sort_by(|x, y| x.1.total_cmp(&y.1).then_with(|| x.0.cmp(&y.0)));
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(r, (_, a, b))| (r, a, b))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn two_point_grid() {
        let a = array![[0.0, 0.0]];
        let b = array![[1.0, 1.0]];
        let g = build_partition(a.view(), b.view(), 2).unwrap();
        assert_eq!(g.lower, vec![0.0, 0.0]);
        assert_eq!(g.upper, vec![1.0, 1.0]);
        assert_eq!(g.volume, 0.25);
        let ma = histogram_mass(&g, a.view());
        let mb = histogram_mass(&g, b.view());
        assert_eq!(ma.mass(&[0, 0]), 1.0);
        assert_eq!(mb.mass(&[1, 1]), 1.0);
        assert_eq!(l1_distance(&g, &ma, &mb).unwrap(), 0.5);
        assert_eq!(jaccard_index(&g, &ma, &mb).unwrap(), 0.0);
    }

    #[test]
    fn identical_sets_share_bounds() {
        let a = array![[1.0, -2.0], [3.0, 4.0], [2.0, 0.0]];
        let g = build_partition(a.view(), a.view(), 5).unwrap();
        assert_eq!(g.lower, vec![1.0, -2.0]);
        assert_eq!(g.upper, vec![3.0, 4.0]);
        let m = histogram_mass(&g, a.view());
        assert_eq!(l1_distance(&g, &m, &m).unwrap(), 0.0);
        assert_eq!(jaccard_index(&g, &m, &m).unwrap(), 1.0);
    }

    #[test]
    fn masses_split_evenly() {
        let a = array![[0.0], [0.1], [0.9], [1.0]];
        let g = build_partition(a.view(), a.view(), 2).unwrap();
        let m = histogram_mass(&g, a.view());
        assert_eq!(m.mass(&[0]), 0.5);
        assert_eq!(m.mass(&[1]), 0.5);
        let one = array![[0.0], [0.1], [0.2], [0.3]];
        let m = histogram_mass(&g, one.view());
        assert_eq!(m.mass(&[0]), 1.0);
    }

    #[test]
    fn jaccard_one_third() {
        let a = array![[0.1], [1.1]];
        let b = array![[1.2], [2.9]];
        let g = build_partition(a.view(), b.view(), 3).unwrap();
        // edges at 0.1, 1.0333, 1.9667, 2.9: a -> {0, 1}, b -> {1, 2}
        let ma = histogram_mass(&g, a.view());
        let mb = histogram_mass(&g, b.view());
        assert!((jaccard_index(&g, &ma, &mb).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_dimension_collapses() {
        let a = array![[5.0, 0.0], [5.0, 1.0]];
        let b = array![[5.0, 0.5]];
        let g = build_partition(a.view(), b.view(), 4).unwrap();
        assert_eq!(g.degenerate, vec![true, false]);
        assert_eq!(g.bins_in(0), 1);
        assert_eq!(g.volume, 0.25);
        let m = histogram_mass(&g, a.view());
        assert_eq!(m.out_of_bounds, 0);
    }

    #[test]
    fn out_of_bounds_rows_are_counted() {
        let a = array![[0.0], [1.0]];
        let g = build_partition(a.view(), a.view(), 2).unwrap();
        let m = histogram_mass(&g, array![[0.5], [2.0]].view());
        assert_eq!(m.out_of_bounds, 1);
        assert_eq!(m.n, 2);
        assert_eq!(m.masses().map(|(_, v)| v).sum::<f64>(), 0.5);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = array![[0.0], [1.0]];
        let g1 = build_partition(a.view(), a.view(), 2).unwrap();
        let g2 = build_partition(a.view(), a.view(), 3).unwrap();
        let m = histogram_mass(&g1, a.view());
        assert_eq!(l1_distance(&g2, &m, &m), Err(MetricsError::GridMismatch));
    }

    #[test]
    fn bad_inputs() {
        let a = array![[0.0]];
        let empty = Array2::<f64>::zeros((0, 1));
        assert!(build_partition(a.view(), empty.view(), 2).is_err());
        assert_eq!(
            build_partition(a.view(), a.view(), 1),
            Err(MetricsError::TooFewBins(1))
        );
        assert!(jaccard_from_percentile(a.view(), a.view(), 2, 50.0).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&mut v, 0.0), 1.0);
        assert_eq!(percentile(&mut v, 50.0), 2.5);
        assert_eq!(percentile(&mut v, 100.0), 4.0);
    }

    #[test]
    fn zero_percentile_matches_plain() {
        let a = array![[0.0, 1.0], [0.3, 0.2], [0.9, 0.9]];
        let b = array![[0.1, 0.1], [0.8, 0.4]];
        let g = build_partition(a.view(), b.view(), 5).unwrap();
        let plain = jaccard_index(
            &g,
            &histogram_mass(&g, a.view()),
            &histogram_mass(&g, b.view()),
        )
        .unwrap();
        assert_eq!(
            jaccard_from_percentile(a.view(), b.view(), 5, 0.0).unwrap(),
            plain
        );
    }

    #[test]
    fn sorted_comparison_orders_by_real_mass() {
        let real = array![[0.0], [0.0], [0.0], [1.0], [0.6], [0.6]];
        let rows = sorted_comparison(real.view(), real.view(), 4).unwrap();
        assert!(rows.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(rows.iter().all(|r| r.1 == r.2));
    }
}
