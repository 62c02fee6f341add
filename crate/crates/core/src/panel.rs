//! Unbalanced panel structure.
//!
//! Units are indexed `0..N` globally; periods run `0..=T`, with period 0
//! carrying initial conditions only. Within a period, units are kept in
//! ascending id order, and stacked vectors over the estimation sample are
//! period-major: all of period 1, then period 2, up to period T.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Who is observed when.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelLayout {
    n_units: usize,
    n_periods: usize,
    index_sets: Vec<Vec<usize>>,
    windows: Vec<(usize, usize)>,
    obs_counts: Vec<usize>,
    est_counts: Vec<usize>,
    offsets: Vec<usize>,
    row_unit: Vec<usize>,
    prev_local: Vec<Vec<Option<usize>>>,
}

/// Soft checks on the observation pattern. Reported, never enforced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayoutDiagnostics {
    /// min_i T_i / T over the estimation periods.
    pub min_share_observed: f64,
    /// N_0 / N.
    pub initial_share: f64,
    pub units_without_estimation_rows: usize,
    pub warnings: Vec<String>,
}

impl PanelLayout {
    /// Builds a layout from an N x (T+1) indicator matrix given row by row.
    pub fn from_indicators(d: &[Vec<bool>]) -> Result<Self> {
        let n_units = d.len();
        if n_units == 0 {
            return Err(Error::InvalidInput("indicator matrix has no rows".into()));
        }
        let width = d[0].len();
        if width < 2 {
            return Err(Error::ShapeMismatch(format!(
                "need at least two periods (0..=T), got {width}"
            )));
        }
        let mut windows = Vec::with_capacity(n_units);
        for (unit, row) in d.iter().enumerate() {
            if row.len() != width {
                return Err(Error::ShapeMismatch(format!(
                    "row {unit} has {} periods, expected {width}",
                    row.len()
                )));
            }
            let periods: Vec<usize> = (0..width).filter(|&t| row[t]).collect();
            let (Some(&first), Some(&last)) = (periods.first(), periods.last()) else {
                return Err(Error::EmptyUnit { unit });
            };
            if last - first + 1 != periods.len() {
                return Err(Error::NonContiguousWindow { unit, periods });
            }
            windows.push((first, last));
        }
        Self::from_windows(windows, width - 1)
    }

    /// Builds a layout from per-unit `(first, last)` windows over periods `0..=n_periods`.
    pub fn from_windows(windows: Vec<(usize, usize)>, n_periods: usize) -> Result<Self> {
        if n_periods == 0 {
            return Err(Error::ShapeMismatch("need at least one estimation period".into()));
        }
        let n_units = windows.len();
        let mut index_sets = vec![Vec::new(); n_periods + 1];
        for (unit, &(first, last)) in windows.iter().enumerate() {
            if first > last || last > n_periods {
                return Err(Error::InvalidInput(format!(
                    "unit {unit} has window ({first}, {last}) outside 0..={n_periods}"
                )));
            }
            for set in &mut index_sets[first..=last] {
                set.push(unit);
            }
        }
        for (t, set) in index_sets.iter().enumerate().skip(1) {
            if set.is_empty() {
                return Err(Error::EmptyPeriod { period: t });
            }
        }
        let obs_counts: Vec<usize> = windows.iter().map(|&(f, l)| l - f + 1).collect();
        let est_counts: Vec<usize> = windows
            .iter()
            .map(|&(f, l)| if l == 0 { 0 } else { l - f.max(1) + 1 })
            .collect();

        let mut offsets = vec![0; n_periods + 2];
        for t in 1..=n_periods {
            offsets[t + 1] = offsets[t] + index_sets[t].len();
        }
        let mut row_unit = Vec::with_capacity(offsets[n_periods + 1]);
        for set in &index_sets[1..] {
            row_unit.extend_from_slice(set);
        }

        let mut prev_local = vec![Vec::new(); n_periods + 1];
        for t in 1..=n_periods {
            let prev = &index_sets[t - 1];
            prev_local[t] = index_sets[t].iter().map(|u| prev.binary_search(u).ok()).collect();
        }

        Ok(Self {
            n_units,
            n_periods,
            index_sets,
            windows,
            obs_counts,
            est_counts,
            offsets,
            row_unit,
            prev_local,
        })
    }

    /// Balanced layout: every unit observed in every period `0..=n_periods`.
    pub fn balanced(n_units: usize, n_periods: usize) -> Result<Self> {
        Self::from_windows(vec![(0, n_periods); n_units], n_periods)
    }

    /// N: units ever observed.
    pub fn n_units(&self) -> usize {
        self.n_units
    }

    /// T: number of estimation periods.
    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    /// n = sum of N_t over t = 1..=T.
    pub fn n(&self) -> usize {
        self.offsets[self.n_periods + 1]
    }

    pub fn index_set(&self, t: usize) -> &[usize] {
        &self.index_sets[t]
    }

    pub fn period_count(&self, t: usize) -> usize {
        self.index_sets[t].len()
    }

    pub fn window(&self, unit: usize) -> (usize, usize) {
        self.windows[unit]
    }

    pub fn windows(&self) -> &[(usize, usize)] {
        &self.windows
    }

    /// T_i over all periods `0..=T`.
    pub fn obs_count(&self, unit: usize) -> usize {
        self.obs_counts[unit]
    }

    /// Observations of `unit` inside the estimation sample `1..=T`.
    pub fn est_count(&self, unit: usize) -> usize {
        self.est_counts[unit]
    }

    pub fn est_counts(&self) -> &[usize] {
        &self.est_counts
    }

    /// Units with at least one estimation-sample row.
    pub fn n_effective(&self) -> usize {
        self.est_counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn is_observed(&self, unit: usize, t: usize) -> bool {
        let (first, last) = self.windows[unit];
        first <= t && t <= last
    }

    /// Indicator matrix d, one row per unit.
    pub fn indicators(&self) -> Vec<Vec<bool>> {
        (0..self.n_units)
            .map(|i| (0..=self.n_periods).map(|t| self.is_observed(i, t)).collect())
            .collect()
    }

    pub fn local_index(&self, t: usize, unit: usize) -> Option<usize> {
        self.index_sets[t].binary_search(&unit).ok()
    }

    /// Offset of period `t` (1..=T) in stacked vectors.
    pub fn offset(&self, t: usize) -> usize {
        self.offsets[t]
    }

    /// Unit id of each stacked row.
    pub fn row_units(&self) -> &[usize] {
        &self.row_unit
    }

    /// Local position at t-1 of each period-t unit, when it was present.
    pub fn prev_local(&self, t: usize) -> &[Option<usize>] {
        &self.prev_local[t]
    }

    /// Conceptual D_t': period-t local vector into a length-N vector.
    pub fn embed(&self, t: usize, local: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_units];
        for (&u, &v) in self.index_sets[t].iter().zip(local) {
            out[u] = v;
        }
        out
    }

    /// Conceptual D_t: global vector restricted to period t.
    pub fn select(&self, t: usize, global: &[f64]) -> Vec<f64> {
        self.index_sets[t].iter().map(|&u| global[u]).collect()
    }

    /// Conceptual D_t D_{t-1}': carries a period-(t-1) vector to period-t indexing.
    pub fn carry(&self, t: usize, prev: &[f64]) -> Vec<f64> {
        self.prev_local[t].iter().map(|p| p.map_or(0.0, |r| prev[r])).collect()
    }

    /// f_it = d_it (1 - d_{i,t-1}) for the period-t units.
    pub fn newly_listed(&self, t: usize) -> Vec<f64> {
        self.prev_local[t]
            .iter()
            .map(|p| if p.is_none() { 1.0 } else { 0.0 })
            .collect()
    }

    /// UP = 1 - n / (N T).
    pub fn unbalancedness(&self) -> f64 {
        1.0 - self.n() as f64 / (self.n_units * self.n_periods) as f64
    }

    /// c_u = n / (N T).
    pub fn coverage(&self) -> f64 {
        1.0 - self.unbalancedness()
    }

    pub fn diagnostics(&self) -> LayoutDiagnostics {
        let t = self.n_periods as f64;
        let min_share_observed = self.est_counts.iter().copied().min().unwrap_or(0) as f64 / t;
        let initial_share = self.period_count(0) as f64 / self.n_units as f64;
        let units_without_estimation_rows = self.n_units - self.n_effective();
        let mut warnings = Vec::new();
        if units_without_estimation_rows > 0 {
            warnings.push(format!(
                "{units_without_estimation_rows} unit(s) appear only in period 0; their fixed effects are not identified"
            ));
        }
        if min_share_observed < 0.1 {
            warnings.push(format!(
                "shortest unit window covers {:.1}% of the estimation periods",
                100.0 * min_share_observed
            ));
        }
        if initial_share >= 0.99 {
            warnings.push("nearly all units are present in period 0; the listing effect is weakly identified".into());
        }
        LayoutDiagnostics {
            min_share_observed,
            initial_share,
            units_without_estimation_rows,
            warnings,
        }
    }

    /// Stacks per-period vectors for t = 1..=T into one length-n vector.
    pub fn stack(&self, per_period: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        for t in 1..=self.n_periods {
            out.rows_mut(self.offsets[t], self.period_count(t))
                .copy_from(&per_period[t]);
        }
        out
    }

    /// Stacks per-period matrices for t = 1..=T.
    pub fn stack_rows(&self, per_period: &[DMatrix<f64>]) -> DMatrix<f64> {
        let cols = per_period[1].ncols();
        let mut out = DMatrix::zeros(self.n(), cols);
        for t in 1..=self.n_periods {
            out.rows_mut(self.offsets[t], self.period_count(t))
                .copy_from(&per_period[t]);
        }
        out
    }

    /// Per-unit sums of a stacked vector.
    pub fn unit_sums(&self, v: &DVector<f64>) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_units];
        for (&u, &x) in self.row_unit.iter().zip(v.iter()) {
            sums[u] += x;
        }
        sums
    }

    /// Q v: removes each unit's mean over its estimation periods.
    pub fn within_project(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.n() {
            return Err(Error::ShapeMismatch(format!(
                "stacked vector has length {}, layout has n = {}",
                v.len(),
                self.n()
            )));
        }
        let means = self.unit_means(v);
        Ok(DVector::from_iterator(
            v.len(),
            self.row_unit.iter().zip(v.iter()).map(|(&u, &x)| x - means[u]),
        ))
    }

    /// Column-wise `within_project`.
    pub fn within_project_matrix(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.nrows() != self.n() {
            return Err(Error::ShapeMismatch(format!(
                "stacked matrix has {} rows, layout has n = {}",
                m.nrows(),
                self.n()
            )));
        }
        let mut out = m.clone();
        for mut col in out.column_iter_mut() {
            let owned = DVector::from_column_slice(col.as_slice());
            let means = self.unit_means(&owned);
            for (x, &u) in col.iter_mut().zip(&self.row_unit) {
                *x -= means[u];
            }
        }
        Ok(out)
    }

    /// Per-unit means over estimation periods (0 for units without rows).
    pub fn unit_means(&self, v: &DVector<f64>) -> Vec<f64> {
        let mut sums = self.unit_sums(v);
        for (s, &c) in sums.iter_mut().zip(&self.est_counts) {
            if c > 0 {
                *s /= c as f64;
            }
        }
        sums
    }
}

/// Outcomes and covariates aligned to a layout, periods `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    pub y: Vec<DVector<f64>>,
    pub x: Vec<DMatrix<f64>>,
}

impl PanelData {
    pub fn new(layout: &PanelLayout, y: Vec<DVector<f64>>, x: Vec<DMatrix<f64>>) -> Result<Self> {
        let periods = layout.n_periods() + 1;
        if y.len() != periods || x.len() != periods {
            return Err(Error::ShapeMismatch(format!(
                "expected {periods} periods of data, got {} outcome and {} covariate blocks",
                y.len(),
                x.len()
            )));
        }
        let k = x[0].ncols();
        for t in 0..periods {
            let nt = layout.period_count(t);
            if y[t].len() != nt || x[t].nrows() != nt || x[t].ncols() != k {
                return Err(Error::ShapeMismatch(format!(
                    "period {t}: expected {nt} rows and {k} covariates, got y {} and X {}x{}",
                    y[t].len(),
                    x[t].nrows(),
                    x[t].ncols()
                )));
            }
            if y[t].iter().chain(x[t].iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteEntry(format!("panel data, period {t}")));
            }
        }
        Ok(Self { y, x })
    }

    pub fn k(&self) -> usize {
        self.x[0].ncols()
    }
}

/// Common parameters: contemporaneous network effect, network lag, own lag,
/// listing effect, covariate slopes and error variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub rho: f64,
    pub lambda: f64,
    pub nu: f64,
    pub gamma: f64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

impl Theta {
    pub fn new(rho: f64, lambda: f64, nu: f64, gamma: f64, beta: Vec<f64>, sigma2: f64) -> Self {
        Self {
            rho,
            lambda,
            nu,
            gamma,
            beta,
            sigma2,
        }
    }

    pub fn k(&self) -> usize {
        self.beta.len()
    }

    /// Stacked as (rho, lambda, nu, gamma, beta', sigma2).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.rho, self.lambda, self.nu, self.gamma];
        v.extend_from_slice(&self.beta);
        v.push(self.sigma2);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 5 {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector needs at least 5 entries, got {}",
                v.len()
            )));
        }
        let k = v.len() - 5;
        Ok(Self {
            rho: v[0],
            lambda: v[1],
            nu: v[2],
            gamma: v[3],
            beta: v[4..4 + k].to_vec(),
            sigma2: v[4 + k],
        })
    }

    /// delta = (lambda, nu, gamma, beta').
    pub fn delta(&self) -> Vec<f64> {
        let mut d = vec![self.lambda, self.nu, self.gamma];
        d.extend_from_slice(&self.beta);
        d
    }

    pub fn param_names(k: usize) -> Vec<String> {
        let mut names: Vec<String> = ["rho", "lambda", "nu", "gamma"].iter().map(|s| s.to_string()).collect();
        if k == 1 {
            names.push("beta".into());
        } else {
            names.extend((1..=k).map(|j| format!("beta{j}")));
        }
        names.push("sigma2".into());
        names
    }
}
