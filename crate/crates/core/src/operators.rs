//! Sparse period-to-period operators shared by the simulator, the regressor
//! builder and the moving-average machinery.

use nalgebra::DMatrix;
use nalgebra_sparse::CsrMatrix;

use crate::error::Result;
use crate::panel::PanelLayout;
use crate::weights::{csr_from_triplets, spmm, spmv, TimeVaryingNetwork};

/// For t = 1..=T: the network lag `D_t (I - F_t) D_t' M_t` (rows of newly
/// listed units zeroed) and the carry map `D_t D_{t-1}'`.
#[derive(Debug, Clone)]
pub struct LagOperators {
    network_lag: Vec<CsrMatrix<f64>>,
    carry: Vec<CsrMatrix<f64>>,
    newly_listed: Vec<Vec<f64>>,
}

impl LagOperators {
    pub fn new(layout: &PanelLayout, network: &TimeVaryingNetwork) -> Result<Self> {
        let periods = layout.n_periods() + 1;
        let mut network_lag = vec![CsrMatrix::zeros(0, 0)];
        let mut carry = vec![CsrMatrix::zeros(0, 0)];
        let mut newly_listed = vec![Vec::new()];
        for t in 1..periods {
            let prev = layout.prev_local(t);
            let m = network.m(t);
            let lag = csr_from_triplets(
                m.nrows(),
                m.ncols(),
                m.triplet_iter()
                    .filter(|(r, _, _)| prev[*r].is_some())
                    .map(|(r, c, &v)| (r, c, v)),
            );
            network_lag.push(lag);
            carry.push(csr_from_triplets(
                layout.period_count(t),
                layout.period_count(t - 1),
                prev.iter().enumerate().filter_map(|(r, p)| p.map(|c| (r, c, 1.0))),
            ));
            newly_listed.push(layout.newly_listed(t));
        }
        Ok(Self {
            network_lag,
            carry,
            newly_listed,
        })
    }

    pub fn network_lag(&self, t: usize) -> &CsrMatrix<f64> {
        &self.network_lag[t]
    }

    pub fn carry(&self, t: usize) -> &CsrMatrix<f64> {
        &self.carry[t]
    }

    pub fn newly_listed(&self, t: usize) -> &[f64] {
        &self.newly_listed[t]
    }

    /// lambda * network_lag(t) y + nu * carry(t) y.
    pub fn apply(&self, t: usize, lambda: f64, nu: f64, prev: &[f64]) -> Vec<f64> {
        let a = spmv(&self.network_lag[t], prev);
        let b = spmv(&self.carry[t], prev);
        a.iter().zip(&b).map(|(x, y)| lambda * x + nu * y).collect()
    }

    /// Column-wise `apply` for a block of period-(t-1) vectors.
    pub fn apply_matrix(&self, t: usize, lambda: f64, nu: f64, prev: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = spmm(&self.network_lag[t], prev);
        out *= lambda;
        if nu != 0.0 {
            out += spmm(&self.carry[t], prev) * nu;
        }
        out
    }

    /// Transposed `apply`: maps a period-t vector back to period t-1.
    pub fn apply_transpose_matrix(&self, t: usize, lambda: f64, nu: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
        let rows = self.network_lag[t].ncols();
        let mut out = DMatrix::zeros(rows, x.ncols());
        for c in 0..x.ncols() {
            for (r, row) in self.network_lag[t].row_iter().enumerate() {
                let xr = x[(r, c)];
                if xr == 0.0 {
                    continue;
                }
                for (&j, &v) in row.col_indices().iter().zip(row.values()) {
                    out[(j, c)] += lambda * v * xr;
                }
            }
            for (r, row) in self.carry[t].row_iter().enumerate() {
                for &j in row.col_indices() {
                    out[(j, c)] += nu * x[(r, c)];
                }
            }
        }
        out
    }
}
