//! ln|S(rho)| = sum_t ln|I - rho W_t| and its rho-derivative.

use nalgebra::{Complex, DMatrix};
use nalgebra_sparse::CsrMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse_lu::SparseLuSymbolic;
use crate::weights::{to_dense, TimeVaryingNetwork};

/// Periods up to this size get precomputed eigenvalues under `Auto`.
pub const EIGEN_MAX_SIZE: usize = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogDetStrategy {
    #[default]
    Auto,
    Eigen,
    Lu,
}

#[derive(Debug, Clone)]
enum PeriodTerm {
    Empty,
    Real(Vec<f64>),
    Complex(Vec<Complex<f64>>),
    Lu(LuTerm),
}

#[derive(Debug, Clone)]
struct LuTerm {
    symbolic: SparseLuSymbolic,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    w_vals: Vec<f64>,
    is_diag: Vec<bool>,
}

impl LuTerm {
    fn new(w: &CsrMatrix<f64>) -> Self {
        let n = w.nrows();
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        let mut w_vals = Vec::new();
        let mut is_diag = Vec::new();
        for (i, row) in w.row_iter().enumerate() {
            let mut entries: Vec<(usize, f64)> = row
                .col_indices()
                .iter()
                .copied()
                .zip(row.values().iter().copied())
                .collect();
            if !entries.iter().any(|&(j, _)| j == i) {
                entries.push((i, 0.0));
                entries.sort_by_key(|e| e.0);
            }
            for (j, v) in entries {
                indices.push(j);
                w_vals.push(v);
                is_diag.push(j == i);
            }
            offsets.push(indices.len());
        }
        let pattern = CsrMatrix::try_from_csr_data(n, n, offsets.clone(), indices.clone(), w_vals.clone())
            .expect("valid pattern");
        Self {
            symbolic: SparseLuSymbolic::analyze(&pattern),
            offsets,
            indices,
            w_vals,
            is_diag,
        }
    }

    fn log_det(&self, rho: f64) -> Result<f64> {
        let n = self.symbolic.n();
        let vals = self
            .w_vals
            .iter()
            .zip(&self.is_diag)
            .map(|(&w, &d)| if d { 1.0 - rho * w } else { -rho * w })
            .collect();
        let s = CsrMatrix::try_from_csr_data(n, n, self.offsets.clone(), self.indices.clone(), vals)
            .expect("valid pattern");
        let lu = self.symbolic.factor(&s).map_err(|_| Error::SingularAtRho { rho })?;
        if lu.pivots().iter().any(|&d| d <= 0.0) {
            return Err(Error::SingularAtRho { rho });
        }
        Ok(lu.log_abs_det().0)
    }
}

/// True when `d_i w_ij = d_j w_ji` with `d` the row nonzero counts, i.e. W
/// is a row-normalized symmetric 0/1 pattern and similar to a symmetric matrix.
fn symmetrized(w: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = w.nrows();
    let d: Vec<f64> = (0..n)
        .map(|i| w.row(i).iter().filter(|v| **v != 0.0).count().max(1) as f64)
        .collect();
    for i in 0..n {
        for j in 0..n {
            if (d[i] * w[(i, j)] - d[j] * w[(j, i)]).abs() > 1e-12 {
                return None;
            }
        }
    }
    Some(DMatrix::from_fn(n, n, |i, j| w[(i, j)] * (d[i] / d[j]).sqrt()))
}

fn eigen_term(w: &CsrMatrix<f64>) -> PeriodTerm {
    let dense = to_dense(w);
    match symmetrized(&dense) {
        Some(sym) => PeriodTerm::Real(sym.symmetric_eigenvalues().iter().copied().collect()),
        None => PeriodTerm::Complex(dense.complex_eigenvalues().iter().copied().collect()),
    }
}

/// Per-period log-determinant evaluator over the estimation periods.
#[derive(Debug, Clone)]
pub struct LogDetEngine {
    terms: Vec<PeriodTerm>,
}

impl LogDetEngine {
    pub fn new(network: &TimeVaryingNetwork, strategy: LogDetStrategy) -> Self {
        let terms = (1..=network.n_periods())
            .map(|t| {
                let w = network.w(t);
                if w.values().iter().all(|&v| v == 0.0) {
                    return PeriodTerm::Empty;
                }
                let use_eigen = match strategy {
                    LogDetStrategy::Auto => w.nrows() <= EIGEN_MAX_SIZE,
                    LogDetStrategy::Eigen => true,
                    LogDetStrategy::Lu => false,
                };
                if use_eigen {
                    eigen_term(w)
                } else {
                    PeriodTerm::Lu(LuTerm::new(w))
                }
            })
            .collect();
        Self { terms }
    }

    /// ln|S(rho)|.
    pub fn log_det(&self, rho: f64) -> Result<f64> {
        if rho == 0.0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for term in &self.terms {
            total += match term {
                PeriodTerm::Empty => 0.0,
                PeriodTerm::Real(ev) => {
                    let mut s = 0.0;
                    for &w in ev {
                        let f = 1.0 - rho * w;
                        if f <= 0.0 {
                            return Err(Error::SingularAtRho { rho });
                        }
                        s += f.ln();
                    }
                    s
                }
                PeriodTerm::Complex(ev) => {
                    let mut s = 0.0;
                    for w in ev {
                        let f = Complex::new(1.0 - rho * w.re, -rho * w.im);
                        if f.im == 0.0 && f.re <= 0.0 || f.norm() == 0.0 {
                            return Err(Error::SingularAtRho { rho });
                        }
                        s += f.norm().ln();
                    }
                    s
                }
                PeriodTerm::Lu(lu) => lu.log_det(rho)?,
            };
        }
        if total.is_finite() {
            Ok(total)
        } else {
            Err(Error::SingularAtRho { rho })
        }
    }

    /// tr(G(rho)) = sum_t tr(W_t S_t(rho)^{-1}) = -d ln|S(rho)| / d rho.
    pub fn trace_g(&self, rho: f64) -> Result<f64> {
        let mut total = 0.0;
        let mut needs_fd = false;
        for term in &self.terms {
            match term {
                PeriodTerm::Empty => {}
                PeriodTerm::Real(ev) => total += ev.iter().map(|&w| w / (1.0 - rho * w)).sum::<f64>(),
                PeriodTerm::Complex(ev) => {
                    total += ev
                        .iter()
                        .map(|&w| (w / (Complex::new(1.0, 0.0) - w * rho)).re)
                        .sum::<f64>()
                }
                PeriodTerm::Lu(_) => needs_fd = true,
            }
        }
        if needs_fd {
            let lu_only = Self {
                terms: self
                    .terms
                    .iter()
                    .filter(|t| matches!(t, PeriodTerm::Lu(_)))
                    .cloned()
                    .collect(),
            };
            // five-point stencil on the LU log-determinant
            let h = 1e-3;
            let f = |r: f64| lu_only.log_det(r);
            let d = (-f(rho + 2.0 * h)? + 8.0 * f(rho + h)? - 8.0 * f(rho - h)? + f(rho - 2.0 * h)?) / (12.0 * h);
            total -= d;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PanelLayout;
    use crate::weights::{csr_from_triplets, Adjacency};

    #[test]
    fn two_unit_value() {
        let layout = PanelLayout::balanced(2, 1).unwrap();
        let net = TimeVaryingNetwork::from_adjacency(&Adjacency::rook(1, 2), &layout, false).unwrap();
        for s in [LogDetStrategy::Eigen, LogDetStrategy::Lu] {
            let e = LogDetEngine::new(&net, s);
            assert!((e.log_det(0.5).unwrap() - 0.75f64.ln()).abs() < 1e-12);
            assert_eq!(e.log_det(0.0).unwrap(), 0.0);
            // d/drho ln(1 - rho^2) = -2 rho / (1 - rho^2)
            assert!((e.trace_g(0.5).unwrap() - 1.0 / 0.75).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_network_is_zero() {
        let layout = PanelLayout::balanced(3, 2).unwrap();
        let z = || csr_from_triplets(3, 3, []);
        let net = TimeVaryingNetwork::from_matrices(vec![z(), z(), z()], vec![z(), z(), z()], &layout).unwrap();
        let e = LogDetEngine::new(&net, LogDetStrategy::Auto);
        assert_eq!(e.log_det(0.7).unwrap(), 0.0);
        assert_eq!(e.trace_g(0.7).unwrap(), 0.0);
    }

    #[test]
    fn nonsymmetric_weights_use_complex_route() {
        // directed cycle 0 -> 1 -> 2 -> 0
        let layout = PanelLayout::balanced(3, 1).unwrap();
        let c = || csr_from_triplets(3, 3, [(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]);
        let net =
            TimeVaryingNetwork::from_matrices(vec![c(), c()], vec![csr_from_triplets(0, 0, []), c()], &layout).unwrap();
        let eig = LogDetEngine::new(&net, LogDetStrategy::Eigen);
        let lu = LogDetEngine::new(&net, LogDetStrategy::Lu);
        for rho in [-0.9, -0.3, 0.4, 0.9] {
            // det(I - rho C) = 1 - rho^3
            let exact = (1.0 - rho * rho * rho as f64).ln();
            assert!((eig.log_det(rho).unwrap() - exact).abs() < 1e-12);
            assert!((lu.log_det(rho).unwrap() - exact).abs() < 1e-12);
            let g = 3.0 * rho * rho / (1.0 - rho * rho * rho);
            assert!((eig.trace_g(rho).unwrap() - g).abs() < 1e-10);
            assert!((lu.trace_g(rho).unwrap() - g).abs() < 1e-7);
        }
    }
}
