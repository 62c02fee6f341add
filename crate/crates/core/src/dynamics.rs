//! Propagation of errors through the dynamic system.
//!
//! Stacking periods 1..=T, the outcome solves (S - L) Y = deterministic + V
//! where S is block diagonal with blocks I - rho W_t and L has blocks
//! lambda Mtilde_t + nu C_t just below the diagonal. With R = (S - L)^{-1},
//! the score kernels are W R, L_lambda R and L_nu R.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::operators::LagOperators;
use crate::panel::{PanelData, PanelLayout};
use crate::sparse_lu::{SparseLu, SparseLuSymbolic};
use crate::weights::{spmm, spmv, to_dense, TimeVaryingNetwork};

/// Periods at most this large are inverted densely.
pub const DENSE_SOLVE_MAX: usize = 3000;

#[derive(Debug, Clone)]
enum PeriodSolver {
    Identity,
    Dense(DMatrix<f64>),
    Sparse(SparseLuSymbolic, SparseLu),
}

impl PeriodSolver {
    fn new(w: &nalgebra_sparse::CsrMatrix<f64>, rho: f64, period: usize) -> Result<Self> {
        let n = w.nrows();
        if rho == 0.0 || w.values().iter().all(|&v| v == 0.0) {
            return Ok(Self::Identity);
        }
        if n <= DENSE_SOLVE_MAX {
            let s = DMatrix::identity(n, n) - to_dense(w) * rho;
            let inv = s.try_inverse().ok_or(Error::SingularS { period })?;
            if inv.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularS { period });
            }
            return Ok(Self::Dense(inv));
        }
        let s = crate::weights::csr_from_triplets(
            n,
            n,
            (0..n)
                .map(|i| (i, i, 1.0))
                .chain(w.triplet_iter().map(|(i, j, &v)| (i, j, -rho * v))),
        );
        let sym = SparseLuSymbolic::analyze(&s);
        let lu = sym.factor(&s).map_err(|_| Error::SingularS { period })?;
        Ok(Self::Sparse(sym, lu))
    }

    /// S^{-1} x.
    fn apply(&self, x: DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Identity => x,
            Self::Dense(inv) => inv * x,
            Self::Sparse(sym, lu) => {
                let mut out = x;
                for mut col in out.column_iter_mut() {
                    let s = sym.solve(lu, col.as_slice());
                    col.copy_from_slice(&s);
                }
                out
            }
        }
    }

    /// S^{-T} x.
    fn apply_transpose(&self, x: DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Identity => x,
            Self::Dense(inv) => inv.tr_mul(&x),
            Self::Sparse(sym, lu) => {
                let mut out = x;
                for mut col in out.column_iter_mut() {
                    let s = sym.solve_transpose(lu, col.as_slice());
                    col.copy_from_slice(&s);
                }
                out
            }
        }
    }

    /// Diagonal of S^{-1}.
    fn inverse_diagonal(&self, n: usize) -> Vec<f64> {
        match self {
            Self::Identity => vec![1.0; n],
            Self::Dense(inv) => inv.diagonal().iter().copied().collect(),
            Self::Sparse(sym, lu) => (0..n)
                .map(|i| {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    sym.solve(lu, &e)[i]
                })
                .collect(),
        }
    }
}

/// Per-unit sums over estimation-period pairs `(s, t)` of kernel entries
/// `K[(s,i), (t,i)]`, for the three stochastic kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitKernelSums {
    pub rho: Vec<f64>,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
}

/// `tr(P K)` for the three kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedTraces {
    pub rho: f64,
    pub lambda: f64,
    pub nu: f64,
}

/// Dense stacked kernels W R, L_lambda R, L_nu R.
#[derive(Debug, Clone)]
pub struct DenseKernels {
    pub rho: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub nu: DMatrix<f64>,
}

/// Per stacked row r = (t, i): the sum over unit i's rows of column r of each
/// kernel, so that `(P K)[r, r]` is this value over T_i.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnUnitSums {
    pub rho: Vec<f64>,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
}

pub struct Dynamics<'a> {
    layout: &'a PanelLayout,
    network: &'a TimeVaryingNetwork,
    ops: &'a LagOperators,
    rho: f64,
    lambda: f64,
    nu: f64,
    solvers: Vec<PeriodSolver>,
}

impl<'a> Dynamics<'a> {
    pub fn new(
        layout: &'a PanelLayout,
        network: &'a TimeVaryingNetwork,
        ops: &'a LagOperators,
        rho: f64,
        lambda: f64,
        nu: f64,
    ) -> Result<Self> {
        let mut solvers = vec![PeriodSolver::Identity];
        for t in 1..=layout.n_periods() {
            solvers.push(PeriodSolver::new(network.w(t), rho, t)?);
        }
        Ok(Self {
            layout,
            network,
            ops,
            rho,
            lambda,
            nu,
            solvers,
        })
    }

    fn transition(&self, t: usize, prev: &DMatrix<f64>) -> DMatrix<f64> {
        self.ops.apply_matrix(t, self.lambda, self.nu, prev)
    }

    /// Moves columns indexed by I_{t-1} to columns indexed by I_t; entrants get zero columns.
    fn carry_columns(&self, t: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
        let prev = self.layout.prev_local(t);
        let mut out = DMatrix::zeros(m.nrows(), prev.len());
        for (c, p) in prev.iter().enumerate() {
            if let Some(p) = p {
                out.set_column(c, &m.column(*p));
            }
        }
        out
    }

    /// Moves columns indexed by I_t to columns indexed by I_{t-1}; exits get zero columns.
    fn uncarry_columns(&self, t: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
        let prev = self.layout.prev_local(t);
        let mut out = DMatrix::zeros(m.nrows(), self.layout.period_count(t - 1));
        for (c, p) in prev.iter().enumerate() {
            if let Some(p) = p {
                out.set_column(*p, &m.column(c));
            }
        }
        out
    }

    /// Forward pass accumulating, per unit, the kernel entries that pair the unit with itself.
    pub fn unit_kernel_sums(&self) -> UnitKernelSums {
        let n_units = self.layout.n_units();
        let mut sums = UnitKernelSums {
            rho: vec![0.0; n_units],
            lambda: vec![0.0; n_units],
            nu: vec![0.0; n_units],
        };
        // u columns index units of I_t: sum over source periods of R[t, s] restricted to each unit
        let mut u = DMatrix::<f64>::zeros(0, 0);
        for t in 1..=self.layout.n_periods() {
            let units = self.layout.index_set(t);
            let nt = units.len();
            let lagged = if t == 1 {
                DMatrix::zeros(nt, nt)
            } else {
                self.carry_columns(t, &u)
            };
            // lagged has rows I_{t-1}, columns I_t
            if t > 1 {
                let ml = spmm(self.ops.network_lag(t), &lagged);
                let cl = spmm(self.ops.carry(t), &lagged);
                for r in 0..nt {
                    sums.lambda[units[r]] += ml[(r, r)];
                    sums.nu[units[r]] += cl[(r, r)];
                }
            }
            let mut rhs = if t == 1 {
                DMatrix::zeros(nt, nt)
            } else {
                self.transition(t, &lagged)
            };
            for r in 0..nt {
                rhs[(r, r)] += 1.0;
            }
            u = self.solvers[t].apply(rhs);
            let w = self.network.w(t);
            for (r, row) in w.row_iter().enumerate() {
                let d: f64 = row
                    .col_indices()
                    .iter()
                    .zip(row.values())
                    .map(|(&j, &v)| v * u[(j, r)])
                    .sum();
                sums.rho[units[r]] += d;
            }
        }
        sums
    }

    /// tr(P W R), tr(P L_lambda R), tr(P L_nu R).
    pub fn projected_traces(&self) -> ProjectedTraces {
        let sums = self.unit_kernel_sums();
        let mut out = ProjectedTraces {
            rho: 0.0,
            lambda: 0.0,
            nu: 0.0,
        };
        for i in 0..self.layout.n_units() {
            let c = self.layout.est_count(i);
            if c > 0 {
                let c = c as f64;
                out.rho += sums.rho[i] / c;
                out.lambda += sums.lambda[i] / c;
                out.nu += sums.nu[i] / c;
            }
        }
        out
    }

    /// Dense R over the stacked estimation sample.
    pub fn dense_r(&self) -> DMatrix<f64> {
        let n = self.layout.n();
        let big_t = self.layout.n_periods();
        let mut r = DMatrix::zeros(n, n);
        for src in 1..=big_t {
            let ns = self.layout.period_count(src);
            let col = self.layout.offset(src);
            let mut cur = self.solvers[src].apply(DMatrix::identity(ns, ns));
            r.view_mut((col, col), (ns, ns)).copy_from(&cur);
            for t in src + 1..=big_t {
                cur = self.solvers[t].apply(self.transition(t, &cur));
                r.view_mut((self.layout.offset(t), col), (cur.nrows(), ns))
                    .copy_from(&cur);
            }
        }
        r
    }

    /// W R, L_lambda R and L_nu R as dense n x n matrices.
    pub fn dense_kernels(&self) -> DenseKernels {
        let n = self.layout.n();
        let r = self.dense_r();
        let mut k_rho = DMatrix::zeros(n, n);
        let mut k_lambda = DMatrix::zeros(n, n);
        let mut k_nu = DMatrix::zeros(n, n);
        for t in 1..=self.layout.n_periods() {
            let off = self.layout.offset(t);
            let nt = self.layout.period_count(t);
            let rows = r.rows(off, nt).into_owned();
            k_rho.rows_mut(off, nt).copy_from(&spmm(self.network.w(t), &rows));
            if t > 1 {
                let prev = r
                    .rows(self.layout.offset(t - 1), self.layout.period_count(t - 1))
                    .into_owned();
                k_lambda
                    .rows_mut(off, nt)
                    .copy_from(&spmm(self.ops.network_lag(t), &prev));
                k_nu.rows_mut(off, nt).copy_from(&spmm(self.ops.carry(t), &prev));
            }
        }
        DenseKernels {
            rho: k_rho,
            lambda: k_lambda,
            nu: k_nu,
        }
    }

    /// Backward pass giving, for each stacked row r = (t, i), the sum of
    /// column r of each kernel over unit i's rows.
    pub fn column_unit_sums(&self) -> ColumnUnitSums {
        let n = self.layout.n();
        let big_t = self.layout.n_periods();
        let mut out = ColumnUnitSums {
            rho: vec![0.0; n],
            lambda: vec![0.0; n],
            nu: vec![0.0; n],
        };
        // x_t for each kernel: rows I_t, columns I_t
        let mut next: [Option<DMatrix<f64>>; 3] = [None, None, None];
        for t in (1..=big_t).rev() {
            let nt = self.layout.period_count(t);
            let off = self.layout.offset(t);
            let w_t = to_dense(self.network.w(t));
            let mut b = [w_t.transpose(), DMatrix::zeros(nt, nt), DMatrix::zeros(nt, nt)];
            if t < big_t {
                let c = to_dense(self.ops.carry(t + 1));
                let m = to_dense(self.ops.network_lag(t + 1));
                // unit i at t+1 seen from period t: columns map I_{t+1} -> I_t
                b[1] += m.transpose() * &c;
                b[2] += c.transpose() * &c;
            }
            for (a, slot) in next.iter_mut().enumerate() {
                let mut rhs = std::mem::replace(&mut b[a], DMatrix::zeros(0, 0));
                if let Some(x_next) = slot.take() {
                    let back = self.ops.apply_transpose_matrix(t + 1, self.lambda, self.nu, &x_next);
                    rhs += self.uncarry_columns(t + 1, &back);
                }
                let x = self.solvers[t].apply_transpose(rhs);
                let target = match a {
                    0 => &mut out.rho,
                    1 => &mut out.lambda,
                    _ => &mut out.nu,
                };
                for r in 0..nt {
                    target[off + r] = x[(r, r)];
                }
                *slot = Some(x);
            }
        }
        out
    }

    /// Diagonal of W_t S_t^{-1} stacked over periods, i.e. the diagonal of W R.
    pub fn g_diagonal(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.n());
        for t in 1..=self.layout.n_periods() {
            let nt = self.layout.period_count(t);
            match &self.solvers[t] {
                PeriodSolver::Identity => out.extend(std::iter::repeat_n(0.0, nt)),
                PeriodSolver::Dense(inv) => {
                    for (r, row) in self.network.w(t).row_iter().enumerate() {
                        out.push(
                            row.col_indices()
                                .iter()
                                .zip(row.values())
                                .map(|(&j, &v)| v * inv[(j, r)])
                                .sum(),
                        );
                    }
                }
                PeriodSolver::Sparse(..) => {
                    // G = W S^{-1} = (S^{-1} - I) / rho; diag from the inverse diagonal
                    let d = self.solvers[t].inverse_diagonal(nt);
                    out.extend(d.iter().map(|&v| (v - 1.0) / self.rho));
                }
            }
        }
        out
    }

    /// Noise-free outcome path from the observed period-0 values.
    pub fn deterministic_path(&self, data: &PanelData, alpha: &[f64], gamma: f64, beta: &[f64]) -> Vec<DVector<f64>> {
        let beta = DVector::from_column_slice(beta);
        let mut y = vec![data.y[0].clone()];
        for t in 1..=self.layout.n_periods() {
            let lag = self.ops.apply(t, self.lambda, self.nu, y[t - 1].as_slice());
            let xb = &data.x[t] * &beta;
            let f = self.ops.newly_listed(t);
            let units = self.layout.index_set(t);
            let rhs = DMatrix::from_fn(units.len(), 1, |r, _| lag[r] + gamma * f[r] + xb[r] + alpha[units[r]]);
            y.push(self.solvers[t].apply(rhs).column(0).into_owned());
        }
        y
    }
}

/// Stacked W y for per-period vectors over 0..=T.
pub fn stacked_spatial_lag(layout: &PanelLayout, network: &TimeVaryingNetwork, y: &[DVector<f64>]) -> DVector<f64> {
    let parts: Vec<DVector<f64>> = (0..=layout.n_periods())
        .map(|t| DVector::from_vec(spmv(network.w(t), y[t].as_slice())))
        .collect();
    layout.stack(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{evolve, generate, DgpConfig};
    use crate::panel::Theta;
    use std::ops::SubAssign;

    fn dense_system(
        layout: &PanelLayout,
        network: &TimeVaryingNetwork,
        ops: &LagOperators,
        th: &Theta,
    ) -> DMatrix<f64> {
        let n = layout.n();
        let mut a = DMatrix::identity(n, n);
        for t in 1..=layout.n_periods() {
            let off = layout.offset(t);
            let nt = layout.period_count(t);
            let w = to_dense(network.w(t));
            a.view_mut((off, off), (nt, nt)).sub_assign(&(w * th.rho));
            if t > 1 {
                let l = to_dense(ops.network_lag(t)) * th.lambda + to_dense(ops.carry(t)) * th.nu;
                let poff = layout.offset(t - 1);
                a.view_mut((off, poff), (nt, l.ncols())).sub_assign(&l);
            }
        }
        a
    }

    fn lag_blocks(layout: &PanelLayout, ops: &LagOperators, which: usize) -> DMatrix<f64> {
        let n = layout.n();
        let mut l = DMatrix::zeros(n, n);
        for t in 2..=layout.n_periods() {
            let m = if which == 0 {
                to_dense(ops.network_lag(t))
            } else {
                to_dense(ops.carry(t))
            };
            l.view_mut((layout.offset(t), layout.offset(t - 1)), (m.nrows(), m.ncols()))
                .copy_from(&m);
        }
        l
    }

    fn w_blocks(layout: &PanelLayout, network: &TimeVaryingNetwork) -> DMatrix<f64> {
        let n = layout.n();
        let mut w = DMatrix::zeros(n, n);
        for t in 1..=layout.n_periods() {
            let nt = layout.period_count(t);
            w.view_mut((layout.offset(t), layout.offset(t)), (nt, nt))
                .copy_from(&to_dense(network.w(t)));
        }
        w
    }

    fn p_matrix(layout: &PanelLayout) -> DMatrix<f64> {
        let n = layout.n();
        let u = layout.row_units();
        DMatrix::from_fn(n, n, |r, s| {
            if u[r] == u[s] {
                1.0 / layout.est_count(u[r]) as f64
            } else {
                0.0
            }
        })
    }

    #[test]
    fn matches_dense_inverse() {
        let th = Theta::new(0.45, 0.25, 0.35, 1.0, vec![1.0], 1.0);
        let mut cfg = DgpConfig::new(9, 4, th.clone());
        cfg.seed = 21;
        let sim = generate(&cfg, 2.0, 0).unwrap();
        let (layout, network) = (&sim.layout, &sim.network);
        let ops = LagOperators::new(layout, network).unwrap();
        let dyn_ = Dynamics::new(layout, network, &ops, th.rho, th.lambda, th.nu).unwrap();
        let r = dense_system(layout, network, &ops, &th).try_inverse().unwrap();
        assert!((dyn_.dense_r() - &r).amax() < 1e-12);

        let kernels = [
            w_blocks(layout, network) * &r,
            lag_blocks(layout, &ops, 0) * &r,
            lag_blocks(layout, &ops, 1) * &r,
        ];
        let dk = dyn_.dense_kernels();
        for (a, b) in [&dk.rho, &dk.lambda, &dk.nu].iter().zip(&kernels) {
            assert!((*a - b).amax() < 1e-12);
        }

        let p = p_matrix(layout);
        let tr = dyn_.projected_traces();
        let expect: Vec<f64> = kernels.iter().map(|k| (&p * k).trace()).collect();
        assert!((tr.rho - expect[0]).abs() < 1e-12);
        assert!((tr.lambda - expect[1]).abs() < 1e-12);
        assert!((tr.nu - expect[2]).abs() < 1e-12);

        let cols = dyn_.column_unit_sums();
        let units = layout.row_units();
        for (got, k) in [&cols.rho, &cols.lambda, &cols.nu].iter().zip(&kernels) {
            let pk = &p * k;
            for r in 0..layout.n() {
                let c = layout.est_count(units[r]) as f64;
                assert!((got[r] / c - pk[(r, r)]).abs() < 1e-12);
            }
        }

        let g = dyn_.g_diagonal();
        for r in 0..layout.n() {
            assert!((g[r] - kernels[0][(r, r)]).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_path_is_noise_free_recursion() {
        let th = Theta::new(0.3, 0.2, 0.5, 0.7, vec![1.2], 1.0);
        let mut cfg = DgpConfig::new(8, 5, th.clone());
        cfg.seed = 4;
        let sim = generate(&cfg, 2.0, 1).unwrap();
        let ops = LagOperators::new(&sim.layout, &sim.network).unwrap();
        let dyn_ = Dynamics::new(&sim.layout, &sim.network, &ops, th.rho, th.lambda, th.nu).unwrap();
        let alpha: Vec<f64> = sim.alpha.iter().copied().collect();
        let path = dyn_.deterministic_path(&sim.data, &alpha, th.gamma, &th.beta);
        let zeros: Vec<_> = (0..=5).map(|t| DVector::zeros(sim.layout.period_count(t))).collect();
        let direct = evolve(
            &sim.layout,
            &sim.network,
            &sim.data.x,
            &sim.alpha,
            &th,
            &sim.data.y[0],
            &zeros,
        )
        .unwrap();
        for t in 0..=5 {
            assert!((&path[t] - &direct[t]).amax() < 1e-12);
        }
    }
}
