//! Concentrated Gaussian quasi-likelihood with fixed effects projected out.

mod logdet;
mod regressors;

pub use logdet::{LogDetEngine, LogDetStrategy, EIGEN_MAX_SIZE};
pub use regressors::{build_regressors, RegressorBlocks};

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::LagOperators;
use crate::panel::{PanelData, PanelLayout, Theta};
use crate::weights::{spmv, TimeVaryingNetwork};

/// Reciprocal condition number of the scaled Z'QZ below which the design is singular.
pub const RCOND_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodOptions {
    pub rho_bounds: (f64, f64),
    pub logdet: LogDetStrategy,
}

impl Default for LikelihoodOptions {
    fn default() -> Self {
        Self {
            rho_bounds: (-0.995, 0.995),
            logdet: LogDetStrategy::Auto,
        }
    }
}

/// Which coordinates of the full (rho, delta', sigma2) vector are estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub k: usize,
    pub rho_active: bool,
    /// Active Z columns, in order, as indices into 0..k+3.
    pub delta_cols: Vec<usize>,
}

impl ParamLayout {
    pub fn full(k: usize) -> Self {
        Self {
            k,
            rho_active: true,
            delta_cols: (0..k + 3).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.rho_active as usize + self.delta_cols.len() + 1
    }

    /// Positions of the active coordinates within the full parameter vector.
    pub fn full_indices(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.dim());
        if self.rho_active {
            idx.push(0);
        }
        idx.extend(self.delta_cols.iter().map(|c| c + 1));
        idx.push(self.k + 4);
        idx
    }

    pub fn names(&self) -> Vec<String> {
        let all = Theta::param_names(self.k);
        self.full_indices().into_iter().map(|i| all[i].clone()).collect()
    }

    pub fn dropped(&self) -> Vec<String> {
        let all = Theta::param_names(self.k);
        let active = self.full_indices();
        (0..self.k + 5)
            .filter(|i| !active.contains(i))
            .map(|i| all[i].clone())
            .collect()
    }

    /// Active position of a full-vector index, if estimated.
    pub fn position(&self, full_index: usize) -> Option<usize> {
        self.full_indices().iter().position(|&i| i == full_index)
    }

    pub fn compress(&self, theta: &Theta) -> DVector<f64> {
        let full = theta.to_vec();
        DVector::from_iterator(self.dim(), self.full_indices().into_iter().map(|i| full[i]))
    }

    /// Dropped coordinates are set to zero.
    pub fn expand(&self, active: &DVector<f64>) -> Theta {
        let mut full = vec![0.0; self.k + 5];
        for (p, i) in self.full_indices().into_iter().enumerate() {
            full[i] = active[p];
        }
        Theta::from_slice(&full).expect("k >= 1")
    }

    /// Expands an active vector into the full layout with zeros elsewhere.
    pub fn expand_vec(&self, active: &DVector<f64>) -> Vec<f64> {
        let mut full = vec![0.0; self.k + 5];
        for (p, i) in self.full_indices().into_iter().enumerate() {
            full[i] = active[p];
        }
        full
    }

    /// Splits an active vector into (rho, delta over active columns, sigma2).
    pub fn split<'a>(&self, theta: &'a DVector<f64>) -> (f64, DVector<f64>, f64) {
        let off = self.rho_active as usize;
        let rho = if self.rho_active { theta[0] } else { 0.0 };
        let delta = theta.rows(off, self.delta_cols.len()).into_owned();
        (rho, delta, theta[self.dim() - 1])
    }
}

/// Profiled quantities at a given rho.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub rho: f64,
    pub delta: DVector<f64>,
    pub sigma2: f64,
    pub lcc: f64,
}

/// Cached pieces of the concentrated likelihood for one dataset.
#[derive(Debug, Clone)]
pub struct ConcentratedModel {
    layout: PanelLayout,
    network: TimeVaryingNetwork,
    ops: LagOperators,
    data: PanelData,
    params: ParamLayout,
    regressors: RegressorBlocks,
    y: DVector<f64>,
    wy: DVector<f64>,
    qwy: DVector<f64>,
    z: DMatrix<f64>,
    qz: DMatrix<f64>,
    a: DVector<f64>,
    b: DVector<f64>,
    e0: DVector<f64>,
    e1: DVector<f64>,
    engine: LogDetEngine,
    options: LikelihoodOptions,
}

fn stacked_wy(layout: &PanelLayout, network: &TimeVaryingNetwork, data: &PanelData) -> DVector<f64> {
    let parts: Vec<DVector<f64>> = (0..=layout.n_periods())
        .map(|t| DVector::from_vec(spmv(network.w(t), data.y[t].as_slice())))
        .collect();
    layout.stack(&parts)
}

impl ConcentratedModel {
    pub fn new(
        layout: &PanelLayout,
        network: &TimeVaryingNetwork,
        data: &PanelData,
        options: LikelihoodOptions,
    ) -> Result<Self> {
        let engine = LogDetEngine::new(network, options.logdet);
        Self::with_engine(layout, network, data, options, engine)
    }

    /// Reuses a log-determinant engine built for the same network.
    pub fn with_engine(
        layout: &PanelLayout,
        network: &TimeVaryingNetwork,
        data: &PanelData,
        options: LikelihoodOptions,
        engine: LogDetEngine,
    ) -> Result<Self> {
        if network.n_periods() != layout.n_periods() {
            return Err(Error::ShapeMismatch("network and layout disagree on T".into()));
        }
        let ops = LagOperators::new(layout, network)?;
        let regressors = regressors::build_with_operators(layout, &ops, data)?;
        let k = regressors.k;
        let y = layout.stack(&data.y);
        let wy = stacked_wy(layout, network, data);
        let qy = layout.within_project(&y)?;
        let qwy = layout.within_project(&wy)?;
        let qz_full = layout.within_project_matrix(&regressors.z)?;

        let scale = qy.amax().max(1.0);
        let negligible = |c: usize| qz_full.column(c).amax() <= 1e-12 * scale;
        let structural_zero = |c: usize| regressors.z.column(c).iter().all(|&v| v == 0.0);
        let mut delta_cols = Vec::new();
        for c in 0..k + 3 {
            let drop = match c {
                // no network lag anywhere
                0 => network.lag_is_empty() || structural_zero(0),
                // no unit enters during the estimation periods
                2 => negligible(2),
                _ => false,
            };
            if !drop {
                delta_cols.push(c);
            }
        }
        let params = ParamLayout {
            k,
            rho_active: !network.contemporaneous_is_empty(),
            delta_cols,
        };
        let names = RegressorBlocks::column_names(k);
        for &c in &params.delta_cols {
            if negligible(c) {
                return Err(Error::SingularDesign {
                    column: c,
                    name: names[c].clone(),
                });
            }
        }
        let z = regressors.z.select_columns(&params.delta_cols);
        let qz = qz_full.select_columns(&params.delta_cols);
        let gram = qz.transpose() * &qz;
        check_rank(&gram, &params.delta_cols, &names)?;
        let chol = gram.clone().cholesky().ok_or_else(|| Error::SingularDesign {
            column: *params.delta_cols.last().unwrap_or(&0),
            name: "cross-product".into(),
        })?;
        let a = chol.solve(&(qz.transpose() * &qy));
        let b = chol.solve(&(qz.transpose() * &qwy));
        let e0 = &qy - &qz * &a;
        let e1 = &qwy - &qz * &b;
        Ok(Self {
            layout: layout.clone(),
            network: network.clone(),
            ops,
            data: data.clone(),
            params,
            regressors,
            y,
            wy,
            qwy,
            z,
            qz,
            a,
            b,
            e0,
            e1,
            engine,
            options,
        })
    }

    pub fn layout(&self) -> &PanelLayout {
        &self.layout
    }

    pub fn network(&self) -> &TimeVaryingNetwork {
        &self.network
    }

    pub fn operators(&self) -> &LagOperators {
        &self.ops
    }

    pub fn data(&self) -> &PanelData {
        &self.data
    }

    pub fn params(&self) -> &ParamLayout {
        &self.params
    }

    pub fn regressors(&self) -> &RegressorBlocks {
        &self.regressors
    }

    pub fn engine(&self) -> &LogDetEngine {
        &self.engine
    }

    pub fn options(&self) -> &LikelihoodOptions {
        &self.options
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Stacked Y over the estimation periods.
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Stacked W Y.
    pub fn wy(&self) -> &DVector<f64> {
        &self.wy
    }

    /// Active regressor columns, stacked.
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// Q Z over active columns.
    pub fn qz(&self) -> &DMatrix<f64> {
        &self.qz
    }

    pub fn log_det(&self, rho: f64) -> Result<f64> {
        self.engine.log_det(rho)
    }

    /// delta_hat(rho), sigma2_hat(rho) and Lcc(rho).
    pub fn profile(&self, rho: f64) -> Result<Profile> {
        let n = self.n() as f64;
        let delta = &self.a - &self.b * rho;
        let resid = &self.e0 - &self.e1 * rho;
        let sigma2 = resid.norm_squared() / n;
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::NonFiniteEntry(format!("sigma2_hat at rho = {rho}")));
        }
        let lcc = -0.5 * n * ((2.0 * PI).ln() + 1.0) - 0.5 * n * sigma2.ln() + self.log_det(rho)?;
        Ok(Profile {
            rho,
            delta,
            sigma2,
            lcc,
        })
    }

    pub fn lcc(&self, rho: f64) -> Result<f64> {
        Ok(self.profile(rho)?.lcc)
    }

    /// Profiled point as an active parameter vector.
    pub fn profile_theta(&self, rho: f64) -> Result<DVector<f64>> {
        let p = self.profile(rho)?;
        let mut v = Vec::with_capacity(self.params.dim());
        if self.params.rho_active {
            v.push(rho);
        }
        v.extend(p.delta.iter());
        v.push(p.sigma2);
        Ok(DVector::from_vec(v))
    }

    /// Q(S(rho) Y - Z delta).
    pub fn residuals(&self, rho: f64, delta: &DVector<f64>) -> DVector<f64> {
        // Q(Y - rho WY - Z delta) = e0 + Q Z a - rho (e1 + Q Z b) - Q Z delta
        let shift = &self.a - &self.b * rho - delta;
        &self.e0 - &self.e1 * rho + &self.qz * shift
    }

    /// Concentrated log-likelihood at an active parameter vector.
    pub fn loglik(&self, theta: &DVector<f64>) -> Result<f64> {
        let (rho, delta, sigma2) = self.params.split(theta);
        if sigma2 <= 0.0 {
            return Err(Error::InvalidInput(format!("sigma2 = {sigma2} must be positive")));
        }
        let n = self.n() as f64;
        let v = self.residuals(rho, &delta);
        Ok(-0.5 * n * (2.0 * PI).ln() - 0.5 * n * sigma2.ln() + self.log_det(rho)? - v.norm_squared() / (2.0 * sigma2))
    }

    /// Analytic gradient of `loglik`.
    pub fn score(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let (rho, delta, sigma2) = self.params.split(theta);
        let n = self.n() as f64;
        let v = self.residuals(rho, &delta);
        let mut out = Vec::with_capacity(self.params.dim());
        if self.params.rho_active {
            out.push(-self.engine.trace_g(rho)? + self.qwy.dot(&v) / sigma2);
        }
        out.extend((self.qz.transpose() * &v / sigma2).iter());
        out.push(-0.5 * n / sigma2 + v.norm_squared() / (2.0 * sigma2 * sigma2));
        Ok(DVector::from_vec(out))
    }

    /// Unit means of S(rho) Y - Z delta; `None` for units without estimation rows.
    pub fn recover_alpha(&self, rho: f64, delta: &DVector<f64>) -> Vec<Option<f64>> {
        let r = &self.y - &self.wy * rho - &self.z * delta;
        let means = self.layout.unit_means(&r);
        (0..self.layout.n_units())
            .map(|i| (self.layout.est_count(i) > 0).then_some(means[i]))
            .collect()
    }
}

/// Fails with the first column whose inclusion makes the scaled Gram matrix
/// numerically singular.
fn check_rank(gram: &DMatrix<f64>, cols: &[usize], names: &[String]) -> Result<()> {
    let p = gram.nrows();
    let d: Vec<f64> = (0..p).map(|i| gram[(i, i)].sqrt()).collect();
    let scaled = DMatrix::from_fn(p, p, |i, j| gram[(i, j)] / (d[i] * d[j]));
    let rcond = |m: usize| {
        let ev = scaled.view((0, 0), (m, m)).into_owned().symmetric_eigenvalues();
        ev.min() / ev.max()
    };
    if p == 0 || rcond(p) >= RCOND_TOL {
        return Ok(());
    }
    for m in 1..=p {
        if !(rcond(m) >= RCOND_TOL) {
            return Err(Error::SingularDesign {
                column: cols[m - 1],
                name: names[cols[m - 1]].clone(),
            });
        }
    }
    Ok(())
}

/// ln|S(rho)| for a network.
pub fn log_det_s(network: &TimeVaryingNetwork, rho: f64, strategy: LogDetStrategy) -> Result<f64> {
    LogDetEngine::new(network, strategy).log_det(rho)
}

#[cfg(test)]
mod tests;
