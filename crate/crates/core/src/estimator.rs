//! Quasi-maximum likelihood fit, Hessian, expected-score bias correction and
//! standard errors.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{draw_errors, evolve, ErrorDist};
use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::inference::{
    residual_moments, sandwich_vcov, score_variance, to_rows, ResidualMoments, ScoreVarianceMethod,
};
use crate::likelihood::{ConcentratedModel, LikelihoodOptions};
use crate::panel::{LayoutDiagnostics, PanelData, PanelLayout, Theta};
use crate::rng::{stream, Purpose};
use crate::weights::TimeVaryingNetwork;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub likelihood: LikelihoodOptions,
    pub grid_points: usize,
    /// Width of the final golden-section bracket.
    pub tolerance: f64,
    pub bias_correction: bool,
    /// Extra fixed-point passes of the correction; 0 is the one-step plug-in.
    pub correction_iterations: usize,
    pub robust: bool,
    /// Largest n for which the robust score variance is assembled exactly.
    pub dense_variance_limit: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            likelihood: LikelihoodOptions::default(),
            grid_points: 41,
            tolerance: 1e-9,
            bias_correction: true,
            correction_iterations: 0,
            robust: false,
            dense_variance_limit: 6000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// (rho, Lcc(rho)) on the coarse grid; failed evaluations are omitted.
    pub grid: Vec<(f64, f64)>,
    pub converged: bool,
    /// rho_hat within 1e-4 of the search bounds.
    pub boundary: bool,
    pub golden_iterations: usize,
    pub dropped: Vec<String>,
    pub hessian_asymmetry: f64,
    pub hessian_min_eigenvalue: f64,
    pub score_at_fit: Vec<f64>,
    pub n: usize,
    pub n_units: usize,
    pub n_periods: usize,
    pub n_effective: usize,
    pub coverage: f64,
    pub unbalancedness: f64,
    /// N / T^3; large values warn that the corrected estimator may still under-cover.
    pub n_over_t3: f64,
    pub zero_lag_rows: usize,
    pub robust_method: Option<ScoreVarianceMethod>,
    pub layout: LayoutDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta_hat: Theta,
    pub theta_bc: Theta,
    /// Names of estimated coordinates; matrices below are over these.
    pub active_params: Vec<String>,
    pub alpha_hat: Vec<Option<f64>>,
    pub hessian: Vec<Vec<f64>>,
    pub vcov_raw: Vec<Vec<f64>>,
    pub se_raw: Vec<f64>,
    pub vcov_robust: Option<Vec<Vec<f64>>>,
    pub se_robust: Option<Vec<f64>>,
    /// Lcc at rho_hat.
    pub loglik: f64,
    /// (1/n) E[score] at theta_hat over active coordinates.
    pub expected_score: Vec<f64>,
    /// theta_bc - theta_hat in the full (rho, delta', sigma2) layout.
    pub bias_vector: Vec<f64>,
    pub moments: Option<ResidualMoments>,
    pub diagnostics: FitDiagnostics,
}

impl EstimationResult {
    /// Full-layout standard errors (NaN for dropped coordinates).
    pub fn se_full(&self, robust: bool) -> Vec<f64> {
        let se = if robust {
            self.se_robust.as_ref().unwrap_or(&self.se_raw)
        } else {
            &self.se_raw
        };
        let names = Theta::param_names(self.theta_hat.k());
        names
            .iter()
            .map(|n| {
                self.active_params
                    .iter()
                    .position(|a| a == n)
                    .map_or(f64::NAN, |p| se[p])
            })
            .collect()
    }
}

/// Maximizes Lcc over the rho bounds: coarse grid, then golden section.
fn maximize_rho(model: &ConcentratedModel, opts: &FitOptions) -> Result<(f64, Vec<(f64, f64)>, usize, bool)> {
    let (lo, hi) = opts.likelihood.rho_bounds;
    if !(lo < hi) || lo <= -1.0 || hi >= 1.0 {
        return Err(Error::Config(format!(
            "rho bounds ({lo}, {hi}) must lie inside (-1, 1)"
        )));
    }
    let m = opts.grid_points.max(3);
    let step = (hi - lo) / (m - 1) as f64;
    let grid: Vec<(f64, f64)> = (0..m)
        .filter_map(|i| {
            let r = lo + step * i as f64;
            model.lcc(r).ok().map(|v| (r, v))
        })
        .collect();
    let best = grid
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .ok_or(Error::SingularAtRho { rho: lo })?;
    let mut a = if best == 0 { lo } else { grid[best - 1].0 };
    let mut b = if best + 1 == grid.len() { hi } else { grid[best + 1].0 };
    let f = |r: f64| model.lcc(r).unwrap_or(f64::NEG_INFINITY);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut iters = 0;
    while b - a > opts.tolerance && iters < 200 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        iters += 1;
    }
    let mut rho = 0.5 * (a + b);
    // the grid endpoints may beat the interior bracket
    let best_grid = grid[best];
    if best_grid.1 > f(rho) {
        rho = best_grid.0;
    }
    Ok((rho, grid, iters, b - a <= opts.tolerance))
}

/// -(1/n) times the central-difference Jacobian of the analytic score,
/// before symmetrization.
pub fn hessian_unsymmetrized(model: &ConcentratedModel, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let p = theta.len();
    let n = model.n() as f64;
    let mut h = DMatrix::zeros(p, p);
    for j in 0..p {
        let step = (1e-4 * theta[j].abs()).max(1e-5);
        let mut plus = theta.clone();
        plus[j] += step;
        let mut minus = theta.clone();
        minus[j] -= step;
        let d = (model.score(&plus)? - model.score(&minus)?) / (2.0 * step);
        h.set_column(j, &(-d / n));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry("Hessian".into()));
    }
    Ok(h)
}

/// Symmetrized -(1/n) second derivative of the concentrated log-likelihood.
pub fn hessian(model: &ConcentratedModel, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let h = hessian_unsymmetrized(model, theta)?;
    Ok((&h + h.transpose()) * 0.5)
}

/// (1/n) E[score] at `theta` under the model, over active coordinates.
/// With `dynamic_channels` off the lagged regressors are treated as fixed.
pub fn expected_score_bias(
    model: &ConcentratedModel,
    theta: &DVector<f64>,
    dynamic_channels: bool,
) -> Result<DVector<f64>> {
    let params = model.params();
    let full = params.expand(theta);
    let n = model.n() as f64;
    let (lambda, nu) = if dynamic_channels {
        (full.lambda, full.nu)
    } else {
        (0.0, 0.0)
    };
    let dynamics = Dynamics::new(model.layout(), model.network(), model.operators(), full.rho, lambda, nu)?;
    let tr = dynamics.projected_traces();
    let mut b = DVector::zeros(params.dim());
    let mut pos = 0;
    if params.rho_active {
        b[0] = -tr.rho / n;
        pos = 1;
    }
    for (i, &c) in params.delta_cols.iter().enumerate() {
        b[pos + i] = match (c, dynamic_channels) {
            (0, true) => -tr.lambda / n,
            (1, true) => -tr.nu / n,
            _ => 0.0,
        };
    }
    let last = params.dim() - 1;
    b[last] = -(model.layout().n_effective() as f64) / (2.0 * full.sigma2 * n);
    Ok(b)
}

/// theta - H^{-1} b.
pub fn bias_correct(theta: &DVector<f64>, hessian: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let lu = hessian.clone().lu();
    let step = lu.solve(b).ok_or(Error::SingularHessian)?;
    if step.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularHessian);
    }
    Ok(theta - step)
}

/// Monte Carlo mean and standard error of score(theta)/n over fresh error
/// draws, holding period-0 outcomes, covariates and fixed effects at the
/// supplied values.
pub fn bootstrap_expected_score(
    model: &ConcentratedModel,
    theta: &DVector<f64>,
    alpha: &[f64],
    reps: usize,
    seed: u64,
    dist: ErrorDist,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let full = model.params().expand(theta);
    let layout = model.layout();
    let network = model.network();
    let data = model.data();
    let alpha = DVector::from_column_slice(alpha);
    let n = model.n() as f64;
    let draws: Vec<DVector<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<DVector<f64>> {
            let mut rng = stream(seed, rep as u64, Purpose::Bootstrap);
            let mut errors = vec![DVector::zeros(0)];
            for t in 1..=layout.n_periods() {
                errors.push(DVector::from_vec(draw_errors(
                    layout.period_count(t),
                    dist,
                    full.sigma2,
                    &mut rng,
                )));
            }
            let y = evolve(layout, network, &data.x, &alpha, &full, &data.y[0], &errors)?;
            let boot = PanelData::new(layout, y, data.x.clone())?;
            let m = ConcentratedModel::with_engine(layout, network, &boot, *model.options(), model.engine().clone())?;
            if m.params() != model.params() {
                return Err(Error::InvalidInput(
                    "bootstrap draw changed the active parameters".into(),
                ));
            }
            Ok(m.score(theta)? / n)
        })
        .collect::<Result<_>>()?;
    let p = theta.len();
    let r = reps as f64;
    let mean = draws.iter().fold(DVector::zeros(p), |acc, d| acc + d) / r;
    let var = draws
        .iter()
        .fold(DVector::zeros(p), |acc, d| acc + (d - &mean).map(|v| v * v))
        / (r - 1.0);
    Ok((mean, var.map(|v| (v / r).sqrt())))
}

/// Full estimation pipeline.
pub fn fit(
    layout: &PanelLayout,
    network: &TimeVaryingNetwork,
    data: &PanelData,
    opts: &FitOptions,
) -> Result<EstimationResult> {
    let model = ConcentratedModel::new(layout, network, data, opts.likelihood)?;
    fit_model(&model, opts)
}

pub fn fit_model(model: &ConcentratedModel, opts: &FitOptions) -> Result<EstimationResult> {
    let params = model.params().clone();
    let layout = model.layout();
    let n = model.n();
    let (rho, grid, iters, converged, boundary) = if params.rho_active {
        let (rho, grid, iters, conv) = maximize_rho(model, opts)?;
        let (lo, hi) = opts.likelihood.rho_bounds;
        let boundary = rho - lo < 1e-4 || hi - rho < 1e-4;
        (rho, grid, iters, conv, boundary)
    } else {
        (0.0, Vec::new(), 0, true, false)
    };
    let profile = model.profile(rho)?;
    let theta = model.profile_theta(rho)?;
    let alpha_hat = model.recover_alpha(rho, &profile.delta);

    let h_raw = hessian_unsymmetrized(model, &theta)?;
    let asymmetry = (&h_raw - h_raw.transpose()).amax();
    let h = (&h_raw + h_raw.transpose()) * 0.5;
    let min_eig = h.clone().symmetric_eigenvalues().min();

    let b = expected_score_bias(model, &theta, true)?;
    let mut theta_bc = theta.clone();
    if opts.bias_correction {
        theta_bc = bias_correct(&theta, &h, &b)?;
        for _ in 0..opts.correction_iterations {
            let b_next = expected_score_bias(model, &theta_bc, true)?;
            theta_bc = bias_correct(&theta, &h, &b_next)?;
        }
    }

    let gamma_pos = params.position(3);
    let raw = sandwich_vcov(&h, &h, n, gamma_pos, layout.n_periods())?;
    let (mut vcov_robust, mut se_robust, mut moments, mut method) = (None, None, None, None);
    if opts.robust {
        let resid = model.residuals(profile.rho, &profile.delta);
        let m = residual_moments(&resid, layout, params.delta_cols.len());
        let how = if n <= opts.dense_variance_limit {
            ScoreVarianceMethod::Exact
        } else {
            ScoreVarianceMethod::Diagonal
        };
        let v = score_variance(model, &theta, &alpha_hat, &m, &h, how)?;
        let rep = sandwich_vcov(&h, &v, n, gamma_pos, layout.n_periods())?;
        vcov_robust = Some(rep.vcov);
        se_robust = Some(rep.se);
        moments = Some(m);
        method = Some(how);
    }

    let theta_hat_full = params.expand(&theta);
    let theta_bc_full = params.expand(&theta_bc);
    let bias_vector = theta_bc_full
        .to_vec()
        .iter()
        .zip(theta_hat_full.to_vec())
        .map(|(a, b)| a - b)
        .collect();
    let score_at_fit = model.score(&theta)?.iter().copied().collect();
    Ok(EstimationResult {
        theta_hat: theta_hat_full,
        theta_bc: theta_bc_full,
        active_params: params.names(),
        alpha_hat,
        hessian: to_rows(&h),
        vcov_raw: raw.vcov,
        se_raw: raw.se,
        vcov_robust,
        se_robust,
        loglik: profile.lcc,
        expected_score: b.iter().copied().collect(),
        bias_vector,
        moments,
        diagnostics: FitDiagnostics {
            grid,
            converged,
            boundary,
            golden_iterations: iters,
            dropped: params.dropped(),
            hessian_asymmetry: asymmetry,
            hessian_min_eigenvalue: min_eig,
            score_at_fit,
            n,
            n_units: layout.n_units(),
            n_periods: layout.n_periods(),
            n_effective: layout.n_effective(),
            coverage: layout.coverage(),
            unbalancedness: layout.unbalancedness(),
            n_over_t3: layout.n_units() as f64 / (layout.n_periods() as f64).powi(3),
            zero_lag_rows: model.regressors().zero_lag_rows,
            robust_method: method,
            layout: layout.diagnostics(),
        },
    })
}
