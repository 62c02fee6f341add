//! Residual moments, linear-quadratic form moments, score variance and
//! sandwich standard errors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::likelihood::ConcentratedModel;
use crate::panel::PanelLayout;

/// Second, third and fourth central moments of the errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualMoments {
    pub sigma2: f64,
    pub mu3: f64,
    pub mu4: f64,
}

impl ResidualMoments {
    pub fn normal(sigma2: f64) -> Self {
        Self {
            sigma2,
            mu3: 0.0,
            mu4: 3.0 * sigma2 * sigma2,
        }
    }
}

/// Moments from within-residuals; the variance divides by n - N_eff - `n_regressors`.
pub fn residual_moments(residuals: &DVector<f64>, layout: &PanelLayout, n_regressors: usize) -> ResidualMoments {
    let n = residuals.len() as f64;
    let dof = (residuals.len() as f64 - layout.n_effective() as f64 - n_regressors as f64).max(1.0);
    let sigma2 = residuals.norm_squared() / dof;
    let mu3 = residuals.iter().map(|v| v * v * v).sum::<f64>() / n;
    let mu4 = residuals.iter().map(|v| v.powi(4)).sum::<f64>() / n;
    ResidualMoments {
        sigma2,
        mu3,
        mu4: mu4.max(sigma2 * sigma2),
    }
}

/// Mean and variance of V'BV + c'V for i.i.d. V with the given moments.
pub fn lq_form_moments(b: &DMatrix<f64>, c: &DVector<f64>, m: &ResidualMoments) -> (f64, f64) {
    (m.sigma2 * b.trace(), lq_form_covariance(b, c, b, c, m))
}

/// Cov(V'B1V + c1'V, V'B2V + c2'V) for i.i.d. V.
pub fn lq_form_covariance(
    b1: &DMatrix<f64>,
    c1: &DVector<f64>,
    b2: &DMatrix<f64>,
    c2: &DVector<f64>,
    m: &ResidualMoments,
) -> f64 {
    let s2 = m.sigma2;
    let tr_prod = (b1 * b2).trace();
    let tr_prod_t = b1.component_mul(b2).sum();
    let d1 = b1.diagonal();
    let d2 = b2.diagonal();
    s2 * s2 * (tr_prod + tr_prod_t)
        + (m.mu4 - 3.0 * s2 * s2) * d1.dot(&d2)
        + m.mu3 * (d1.dot(c2) + d2.dot(c1))
        + s2 * c1.dot(c2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVarianceMethod {
    /// Every quadratic and linear term assembled from dense kernels.
    Exact,
    /// Hessian for the Gaussian part plus diagonal third/fourth-moment terms.
    Diagonal,
}

/// What each active score coordinate is made of.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Component {
    Rho,
    Lambda,
    Nu,
    Linear(usize),
    Sigma2,
}

fn components(model: &ConcentratedModel) -> Vec<Component> {
    let params = model.params();
    let mut out = Vec::with_capacity(params.dim());
    if params.rho_active {
        out.push(Component::Rho);
    }
    for (pos, &c) in params.delta_cols.iter().enumerate() {
        out.push(match c {
            0 => Component::Lambda,
            1 => Component::Nu,
            _ => Component::Linear(pos),
        });
    }
    out.push(Component::Sigma2);
    out
}

/// Linear parts: Q W y_det and Q z_det over active columns.
fn linear_parts(
    model: &ConcentratedModel,
    dynamics: &Dynamics,
    theta: &crate::panel::Theta,
    alpha: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let layout = model.layout();
    let path = dynamics.deterministic_path(model.data(), alpha, theta.gamma, &theta.beta);
    let wy = crate::dynamics::stacked_spatial_lag(layout, model.network(), &path);
    let qwy = layout.within_project(&wy)?;
    let det_data = crate::panel::PanelData {
        y: path,
        x: model.data().x.clone(),
    };
    let z = crate::likelihood::build_regressors(layout, model.network(), &det_data)?;
    let z = z.z.select_columns(&model.params().delta_cols);
    Ok((qwy, layout.within_project_matrix(&z)?))
}

/// Var(score)/n at an active parameter vector.
///
/// `Exact` builds the n x n kernels; `Diagonal` replaces the Gaussian part by
/// n times the Hessian and keeps only diagonal third/fourth-moment terms.
pub fn score_variance(
    model: &ConcentratedModel,
    theta: &DVector<f64>,
    alpha: &[Option<f64>],
    moments: &ResidualMoments,
    hessian: &DMatrix<f64>,
    method: ScoreVarianceMethod,
) -> Result<DMatrix<f64>> {
    let params = model.params();
    let full = params.expand(theta);
    let layout = model.layout();
    let n = model.n();
    let s = full.sigma2;
    let alpha: Vec<f64> = alpha.iter().map(|a| a.unwrap_or(0.0)).collect();
    let dynamics = Dynamics::new(
        layout,
        model.network(),
        model.operators(),
        full.rho,
        full.lambda,
        full.nu,
    )?;
    let comps = components(model);
    let p = comps.len();

    let (qwy_det, qz_det) = linear_parts(model, &dynamics, &full, &alpha)?;
    let linear: Vec<DVector<f64>> = comps
        .iter()
        .map(|c| match c {
            Component::Rho => &qwy_det / s,
            Component::Lambda | Component::Nu | Component::Linear(_) => {
                let pos = match c {
                    Component::Lambda => params.delta_cols.iter().position(|&x| x == 0).unwrap(),
                    Component::Nu => params.delta_cols.iter().position(|&x| x == 1).unwrap(),
                    Component::Linear(pos) => *pos,
                    _ => unreachable!(),
                };
                qz_det.column(pos) / s
            }
            Component::Sigma2 => DVector::zeros(n),
        })
        .collect();

    let units = layout.row_units();
    let inv_t: Vec<f64> = units.iter().map(|&u| 1.0 / layout.est_count(u) as f64).collect();
    let sigma_diag = DVector::from_iterator(n, inv_t.iter().map(|w| (1.0 - w) / (2.0 * s * s)));
    let m = moments;
    let excess = m.mu4 - 3.0 * m.sigma2 * m.sigma2;
    let v4 = m.sigma2 * m.sigma2;

    let mut out = DMatrix::zeros(p, p);
    match method {
        ScoreVarianceMethod::Exact => {
            let kernels = dynamics.dense_kernels();
            let project = |k: DMatrix<f64>| layout.within_project_matrix(&k);
            let mut xs: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(p);
            let (mut kr, mut kl, mut kn) = (Some(kernels.rho), Some(kernels.lambda), Some(kernels.nu));
            for c in &comps {
                xs.push(match c {
                    Component::Rho => Some(project(kr.take().unwrap())?),
                    Component::Lambda => Some(project(kl.take().unwrap())?),
                    Component::Nu => Some(project(kn.take().unwrap())?),
                    _ => None,
                });
            }
            drop((kr, kl, kn));
            // diag(B_a) with B_a = X_a' / s, or Q / (2 s^2) for sigma2
            let diags: Vec<DVector<f64>> = comps
                .iter()
                .zip(&xs)
                .map(|(c, x)| match (c, x) {
                    (_, Some(x)) => x.diagonal() / s,
                    (Component::Sigma2, None) => sigma_diag.clone(),
                    _ => DVector::zeros(n),
                })
                .collect();
            let n_eff = layout.n_effective() as f64;
            for a in 0..p {
                for b in 0..=a {
                    let quad = match (&xs[a], &xs[b], comps[a], comps[b]) {
                        (Some(xa), Some(xb), _, _) => {
                            let tr_ab: f64 = (0..n).map(|j| xa.column(j).dot(&xb.row(j).transpose())).sum();
                            (tr_ab + xa.dot(xb)) / (s * s)
                        }
                        (Some(x), None, _, Component::Sigma2) | (None, Some(x), Component::Sigma2, _) => {
                            x.trace() / (s * s * s)
                        }
                        (None, None, Component::Sigma2, Component::Sigma2) => {
                            (n as f64 - n_eff) / (2.0 * s * s * s * s)
                        }
                        _ => 0.0,
                    };
                    let v = v4 * quad
                        + excess * diags[a].dot(&diags[b])
                        + m.mu3 * (diags[a].dot(&linear[b]) + diags[b].dot(&linear[a]))
                        + m.sigma2 * linear[a].dot(&linear[b]);
                    out[(a, b)] = v / n as f64;
                    out[(b, a)] = v / n as f64;
                }
            }
        }
        ScoreVarianceMethod::Diagonal => {
            let sums = dynamics.column_unit_sums();
            let g = dynamics.g_diagonal();
            let diags: Vec<DVector<f64>> = comps
                .iter()
                .map(|c| match c {
                    Component::Rho => DVector::from_fn(n, |r, _| (g[r] - sums.rho[r] * inv_t[r]) / s),
                    Component::Lambda => DVector::from_fn(n, |r, _| -sums.lambda[r] * inv_t[r] / s),
                    Component::Nu => DVector::from_fn(n, |r, _| -sums.nu[r] * inv_t[r] / s),
                    Component::Linear(_) => DVector::zeros(n),
                    Component::Sigma2 => sigma_diag.clone(),
                })
                .collect();
            for a in 0..p {
                for b in 0..=a {
                    let omega = excess * diags[a].dot(&diags[b])
                        + m.mu3 * (diags[a].dot(&linear[b]) + diags[b].dot(&linear[a]));
                    let v = hessian[(a, b)] + omega / n as f64;
                    out[(a, b)] = v;
                    out[(b, a)] = v;
                }
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry("score variance".into()));
    }
    Ok(out)
}

/// Sandwich covariance of the estimator and its rate-normalized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcovReport {
    /// Finite-sample covariance of the estimates.
    pub vcov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    /// Asymptotic covariance of sqrt(n) Gamma^{-1} (theta_hat - theta0).
    pub scaled: Vec<Vec<f64>>,
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

/// H^{-1} V H^{-1} / n, where `score_var` is Var(score)/n. `gamma_position`
/// marks the coordinate whose rate carries an extra sqrt(T).
pub fn sandwich_vcov(
    hessian: &DMatrix<f64>,
    score_var: &DMatrix<f64>,
    n: usize,
    gamma_position: Option<usize>,
    n_periods: usize,
) -> Result<VcovReport> {
    let p = hessian.nrows();
    let mut gamma = DVector::from_element(p, 1.0);
    if let Some(g) = gamma_position {
        gamma[g] = (n_periods as f64).sqrt();
    }
    let g = DMatrix::from_diagonal(&gamma);
    let h_scaled = &g * hessian * &g;
    let v_scaled = &g * score_var * &g;
    let h_inv = h_scaled
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or(Error::SingularHessian)?;
    let mut scaled = &h_inv * v_scaled * &h_inv;
    scaled = (&scaled + scaled.transpose()) * 0.5;
    let vcov = &g * &scaled * &g / n as f64;
    let se = vcov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(VcovReport {
        vcov: to_rows(&vcov),
        se,
        scaled: to_rows(&scaled),
    })
}

/// Two-sided standard normal critical value for a confidence level. The
/// common levels use fixed constants so reports are reproducible bit for bit.
pub fn z_critical(level: f64) -> f64 {
    match level {
        l if l == 0.95 => 1.959964,
        l if l == 0.90 => 1.644854,
        l if l == 0.99 => 2.575829,
        l => Normal::standard().inverse_cdf(0.5 + l / 2.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// estimate +- z SE per coordinate and level.
pub fn confidence_intervals(estimates: &[f64], se: &[f64], levels: &[f64]) -> Vec<Vec<Interval>> {
    estimates
        .iter()
        .zip(se)
        .map(|(&e, &s)| {
            levels
                .iter()
                .map(|&level| {
                    let h = z_critical(level) * s;
                    Interval {
                        level,
                        lower: e - h,
                        upper: e + h,
                    }
                })
                .collect()
        })
        .collect()
}

/// Two-sided p-value of estimate / se.
pub fn p_value(estimate: f64, se: f64) -> f64 {
    let z = (estimate / se).abs();
    2.0 * (1.0 - Normal::standard().cdf(z))
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}
