//! Synthetic unbalanced dynamic network panels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::LagOperators;
use crate::panel::{PanelData, PanelLayout, Theta};
use crate::rng::{stream, Purpose, StreamRng};
use crate::weights::{spmv, to_dense, Adjacency, TimeVaryingNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    #[default]
    Normal,
    CenteredExponential,
    Laplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub n_units: usize,
    pub n_periods: usize,
    /// Geometric duration parameter; durations are GE(p / T) + 2.
    #[serde(default)]
    pub p: Option<f64>,
    /// When set, `p` is calibrated so the mean unbalancedness hits this value.
    #[serde(default)]
    pub target_up: Option<f64>,
    pub theta0: Theta,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub error_dist: ErrorDist,
    #[serde(default)]
    pub seed: u64,
    /// Rook grid dimensions; defaults to the most square factorization of N.
    #[serde(default)]
    pub grid: Option<(usize, usize)>,
}

fn default_burn_in() -> usize {
    20
}

impl DgpConfig {
    pub fn new(n_units: usize, n_periods: usize, theta0: Theta) -> Self {
        Self {
            n_units,
            n_periods,
            p: None,
            target_up: None,
            theta0,
            burn_in: default_burn_in(),
            error_dist: ErrorDist::Normal,
            seed: 0,
            grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 || self.n_periods == 0 {
            return Err(Error::Config("N and T must be positive".into()));
        }
        if let Some(u) = self.target_up {
            if !(0.0..1.0).contains(&u) {
                return Err(Error::Config(format!("target_up = {u} is outside [0, 1)")));
            }
        }
        if let Some(p) = self.p {
            if !(p >= 0.0 && p < self.n_periods as f64) {
                return Err(Error::Config(format!("p = {p} must satisfy 0 <= p/T < 1")));
            }
        }
        if self.theta0.sigma2 <= 0.0 {
            return Err(Error::Config("sigma2 must be positive".into()));
        }
        if let Some((r, c)) = self.grid {
            if r * c != self.n_units {
                return Err(Error::Config(format!(
                    "grid {r}x{c} does not hold {} units",
                    self.n_units
                )));
            }
        }
        Ok(())
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        self.grid.unwrap_or_else(|| most_square_grid(self.n_units))
    }
}

/// `(rows, cols)` with `rows * cols = n` and `rows` the largest divisor not above sqrt(n).
pub fn most_square_grid(n: usize) -> (usize, usize) {
    let mut r = (n as f64).sqrt() as usize;
    while r > 1 && n % r != 0 {
        r -= 1;
    }
    let r = r.max(1);
    (r, n / r)
}

/// Window for one unit from a duration uniform `u` in (0, 1] and a start uniform `v` in [0, 1).
fn window_from_uniforms(u: f64, v: f64, q: f64, t: usize) -> (usize, usize) {
    let duration = if q <= 0.0 {
        usize::MAX
    } else if q >= 1.0 {
        2
    } else {
        let k = (u.ln() / (1.0 - q).ln()).floor();
        if k >= (t + 1) as f64 {
            usize::MAX
        } else {
            k as usize + 2
        }
    };
    if duration >= t + 1 {
        return (0, t);
    }
    let starts = t + 2 - duration;
    let start = ((v * starts as f64) as usize).min(starts - 1);
    (start, start + duration - 1)
}

fn draw_uniform_pairs(n: usize, rng: &mut StreamRng) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| (1.0 - rng.random::<f64>(), rng.random::<f64>()))
        .collect()
}

/// Observation windows with durations GE(p / T) + 2 placed uniformly.
/// Draws that leave an estimation period empty are redrawn.
pub fn draw_windows(n_units: usize, n_periods: usize, p: f64, rng: &mut StreamRng) -> Result<PanelLayout> {
    let q = p / n_periods as f64;
    let mut last_err = None;
    for _ in 0..1000 {
        let windows = draw_uniform_pairs(n_units, rng)
            .into_iter()
            .map(|(u, v)| window_from_uniforms(u, v, q, n_periods))
            .collect();
        match PanelLayout::from_windows(windows, n_periods) {
            Ok(layout) => return Ok(layout),
            Err(e @ Error::EmptyPeriod { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

fn mean_up(draws: &[Vec<(f64, f64)>], q: f64, t: usize) -> f64 {
    let total: f64 = draws
        .iter()
        .map(|pairs| {
            let cells: usize = pairs
                .iter()
                .map(|&(u, v)| {
                    let (f, l) = window_from_uniforms(u, v, q, t);
                    l + 1 - f.max(1)
                })
                .sum();
            1.0 - cells as f64 / (pairs.len() * t) as f64
        })
        .sum();
    total / draws.len() as f64
}

const CALIBRATION_DRAWS: usize = 200;

/// Bisection on p with common random numbers across candidate values.
pub fn calibrate_p(n_units: usize, n_periods: usize, target_up: f64, rng: &mut StreamRng) -> Result<f64> {
    if !(0.0..1.0).contains(&target_up) {
        return Err(Error::Unattainable { target: target_up });
    }
    if target_up == 0.0 {
        return Ok(0.0);
    }
    let draws: Vec<_> = (0..CALIBRATION_DRAWS)
        .map(|_| draw_uniform_pairs(n_units, rng))
        .collect();
    let t = n_periods;
    let mut lo = 0.0;
    let mut hi = 1.0;
    if mean_up(&draws, hi, t) < target_up - 0.005 {
        return Err(Error::Unattainable { target: target_up });
    }
    let mut q = 0.5;
    for _ in 0..200 {
        q = 0.5 * (lo + hi);
        let up = mean_up(&draws, q, t);
        if (up - target_up).abs() < 1e-3 || hi - lo < 1e-12 {
            break;
        }
        if up < target_up {
            lo = q;
        } else {
            hi = q;
        }
    }
    if (mean_up(&draws, q, t) - target_up).abs() > 0.005 {
        return Err(Error::Unattainable { target: target_up });
    }
    Ok(q * t as f64)
}

/// Standard normal covariates for periods 0..=T and fixed effects for all N units.
pub fn gen_exogenous(layout: &PanelLayout, k: usize, rng: &mut StreamRng) -> (Vec<DMatrix<f64>>, DVector<f64>) {
    let x = (0..=layout.n_periods())
        .map(|t| DMatrix::from_fn(layout.period_count(t), k, |_, _| rng.sample(StandardNormal)))
        .collect();
    let alpha = DVector::from_fn(layout.n_units(), |_, _| rng.sample(StandardNormal));
    (x, alpha)
}

/// i.i.d. mean-zero errors with variance `sigma2`.
pub fn draw_errors(count: usize, dist: ErrorDist, sigma2: f64, rng: &mut StreamRng) -> Vec<f64> {
    let sd = sigma2.sqrt();
    (0..count)
        .map(|_| match dist {
            ErrorDist::Normal => sd * rng.sample::<f64, _>(StandardNormal),
            ErrorDist::CenteredExponential => {
                let e: f64 = Exp1.sample(rng);
                sd * (e - 1.0)
            }
            ErrorDist::Laplace => {
                let e: f64 = Exp1.sample(rng);
                let b = sd / std::f64::consts::SQRT_2;
                if rng.random::<bool>() {
                    b * e
                } else {
                    -b * e
                }
            }
        })
        .collect()
}

fn solve_period(w: &DMatrix<f64>, rho: f64, rhs: Vec<f64>, period: usize) -> Result<DVector<f64>> {
    let rhs = DVector::from_vec(rhs);
    if rho == 0.0 || w.nrows() == 0 {
        return Ok(rhs);
    }
    let s = DMatrix::identity(w.nrows(), w.nrows()) - w * rho;
    let lu = s.lu();
    let out = lu.solve(&rhs).ok_or(Error::SingularS { period })?;
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::SingularS { period })
    }
}

/// Period-0 outcomes from a burn-in started at N(0, 1) draws, iterated on
/// the period-0 cross-section with weights and covariates frozen.
pub fn burn_in_initial(
    layout: &PanelLayout,
    network: &TimeVaryingNetwork,
    x0: &DMatrix<f64>,
    alpha: &DVector<f64>,
    theta: &Theta,
    burn_in: usize,
    dist: ErrorDist,
    rng: &mut StreamRng,
) -> Result<DVector<f64>> {
    let units = layout.index_set(0);
    let n0 = units.len();
    let mut y: Vec<f64> = (0..n0).map(|_| rng.sample(StandardNormal)).collect();
    let w0 = network.w(0);
    let w0_dense = to_dense(w0);
    let xb = x0 * DVector::from_column_slice(&theta.beta);
    for _ in 0..burn_in {
        let wy = spmv(w0, &y);
        let v = draw_errors(n0, dist, theta.sigma2, rng);
        let rhs = (0..n0)
            .map(|i| theta.lambda * wy[i] + theta.nu * y[i] + xb[i] + alpha[units[i]] + v[i])
            .collect();
        y = solve_period(&w0_dense, theta.rho, rhs, 0)?.data.into();
    }
    Ok(DVector::from_vec(y))
}

/// Outcomes for t = 1..=T from `y0` and given per-period errors.
pub fn evolve(
    layout: &PanelLayout,
    network: &TimeVaryingNetwork,
    x: &[DMatrix<f64>],
    alpha: &DVector<f64>,
    theta: &Theta,
    y0: &DVector<f64>,
    errors: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let ops = LagOperators::new(layout, network)?;
    let beta = DVector::from_column_slice(&theta.beta);
    let mut y = Vec::with_capacity(layout.n_periods() + 1);
    y.push(y0.clone());
    for t in 1..=layout.n_periods() {
        let lag = ops.apply(t, theta.lambda, theta.nu, y[t - 1].as_slice());
        let xb = &x[t] * &beta;
        let f = ops.newly_listed(t);
        let units = layout.index_set(t);
        let rhs = (0..units.len())
            .map(|i| lag[i] + theta.gamma * f[i] + xb[i] + alpha[units[i]] + errors[t][i])
            .collect();
        y.push(solve_period(&to_dense(network.w(t)), theta.rho, rhs, t)?);
    }
    Ok(y)
}

/// Full simulation: burn-in for period 0, then the recursion over 1..=T.
pub fn simulate(
    layout: &PanelLayout,
    network: &TimeVaryingNetwork,
    x: Vec<DMatrix<f64>>,
    alpha: &DVector<f64>,
    theta: &Theta,
    burn_in: usize,
    dist: ErrorDist,
    rng: &mut StreamRng,
) -> Result<PanelData> {
    let y0 = burn_in_initial(layout, network, &x[0], alpha, theta, burn_in, dist, rng)?;
    simulate_from_initial(layout, network, x, alpha, theta, y0, dist, rng)
}

/// Simulation over 1..=T with period-0 outcomes held fixed.
pub fn simulate_from_initial(
    layout: &PanelLayout,
    network: &TimeVaryingNetwork,
    x: Vec<DMatrix<f64>>,
    alpha: &DVector<f64>,
    theta: &Theta,
    y0: DVector<f64>,
    dist: ErrorDist,
    rng: &mut StreamRng,
) -> Result<PanelData> {
    let mut errors = vec![DVector::zeros(0)];
    for t in 1..=layout.n_periods() {
        errors.push(DVector::from_vec(draw_errors(
            layout.period_count(t),
            dist,
            theta.sigma2,
            rng,
        )));
    }
    let y = evolve(layout, network, &x, alpha, theta, &y0, &errors)?;
    PanelData::new(layout, y, x)
}

/// One generated dataset together with the objects that produced it.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub layout: PanelLayout,
    pub adjacency: Adjacency,
    pub network: TimeVaryingNetwork,
    pub data: PanelData,
    pub alpha: DVector<f64>,
}

/// Replication `replication` of the configured design on a rook grid,
/// using duration parameter `p`. Layout, covariates and errors come from
/// separate streams.
pub fn generate(config: &DgpConfig, p: f64, replication: u64) -> Result<SimulatedPanel> {
    config.validate()?;
    let (rows, cols) = config.grid_dims();
    let adjacency = Adjacency::rook(rows, cols);
    let mut layout_rng = stream(config.seed, replication, Purpose::Layout);
    let layout = draw_windows(config.n_units, config.n_periods, p, &mut layout_rng)?;
    let network = TimeVaryingNetwork::from_adjacency(&adjacency, &layout, false)?;
    let mut exo_rng = stream(config.seed, replication, Purpose::Exogenous);
    let (x, alpha) = gen_exogenous(&layout, config.theta0.k(), &mut exo_rng);
    let mut err_rng = stream(config.seed, replication, Purpose::Errors);
    let data = simulate(
        &layout,
        &network,
        x,
        &alpha,
        &config.theta0,
        config.burn_in,
        config.error_dist,
        &mut err_rng,
    )?;
    Ok(SimulatedPanel {
        layout,
        adjacency,
        network,
        data,
        alpha,
    })
}

/// The duration parameter for a config: explicit `p`, calibrated from
/// `target_up`, or 0 (balanced) when neither is given.
pub fn resolve_p(config: &DgpConfig) -> Result<f64> {
    match (config.p, config.target_up) {
        (Some(p), _) => Ok(p),
        (None, Some(up)) => {
            let mut rng = stream(config.seed, 0, Purpose::Calibration);
            calibrate_p(config.n_units, config.n_periods, up, &mut rng)
        }
        (None, None) => Ok(0.0),
    }
}
