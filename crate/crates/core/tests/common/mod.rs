//! Small random panels and dense reference implementations built directly
//! from selection, dummy and projection matrices.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use netpanel::dgp::{gen_exogenous, generate, simulate, DgpConfig, ErrorDist};
use netpanel::estimator::{fit, FitOptions};
use netpanel::likelihood::{ConcentratedModel, LikelihoodOptions};
use netpanel::rng::{stream, Purpose};
use netpanel::{Adjacency, PanelData, PanelLayout, Theta, TimeVaryingNetwork};
use rand::Rng;

pub struct Instance {
    pub layout: PanelLayout,
    pub adjacency: Adjacency,
    pub lag_self: bool,
    pub network: TimeVaryingNetwork,
    pub data: PanelData,
    pub theta0: Theta,
}

/// Random windows (unit 0 always present, unit 1 entering at period 1), a
/// random symmetric graph and data simulated from the model.
pub fn random_instance(n_units: usize, n_periods: usize, seed: u64, lag_self: bool) -> Instance {
    let mut rng = stream(seed, 0, Purpose::Layout);
    let mut windows = Vec::with_capacity(n_units);
    for u in 0..n_units {
        let w = match u {
            0 => (0, n_periods),
            1 => (1, n_periods),
            _ => {
                let first = if rng.random::<f64>() < 0.5 {
                    0
                } else {
                    rng.random_range(0..n_periods)
                };
                let last = if rng.random::<f64>() < 0.5 {
                    n_periods
                } else {
                    rng.random_range(first.max(1)..=n_periods)
                };
                (first, last)
            }
        };
        windows.push(w);
    }
    let layout = PanelLayout::from_windows(windows, n_periods).unwrap();
    let mut edges = Vec::new();
    for i in 0..n_units {
        for j in i + 1..n_units {
            if rng.random::<f64>() < 0.6 {
                edges.push((i, j));
            }
        }
    }
    let adjacency = Adjacency::from_edges(n_units, edges).unwrap();
    let network = TimeVaryingNetwork::from_adjacency(&adjacency, &layout, lag_self).unwrap();
    let theta0 = Theta::new(0.4, 0.2, 0.1, 1.0, vec![1.0], 1.0);
    let mut exo = stream(seed, 0, Purpose::Exogenous);
    let (x, alpha) = gen_exogenous(&layout, 1, &mut exo);
    let mut err = stream(seed, 0, Purpose::Errors);
    let data = simulate(&layout, &network, x, &alpha, &theta0, 10, ErrorDist::Normal, &mut err).unwrap();
    Instance {
        layout,
        adjacency,
        lag_self,
        network,
        data,
        theta0,
    }
}

/// Every piece of the model as an explicit dense matrix over the stacked
/// estimation sample.
pub struct DenseModel {
    pub n: usize,
    pub n_units: usize,
    pub y: DVector<f64>,
    /// Stacked W_t y_t.
    pub w_blocks: Vec<DMatrix<f64>>,
    /// Block-diagonal W over periods 1..=T.
    pub w: DMatrix<f64>,
    /// Columns: network lag, own lag, listing indicator, covariates.
    pub z: DMatrix<f64>,
    /// n x N unit dummies.
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl DenseModel {
    pub fn new(inst: &Instance) -> Self {
        let layout = &inst.layout;
        let n_units = layout.n_units();
        let t_max = layout.n_periods();
        let k = inst.data.k();
        let adj = DMatrix::from_fn(
            n_units,
            n_units,
            |i, j| {
                if inst.adjacency.has_edge(i, j) {
                    1.0
                } else {
                    0.0
                }
            },
        );
        let value = |t: usize, u: usize| layout.local_index(t, u).map(|i| inst.data.y[t][i]);
        let mut rows: Vec<(usize, usize)> = Vec::new();
        for t in 1..=t_max {
            for u in 0..n_units {
                if layout.is_observed(u, t) {
                    rows.push((t, u));
                }
            }
        }
        let n = rows.len();
        let y = DVector::from_iterator(n, rows.iter().map(|&(t, u)| value(t, u).unwrap()));
        let mut z = DMatrix::zeros(n, k + 3);
        let mut p = DMatrix::zeros(n, n_units);
        for (r, &(t, u)) in rows.iter().enumerate() {
            p[(r, u)] = 1.0;
            match value(t - 1, u) {
                Some(prev) => {
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for v in 0..n_units {
                        let linked = adj[(u, v)] == 1.0 || (inst.lag_self && v == u);
                        if let (true, Some(yv)) = (linked, value(t - 1, v)) {
                            sum += yv;
                            count += 1.0;
                        }
                    }
                    z[(r, 0)] = if count > 0.0 { sum / count } else { 0.0 };
                    z[(r, 1)] = prev;
                }
                None => z[(r, 2)] = 1.0,
            }
            let i = layout.local_index(t, u).unwrap();
            for j in 0..k {
                z[(r, 3 + j)] = inst.data.x[t][(i, j)];
            }
        }
        let mut w = DMatrix::zeros(n, n);
        let mut w_blocks = Vec::new();
        for t in 1..=t_max {
            let idx: Vec<usize> = (0..n).filter(|&r| rows[r].0 == t).collect();
            let mut block = DMatrix::zeros(idx.len(), idx.len());
            for (a, &ra) in idx.iter().enumerate() {
                let deg: f64 = idx.iter().map(|&rb| adj[(rows[ra].1, rows[rb].1)]).sum();
                for (b, &rb) in idx.iter().enumerate() {
                    if deg > 0.0 {
                        block[(a, b)] = adj[(rows[ra].1, rows[rb].1)] / deg;
                        w[(ra, rb)] = block[(a, b)];
                    }
                }
            }
            w_blocks.push(block);
        }
        // Q = I - P (P'P)^+ P'; units without rows have zero columns.
        let ptp = p.transpose() * &p;
        let ptp_pinv = DMatrix::from_fn(n_units, n_units, |i, j| {
            if i == j && ptp[(i, i)] > 0.0 {
                1.0 / ptp[(i, i)]
            } else {
                0.0
            }
        });
        let q = DMatrix::identity(n, n) - &p * ptp_pinv * p.transpose();
        Self {
            n,
            n_units,
            y,
            w_blocks,
            w,
            z,
            p,
            q,
        }
    }

    pub fn s(&self, rho: f64) -> DMatrix<f64> {
        DMatrix::identity(self.n, self.n) - &self.w * rho
    }

    pub fn log_det_s(&self, rho: f64) -> f64 {
        self.s(rho).lu().determinant().abs().ln()
    }

    /// Returns (delta_hat, sigma2_hat, Lcc) at rho.
    pub fn concentrated(&self, rho: f64) -> (DVector<f64>, f64, f64) {
        let sy = self.s(rho) * &self.y;
        let qz = &self.q * &self.z;
        let delta = (qz.transpose() * &qz).try_inverse().unwrap() * qz.transpose() * &sy;
        let v = &self.q * (&sy - &self.z * &delta);
        let n = self.n as f64;
        let sigma2 = v.norm_squared() / n;
        let lcc = -0.5 * n * ((2.0 * PI).ln() + 1.0) - 0.5 * n * sigma2.ln() + self.log_det_s(rho);
        (delta, sigma2, lcc)
    }

    /// Fixed-effect-free log-likelihood at (rho, delta, sigma2).
    pub fn loglik(&self, rho: f64, delta: &DVector<f64>, sigma2: f64) -> f64 {
        let n = self.n as f64;
        let v = &self.q * (self.s(rho) * &self.y - &self.z * delta);
        -0.5 * n * (2.0 * PI).ln() - 0.5 * n * sigma2.ln() + self.log_det_s(rho) - v.norm_squared() / (2.0 * sigma2)
    }

    /// Gradient of `loglik` in (rho, delta', sigma2) order.
    pub fn score(&self, rho: f64, delta: &DVector<f64>, sigma2: f64) -> DVector<f64> {
        let s = self.s(rho);
        let v = &self.q * (&s * &self.y - &self.z * delta);
        let g = &self.w * s.try_inverse().unwrap();
        let mut out = vec![-g.trace() + (&self.q * &self.w * &self.y).dot(&v) / sigma2];
        out.extend((self.z.transpose() * &self.q * &v / sigma2).iter());
        out.push(-0.5 * self.n as f64 / sigma2 + v.norm_squared() / (2.0 * sigma2 * sigma2));
        DVector::from_vec(out)
    }

    /// (P'P)^{-1} P'(S y - Z delta) for units with rows.
    pub fn alpha(&self, rho: f64, delta: &DVector<f64>) -> Vec<Option<f64>> {
        let r = self.s(rho) * &self.y - &self.z * delta;
        (0..self.n_units)
            .map(|u| {
                let count = self.p.column(u).sum();
                (count > 0.0).then(|| self.p.column(u).dot(&r) / count)
            })
            .collect()
    }

    /// Joint log-likelihood with explicit fixed effects.
    pub fn joint_loglik(&self, rho: f64, delta: &DVector<f64>, alpha: &DVector<f64>, sigma2: f64) -> f64 {
        let n = self.n as f64;
        let v = self.s(rho) * &self.y - &self.z * delta - &self.p * alpha;
        -0.5 * n * (2.0 * PI).ln() - 0.5 * n * sigma2.ln() + self.log_det_s(rho) - v.norm_squared() / (2.0 * sigma2)
    }

    /// Gradient of `joint_loglik` in (rho, delta', alpha', sigma2) order.
    pub fn joint_score(&self, rho: f64, delta: &DVector<f64>, alpha: &DVector<f64>, sigma2: f64) -> DVector<f64> {
        let s = self.s(rho);
        let v = &s * &self.y - &self.z * delta - &self.p * alpha;
        let g = &self.w * s.try_inverse().unwrap();
        let mut out = vec![-g.trace() + (&self.w * &self.y).dot(&v) / sigma2];
        out.extend((self.z.transpose() * &v / sigma2).iter());
        out.extend((self.p.transpose() * &v / sigma2).iter());
        out.push(-0.5 * self.n as f64 / sigma2 + v.norm_squared() / (2.0 * sigma2 * sigma2));
        DVector::from_vec(out)
    }
}

/// Maximizes a smooth function by BFGS with a backtracking line search.
/// Returns the maximizer and the final gradient norm.
pub fn bfgs_maximize(
    f: impl Fn(&DVector<f64>) -> Option<f64>,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    start: DVector<f64>,
    max_iter: usize,
) -> (DVector<f64>, f64) {
    let p = start.len();
    let mut x = start;
    let mut fx = f(&x).expect("finite objective at start");
    let mut g = grad(&x);
    let mut h = DMatrix::<f64>::identity(p, p);
    for _ in 0..max_iter {
        if g.amax() < 1e-11 {
            break;
        }
        let mut dir = &h * &g;
        if dir.dot(&g) <= 0.0 {
            h = DMatrix::identity(p, p);
            dir = g.clone();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &dir * step;
            if let Some(fc) = f(&cand) {
                if fc >= fx + 1e-4 * step * dir.dot(&g) {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else { break };
        let g_new = grad(&x_new);
        let s = &x_new - &x;
        // maximizing: curvature pair uses the negated gradient change
        let yv = &g - &g_new;
        let sy = s.dot(&yv);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(p, p);
            let a = &i - &s * yv.transpose() * rho;
            let b = &i - &yv * s.transpose() * rho;
            h = a * &h * b + &s * s.transpose() * rho;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    let norm = g.amax();
    (x, norm)
}

/// Active coordinates of a full (rho, delta', sigma2) vector.
fn active(model: &ConcentratedModel, full: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        model.params().dim(),
        model.params().full_indices().into_iter().map(|i| full[i]),
    )
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Largest scaled discrepancy between the library and the dense construction
/// on one N = 5, T = 3 instance: Lcc, loglik, score, alpha and Q.
pub fn dense_oracle_error(seed: u64) -> f64 {
    let inst = random_instance(5, 3, seed, seed % 2 == 1);
    let dense = DenseModel::new(&inst);
    let model = ConcentratedModel::new(&inst.layout, &inst.network, &inst.data, LikelihoodOptions::default()).unwrap();
    assert_eq!(
        model.params().dim(),
        inst.theta0.to_vec().len(),
        "all parameters active"
    );
    let mut worst: f64 = 0.0;
    for rho in [-0.7, -0.2, 0.0, 0.35, 0.8] {
        let (delta, sigma2, lcc) = dense.concentrated(rho);
        let prof = model.profile(rho).unwrap();
        worst = worst.max(rel(prof.lcc, lcc)).max(rel(prof.sigma2, sigma2));
        for j in 0..delta.len() {
            worst = worst.max(rel(prof.delta[j], delta[j]));
        }
    }
    let mut rng = stream(seed, 1, Purpose::Bootstrap);
    for _ in 0..5 {
        let full: Vec<f64> = inst
            .theta0
            .to_vec()
            .iter()
            .map(|v| v + 0.2 * (rng.random::<f64>() - 0.5))
            .collect();
        let k = full.len() - 2;
        let delta = DVector::from_column_slice(&full[1..=k]);
        let theta = active(&model, &full);
        worst = worst.max(rel(
            model.loglik(&theta).unwrap(),
            dense.loglik(full[0], &delta, full[k + 1]),
        ));
        let s_lib = model.score(&theta).unwrap();
        let s_dense = dense.score(full[0], &delta, full[k + 1]);
        for j in 0..s_lib.len() {
            worst = worst.max(rel(s_lib[j], s_dense[j]));
        }
        let a_lib = model.recover_alpha(full[0], &delta);
        let a_dense = dense.alpha(full[0], &delta);
        for (a, b) in a_lib.iter().zip(&a_dense) {
            match (a, b) {
                (Some(a), Some(b)) => worst = worst.max(rel(*a, *b)),
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
        let v = DVector::from_fn(dense.n, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let qv = &dense.q * &v;
        let lib = inst.layout.within_project(&v).unwrap();
        worst = worst.max((lib - qv).amax());
    }
    worst
}

/// Joint maximization over (theta, alpha) against the concentrated fit on an
/// N = 4, T = 3 instance. Returns (max theta gap, max alpha gap, gradient norm).
pub fn joint_vs_concentrated(seed: u64) -> (f64, f64, f64) {
    let inst = random_instance(4, 3, seed, false);
    let dense = DenseModel::new(&inst);
    let opts = FitOptions {
        bias_correction: false,
        ..FitOptions::default()
    };
    let fitted = fit(&inst.layout, &inst.network, &inst.data, &opts).unwrap();
    let kd = dense.z.ncols();
    let nu = dense.n_units;
    let bound = 0.995;
    // x = (atanh(rho / bound), delta, alpha, ln sigma2)
    let unpack = |x: &DVector<f64>| {
        let rho = bound * x[0].tanh();
        let delta = x.rows(1, kd).into_owned();
        let alpha = x.rows(1 + kd, nu).into_owned();
        (rho, delta, alpha, x[1 + kd + nu].exp())
    };
    let f = |x: &DVector<f64>| {
        let (rho, d, a, s2) = unpack(x);
        let v = dense.joint_loglik(rho, &d, &a, s2);
        v.is_finite().then_some(v)
    };
    let g = |x: &DVector<f64>| {
        let (rho, d, a, s2) = unpack(x);
        let mut gr = dense.joint_score(rho, &d, &a, s2);
        gr[0] *= bound * (1.0 - x[0].tanh().powi(2));
        gr[1 + kd + nu] *= s2;
        gr
    };
    let y_mean = dense.y.mean();
    let mut best: Option<(f64, DVector<f64>, f64)> = None;
    for start_rho in [-0.5, 0.0, 0.5] {
        let mut x0 = DVector::zeros(kd + nu + 2);
        x0[0] = (start_rho / bound as f64).atanh();
        for u in 0..nu {
            x0[1 + kd + u] = y_mean;
        }
        let (x, gn) = bfgs_maximize(&f, &g, x0, 5000);
        let fx = f(&x).unwrap();
        if best.as_ref().is_none_or(|b| fx > b.0) {
            best = Some((fx, x, gn));
        }
    }
    let (_, x, gn) = best.unwrap();
    let (rho, delta, alpha, sigma2) = unpack(&x);
    let mut joint = vec![rho];
    joint.extend(delta.iter());
    joint.push(sigma2);
    let theta_gap = fitted
        .theta_hat
        .to_vec()
        .iter()
        .zip(&joint)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let alpha_gap = fitted
        .alpha_hat
        .iter()
        .zip(alpha.iter())
        .map(|(a, b)| (a.unwrap() - b).abs())
        .fold(0.0, f64::max);
    (theta_gap, alpha_gap, gn)
}

/// Worst relative error between the analytic score and central differences
/// of the concentrated log-likelihood at `points` random points near theta0.
pub fn score_fd_error(seed: u64, points: usize) -> f64 {
    let mut dgp = DgpConfig::new(36, 6, Theta::new(0.5, 0.2, 0.1, 1.0, vec![1.0], 1.0));
    dgp.p = Some(2.0);
    dgp.seed = seed;
    let sim = generate(&dgp, 2.0, 0).unwrap();
    let model = ConcentratedModel::new(&sim.layout, &sim.network, &sim.data, LikelihoodOptions::default()).unwrap();
    let mut rng = stream(seed, 2, Purpose::Bootstrap);
    let base = dgp.theta0.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let full: Vec<f64> = base.iter().map(|v| v + 0.1 * (rng.random::<f64>() - 0.5)).collect();
        let theta = active(&model, &full);
        let analytic = model.score(&theta).unwrap();
        for j in 0..theta.len() {
            let h = 1e-5 * theta[j].abs().max(1.0);
            let mut up = theta.clone();
            up[j] += h;
            let mut dn = theta.clone();
            dn[j] -= h;
            let fd = (model.loglik(&up).unwrap() - model.loglik(&dn).unwrap()) / (2.0 * h);
            worst = worst.max((analytic[j] - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}
