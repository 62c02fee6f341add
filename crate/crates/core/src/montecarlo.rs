//! Replication harness: simulate, fit, aggregate.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{generate, resolve_p, DgpConfig};
use crate::error::{Error, Result};
use crate::estimator::{fit, FitOptions};
use crate::inference::z_critical;
use crate::panel::Theta;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCConfig {
    pub dgp: DgpConfig,
    pub replications: usize,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub fit: FitOptions,
    /// Coverage and standardized draws use robust standard errors.
    #[serde(default)]
    pub robust_se: bool,
}

fn default_levels() -> Vec<f64> {
    vec![0.95, 0.90]
}

impl MCConfig {
    pub fn new(dgp: DgpConfig, replications: usize) -> Self {
        Self {
            dgp,
            replications,
            levels: default_levels(),
            threads: None,
            fit: FitOptions::default(),
            robust_se: false,
        }
    }
}

/// Outcome of one simulate-fit cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub replication: u64,
    pub unbalancedness: f64,
    pub boundary: bool,
    pub error: Option<String>,
    pub raw: Vec<f64>,
    pub corrected: Vec<f64>,
    pub se: Vec<f64>,
}

impl Replication {
    pub fn failed(&self) -> bool {
        self.error.is_some() || self.boundary
    }
}

/// BIAS, SD, RMSE and coverage per parameter. NaN marks dropped parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub bias: Vec<f64>,
    pub sd: Vec<f64>,
    pub rmse: Vec<f64>,
    /// coverage[l][j]: share of intervals at `levels[l]` containing theta0_j.
    pub coverage: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub config: MCConfig,
    pub p: f64,
    pub param_names: Vec<String>,
    pub theta0: Vec<f64>,
    pub successes: usize,
    pub failures: usize,
    /// False when fewer than two replications succeeded; SD is then reported as 0.
    pub sd_defined: bool,
    pub mean_unbalancedness: f64,
    pub raw: VariantStats,
    pub corrected: VariantStats,
    /// (theta_bc_j - theta0_j) / SE_j per successful replication.
    pub standardized: Vec<Vec<f64>>,
    pub replications: Vec<Replication>,
}

fn run_one(config: &MCConfig, p: f64, rep: u64) -> Replication {
    let k = config.dgp.theta0.k();
    let nan = vec![f64::NAN; k + 5];
    let mut out = Replication {
        replication: rep,
        unbalancedness: f64::NAN,
        boundary: false,
        error: None,
        raw: nan.clone(),
        corrected: nan.clone(),
        se: nan,
    };
    let sim = match generate(&config.dgp, p, rep) {
        Ok(s) => s,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    out.unbalancedness = sim.layout.unbalancedness();
    let mut opts = config.fit.clone();
    opts.robust = config.robust_se;
    match fit(&sim.layout, &sim.network, &sim.data, &opts) {
        Ok(r) => {
            out.boundary = r.diagnostics.boundary;
            out.raw = r.theta_hat.to_vec();
            out.corrected = r.theta_bc.to_vec();
            out.se = r.se_full(config.robust_se);
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

fn aggregate(
    ok: &[&Replication],
    theta0: &[f64],
    levels: &[f64],
    pick: impl Fn(&Replication) -> &[f64],
) -> VariantStats {
    let p = theta0.len();
    let r = ok.len() as f64;
    let mut bias = vec![0.0; p];
    let mut sd = vec![0.0; p];
    let mut rmse = vec![0.0; p];
    let mut coverage = vec![vec![0.0; p]; levels.len()];
    for j in 0..p {
        let errs: Vec<f64> = ok.iter().map(|x| pick(x)[j] - theta0[j]).collect();
        let mean = errs.iter().sum::<f64>() / r;
        bias[j] = mean;
        sd[j] = if ok.len() > 1 {
            (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
        } else {
            0.0
        };
        rmse[j] = (errs.iter().map(|e| e * e).sum::<f64>() / r).sqrt();
        for (l, &level) in levels.iter().enumerate() {
            let z = z_critical(level);
            let hits = ok.iter().zip(&errs).filter(|(x, e)| e.abs() <= z * x.se[j]).count();
            coverage[l][j] = if errs.iter().any(|e| e.is_nan()) {
                f64::NAN
            } else {
                hits as f64 / r
            };
        }
    }
    VariantStats {
        bias,
        sd,
        rmse,
        coverage,
    }
}

pub fn run_mc(config: &MCConfig) -> Result<MCReport> {
    if config.replications == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    config.dgp.validate()?;
    let p = resolve_p(&config.dgp)?;
    let reps = config.replications as u64;
    let work = || -> Vec<Replication> { (0..reps).into_par_iter().map(|r| run_one(config, p, r)).collect() };
    let replications = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    };
    let ok: Vec<&Replication> = replications.iter().filter(|r| !r.failed()).collect();
    let failures = replications.len() - ok.len();
    if failures as f64 > 0.05 * replications.len() as f64 || ok.is_empty() {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: replications.len(),
        });
    }
    let theta0 = config.dgp.theta0.to_vec();
    let raw = aggregate(&ok, &theta0, &config.levels, |r| &r.raw);
    let corrected = aggregate(&ok, &theta0, &config.levels, |r| &r.corrected);
    let standardized = ok
        .iter()
        .map(|r| {
            (0..theta0.len())
                .map(|j| (r.corrected[j] - theta0[j]) / r.se[j])
                .collect()
        })
        .collect();
    let mean_unbalancedness = ok.iter().map(|r| r.unbalancedness).sum::<f64>() / ok.len() as f64;
    Ok(MCReport {
        config: config.clone(),
        p,
        param_names: Theta::param_names(config.dgp.theta0.k()),
        theta0,
        successes: ok.len(),
        failures,
        sd_defined: ok.len() > 1,
        mean_unbalancedness,
        raw,
        corrected,
        standardized,
        replications,
    })
}

/// Ratios raw / corrected of |BIAS| and RMSE per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub param_names: Vec<String>,
    pub bias_ratio: Vec<f64>,
    pub rmse_ratio: Vec<f64>,
}

pub fn compare_correction(report: &MCReport) -> CorrectionSummary {
    let ratio = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x.abs() / y.abs()).collect();
    CorrectionSummary {
        param_names: report.param_names.clone(),
        bias_ratio: ratio(&report.raw.bias, &report.corrected.bias),
        rmse_ratio: ratio(&report.raw.rmse, &report.corrected.rmse),
    }
}

/// Sample mean and variance of each standardized column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedSummary {
    pub param_names: Vec<String>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn standardized_summary(report: &MCReport) -> StandardizedSummary {
    let p = report.param_names.len();
    let r = report.standardized.len() as f64;
    let mut mean = vec![0.0; p];
    let mut variance = vec![0.0; p];
    for j in 0..p {
        let col: Vec<f64> = report.standardized.iter().map(|row| row[j]).collect();
        mean[j] = col.iter().sum::<f64>() / r;
        variance[j] = if r > 1.0 {
            col.iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / (r - 1.0)
        } else {
            0.0
        };
    }
    StandardizedSummary {
        param_names: report.param_names.clone(),
        mean,
        variance,
    }
}

/// Writes the standardized draws as CSV, one column per parameter.
pub fn export_standardized(report: &MCReport, path: &Path) -> Result<StandardizedSummary> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&report.param_names)?;
    for row in &report.standardized {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(standardized_summary(report))
}

/// Aligned text table: BIAS/SD/RMSE/CP rows before and after correction.
pub fn text_table(report: &MCReport) -> String {
    let mut s = String::new();
    let d = &report.config.dgp;
    let _ = writeln!(
        s,
        "N = {}, T = {}, mean UP = {:.4}, R = {} ({} failed), errors = {:?}",
        d.n_units,
        d.n_periods,
        report.mean_unbalancedness,
        report.successes + report.failures,
        report.failures,
        d.error_dist
    );
    let _ = write!(s, "{:<12}", "");
    for name in &report.param_names {
        let _ = write!(s, "{name:>10}");
    }
    s.push('\n');
    let _ = write!(s, "{:<12}", "true");
    for v in &report.theta0 {
        let _ = write!(s, "{v:>10.4}");
    }
    s.push('\n');
    for (title, stats) in [("raw", &report.raw), ("corrected", &report.corrected)] {
        let _ = writeln!(s, "[{title}]");
        let mut rows: Vec<(String, &Vec<f64>)> = vec![
            ("BIAS".into(), &stats.bias),
            ("SD".into(), &stats.sd),
            ("RMSE".into(), &stats.rmse),
        ];
        for (l, level) in report.config.levels.iter().enumerate() {
            rows.push((format!("{:.0}%CP", level * 100.0), &stats.coverage[l]));
        }
        for (label, vals) in rows {
            let _ = write!(s, "{label:<12}");
            for v in vals {
                if v.is_nan() {
                    let _ = write!(s, "{:>10}", "-");
                } else {
                    let _ = write!(s, "{v:>10.4}");
                }
            }
            s.push('\n');
        }
    }
    if !report.sd_defined {
        s.push_str("note: SD undefined with a single replication; reported as 0\n");
    }
    s
}
