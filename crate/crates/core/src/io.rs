//! Panel CSV ingestion, run configuration and artifact writing.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dgp::{generate, resolve_p, DgpConfig};
use crate::error::{Error, Result};
use crate::estimator::{fit, EstimationResult, FitOptions};
use crate::inference::{p_value, stars};
use crate::montecarlo::{compare_correction, export_standardized, run_mc, text_table, MCConfig};
use crate::panel::{PanelData, PanelLayout, Theta};
use crate::weights::{check_spectral_condition, Adjacency, SpectralReport, TimeVaryingNetwork};

/// Column names of a long-format panel file: one row per (unit, period).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelCsvSchema {
    pub unit_id: String,
    pub period: String,
    pub y: String,
    pub covariates: Vec<String>,
    pub lat: Option<String>,
    pub lon: Option<String>,
    /// Replace y by ln(y).
    pub log_y: bool,
}

impl Default for PanelCsvSchema {
    fn default() -> Self {
        Self {
            unit_id: "unit_id".into(),
            period: "period".into(),
            y: "y".into(),
            covariates: Vec::new(),
            lat: None,
            lon: None,
            log_y: false,
        }
    }
}

impl PanelCsvSchema {
    /// The schema written by [`write_panel_csv`] for `k` covariates.
    pub fn generated(k: usize, with_coords: bool) -> Self {
        Self {
            covariates: (1..=k).map(|j| format!("x{j}")).collect(),
            lat: with_coords.then(|| "lat".into()),
            lon: with_coords.then(|| "lon".into()),
            ..Self::default()
        }
    }
}

/// A panel read from disk. Units are ordered by id (numerically when every
/// id is an integer); period `t` corresponds to the raw value `periods[t]`.
#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub layout: PanelLayout,
    pub data: PanelData,
    pub unit_ids: Vec<String>,
    pub periods: Vec<i64>,
    pub coords: Option<Vec<(f64, f64)>>,
}

struct Row {
    unit: String,
    period: i64,
    y: f64,
    x: Vec<f64>,
    coord: Option<(f64, f64)>,
}

fn schema_err(column: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        column: column.to_string(),
        message: message.into(),
    }
}

fn parse_f64(column: &str, line: usize, s: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(schema_err(column, format!("line {line}: `{s}` is not a finite number"))),
    }
}

pub fn load_panel_csv(path: &Path, schema: &PanelCsvSchema) -> Result<LoadedPanel> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| schema_err(name, format!("missing from header of {}", path.display())))
    };
    let unit_col = col(&schema.unit_id)?;
    let period_col = col(&schema.period)?;
    let y_col = col(&schema.y)?;
    let x_cols = schema.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let coord_cols = match (&schema.lat, &schema.lon) {
        (Some(lat), Some(lon)) => Some((col(lat)?, col(lon)?)),
        (None, None) => None,
        _ => return Err(schema_err("lat/lon", "both or neither must be given")),
    };

    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let period = field(period_col).parse::<i64>().map_err(|_| {
            schema_err(
                &schema.period,
                format!("line {line}: `{}` is not an integer", field(period_col)),
            )
        })?;
        let mut y = parse_f64(&schema.y, line, field(y_col))?;
        if schema.log_y {
            if y <= 0.0 {
                return Err(schema_err(
                    &schema.y,
                    format!("line {line}: log of non-positive value {y}"),
                ));
            }
            y = y.ln();
        }
        let x = x_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| parse_f64(name, line, field(c)))
            .collect::<Result<Vec<_>>>()?;
        let coord = match coord_cols {
            Some((a, b)) => Some((
                parse_f64(schema.lat.as_deref().unwrap_or("lat"), line, field(a))?,
                parse_f64(schema.lon.as_deref().unwrap_or("lon"), line, field(b))?,
            )),
            None => None,
        };
        let unit = field(unit_col).to_string();
        if unit.is_empty() {
            return Err(schema_err(&schema.unit_id, format!("line {line}: empty unit id")));
        }
        rows.push(Row {
            unit,
            period,
            y,
            x,
            coord,
        });
    }
    if rows.is_empty() {
        return Err(schema_err(&schema.unit_id, "file has no data rows"));
    }

    let mut unit_ids: Vec<String> = rows
        .iter()
        .map(|r| r.unit.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if unit_ids.iter().all(|u| u.parse::<i64>().is_ok()) {
        unit_ids.sort_by_key(|u| u.parse::<i64>().unwrap());
    }
    let unit_index: HashMap<&str, usize> = unit_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let periods: Vec<i64> = rows
        .iter()
        .map(|r| r.period)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let period_index: HashMap<i64, usize> = periods.iter().enumerate().map(|(t, &p)| (p, t)).collect();

    let mut cells: HashMap<(usize, usize), usize> = HashMap::with_capacity(rows.len());
    let mut unit_periods = vec![Vec::new(); unit_ids.len()];
    for (r, row) in rows.iter().enumerate() {
        let u = unit_index[row.unit.as_str()];
        let t = period_index[&row.period];
        if cells.insert((u, t), r).is_some() {
            return Err(Error::DuplicateCell {
                unit: row.unit.clone(),
                period: row.period,
            });
        }
        unit_periods[u].push(t);
    }
    let mut windows = Vec::with_capacity(unit_ids.len());
    for (unit, ps) in unit_periods.iter_mut().enumerate() {
        ps.sort_unstable();
        let (first, last) = (ps[0], ps[ps.len() - 1]);
        if last - first + 1 != ps.len() {
            return Err(Error::NonContiguousWindow {
                unit,
                periods: ps.clone(),
            });
        }
        windows.push((first, last));
    }
    if periods.len() < 2 {
        return Err(schema_err(&schema.period, "need at least two distinct periods"));
    }
    let layout = PanelLayout::from_windows(windows, periods.len() - 1)?;

    let k = schema.covariates.len();
    let mut y = Vec::with_capacity(periods.len());
    let mut x = Vec::with_capacity(periods.len());
    for t in 0..periods.len() {
        let set = layout.index_set(t);
        y.push(DVector::from_iterator(
            set.len(),
            set.iter().map(|&u| rows[cells[&(u, t)]].y),
        ));
        x.push(DMatrix::from_fn(set.len(), k, |i, j| rows[cells[&(set[i], t)]].x[j]));
    }
    let data = PanelData::new(&layout, y, x)?;
    let coords = coord_cols.map(|_| {
        (0..unit_ids.len())
            .map(|u| rows[cells[&(u, layout.window(u).0)]].coord.unwrap())
            .collect()
    });
    Ok(LoadedPanel {
        layout,
        data,
        unit_ids,
        periods,
        coords,
    })
}

/// Writes `unit_id, period, y, x1..xk[, lat, lon]` rows, unit by unit. Unit ids
/// are `0..N` and periods `0..=T`; floats use shortest round-trip formatting.
pub fn write_panel_csv(
    path: &Path,
    layout: &PanelLayout,
    data: &PanelData,
    coords: Option<&[(f64, f64)]>,
) -> Result<PanelCsvSchema> {
    let k = data.k();
    let schema = PanelCsvSchema::generated(k, coords.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![schema.unit_id.clone(), schema.period.clone(), schema.y.clone()];
    header.extend(schema.covariates.iter().cloned());
    if coords.is_some() {
        header.extend(["lat".to_string(), "lon".to_string()]);
    }
    w.write_record(&header)?;
    for u in 0..layout.n_units() {
        let (first, last) = layout.window(u);
        for t in first..=last {
            let i = layout.local_index(t, u).expect("unit observed inside its window");
            let mut rec = vec![u.to_string(), t.to_string(), data.y[t][i].to_string()];
            rec.extend((0..k).map(|j| data.x[t][(i, j)].to_string()));
            if let Some(c) = coords {
                rec.push(c[u].0.to_string());
                rec.push(c[u].1.to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(schema)
}

/// Per-period mean of `values` over observed neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborAverage {
    pub values: Vec<DVector<f64>>,
    /// Observations with no observed neighbor; they keep their own value.
    pub isolated: usize,
}

pub fn neighbor_average(layout: &PanelLayout, adjacency: &Adjacency, values: &[DVector<f64>]) -> NeighborAverage {
    let mut isolated = 0;
    let out = (0..=layout.n_periods())
        .map(|t| {
            let set = layout.index_set(t);
            DVector::from_iterator(
                set.len(),
                set.iter().enumerate().map(|(i, &u)| {
                    let vals: Vec<f64> = adjacency
                        .neighbors(u)
                        .iter()
                        .filter_map(|&v| layout.local_index(t, v).map(|j| values[t][j]))
                        .collect();
                    if vals.is_empty() {
                        isolated += 1;
                        values[t][i]
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    }
                }),
            )
        })
        .collect();
    NeighborAverage { values: out, isolated }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulate,
    Estimate,
    Montecarlo,
    Weights,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Estimate => "estimate",
            Mode::Montecarlo => "montecarlo",
            Mode::Weights => "weights",
        }
    }
}

/// How to build the adjacency. Exactly one source should be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSpec {
    pub rook: Option<(usize, usize)>,
    pub distance_km: Option<f64>,
    pub edge_list: Option<PathBuf>,
    /// Link each unit to its own lagged value in the lag weights. Defaults
    /// to false for rook grids and true otherwise.
    pub lag_self: Option<bool>,
}

impl WeightSpec {
    fn lag_self(&self) -> bool {
        self.lag_self.unwrap_or(self.rook.is_none())
    }

    fn build(&self, n_units: usize, coords: Option<&[(f64, f64)]>) -> Result<Adjacency> {
        let adj = match (self.rook, self.distance_km, &self.edge_list) {
            (Some((r, c)), None, None) => Adjacency::rook(r, c),
            (None, Some(d), None) => {
                let coords = coords
                    .ok_or_else(|| Error::Config("distance-band weights need lat and lon columns in [data]".into()))?;
                Adjacency::distance_band(coords, d)?
            }
            (None, None, Some(path)) => Adjacency::read_edge_list(path, Some(n_units))?,
            (None, None, None) => {
                return Err(Error::Config(
                    "no weight specification: set one of weights.rook, weights.distance_km, weights.edge_list".into(),
                ))
            }
            _ => {
                return Err(Error::Config(
                    "set only one of weights.rook, weights.distance_km, weights.edge_list".into(),
                ))
            }
        };
        if adj.n() != n_units {
            return Err(Error::Config(format!(
                "weights cover {} units but the panel has {n_units}",
                adj.n()
            )));
        }
        Ok(adj)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(flatten)]
    pub schema: PanelCsvSchema,
    /// Covariates whose neighbor average is appended as an extra covariate.
    #[serde(default)]
    pub neighbor_average: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSettings {
    pub replications: usize,
    pub threads: Option<usize>,
    pub levels: Vec<f64>,
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            replications: 300,
            threads: None,
            levels: vec![0.95, 0.90],
        }
    }
}

/// Everything a run needs; read from TOML, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub robust: bool,
    pub rho_bounds: Option<(f64, f64)>,
    pub weights: WeightSpec,
    pub dgp: Option<DgpConfig>,
    pub montecarlo: McSettings,
    pub data: Option<DataConfig>,
    pub fit: FitOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seed: None,
            out: PathBuf::from("out"),
            robust: false,
            rho_bounds: None,
            weights: WeightSpec::default(),
            dgp: None,
            montecarlo: McSettings::default(),
            data: None,
            fit: FitOptions::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub rho_bounds: Option<(f64, f64)>,
    pub robust: bool,
    pub distance_km: Option<f64>,
    pub rook: Option<(usize, usize)>,
    pub reps: Option<usize>,
    pub out: Option<PathBuf>,
    pub log_y: bool,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.mode.is_some() {
            self.mode = o.mode;
        }
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.rho_bounds.is_some() {
            self.rho_bounds = o.rho_bounds;
        }
        self.robust |= o.robust;
        if let Some(d) = o.distance_km {
            self.weights.distance_km = Some(d);
            self.weights.rook = None;
            self.weights.edge_list = None;
        }
        if let Some(r) = o.rook {
            self.weights.rook = Some(r);
            self.weights.distance_km = None;
            self.weights.edge_list = None;
        }
        if let Some(r) = o.reps {
            self.montecarlo.replications = r;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if o.log_y {
            if let Some(d) = &mut self.data {
                d.schema.log_y = true;
            }
        }
    }

    fn fit_options(&self) -> FitOptions {
        let mut f = self.fit.clone();
        f.robust |= self.robust;
        if let Some(b) = self.rho_bounds {
            f.likelihood.rho_bounds = b;
        }
        f
    }

    fn dgp(&self) -> Result<DgpConfig> {
        let mut d = self
            .dgp
            .clone()
            .ok_or_else(|| Error::Config("this mode needs a [dgp] section".into()))?;
        if let Some(s) = self.seed {
            d.seed = s;
        }
        if let Some(r) = self.weights.rook {
            d.grid = Some(r);
        }
        Ok(d)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Enough to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub mode: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub config: RunConfig,
    /// Raw period value for each consecutive period index, when data were read.
    pub period_mapping: Option<Vec<i64>>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct SimulationSummary {
    p: f64,
    seed: u64,
    n_units: usize,
    n_periods: usize,
    n: usize,
    unbalancedness: f64,
    coverage: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EstimateOutput<'a> {
    unit_ids: &'a [String],
    periods: &'a [i64],
    neighbor_average_isolated: Option<usize>,
    result: &'a EstimationResult,
}

#[derive(Debug, Clone, Serialize)]
struct WeightsSummary {
    n_units: usize,
    n_edges: usize,
    mean_degree: f64,
    isolated_units: usize,
    lag_self: bool,
    spectral: SpectralReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Coefficient table with two-sided normal p-values and significance stars.
pub fn estimate_report(result: &EstimationResult, robust: bool) -> String {
    let d = &result.diagnostics;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "N = {}, T = {}, n = {}, UP = {:.4}, N/T^3 = {:.4}, logLik = {:.6}",
        d.n_units, d.n_periods, d.n, d.unbalancedness, d.n_over_t3, result.loglik
    );
    if !d.dropped.is_empty() {
        let _ = writeln!(s, "dropped: {}", d.dropped.join(", "));
    }
    if d.boundary {
        s.push_str("warning: rho at the search boundary\n");
    }
    let _ = writeln!(
        s,
        "{:<10}{:>12}{:>12}{:>12}{:>10}{:>10}",
        "param", "estimate", "corrected", "se", "z", "p"
    );
    let names = Theta::param_names(result.theta_hat.k());
    let raw = result.theta_hat.to_vec();
    let bc = result.theta_bc.to_vec();
    let se = result.se_full(robust);
    for (j, name) in names.iter().enumerate() {
        if se[j].is_nan() {
            let _ = writeln!(s, "{name:<10}{:>12}{:>12}{:>12}", "-", "-", "dropped");
            continue;
        }
        let z = bc[j] / se[j];
        let p = p_value(bc[j], se[j]);
        let _ = writeln!(
            s,
            "{name:<10}{:>12.6}{:>12.6}{:>12.6}{:>10.3}{:>10.4} {}",
            raw[j],
            bc[j],
            se[j],
            z,
            p,
            stars(p)
        );
    }
    s.push_str("*** p < 0.01, ** p < 0.05, * p < 0.1 (two-sided, corrected estimate)\n");
    s
}

/// Dispatches on the mode and writes artifacts into `config.out`.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    let mode = config
        .mode
        .ok_or_else(|| Error::Config("no mode given (simulate, estimate, montecarlo, weights)".into()))?;
    let out = config.out.clone();
    std::fs::create_dir_all(&out)?;
    let mut outputs = Vec::new();
    let mut period_mapping = None;
    let mut seed = config.seed;

    match mode {
        Mode::Simulate => {
            let dgp = config.dgp()?;
            seed = Some(dgp.seed);
            let p = resolve_p(&dgp)?;
            let sim = generate(&dgp, p, 0)?;
            write_panel_csv(&out.join("panel.csv"), &sim.layout, &sim.data, None)?;
            sim.adjacency.write_edge_list(&out.join("edges.txt"))?;
            let summary = SimulationSummary {
                p,
                seed: dgp.seed,
                n_units: sim.layout.n_units(),
                n_periods: sim.layout.n_periods(),
                n: sim.layout.n(),
                unbalancedness: sim.layout.unbalancedness(),
                coverage: sim.layout.coverage(),
            };
            write_json(&out.join("result.json"), &summary)?;
            let report = format!(
                "simulated N = {}, T = {}, n = {}, UP = {:.4}, p = {:.6}, seed = {}\n",
                summary.n_units, summary.n_periods, summary.n, summary.unbalancedness, p, dgp.seed
            );
            std::fs::write(out.join("report.txt"), report)?;
            outputs.extend(["panel.csv", "edges.txt", "result.json", "report.txt"].map(String::from));
        }
        Mode::Estimate => {
            let data_cfg = config
                .data
                .as_ref()
                .ok_or_else(|| Error::Config("estimate needs a [data] section with a path".into()))?;
            let mut panel = load_panel_csv(&data_cfg.path, &data_cfg.schema)?;
            let adj = config.weights.build(panel.layout.n_units(), panel.coords.as_deref())?;
            let mut isolated = None;
            for name in &data_cfg.neighbor_average {
                let j = data_cfg
                    .schema
                    .covariates
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| schema_err(name, "neighbor average of an undeclared covariate"))?;
                let col: Vec<DVector<f64>> = panel.data.x.iter().map(|x| x.column(j).into_owned()).collect();
                let avg = neighbor_average(&panel.layout, &adj, &col);
                *isolated.get_or_insert(0) += avg.isolated;
                for (x, a) in panel.data.x.iter_mut().zip(avg.values) {
                    let c = x.ncols();
                    *x = x.clone().insert_column(c, 0.0);
                    x.set_column(c, &a);
                }
            }
            let network = TimeVaryingNetwork::from_adjacency(&adj, &panel.layout, config.weights.lag_self())?;
            let opts = config.fit_options();
            let result = fit(&panel.layout, &network, &panel.data, &opts)?;
            write_json(
                &out.join("result.json"),
                &EstimateOutput {
                    unit_ids: &panel.unit_ids,
                    periods: &panel.periods,
                    neighbor_average_isolated: isolated,
                    result: &result,
                },
            )?;
            let mut report = estimate_report(&result, opts.robust);
            if let Some(k) = isolated {
                let _ = writeln!(
                    report,
                    "neighbor averages: {k} observations without neighbors kept their own value"
                );
            }
            std::fs::write(out.join("report.txt"), report)?;
            period_mapping = Some(panel.periods.clone());
            outputs.extend(["result.json", "report.txt"].map(String::from));
        }
        Mode::Montecarlo => {
            let dgp = config.dgp()?;
            seed = Some(dgp.seed);
            let mc = MCConfig {
                dgp,
                replications: config.montecarlo.replications,
                levels: config.montecarlo.levels.clone(),
                threads: config.montecarlo.threads,
                fit: config.fit_options(),
                robust_se: config.robust,
            };
            let report = run_mc(&mc)?;
            write_json(&out.join("result.json"), &report)?;
            let summary = export_standardized(&report, &out.join("standardized.csv"))?;
            let ratios = compare_correction(&report);
            let mut text = text_table(&report);
            let _ = writeln!(
                text,
                "{:<12}{}",
                "",
                report
                    .param_names
                    .iter()
                    .map(|n| format!("{n:>10}"))
                    .collect::<String>()
            );
            for (label, vals) in [
                ("|bias| ratio", &ratios.bias_ratio),
                ("RMSE ratio", &ratios.rmse_ratio),
                ("std mean", &summary.mean),
                ("std var", &summary.variance),
            ] {
                let _ = write!(text, "{label:<12}");
                for v in vals {
                    let _ = write!(text, "{v:>10.4}");
                }
                text.push('\n');
            }
            std::fs::write(out.join("report.txt"), text)?;
            outputs.extend(["result.json", "report.txt", "standardized.csv"].map(String::from));
        }
        Mode::Weights => {
            let (adj, layout) = match &config.data {
                Some(d) => {
                    let panel = load_panel_csv(&d.path, &d.schema)?;
                    period_mapping = Some(panel.periods.clone());
                    (
                        config.weights.build(panel.layout.n_units(), panel.coords.as_deref())?,
                        panel.layout,
                    )
                }
                None => {
                    let (r, c) = config
                        .weights
                        .rook
                        .ok_or_else(|| Error::Config("weights without [data] needs --rook RxC".into()))?;
                    (Adjacency::rook(r, c), PanelLayout::balanced(r * c, 1)?)
                }
            };
            let lag_self = config.weights.lag_self();
            let network = TimeVaryingNetwork::from_adjacency(&adj, &layout, lag_self)?;
            let bounds = config.rho_bounds.unwrap_or(config.fit.likelihood.rho_bounds);
            let n = adj.n();
            let summary = WeightsSummary {
                n_units: n,
                n_edges: adj.n_edges(),
                mean_degree: (0..n).map(|i| adj.degree(i)).sum::<usize>() as f64 / n.max(1) as f64,
                isolated_units: (0..n).filter(|&i| adj.degree(i) == 0).count(),
                lag_self,
                spectral: check_spectral_condition(&network, bounds),
            };
            adj.write_edge_list(&out.join("edges.txt"))?;
            write_json(&out.join("result.json"), &summary)?;
            let report = format!(
                "units = {}, edges = {}, mean degree = {:.3}, isolated = {}, spectral condition {} (max |rho| row norm = {:.4})\n",
                summary.n_units,
                summary.n_edges,
                summary.mean_degree,
                summary.isolated_units,
                if summary.spectral.satisfied { "holds" } else { "fails" },
                summary.spectral.max_abs_rho * summary.spectral.max_row_norm
            );
            std::fs::write(out.join("report.txt"), report)?;
            outputs.extend(["edges.txt", "result.json", "report.txt"].map(String::from));
        }
    }

    outputs.push("manifest.json".into());
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        mode: mode.name().to_string(),
        seed,
        config_hash: config.hash(),
        config: config.clone(),
        period_mapping,
        outputs: outputs.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(RunSummary {
        mode,
        out_dir: out,
        outputs,
    })
}
