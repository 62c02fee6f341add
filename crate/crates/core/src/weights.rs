//! Adjacency structures and the period-sliced, row-normalized weight matrices.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra_sparse::{CooMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelLayout;

/// Mean Earth radius used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Binary symmetric adjacency with an empty diagonal, stored as sorted
/// neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// Symmetrizes the edge set and drops self-loops.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({i}, {j}) references a unit outside 0..{n}"
                )));
            }
            if i != j {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { neighbors })
    }

    /// Rook contiguity on a `rows x cols` grid, cells numbered row-major.
    pub fn rook(rows: usize, cols: usize) -> Self {
        let mut neighbors = vec![Vec::new(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let list = &mut neighbors[r * cols + c];
                if r > 0 {
                    list.push((r - 1) * cols + c);
                }
                if c > 0 {
                    list.push(r * cols + c - 1);
                }
                if c + 1 < cols {
                    list.push(r * cols + c + 1);
                }
                if r + 1 < rows {
                    list.push((r + 1) * cols + c);
                }
            }
        }
        Self { neighbors }
    }

    /// Connects units whose great-circle distance is at most `d_km`.
    /// Coordinates are `(lat, lon)` in degrees.
    pub fn distance_band(coords: &[(f64, f64)], d_km: f64) -> Result<Self> {
        if !(d_km > 0.0 && d_km.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "distance band must be positive, got {d_km}"
            )));
        }
        for (unit, &(lat, lon)) in coords.iter().enumerate() {
            if !(lat.is_finite() && lon.is_finite())
                || !(-90.0..=90.0).contains(&lat)
                || !(-180.0..=180.0).contains(&lon)
            {
                return Err(Error::InvalidCoordinate { unit, lat, lon });
            }
        }
        // Sweep in latitude order: the latitude gap alone bounds the distance from below.
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by(|&a, &b| coords[a].0.total_cmp(&coords[b].0));
        let max_dlat = (d_km / EARTH_RADIUS_KM).to_degrees() * (1.0 + 1e-9);
        let mut edges = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            for &j in &order[pos + 1..] {
                if coords[j].0 - coords[i].0 > max_dlat {
                    break;
                }
                if haversine_km(coords[i], coords[j]) <= d_km {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(coords.len(), edges)
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Number of undirected edges.
    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    /// Writes `i j 1` lines (0-based, both directions) preceded by a header comment.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# units {}", self.n())?;
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                writeln!(out, "{i} {j} 1")?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a whitespace-separated `i j weight` edge list. Nonzero weights
    /// become edges; `# units N` fixes the unit count, otherwise it is
    /// inferred from the largest id (or taken from `n_units`).
    pub fn read_edge_list(path: &Path, n_units: Option<usize>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut declared = None;
        let mut edges = Vec::new();
        let mut max_id = 0usize;
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.split_whitespace();
                if parts.next() == Some("units") {
                    declared = parts.next().and_then(|s| s.parse::<usize>().ok());
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse_err = || {
                Error::InvalidInput(format!(
                    "{}:{}: expected `i j weight`, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            };
            if fields.len() < 2 {
                return Err(parse_err());
            }
            let i: usize = fields[0].parse().map_err(|_| parse_err())?;
            let j: usize = fields[1].parse().map_err(|_| parse_err())?;
            let w: f64 = match fields.get(2) {
                Some(s) => s.parse().map_err(|_| parse_err())?,
                None => 1.0,
            };
            max_id = max_id.max(i).max(j);
            if w != 0.0 {
                edges.push((i, j));
            }
        }
        let n = n_units
            .or(declared)
            .unwrap_or(if edges.is_empty() { 0 } else { max_id + 1 });
        Self::from_edges(n, edges)
    }
}

/// Great-circle distance in km between `(lat, lon)` pairs given in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// `A[target_ids, source_ids]`, each row divided by its sum. Zero rows stay zero.
pub fn slice_row_normalize(adj: &Adjacency, target_ids: &[usize], source_ids: &[usize]) -> CsrMatrix<f64> {
    slice_rows(adj, target_ids, source_ids, false)
}

fn slice_rows(adj: &Adjacency, target_ids: &[usize], source_ids: &[usize], include_self: bool) -> CsrMatrix<f64> {
    let mut row_offsets = Vec::with_capacity(target_ids.len() + 1);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    row_offsets.push(0);
    let mut cols = Vec::new();
    for &u in target_ids {
        cols.clear();
        cols.extend(adj.neighbors(u).iter().filter_map(|v| source_ids.binary_search(v).ok()));
        if include_self {
            if let Ok(c) = source_ids.binary_search(&u) {
                cols.push(c);
            }
        }
        cols.sort_unstable();
        let w = 1.0 / cols.len() as f64;
        col_indices.extend_from_slice(&cols);
        values.extend(std::iter::repeat_n(w, cols.len()));
        row_offsets.push(col_indices.len());
    }
    CsrMatrix::try_from_csr_data(target_ids.len(), source_ids.len(), row_offsets, col_indices, values)
        .expect("sorted unique column indices")
}

/// Per-period contemporaneous weights `W_t` (t = 0..=T) and lag weights
/// `M_t` (t = 1..=T; `M_0` is an empty placeholder).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeVaryingNetwork {
    w: Vec<CsrMatrix<f64>>,
    m: Vec<CsrMatrix<f64>>,
}

impl TimeVaryingNetwork {
    /// Row-normalizes `D_t A D_t'` and `D_t A D_{t-1}'`. With `lag_self`,
    /// the lag weights also link a unit to its own previous-period value.
    pub fn from_adjacency(adj: &Adjacency, layout: &PanelLayout, lag_self: bool) -> Result<Self> {
        if adj.n() != layout.n_units() {
            return Err(Error::ShapeMismatch(format!(
                "adjacency has {} units, layout has {}",
                adj.n(),
                layout.n_units()
            )));
        }
        let periods = layout.n_periods() + 1;
        let w = (0..periods)
            .map(|t| slice_rows(adj, layout.index_set(t), layout.index_set(t), false))
            .collect();
        let mut m = vec![CsrMatrix::zeros(0, 0)];
        for t in 1..periods {
            m.push(slice_rows(adj, layout.index_set(t), layout.index_set(t - 1), lag_self));
        }
        Ok(Self { w, m })
    }

    /// Takes explicit per-period matrices; shapes are checked against the layout.
    pub fn from_matrices(w: Vec<CsrMatrix<f64>>, m: Vec<CsrMatrix<f64>>, layout: &PanelLayout) -> Result<Self> {
        let periods = layout.n_periods() + 1;
        if w.len() != periods || m.len() != periods {
            return Err(Error::ShapeMismatch(format!(
                "expected {periods} weight matrices per kind, got {} and {}",
                w.len(),
                m.len()
            )));
        }
        for t in 0..periods {
            let nt = layout.period_count(t);
            if w[t].nrows() != nt || w[t].ncols() != nt {
                return Err(Error::ShapeMismatch(format!("W_{t} is not {nt}x{nt}")));
            }
            if t > 0 && (m[t].nrows() != nt || m[t].ncols() != layout.period_count(t - 1)) {
                return Err(Error::ShapeMismatch(format!(
                    "M_{t} is not {nt}x{}",
                    layout.period_count(t - 1)
                )));
            }
        }
        Ok(Self { w, m })
    }

    /// Contemporaneous weights for period `t` in `0..=T`.
    pub fn w(&self, t: usize) -> &CsrMatrix<f64> {
        &self.w[t]
    }

    /// Lag weights for period `t` in `1..=T`.
    pub fn m(&self, t: usize) -> &CsrMatrix<f64> {
        &self.m[t]
    }

    pub fn n_periods(&self) -> usize {
        self.w.len() - 1
    }

    /// True when no estimation-period `W_t` has a nonzero entry.
    pub fn contemporaneous_is_empty(&self) -> bool {
        self.w[1..].iter().all(|w| w.values().iter().all(|&v| v == 0.0))
    }

    pub fn lag_is_empty(&self) -> bool {
        self.m[1..].iter().all(|m| m.values().iter().all(|&v| v == 0.0))
    }

    /// Rows of `M_t`, t >= 1, with no neighbors at all.
    pub fn isolated_lag_rows(&self) -> usize {
        self.m[1..]
            .iter()
            .map(|m| m.row_iter().filter(|r| r.nnz() == 0).count())
            .sum()
    }
}

/// Sufficient condition sup_rho sup_t ||rho W_t||_inf < 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub max_row_norm: f64,
    pub max_abs_rho: f64,
    pub satisfied: bool,
}

pub fn check_spectral_condition(network: &TimeVaryingNetwork, rho_interval: (f64, f64)) -> SpectralReport {
    let max_row_norm = network
        .w
        .iter()
        .flat_map(|w| w.row_iter().map(|r| r.values().iter().map(|v| v.abs()).sum::<f64>()))
        .fold(0.0, f64::max);
    let max_abs_rho = rho_interval.0.abs().max(rho_interval.1.abs());
    SpectralReport {
        max_row_norm,
        max_abs_rho,
        satisfied: max_abs_rho * max_row_norm < 1.0,
    }
}

/// Dense copy of a sparse matrix.
pub fn to_dense(m: &CsrMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let mut d = nalgebra::DMatrix::zeros(m.nrows(), m.ncols());
    for (i, j, &v) in m.triplet_iter() {
        d[(i, j)] += v;
    }
    d
}

/// Builds a CSR matrix from triplets; duplicates are summed.
pub fn csr_from_triplets(
    nrows: usize,
    ncols: usize,
    triplets: impl IntoIterator<Item = (usize, usize, f64)>,
) -> CsrMatrix<f64> {
    let mut coo = CooMatrix::new(nrows, ncols);
    for (i, j, v) in triplets {
        coo.push(i, j, v);
    }
    CsrMatrix::from(&coo)
}

/// Sparse matrix times dense vector.
pub fn spmv(m: &CsrMatrix<f64>, x: &[f64]) -> Vec<f64> {
    m.row_iter()
        .map(|row| {
            row.col_indices()
                .iter()
                .zip(row.values())
                .map(|(&j, &v)| v * x[j])
                .sum()
        })
        .collect()
}

/// Sparse matrix times dense matrix.
pub fn spmm(m: &CsrMatrix<f64>, x: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let mut out = nalgebra::DMatrix::zeros(m.nrows(), x.ncols());
    for c in 0..x.ncols() {
        let col = x.column(c);
        for (i, row) in m.row_iter().enumerate() {
            let mut acc = 0.0;
            for (&j, &v) in row.col_indices().iter().zip(row.values()) {
                acc += v * col[j];
            }
            out[(i, c)] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rook_degrees() {
        let a = Adjacency::rook(2, 2);
        assert!((0..4).all(|i| a.degree(i) == 2));
        let a = Adjacency::rook(1, 3);
        assert_eq!((0..3).map(|i| a.degree(i)).collect::<Vec<_>>(), vec![1, 2, 1]);
    }

    #[test]
    fn rook_3x3_matches_offset_enumeration() {
        let a = Adjacency::rook(3, 3);
        for r in 0..3i64 {
            for c in 0..3i64 {
                let expected = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .filter(|(dr, dc)| (0..3).contains(&(r + dr)) && (0..3).contains(&(c + dc)))
                    .count();
                assert_eq!(a.degree((r * 3 + c) as usize), expected);
            }
        }
        assert_eq!(a.degree(0), 2);
        assert_eq!(a.degree(1), 3);
        assert_eq!(a.degree(4), 4);
    }

    #[test]
    fn distance_band_thresholds() {
        let same = Adjacency::distance_band(&[(10.0, 20.0), (10.0, 20.0)], 0.5).unwrap();
        assert!(same.has_edge(0, 1));

        let pts = [(0.0, 0.0), (0.0, 0.018)];
        // independent oracle: arc length on the equator
        let arc = 0.018f64.to_radians() * EARTH_RADIUS_KM;
        assert!((haversine_km(pts[0], pts[1]) - arc).abs() < 1e-9);
        assert!((arc - 2.0).abs() < 0.01);
        assert!(!Adjacency::distance_band(&pts, 1.0).unwrap().has_edge(0, 1));
        assert!(Adjacency::distance_band(&pts, 2.1).unwrap().has_edge(0, 1));
        for d in [0.5, 1.0, 2.0] {
            assert!(Adjacency::distance_band(&pts, d).is_ok());
        }
    }

    #[test]
    fn distance_band_rejects_bad_coordinates() {
        assert!(matches!(
            Adjacency::distance_band(&[(0.0, 0.0), (95.0, 0.0)], 1.0),
            Err(Error::InvalidCoordinate { unit: 1, .. })
        ));
        assert!(Adjacency::distance_band(&[(0.0, 0.0)], 0.0).is_err());
    }

    #[test]
    fn row_normalization_examples() {
        // unit 0 linked to 1 and 2
        let a = Adjacency::from_edges(4, [(0, 1), (0, 2)]).unwrap();
        let m = slice_row_normalize(&a, &[0], &[1, 2, 3]);
        assert_eq!(
            to_dense(&m).row(0).iter().copied().collect::<Vec<_>>(),
            vec![0.5, 0.5, 0.0]
        );
        let m = slice_row_normalize(&a, &[3], &[0, 1, 2]);
        assert!(to_dense(&m).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectral_condition() {
        let layout = PanelLayout::balanced(4, 2).unwrap();
        let net = TimeVaryingNetwork::from_adjacency(&Adjacency::rook(2, 2), &layout, false).unwrap();
        let rep = check_spectral_condition(&net, (-0.995, 0.995));
        assert_eq!(rep.max_row_norm, 1.0);
        assert!(rep.satisfied);

        let heavy = csr_from_triplets(2, 2, [(0, 1, 1.5), (1, 0, 1.0)]);
        let empty = CsrMatrix::zeros(2, 2);
        let lag = CsrMatrix::zeros(2, 2);
        let layout = PanelLayout::balanced(2, 1).unwrap();
        let net =
            TimeVaryingNetwork::from_matrices(vec![empty.clone(), heavy], vec![CsrMatrix::zeros(0, 0), lag], &layout)
                .unwrap();
        assert!(!check_spectral_condition(&net, (-0.8, 0.8)).satisfied);

        // empty rows do not raise the norm
        let net = TimeVaryingNetwork::from_matrices(
            vec![empty.clone(), empty],
            vec![CsrMatrix::zeros(0, 0), CsrMatrix::zeros(2, 2)],
            &layout,
        )
        .unwrap();
        assert_eq!(check_spectral_condition(&net, (-0.9, 0.9)).max_row_norm, 0.0);
    }

    #[test]
    fn lag_self_links() {
        let layout = PanelLayout::balanced(3, 1).unwrap();
        let adj = Adjacency::from_edges(3, [(0, 1)]).unwrap();
        let net = TimeVaryingNetwork::from_adjacency(&adj, &layout, true).unwrap();
        let m = to_dense(net.m(1));
        assert_eq!(m[(0, 0)], 0.5);
        assert_eq!(m[(2, 2)], 1.0);
        assert_eq!(to_dense(net.w(1))[(2, 2)], 0.0);
    }

    #[test]
    fn edge_list_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adj.txt");
        let a = Adjacency::rook(3, 4);
        a.write_edge_list(&path).unwrap();
        assert_eq!(Adjacency::read_edge_list(&path, None).unwrap(), a);
    }

    proptest! {
        #[test]
        fn sliced_rows_sum_to_one_or_zero(
            edges in proptest::collection::vec((0usize..12, 0usize..12), 0..40),
            mask_a in proptest::collection::vec(any::<bool>(), 12),
            mask_b in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let adj = Adjacency::from_edges(12, edges).unwrap();
            let target: Vec<usize> = (0..12).filter(|&i| mask_a[i]).collect();
            let source: Vec<usize> = (0..12).filter(|&i| mask_b[i]).collect();
            let m = slice_row_normalize(&adj, &target, &source);
            for row in m.row_iter() {
                let s: f64 = row.values().iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-15);
            }
            let w = slice_row_normalize(&adj, &target, &target);
            for (i, j, _) in w.triplet_iter() {
                prop_assert!(i != j);
            }
            // dividing a normalized row by its sum changes nothing
            for row in w.row_iter() {
                let s: f64 = row.values().iter().sum();
                if s > 0.0 {
                    for &v in row.values() {
                        prop_assert!((v / s - v).abs() < 1e-15);
                    }
                }
            }
        }

        #[test]
        fn distance_band_is_symmetric(
            pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..30),
            d in 1.0f64..100.0,
        ) {
            let adj = Adjacency::distance_band(&pts, d).unwrap();
            for i in 0..pts.len() {
                prop_assert!(!adj.has_edge(i, i));
                for j in 0..pts.len() {
                    prop_assert_eq!(adj.has_edge(i, j), adj.has_edge(j, i));
                    if i != j {
                        prop_assert_eq!(adj.has_edge(i, j), haversine_km(pts[i], pts[j]) <= d);
                    }
                }
            }
        }
    }
}
