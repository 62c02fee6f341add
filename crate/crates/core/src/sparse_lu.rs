//! Sparse LU without pivoting for strictly row diagonally dominant matrices,
//! ordered by minimum degree on the symmetrized pattern.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use nalgebra_sparse::CsrMatrix;

use crate::error::{Error, Result};

/// Elimination order and filled pattern; reusable across matrices that share a pattern.
#[derive(Debug, Clone)]
pub struct SparseLuSymbolic {
    n: usize,
    /// new index -> original index
    perm: Vec<usize>,
    /// original index -> new index
    inv_perm: Vec<usize>,
    /// per new row k: columns j > k of U (new indexing, ascending)
    upper: Vec<Vec<usize>>,
    /// per new row i: columns k < i of L (new indexing, ascending)
    lower: Vec<Vec<usize>>,
}

impl SparseLuSymbolic {
    /// Minimum-degree ordering of the pattern of `a + a'`; the diagonal is implied.
    pub fn analyze(a: &CsrMatrix<f64>) -> Self {
        let n = a.nrows();
        let mut adj: Vec<HashSet<usize>> = vec![HashSet::new(); n];
        for (i, j, _) in a.triplet_iter() {
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
        let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n).map(|v| Reverse((adj[v].len(), v))).collect();
        let mut eliminated = vec![false; n];
        let mut perm = Vec::with_capacity(n);
        let mut upper_orig: Vec<Vec<usize>> = Vec::with_capacity(n);
        while let Some(Reverse((deg, v))) = heap.pop() {
            if eliminated[v] || deg != adj[v].len() {
                continue;
            }
            eliminated[v] = true;
            let nbrs: Vec<usize> = adj[v].drain().collect();
            for &a in &nbrs {
                adj[a].remove(&v);
            }
            for (x, &a) in nbrs.iter().enumerate() {
                for &b in &nbrs[x + 1..] {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
            for &a in &nbrs {
                heap.push(Reverse((adj[a].len(), a)));
            }
            perm.push(v);
            upper_orig.push(nbrs);
        }
        let mut inv_perm = vec![0; n];
        for (k, &v) in perm.iter().enumerate() {
            inv_perm[v] = k;
        }
        let mut upper: Vec<Vec<usize>> = upper_orig
            .into_iter()
            .map(|cols| cols.into_iter().map(|c| inv_perm[c]).collect())
            .collect();
        let mut lower = vec![Vec::new(); n];
        for (k, cols) in upper.iter_mut().enumerate() {
            cols.sort_unstable();
            for &i in cols.iter() {
                lower[i].push(k);
            }
        }
        Self {
            n,
            perm,
            inv_perm,
            upper,
            lower,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored entries of L and U together, diagonal included.
    pub fn fill(&self) -> usize {
        self.n + self.upper.iter().map(Vec::len).sum::<usize>() * 2
    }

    /// Numeric factorization of `a`, whose pattern must be covered by the analyzed one.
    pub fn factor(&self, a: &CsrMatrix<f64>) -> Result<SparseLu> {
        let n = self.n;
        let mut work = vec![0.0; n];
        let mut l_vals: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut u_vals: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut diag = Vec::with_capacity(n);
        for i in 0..n {
            let row = a.row(self.perm[i]);
            for (&c, &v) in row.col_indices().iter().zip(row.values()) {
                work[self.inv_perm[c]] += v;
            }
            for &k in &self.lower[i] {
                let l = work[k] / diag[k];
                work[k] = l;
                for (&j, &u) in self.upper[k].iter().zip(&u_vals[k]) {
                    work[j] -= l * u;
                }
            }
            let d = work[i];
            if !(d.is_finite() && d.abs() > 1e-300) {
                return Err(Error::InvalidInput(format!("zero pivot at row {i}")));
            }
            diag.push(d);
            work[i] = 0.0;
            l_vals.push(self.lower[i].iter().map(|&k| std::mem::take(&mut work[k])).collect());
            u_vals.push(self.upper[i].iter().map(|&j| std::mem::take(&mut work[j])).collect());
        }
        Ok(SparseLu { l_vals, u_vals, diag })
    }

    /// Solves `a x = b` with the factors of `a`.
    pub fn solve(&self, lu: &SparseLu, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|k| b[self.perm[k]]).collect();
        for i in 0..n {
            let mut s = x[i];
            for (&k, &l) in self.lower[i].iter().zip(&lu.l_vals[i]) {
                s -= l * x[k];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for (&j, &u) in self.upper[i].iter().zip(&lu.u_vals[i]) {
                s -= u * x[j];
            }
            x[i] = s / lu.diag[i];
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.perm[k]] = x[k];
        }
        out
    }

    /// Solves `a' x = b` with the factors of `a`.
    pub fn solve_transpose(&self, lu: &SparseLu, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|k| b[self.perm[k]]).collect();
        for i in 0..n {
            x[i] /= lu.diag[i];
            let xi = x[i];
            for (&j, &u) in self.upper[i].iter().zip(&lu.u_vals[i]) {
                x[j] -= u * xi;
            }
        }
        for i in (0..n).rev() {
            let xi = x[i];
            for (&k, &l) in self.lower[i].iter().zip(&lu.l_vals[i]) {
                x[k] -= l * xi;
            }
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.perm[k]] = x[k];
        }
        out
    }
}

/// Numeric factors `P A P' = L U` with unit-diagonal L.
#[derive(Debug, Clone)]
pub struct SparseLu {
    l_vals: Vec<Vec<f64>>,
    u_vals: Vec<Vec<f64>>,
    diag: Vec<f64>,
}

impl SparseLu {
    /// Pivots of U.
    pub fn pivots(&self) -> &[f64] {
        &self.diag
    }

    /// ln|det A| and the sign of det A.
    pub fn log_abs_det(&self) -> (f64, f64) {
        let mut sign = 1.0;
        let mut acc = 0.0;
        for &d in &self.diag {
            if d < 0.0 {
                sign = -sign;
            }
            acc += d.abs().ln();
        }
        (acc, sign)
    }
}
