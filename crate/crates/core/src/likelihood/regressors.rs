use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::operators::LagOperators;
use crate::panel::{PanelData, PanelLayout};
use crate::weights::{spmv, TimeVaryingNetwork};

/// Stacked regressors Z with columns (network lag, own lag, listing, X).
#[derive(Debug, Clone)]
pub struct RegressorBlocks {
    pub z: DMatrix<f64>,
    pub k: usize,
    /// Rows of continuing units whose lag weights have no neighbors, so the
    /// network-lag regressor is zero.
    pub zero_lag_rows: usize,
}

impl RegressorBlocks {
    pub fn n_columns(&self) -> usize {
        self.k + 3
    }

    /// Names of the delta parameters attached to each column.
    pub fn column_names(k: usize) -> Vec<String> {
        let mut names = crate::panel::Theta::param_names(k);
        names.remove(0);
        names.pop();
        names
    }

    /// Rows of period `t` (t >= 1).
    pub fn period_block(&self, layout: &PanelLayout, t: usize) -> DMatrix<f64> {
        self.z.rows(layout.offset(t), layout.period_count(t)).into_owned()
    }
}

pub fn build_regressors(
    layout: &PanelLayout,
    network: &TimeVaryingNetwork,
    data: &PanelData,
) -> Result<RegressorBlocks> {
    let ops = LagOperators::new(layout, network)?;
    build_with_operators(layout, &ops, data)
}

pub(crate) fn build_with_operators(
    layout: &PanelLayout,
    ops: &LagOperators,
    data: &PanelData,
) -> Result<RegressorBlocks> {
    if data.y.is_empty() || data.y[0].len() != layout.period_count(0) {
        return Err(Error::MissingInitialPeriod);
    }
    let k = data.k();
    let mut z = DMatrix::zeros(layout.n(), k + 3);
    let mut zero_lag_rows = 0;
    for t in 1..=layout.n_periods() {
        let off = layout.offset(t);
        let prev = data.y[t - 1].as_slice();
        let lag = spmv(ops.network_lag(t), prev);
        let own = spmv(ops.carry(t), prev);
        let f = ops.newly_listed(t);
        for r in 0..layout.period_count(t) {
            z[(off + r, 0)] = lag[r];
            z[(off + r, 1)] = own[r];
            z[(off + r, 2)] = f[r];
            if f[r] == 0.0 && ops.network_lag(t).row(r).nnz() == 0 {
                zero_lag_rows += 1;
            }
        }
        z.view_mut((off, 3), (layout.period_count(t), k)).copy_from(&data.x[t]);
    }
    Ok(RegressorBlocks { z, k, zero_lag_rows })
}
