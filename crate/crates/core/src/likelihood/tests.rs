use super::*;
use crate::dgp::{generate, DgpConfig};
use crate::weights::{csr_from_triplets, to_dense, Adjacency};

fn small(seed: u64) -> crate::dgp::SimulatedPanel {
    let mut cfg = DgpConfig::new(6, 3, Theta::new(0.4, 0.2, 0.3, 1.0, vec![1.0], 1.0));
    cfg.seed = seed;
    generate(&cfg, 1.5, 0).unwrap()
}

#[test]
fn regressor_rows_by_hand() {
    // unit 0 observed 0..=2, unit 1 enters at 2
    let layout = PanelLayout::from_windows(vec![(0, 2), (2, 2)], 2).unwrap();
    let adj = Adjacency::rook(1, 2);
    let net = TimeVaryingNetwork::from_adjacency(&adj, &layout, false).unwrap();
    let y = vec![
        DVector::from_vec(vec![2.0]),
        DVector::from_vec(vec![3.0]),
        DVector::from_vec(vec![5.0, 7.0]),
    ];
    let x = vec![
        DMatrix::from_element(1, 1, 0.5),
        DMatrix::from_element(1, 1, 0.25),
        DMatrix::from_vec(2, 1, vec![1.5, -1.0]),
    ];
    let data = PanelData::new(&layout, y, x).unwrap();
    let z = build_regressors(&layout, &net, &data).unwrap();
    // period 1, unit 0: no neighbors at t-1
    assert_eq!(
        z.z.row(0).iter().copied().collect::<Vec<_>>(),
        vec![0.0, 2.0, 0.0, 0.25]
    );
    // period 2, unit 0 continues; unit 1 absent at t-1
    assert_eq!(z.z.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 3.0, 0.0, 1.5]);
    // unit 1 enters: (0, 0, 1, x)
    assert_eq!(
        z.z.row(2).iter().copied().collect::<Vec<_>>(),
        vec![0.0, 0.0, 1.0, -1.0]
    );
    assert_eq!(z.zero_lag_rows, 2);
}

#[test]
fn network_lag_matches_dense_product() {
    let sim = small(1);
    let z = build_regressors(&sim.layout, &sim.network, &sim.data).unwrap();
    let ops = LagOperators::new(&sim.layout, &sim.network).unwrap();
    for t in 1..=3 {
        let m = to_dense(sim.network.m(t));
        let lag = m * &sim.data.y[t - 1];
        let f = ops.newly_listed(t);
        let block = z.period_block(&sim.layout, t);
        for r in 0..lag.len() {
            let expect = if f[r] == 1.0 { 0.0 } else { lag[r] };
            assert!((block[(r, 0)] - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn profile_identity_and_peak() {
    let sim = small(2);
    let model = ConcentratedModel::new(&sim.layout, &sim.network, &sim.data, Default::default()).unwrap();
    for rho in [-0.5, 0.0, 0.3, 0.8] {
        let th = model.profile_theta(rho).unwrap();
        let lc = model.loglik(&th).unwrap();
        assert!((lc - model.lcc(rho).unwrap()).abs() < 1e-9);
        // sigma2 profile is a maximum
        let mut worse = th.clone();
        let last = worse.len() - 1;
        worse[last] *= 1.1;
        assert!(model.loglik(&worse).unwrap() < lc);
        // sigma2 component of the score vanishes at the profiled variance
        assert!(model.score(&th).unwrap()[last].abs() < 1e-9);
    }
}

#[test]
fn score_matches_finite_differences() {
    let sim = small(3);
    let model = ConcentratedModel::new(&sim.layout, &sim.network, &sim.data, Default::default()).unwrap();
    let th = DVector::from_vec(vec![0.35, 0.15, 0.25, 0.8, 1.1, 0.9]);
    let s = model.score(&th).unwrap();
    for j in 0..th.len() {
        let h = 1e-6;
        let mut p = th.clone();
        p[j] += h;
        let mut m = th.clone();
        m[j] -= h;
        let fd = (model.loglik(&p).unwrap() - model.loglik(&m).unwrap()) / (2.0 * h);
        assert!(
            (fd - s[j]).abs() < 1e-5 * s[j].abs().max(1.0),
            "coord {j}: {fd} vs {}",
            s[j]
        );
    }
}

#[test]
fn alpha_is_unit_mean_without_dynamics() {
    let sim = small(4);
    let model = ConcentratedModel::new(&sim.layout, &sim.network, &sim.data, Default::default()).unwrap();
    let zero = DVector::zeros(model.params().delta_cols.len());
    let a = model.recover_alpha(0.0, &zero);
    let b = {
        let shifted: Vec<DVector<f64>> = sim.data.y.iter().map(|v| v.add_scalar(2.5)).collect();
        let data = PanelData::new(&sim.layout, shifted, sim.data.x.clone()).unwrap();
        let m = ConcentratedModel::new(&sim.layout, &sim.network, &data, Default::default()).unwrap();
        m.recover_alpha(0.0, &zero)
    };
    let means = sim.layout.unit_means(model.y());
    for i in 0..sim.layout.n_units() {
        match (a[i], b[i]) {
            (Some(x), Some(y)) => {
                assert!((x - means[i]).abs() < 1e-12);
                assert!((y - x - 2.5).abs() < 1e-12);
            }
            (None, None) => assert_eq!(sim.layout.est_count(i), 0),
            _ => panic!("inconsistent alpha availability"),
        }
    }
}

#[test]
fn listing_column_dropped_without_entrants() {
    let layout = PanelLayout::from_windows(vec![(0, 3), (0, 2), (0, 3), (0, 1)], 3).unwrap();
    let adj = Adjacency::rook(2, 2);
    let net = TimeVaryingNetwork::from_adjacency(&adj, &layout, false).unwrap();
    let x: Vec<_> = (0..=3)
        .map(|t| DMatrix::from_fn(layout.period_count(t), 1, |i, _| ((i * 3 + t * 5) % 7) as f64))
        .collect();
    let y: Vec<_> = (0..=3)
        .map(|t| DVector::from_fn(layout.period_count(t), |i, _| ((i * 5 + t * 3) % 11) as f64 * 0.3))
        .collect();
    let data = PanelData::new(&layout, y, x).unwrap();
    let model = ConcentratedModel::new(&layout, &net, &data, Default::default()).unwrap();
    assert_eq!(model.params().dropped(), vec!["gamma".to_string()]);
    assert_eq!(model.params().dim(), 5);
}

#[test]
fn duplicated_covariate_is_reported() {
    let sim = small(5);
    let x: Vec<_> = sim
        .data
        .x
        .iter()
        .map(|m| DMatrix::from_fn(m.nrows(), 2, |i, _| m[(i, 0)]))
        .collect();
    let data = PanelData::new(&sim.layout, sim.data.y.clone(), x).unwrap();
    let err = ConcentratedModel::new(&sim.layout, &sim.network, &data, Default::default()).unwrap_err();
    assert!(matches!(err, Error::SingularDesign { column: 4, .. }), "{err:?}");
}

#[test]
fn empty_networks_drop_rho_and_lambda() {
    let layout = PanelLayout::balanced(4, 3).unwrap();
    let z = || csr_from_triplets(4, 4, []);
    let net = TimeVaryingNetwork::from_matrices((0..4).map(|_| z()).collect(), (0..4).map(|_| z()).collect(), &layout)
        .unwrap();
    let x: Vec<_> = (0..=3)
        .map(|t| DMatrix::from_fn(4, 1, |i, _| ((i * 3 + t * 5) % 7) as f64))
        .collect();
    let y: Vec<_> = (0..=3)
        .map(|t| DVector::from_fn(4, |i, _| ((i * 5 + t * 3) % 11) as f64 * 0.3))
        .collect();
    let data = PanelData::new(&layout, y, x).unwrap();
    let model = ConcentratedModel::new(&layout, &net, &data, Default::default()).unwrap();
    assert_eq!(
        model.params().dropped(),
        vec!["rho".to_string(), "lambda".to_string(), "gamma".to_string()]
    );
}
