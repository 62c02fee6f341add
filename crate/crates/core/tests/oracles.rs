mod common;

use common::{dense_oracle_error, joint_vs_concentrated, score_fd_error};

#[test]
fn concentrated_pieces_match_dense_matrices() {
    for seed in 0..6 {
        let err = dense_oracle_error(seed);
        assert!(err < 1e-9, "seed {seed}: {err:e}");
    }
}

#[test]
fn joint_maximum_matches_concentrated_fit() {
    for seed in 0..3 {
        let (theta_gap, alpha_gap, grad) = joint_vs_concentrated(seed);
        assert!(
            theta_gap < 1e-5 && alpha_gap < 1e-5,
            "seed {seed}: {theta_gap:e} {alpha_gap:e} (grad {grad:e})"
        );
    }
}

#[test]
fn analytic_score_matches_differences() {
    let err = score_fd_error(11, 8);
    assert!(err < 1e-5, "{err:e}");
}
