mod support;

use support::suites::{self, ORACLE_TOL};

fn within(name: &str, err: f64) {
    assert!(err <= ORACLE_TOL, "{name}: scaled error {err:e}");
}

#[test]
fn conv3d_matches_reference() {
    within("conv3d", suites::oracle_conv3d(1).unwrap());
}

#[test]
fn transposed_conv3d_matches_reference() {
    within("transposed conv3d", suites::oracle_transposed_conv3d(2).unwrap());
}

#[test]
fn batch_norm_matches_reference() {
    within("batch norm", suites::oracle_batch_norm(3).unwrap());
}

#[test]
fn attention_matches_reference() {
    within("attention", suites::oracle_attention(4).unwrap());
}

#[test]
fn losses_match_reference() {
    within("losses", suites::oracle_losses(5).unwrap());
}
