mod common;

use common::*;

fn assert_check(c: Check) {
    if let Err(e) = c {
        panic!("{e}");
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    assert_check(check_gradients());
}

#[test]
fn patch_local_step_leaves_absent_patches_bitwise() {
    assert_check(check_locality());
}

#[test]
fn zero_decoders_and_zero_gamma_are_identities() {
    assert_check(check_identity());
}

#[test]
fn residual_lies_in_active_decoder_span() {
    assert_check(check_span());
}

#[test]
fn routing_simplex_scale_invariance_and_ties() {
    assert_check(check_routing());
}

#[test]
fn auxiliary_loss_values() {
    assert_check(check_aux_losses());
}

#[test]
fn uniform_routing_overlap_matches_combinatorics() {
    assert_check(check_overlap());
}

#[test]
fn loss_decomposition_identity() {
    assert_check(check_decomposition());
}

#[test]
fn apn_parameter_count_formula() {
    assert_check(check_param_formula());
}

#[test]
fn bench_table_reports_both_models() {
    let dir = tempfile::tempdir().unwrap();
    assert_check(check_bench_table(dir.path()));
}

#[test]
fn reruns_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    assert_check(check_reproducible(dir.path()));
}
