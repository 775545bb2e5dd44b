mod common;

use common::{run_property, PROPERTIES};

fn check(name: &'static str) {
    let r = run_property(name);
    assert!(r.passed(), "{}: worst {:.3e} > {:.1e}: {:?}", r.name, r.worst, r.tol, r.failures);
}

#[test]
fn tangent_projection_is_idempotent() {
    check(PROPERTIES[0]);
}

#[test]
fn horizontal_space_is_orthogonal_to_vertical_space() {
    check(PROPERTIES[1]);
}

#[test]
fn lyapunov_solution_has_small_residual() {
    check(PROPERTIES[2]);
}

#[test]
fn retraction_agrees_to_first_order() {
    check(PROPERTIES[3]);
}

#[test]
fn metric_and_retraction_are_rotation_invariant() {
    check(PROPERTIES[4]);
}

#[test]
fn gradient_matches_central_difference() {
    check(PROPERTIES[5]);
}

#[test]
fn hessian_is_symmetric() {
    check(PROPERTIES[6]);
}

#[test]
fn hessian_matches_second_difference_at_critical_point() {
    check(PROPERTIES[7]);
}
