//! Acceptance suite: every release criterion at its pinned scale, seed and
//! tolerance, one pass/fail line per criterion.
//!
//! `cargo test --test acceptance -- --nocapture` shows the lines; the CLI
//! `validate` subcommand runs the same stages and writes their CSV tables.

use hypotube::validate::{run_stage, StageReport};

fn assert_stage(criterion: &str, name: &str) {
    let report: StageReport = run_stage(name);
    let verdict = if report.pass { "PASS" } else { "FAIL" };
    println!("[{verdict}] {criterion}: {name}");
    for line in &report.lines {
        println!("    {line}");
    }
    assert!(report.pass, "criterion {criterion} ({name}) failed: {:#?}", report.lines);
}

#[test]
fn criterion_01_norm_algebra_suite() {
    assert_stage("criterion 1", "norm_algebra");
}

#[test]
fn criterion_02_paper_formula_reproduction() {
    assert_stage("criterion 2", "reference_formulas");
}

#[test]
fn criterion_03_bm_tube_probability() {
    assert_stage("criterion 3", "bm_tube_mc");
}

#[test]
fn criterion_04_exponential_scaling() {
    assert_stage("criterion 4", "bm_scaling");
}

#[test]
fn criterion_05_heisenberg_scaling_identity() {
    assert_stage("criterion 5", "heisenberg_scaling");
}

#[test]
fn criterion_06_bound_bracketing() {
    assert_stage("criterion 6", "bound_bracketing");
}

#[test]
fn criterion_07_grid_construction() {
    assert_stage("criterion 7", "grid_construction");
}

#[test]
fn criterion_08_metric_closed_forms() {
    assert_stage("criterion 8", "metric_closed_forms");
}

#[test]
fn criterion_09_fixed_point_solver() {
    assert_stage("criterion 9", "fixed_point");
}

#[test]
fn criterion_10_equivalence_diagnostics() {
    assert_stage("criterion 10", "equivalence");
}

#[test]
fn criterion_11_determinism() {
    assert_stage("criterion 11", "determinism");
}
