//! Finite-difference checks of every network at f64 on 8×8 configs.

mod common;

#[test]
fn every_component_matches_central_differences() {
    let reports = common::gradient_suite();
    for r in &reports {
        println!("{}", r.summary());
    }
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.summary()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
