use glcn_core::gradsuite::{layer_cases, network_cases, GRAD_TOLERANCE};

#[test]
fn every_layer_matches_central_differences() {
    for c in layer_cases().unwrap() {
        assert!(c.passes(), "{}: max relative error {:e} >= {GRAD_TOLERANCE:e}", c.name, c.report.max_rel_error);
        assert!(c.report.coordinates > 0, "{} checked nothing", c.name);
    }
}

#[test]
fn full_networks_match_central_differences() {
    let cases = network_cases().unwrap();
    assert_eq!(cases.len(), 3);
    for c in cases {
        assert!(c.passes(), "{}: max relative error {:e} (worst {:?})", c.name, c.report.max_rel_error, c.report.worst);
    }
}
