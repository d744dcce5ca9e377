mod support;

#[test]
fn closed_lossless_network_conserves_volume() {
    let drift = support::closed_network_drift(10_000, 5);
    assert!(drift < 1e-9, "relative drift {drift:e}");
}
