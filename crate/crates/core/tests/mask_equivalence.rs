use cmivld::reference::mask_removal_gap;

#[test]
fn hard_mask_matches_physical_removal() {
    let worst = (0..100).map(|seed| mask_removal_gap(seed).unwrap()).fold(0.0, f64::max);
    assert!(worst < 1e-5, "max logit gap {worst:.3e}");
}
