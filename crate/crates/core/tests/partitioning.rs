use usk::partition::{divide, divide_expanded_bbox, high_visibility_counts};
use usk::trainer::occluder_city;

#[test]
fn visibility_division_beats_expanded_bbox_on_walled_city() {
    let model = occluder_city();
    let plan = divide(&model, 1.0, 1.0 / 6.0).unwrap();
    let base = divide_expanded_bbox(&model, 1.0, 0.5).unwrap();
    let ratio = base.pair_count() as f64 / plan.pair_count() as f64;
    eprintln!("pairs {} vs baseline {}, ratio {ratio:.3}", plan.pair_count(), base.pair_count());
    assert!(ratio >= 1.2);
    let counts = high_visibility_counts(&plan);
    eprintln!("{counts:?}");
    assert!(counts.iter().all(|(_, n)| *n > 0));
}
