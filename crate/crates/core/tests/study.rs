mod common;

use pseudoheal::study::{aggregate, Criterion};

#[test]
fn study_statistics_hold_their_properties() {
    common::check_study_statistics().unwrap();
}

#[test]
fn the_most_often_approved_method_is_best() {
    let scores = common::score_fixture(40, 3);
    let summary = aggregate(&scores, 1).unwrap();
    for c in Criterion::ALL {
        let best = summary.iter().find(|s| s.criterion == c && s.p_value.is_none()).unwrap();
        assert_eq!(best.method_id, "ours");
        assert_eq!(best.best_method, "ours");
        let worst = summary.iter().find(|s| s.criterion == c && s.method_id == "cgan").unwrap();
        assert!(worst.p_value.unwrap() < 0.05, "{worst:?}");
    }
}
