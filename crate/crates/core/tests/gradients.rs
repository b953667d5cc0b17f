mod common;

use spa_core::classifier::Profile;

#[test]
fn small_cnn_input_gradient_matches_finite_differences() {
    let r = common::classifier_probes(Profile::SmallCnn, 24, 1);
    assert_eq!(r.checked, 24);
    assert!(r.worst < 1e-2, "{r:?}");
}

#[test]
fn resnet_input_gradient_matches_finite_differences() {
    let r = common::classifier_probes(Profile::Resnet, 20, 2);
    assert_eq!(r.checked, 20);
    assert!(r.worst < 1e-2, "{r:?}");
}

#[test]
fn manipulator_attribute_gradient_matches_finite_differences() {
    let r = common::manipulator_probes(24, 3);
    assert_eq!(r.checked, 24, "{r:?}");
    assert!(r.worst < 2e-2, "{r:?}");
}
