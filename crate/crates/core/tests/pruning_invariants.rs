//! Logical guarantees of the pruning baselines on random outputs.

mod common;

use common::pruning_checks::{check_detections, check_type1, check_type2, run_all};
use proptest::prelude::*;

#[test]
fn five_hundred_fixed_cases() {
    run_all().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn detection_pruning(seed in any::<u64>()) {
        prop_assert!(check_detections(seed).is_ok(), "{:?}", check_detections(seed));
    }

    #[test]
    fn type2_pruning(seed in any::<u64>()) {
        prop_assert!(check_type2(seed).is_ok(), "{:?}", check_type2(seed));
    }

    #[test]
    fn type1_pruning(seed in any::<u64>()) {
        prop_assert!(check_type1(seed).is_ok(), "{:?}", check_type1(seed));
    }
}
