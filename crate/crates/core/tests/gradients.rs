//! Finite-difference agreement for every differentiable op.

mod common;

use common::gradcheck::{cases, max_rel_error, worst_over_instances, REL_TOL};
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences_on_fixed_seeds() {
    for (name, make) in cases() {
        let worst = worst_over_instances(make);
        assert!(worst < REL_TOL, "{name}: relative error {worst:e}");
    }
}

macro_rules! fd_property {
    ($($test:ident => $op:literal),* $(,)?) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(20))]
            $(
                #[test]
                fn $test(seed in any::<u64>()) {
                    let make = cases().into_iter().find(|(n, _)| *n == $op).unwrap().1;
                    let err = max_rel_error(&make(seed), seed);
                    prop_assert!(err < REL_TOL, "{} seed {}: {:e}", $op, seed, err);
                }
            )*
        }
    };
}

fd_property! {
    conv2d_gradient => "conv2d",
    relu_gradient => "relu",
    maxpool_gradient => "maxpool2d",
    upsample_gradient => "bilinear_upsample",
    matvec_gradient => "matvec",
    modulate_gradient => "modulate",
    channel_scale_gradient => "channel_scale",
    channel_shift_gradient => "channel_shift",
    add_gradient => "add",
    scale_gradient => "scale",
    sum_gradient => "sum",
    reshape_gradient => "reshape",
    cross_entropy_gradient => "softmax_cross_entropy",
    grouped_cross_entropy_gradient => "grouped_softmax_cross_entropy",
    weighted_sse_gradient => "weighted_sse",
    composite_net_gradient => "conv_relu_pool_linear",
}

#[test]
fn relu_gradient_at_fixed_point() {
    use primekit_core::{Tape, Tensor};
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
}
