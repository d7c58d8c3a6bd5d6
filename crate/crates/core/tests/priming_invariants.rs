//! Properties of primed inference that must hold exactly.

use primekit_core::nets::{build_toy_detector, build_toy_segmenter, BaseNetwork, Task};
use primekit_core::priming::{
    init_priming_with, modulate, primed_forward, primed_forward_on, Cue, InitScheme, LayerMask,
    ModulationVariant, Placement, PrimingConfig, PrimingWeights,
};
use primekit_core::training::{task_loss, Sample};
use primekit_core::data::{generate_scene, SceneConfig};
use primekit_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 5;

fn nets() -> Vec<BaseNetwork> {
    vec![
        build_toy_detector(N, 32, 1, 3).unwrap(),
        build_toy_segmenter(N, 32, 4).unwrap(),
    ]
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let v = (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(&[3, size, size], v).unwrap()
}

fn random_cue(rng: &mut ChaCha8Rng) -> Cue {
    Cue::new((0..N).map(|_| rng.random_bool(0.5)).collect())
}

fn weights(net: &BaseNetwork, variant: ModulationVariant, placement: Placement, init: InitScheme, seed: u64) -> PrimingWeights {
    let cfg = PrimingConfig {
        variant,
        placement,
        init,
    };
    init_priming_with(net, &LayerMask::all(net), N, seed, cfg).unwrap()
}

#[test]
fn zero_weights_reproduce_the_base_network_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for net in nets() {
        for variant in [ModulationVariant::Residual, ModulationVariant::ResidualBias] {
            for placement in [Placement::PreRelu, Placement::PostRelu] {
                let pw = weights(&net, variant, placement, InitScheme::Zero, 0);
                for _ in 0..25 {
                    let img = random_image(&mut rng, net.image_size);
                    let cue = random_cue(&mut rng);
                    let base = net.forward(&img).unwrap().flat_values();
                    let (primed, _) = primed_forward(&net, &pw, &cue, &img).unwrap();
                    let same = base.iter().zip(primed.flat_values()).all(|(a, b)| a.to_bits() == b.to_bits());
                    assert!(same, "{:?} {variant} {placement}", net.task);
                }
            }
        }
    }
}

#[test]
fn neutral_cue_reproduces_the_base_network_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for net in nets() {
        for placement in [Placement::PreRelu, Placement::PostRelu] {
            let pw = weights(&net, ModulationVariant::Residual, placement, InitScheme::SmallRandom { std: 0.3 }, 1);
            assert!(!pw.is_zero());
            for _ in 0..25 {
                let img = random_image(&mut rng, net.image_size);
                let base = net.forward(&img).unwrap().flat_values();
                let (primed, trace) = primed_forward(&net, &pw, &Cue::zeros(N), &img).unwrap();
                assert!(trace.alphas.values().flatten().all(|&a| a == 0.0));
                let same = base.iter().zip(primed.flat_values()).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same);
            }
        }
    }
}

#[test]
fn nonzero_weights_and_cue_change_the_output() {
    let net = build_toy_detector(N, 32, 1, 3).unwrap();
    let pw = weights(&net, ModulationVariant::Residual, Placement::PreRelu, InitScheme::SmallRandom { std: 0.3 }, 1);
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(0), 32);
    let base = net.forward(&img).unwrap().flat_values();
    let (primed, _) = primed_forward(&net, &pw, &Cue::ones(N), &img).unwrap();
    assert_ne!(base, primed.flat_values());
}

#[test]
fn one_hot_cue_reads_only_its_column() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for net in nets() {
        let pw = weights(&net, ModulationVariant::Residual, Placement::PreRelu, InitScheme::SmallRandom { std: 0.3 }, 2);
        for k in 1..=N {
            let mut other = pw.clone();
            for l in other.layers.values_mut() {
                let (c, n) = (l.weight.shape()[0], l.weight.shape()[1]);
                for row in 0..c {
                    for col in (0..n).filter(|&col| col != k - 1) {
                        l.weight.data_mut()[row * n + col] = rng.random_range(-1.0..1.0);
                    }
                }
            }
            let img = random_image(&mut rng, net.image_size);
            let cue = Cue::one_hot(N, k).unwrap();
            let (a, ta) = primed_forward(&net, &pw, &cue, &img).unwrap();
            let (b, tb) = primed_forward(&net, &other, &cue, &img).unwrap();
            assert_eq!(a, b);
            assert_eq!(ta, tb);
            for (&layer, alpha) in &ta.alphas {
                let w = &pw.layers[&layer].weight;
                let column: Vec<f64> = (0..w.shape()[0]).map(|r| w.data()[r * N + k - 1]).collect();
                assert_eq!(alpha, &column);
            }
        }
    }
}

#[test]
fn gradients_reach_every_primed_matrix_and_no_base_parameter() {
    let cfg = SceneConfig {
        image_size: 32,
        max_scale: 6.0,
        ..SceneConfig::default()
    };
    for net in nets() {
        let sample: Sample = generate_scene(5, &cfg).unwrap();
        let pw = weights(&net, ModulationVariant::Residual, Placement::PreRelu, InitScheme::Zero, 0);
        let mut tape = Tape::new();
        let base = net.bind(&mut tape, false);
        let priming = pw.bind(&mut tape, true);
        let img = tape.constant(sample.image.clone());
        let (heads, _) = primed_forward_on(&mut tape, &net, &base, &priming, &sample.cue, img).unwrap();
        let loss = task_loss(&mut tape, &net, heads, &sample).unwrap();
        tape.backward(loss).unwrap();
        for (layer, w, _) in priming.iter() {
            let g = tape.grad(w).unwrap_or_else(|| panic!("no gradient for layer {layer}"));
            assert!(g.iter().any(|&v| v != 0.0), "{:?} layer {layer}", net.task);
        }
        for (layer, w, b) in base.iter() {
            assert!(tape.grad(w).is_none() && tape.grad(b).is_none(), "base layer {layer}");
        }
        if net.task == Task::Detection {
            assert_eq!(priming.iter().count(), 6);
        }
    }
}

fn plane_tensor(c: usize, cells: usize, v: Vec<f64>) -> Tensor {
    Tensor::from_vec(&[c, 1, cells], v).unwrap()
}

proptest! {
    #[test]
    fn modulation_commutes_with_spatial_permutations(
        c in 1usize..5,
        cells in 1usize..12,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..c * cells).map(|_| rng.random_range(-2.0..2.0)).collect();
        let alpha: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..cells).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permute = |v: &[f64]| -> Vec<f64> {
            (0..c).flat_map(|ch| perm.iter().map(move |&p| v[ch * cells + p])).collect()
        };
        let a = Tensor::from_vec(&[c], alpha).unwrap();
        let lhs = modulate(&plane_tensor(c, cells, permute(&x)), &a).unwrap();
        let rhs = permute(modulate(&plane_tensor(c, cells, x.clone()), &a).unwrap().data());
        prop_assert_eq!(lhs.data(), rhs.as_slice());
    }

    #[test]
    fn modulation_is_homogeneous(
        c in 1usize..5,
        cells in 1usize..12,
        scale in -4.0f64..4.0,
        shift in -3i32..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..c * cells).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = Tensor::from_vec(&[c], (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let base = modulate(&plane_tensor(c, cells, x.clone()), &a).unwrap();
        // arbitrary scalars agree to rounding
        let scaled: Vec<f64> = x.iter().map(|v| scale * v).collect();
        let lhs = modulate(&plane_tensor(c, cells, scaled), &a).unwrap();
        for (l, b) in lhs.data().iter().zip(base.data()) {
            prop_assert!((l - scale * b).abs() <= 1e-12 * (1.0 + (scale * b).abs()));
        }
        // powers of two are exact
        let p = 2f64.powi(shift);
        let scaled: Vec<f64> = x.iter().map(|v| p * v).collect();
        let lhs = modulate(&plane_tensor(c, cells, scaled), &a).unwrap();
        let rhs: Vec<f64> = base.data().iter().map(|v| p * v).collect();
        prop_assert_eq!(lhs.data(), rhs.as_slice());
    }
}
