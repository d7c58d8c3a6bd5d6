//! Deterministic fixtures shared by the benchmarks.

use primekit_core::data::{generate_scene, SceneConfig};
use primekit_core::tensor::kernels::ConvGeometry;
use primekit_core::Tensor;

/// A rendered 64px scene, the detector's native input.
pub fn scene_image(seed: u64) -> Tensor {
    generate_scene(seed, &SceneConfig::default()).unwrap().image
}

/// Deterministic pseudo-random values in [-1, 1), cheap to generate.
pub fn filled(len: usize, seed: u64) -> Vec<f64> {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

/// 3x3 same-padded convolution with all buffers filled.
pub struct ConvCase {
    pub geometry: ConvGeometry,
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv_case(in_ch: usize, out_ch: usize, size: usize) -> ConvCase {
    let geometry = ConvGeometry::new((in_ch, size, size), (out_ch, in_ch, 3, 3), 1, 1).unwrap();
    ConvCase {
        input: filled(in_ch * size * size, 1),
        weight: filled(out_ch * in_ch * 9, 2),
        bias: filled(out_ch, 3),
        geometry,
    }
}
