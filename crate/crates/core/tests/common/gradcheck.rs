//! Central finite-difference checks for every differentiable tape op.
//!
//! Each case draws a random instance from a seed, reduces the op's output
//! to a scalar with a fixed random quadratic, and compares the tape's
//! gradient for every input element against `(f(x+e) - f(x-e)) / 2e`.

use primekit_core::{Result, Tape, Tensor, Var};
use primekit_core::tensor::IGNORE_LABEL;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = r.random_range(0.05..1.0);
            if r.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// Distinct values at least 0.01 apart, in random order.
fn distinct(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    v.shuffle(r);
    Tensor::from_vec(shape, v).unwrap()
}

fn scalar_loss(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).numel();
    let mut r = rng(seed ^ 0x5eed);
    let target: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let weights: Vec<f64> = (0..n).map(|_| r.random_range(0.5..1.5)).collect();
    tape.weighted_sse(out, &target, &weights)
}

fn evaluate(inst: &Instance, inputs: &[Tensor], seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (inst.build)(&mut tape, &vars).unwrap();
    let loss = scalar_loss(&mut tape, out, seed).unwrap();
    tape.value(loss).item().unwrap()
}

/// Largest relative disagreement between analytic and numeric gradients.
pub fn max_rel_error(inst: &Instance, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (inst.build)(&mut tape, &vars).unwrap();
    let loss = scalar_loss(&mut tape, out, seed).unwrap();
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inst.inputs[k].numel()]);
        for i in 0..inst.inputs[k].numel() {
            let mut plus = inst.inputs.clone();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inst.inputs.clone();
            minus[k].data_mut()[i] -= EPS;
            let numeric = (evaluate(inst, &plus, seed) - evaluate(inst, &minus, seed)) / (2.0 * EPS);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

fn conv(seed: u64) -> Instance {
    let mut r = rng(seed);
    let c_in = r.random_range(1..=3);
    let c_out = r.random_range(1..=3);
    let k = r.random_range(1..=3);
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=1).min(k - 1);
    let out_h = r.random_range(2..=4);
    let out_w = r.random_range(2..=4);
    let h = (out_h - 1) * stride + k - 2 * pad;
    let w = (out_w - 1) * stride + k - 2 * pad;
    Instance {
        inputs: vec![
            uniform(&mut r, &[c_in, h, w], -1.0, 1.0),
            uniform(&mut r, &[c_out, c_in, k, k], -1.0, 1.0),
            uniform(&mut r, &[c_out], -0.5, 0.5),
        ],
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad)),
    }
}

fn relu(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n = r.random_range(2..=12);
    Instance {
        inputs: vec![off_zero(&mut r, &[n])],
        build: Box::new(|t, v| t.relu(v[0])),
    }
}

fn maxpool(seed: u64) -> Instance {
    let mut r = rng(seed);
    let c = r.random_range(1..=2);
    let (k, stride) = if r.random_bool(0.5) { (2, 2) } else { (3, 1) };
    let oh = r.random_range(1..=3);
    let ow = r.random_range(1..=3);
    let h = (oh - 1) * stride + k;
    let w = (ow - 1) * stride + k;
    Instance {
        inputs: vec![distinct(&mut r, &[c, h, w])],
        build: Box::new(move |t, v| t.maxpool2d(v[0], k, stride)),
    }
}

fn upsample(seed: u64) -> Instance {
    let mut r = rng(seed);
    let c = r.random_range(1..=2);
    let h = r.random_range(1..=4);
    let w = r.random_range(1..=4);
    let f = r.random_range(1..=3);
    Instance {
        inputs: vec![uniform(&mut r, &[c, h, w], -1.0, 1.0)],
        build: Box::new(move |t, v| t.bilinear_upsample(v[0], f)),
    }
}

fn matvec(seed: u64) -> Instance {
    let mut r = rng(seed);
    let m = r.random_range(1..=5);
    let n = r.random_range(1..=5);
    Instance {
        inputs: vec![uniform(&mut r, &[m, n], -1.0, 1.0), uniform(&mut r, &[n], -1.0, 1.0)],
        build: Box::new(|t, v| t.matvec(v[0], v[1])),
    }
}

fn channel_case(seed: u64, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Instance {
    let mut r = rng(seed);
    let c = r.random_range(1..=4);
    let h = r.random_range(1..=3);
    let w = r.random_range(1..=3);
    Instance {
        inputs: vec![uniform(&mut r, &[c, h, w], -1.0, 1.0), uniform(&mut r, &[c], -0.8, 0.8)],
        build: Box::new(move |t, v| op(t, v[0], v[1])),
    }
}

fn modulate(seed: u64) -> Instance {
    channel_case(seed, Tape::modulate)
}

fn channel_scale(seed: u64) -> Instance {
    channel_case(seed, Tape::channel_scale)
}

fn channel_shift(seed: u64) -> Instance {
    channel_case(seed, Tape::channel_shift)
}

fn add(seed: u64) -> Instance {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=3), r.random_range(1..=4)];
    Instance {
        inputs: vec![uniform(&mut r, &shape, -1.0, 1.0), uniform(&mut r, &shape, -1.0, 1.0)],
        build: Box::new(|t, v| t.add(v[0], v[1])),
    }
}

fn scale(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n = r.random_range(1..=8);
    let f = r.random_range(-2.0..2.0);
    Instance {
        inputs: vec![uniform(&mut r, &[n], -1.0, 1.0)],
        build: Box::new(move |t, v| t.scale(v[0], f)),
    }
}

fn sum(seed: u64) -> Instance {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=3), r.random_range(1..=4)];
    Instance {
        inputs: vec![uniform(&mut r, &shape, -1.0, 1.0)],
        build: Box::new(|t, v| t.sum(v[0])),
    }
}

fn reshape(seed: u64) -> Instance {
    let mut r = rng(seed);
    let (a, b) = (r.random_range(1..=3), r.random_range(1..=4));
    Instance {
        inputs: vec![uniform(&mut r, &[a, b], -1.0, 1.0)],
        build: Box::new(move |t, v| {
            let flat = t.reshape(v[0], &[a * b])?;
            t.reshape(flat, &[b, a])
        }),
    }
}

fn cross_entropy(seed: u64) -> Instance {
    let mut r = rng(seed);
    let classes = r.random_range(2..=4);
    let positions = r.random_range(1..=6);
    let mut targets: Vec<usize> = (0..positions).map(|_| r.random_range(0..classes)).collect();
    if positions > 1 {
        targets[0] = IGNORE_LABEL;
    }
    Instance {
        inputs: vec![uniform(&mut r, &[classes, positions], -2.0, 2.0)],
        build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &targets)),
    }
}

fn grouped_cross_entropy(seed: u64) -> Instance {
    let mut r = rng(seed);
    let groups = r.random_range(1..=3);
    let classes = r.random_range(2..=4);
    let positions = r.random_range(1..=4);
    let targets: Vec<usize> = (0..groups * positions)
        .map(|_| if r.random_bool(0.15) { IGNORE_LABEL } else { r.random_range(0..classes) })
        .collect();
    Instance {
        inputs: vec![uniform(&mut r, &[groups * classes, positions], -2.0, 2.0)],
        build: Box::new(move |t, v| t.grouped_softmax_cross_entropy(v[0], groups, &targets)),
    }
}

fn weighted_sse(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n = r.random_range(1..=8);
    let target: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let weights: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
    Instance {
        inputs: vec![uniform(&mut r, &[n], -1.0, 1.0)],
        build: Box::new(move |t, v| t.weighted_sse(v[0], &target, &weights)),
    }
}

/// conv -> relu -> pool -> flatten -> linear, with pre-activations kept
/// away from the relu kink and pool windows free of near-ties.
fn composite(seed: u64) -> Instance {
    let mut attempt = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    loop {
        let mut r = rng(attempt);
        attempt = attempt.wrapping_add(1);
        let x = uniform(&mut r, &[2, 4, 4], -1.0, 1.0);
        let w = uniform(&mut r, &[3, 2, 3, 3], -0.6, 0.6);
        let b = uniform(&mut r, &[3], -0.2, 0.2);
        let lin = uniform(&mut r, &[2, 12], -1.0, 1.0);
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let vw = tape.constant(w.clone());
        let vb = tape.constant(b.clone());
        let z = tape.conv2d(vx, vw, vb, 1, 1).unwrap();
        let pre = tape.value(z).data().to_vec();
        if pre.iter().any(|v| v.abs() < 1e-2) {
            continue;
        }
        let mut windows_ok = true;
        for c in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut vals: Vec<f64> = (0..4)
                        .map(|i| pre[c * 16 + (2 * oy + i / 2) * 4 + 2 * ox + i % 2].max(0.0))
                        .filter(|&v| v > 0.0)
                        .collect();
                    vals.sort_by(|a, b| b.total_cmp(a));
                    if vals.len() >= 2 && vals[0] - vals[1] < 1e-2 {
                        windows_ok = false;
                    }
                }
            }
        }
        if !windows_ok {
            continue;
        }
        return Instance {
            inputs: vec![x, w, b, lin],
            build: Box::new(|t, v| {
                let z = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                let a = t.relu(z)?;
                let p = t.maxpool2d(a, 2, 2)?;
                let flat = t.reshape(p, &[12])?;
                t.matvec(v[3], flat)
            }),
        };
    }
}

/// Every differentiable op with its instance generator.
pub fn cases() -> Vec<(&'static str, fn(u64) -> Instance)> {
    vec![
        ("conv2d", conv),
        ("relu", relu),
        ("maxpool2d", maxpool),
        ("bilinear_upsample", upsample),
        ("matvec", matvec),
        ("modulate", modulate),
        ("channel_scale", channel_scale),
        ("channel_shift", channel_shift),
        ("add", add),
        ("scale", scale),
        ("sum", sum),
        ("reshape", reshape),
        ("softmax_cross_entropy", cross_entropy),
        ("grouped_softmax_cross_entropy", grouped_cross_entropy),
        ("weighted_sse", weighted_sse),
        ("conv_relu_pool_linear", composite),
    ]
}

/// Worst error over `INSTANCES` seeded instances of one op.
pub fn worst_over_instances(make: fn(u64) -> Instance) -> f64 {
    (0..INSTANCES)
        .map(|s| max_rel_error(&make(s), s))
        .fold(0.0, f64::max)
}
