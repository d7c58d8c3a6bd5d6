//! Randomized logical checks of the pruning baselines against direct
//! precision/recall oracles.

use primekit_core::geometry::{BBox, LabelMap};
use primekit_core::nets::{decode_labelmap, Detection, SegScores};
use primekit_core::priming::Cue;
use primekit_core::pruning::{prune_detections, prune_seg_type1, prune_seg_type2};
use primekit_core::tensor::IGNORE_LABEL;
use primekit_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: u64 = 500;
const N: usize = 5;

fn random_cue(rng: &mut ChaCha8Rng) -> Cue {
    Cue::new((0..N).map(|_| rng.random_bool(0.5)).collect())
}

fn random_detections(rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let count = rng.random_range(0..15);
    let mut dets: Vec<Detection> = (0..count)
        .map(|_| {
            let x = rng.random_range(0.0..50.0);
            let y = rng.random_range(0.0..50.0);
            Detection {
                bbox: BBox::new(x, y, x + rng.random_range(1.0..14.0), y + rng.random_range(1.0..14.0)),
                class_id: rng.random_range(1..=N),
                // coarse scores so duplicates occur
                score: rng.random_range(0..10) as f64 / 10.0,
            }
        })
        .collect();
    if count > 2 && rng.random_bool(0.3) {
        dets.push(dets[0]);
    }
    dets
}

fn random_labels(rng: &mut ChaCha8Rng, w: usize, h: usize, ignore: bool) -> LabelMap {
    let labels = (0..w * h)
        .map(|_| {
            if ignore && rng.random_bool(0.05) {
                IGNORE_LABEL as u8
            } else {
                rng.random_range(0..=N as u8)
            }
        })
        .collect();
    LabelMap::new(w, h, labels).unwrap()
}

/// (true positives, predicted, actual) pixels of `class`, ignoring
/// pixels whose ground truth is the ignore label.
fn counts(pred: &LabelMap, gt: &LabelMap, class: u8) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if g == IGNORE_LABEL as u8 {
            continue;
        }
        if p == class && g == class {
            c.0 += 1;
        }
        if p == class {
            c.1 += 1;
        }
        if g == class {
            c.2 += 1;
        }
    }
    c
}

/// Compares `tp1/pred1 >= tp0/pred0` without division; an empty
/// prediction set counts as perfectly precise.
fn precision_not_lower(before: (usize, usize, usize), after: (usize, usize, usize)) -> bool {
    match (before.1, after.1) {
        (_, 0) => true,
        (0, _) => false,
        (p0, p1) => after.0 * p0 >= before.0 * p1,
    }
}

fn multiset_subset(sub: &[Detection], sup: &[Detection]) -> bool {
    let mut used = vec![false; sup.len()];
    sub.iter().all(|d| {
        match sup.iter().enumerate().find(|&(i, s)| !used[i] && s == d) {
            Some((i, _)) => {
                used[i] = true;
                true
            }
            None => false,
        }
    })
}

fn permute_map(m: &LabelMap, perm: &[usize]) -> LabelMap {
    let labels = perm.iter().map(|&p| m.labels()[p]).collect();
    LabelMap::new(m.width(), m.height(), labels).unwrap()
}

fn permute_scores(s: &SegScores, perm: &[usize]) -> SegScores {
    let plane = perm.len();
    let data: Vec<f64> = (0..s.channels())
        .flat_map(|c| perm.iter().map(move |&p| c * plane + p))
        .map(|i| s.0.data()[i])
        .collect();
    SegScores(Tensor::from_vec(s.0.shape(), data).unwrap())
}

pub fn check_detections(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dets = random_detections(&mut rng);
    let cue = random_cue(&mut rng);
    let pruned = prune_detections(&dets, &cue);
    if !multiset_subset(&pruned, &dets) {
        return Err(format!("seed {seed}: output not a sub-multiset"));
    }
    if prune_detections(&pruned, &cue) != pruned {
        return Err(format!("seed {seed}: not idempotent"));
    }
    let expected: Vec<Detection> = dets.iter().filter(|d| cue.bits()[d.class_id - 1]).copied().collect();
    if pruned != expected {
        return Err(format!("seed {seed}: kept set differs from cued detections"));
    }
    Ok(())
}

pub fn check_type2(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rng.random_range(1..9), rng.random_range(1..9));
    let pred = random_labels(&mut rng, w, h, true);
    let gt = random_labels(&mut rng, w, h, true);
    let cue = random_cue(&mut rng);
    let pruned = prune_seg_type2(&pred, &cue);
    for class in cue.classes() {
        let before = counts(&pred, &gt, class as u8);
        let after = counts(&pruned, &gt, class as u8);
        if !precision_not_lower(before, after) {
            return Err(format!("seed {seed}: class {class} precision dropped"));
        }
        if before.0 != after.0 || before.2 != after.2 {
            return Err(format!("seed {seed}: class {class} recall changed"));
        }
    }
    if prune_seg_type2(&pruned, &cue) != pruned {
        return Err(format!("seed {seed}: type-2 not idempotent"));
    }
    let mut perm: Vec<usize> = (0..w * h).collect();
    perm.shuffle(&mut rng);
    if prune_seg_type2(&permute_map(&pred, &perm), &cue) != permute_map(&pruned, &perm) {
        return Err(format!("seed {seed}: type-2 does not commute with permutation"));
    }
    Ok(())
}

pub fn check_type1(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rng.random_range(1..9), rng.random_range(1..9));
    let data = (0..(N + 1) * w * h)
        .map(|_| rng.random_range(0..8) as f64 * 0.5 - 2.0)
        .collect();
    let scores = SegScores(Tensor::from_vec(&[N + 1, h, w], data).unwrap());
    let gt = random_labels(&mut rng, w, h, true);
    let cue = random_cue(&mut rng);
    let pruned = prune_seg_type1(&scores, &cue);
    let before_map = decode_labelmap(&scores);
    let after_map = decode_labelmap(&pruned);
    for class in cue.classes() {
        let before = counts(&before_map, &gt, class as u8);
        let after = counts(&after_map, &gt, class as u8);
        if after.0 < before.0 {
            return Err(format!("seed {seed}: class {class} recall dropped"));
        }
    }
    if after_map.labels().iter().any(|&l| l != 0 && !cue.is_set(l as usize)) {
        return Err(format!("seed {seed}: an uncued class survived"));
    }
    if prune_seg_type1(&pruned, &cue) != pruned {
        return Err(format!("seed {seed}: type-1 not idempotent"));
    }
    let mut perm: Vec<usize> = (0..w * h).collect();
    perm.shuffle(&mut rng);
    if prune_seg_type1(&permute_scores(&scores, &perm), &cue) != permute_scores(&pruned, &perm) {
        return Err(format!("seed {seed}: type-1 does not commute with permutation"));
    }
    Ok(())
}

/// First failure over all randomized cases, if any.
pub fn run_all() -> Result<(), String> {
    for seed in 0..CASES {
        check_detections(seed)?;
        check_type2(seed)?;
        check_type1(seed)?;
    }
    Ok(())
}
