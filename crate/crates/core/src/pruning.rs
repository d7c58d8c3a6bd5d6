//! Cue-based post-processing baselines.
//!
//! These never touch the network: they filter or rewrite its finished
//! outputs so that only cued classes remain.

use crate::geometry::LabelMap;
use crate::nets::{Detection, SegScores};
use crate::priming::Cue;

/// Stand-in for minus infinity on masked score channels; finite so that
/// downstream softmax and comparisons stay NaN-free.
pub const MASKED_SCORE: f64 = f64::MIN;

/// Keeps the detections whose class is cued, in their original order.
pub fn prune_detections(dets: &[Detection], h: &Cue) -> Vec<Detection> {
    dets.iter().filter(|d| h.is_set(d.class_id)).copied().collect()
}

/// Type-1 pruning: replaces every score of a cue-off foreground channel with
/// [`MASKED_SCORE`]. Background (channel 0) and cued channels are untouched.
pub fn prune_seg_type1(scores: &SegScores, h: &Cue) -> SegScores {
    let mut t = scores.0.clone();
    let plane = scores.height() * scores.width();
    for c in 1..scores.channels() {
        if !h.is_set(c) {
            t.data_mut()[c * plane..(c + 1) * plane].fill(MASKED_SCORE);
        }
    }
    SegScores(t)
}

/// Type-2 pruning: relabels pixels of cue-off foreground classes as
/// background. The ignore label is left alone.
pub fn prune_seg_type2(labels: &LabelMap, h: &Cue) -> LabelMap {
    let mut out = labels.clone();
    for l in out.labels_mut() {
        let c = *l as usize;
        if c != 0 && c != crate::tensor::IGNORE_LABEL && !h.is_set(c) {
            *l = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::nets::decode_labelmap;
    use crate::tensor::Tensor;

    fn det(class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0 + score),
            class_id,
            score,
        }
    }

    #[test]
    fn detection_pruning_reference_cases() {
        let dets = vec![det(2, 0.9), det(1, 0.8), det(2, 0.7), det(3, 0.6), det(2, 0.5)];
        assert_eq!(prune_detections(&dets, &Cue::ones(3)), dets);
        assert!(prune_detections(&dets, &Cue::zeros(3)).is_empty());
        let kept = prune_detections(&dets, &Cue::one_hot(3, 2).unwrap());
        let expected: Vec<Detection> = dets.iter().filter(|d| d.class_id == 2).copied().collect();
        assert_eq!(kept, expected);
        assert_eq!(kept.iter().map(|d| d.score).collect::<Vec<_>>(), vec![0.9, 0.7, 0.5]);
    }

    #[test]
    fn type1_masks_cue_off_channels_only() {
        let scores = SegScores(Tensor::from_vec(&[4, 1, 2], (0..8).map(f64::from).collect()).unwrap());
        assert_eq!(prune_seg_type1(&scores, &Cue::ones(3)), scores);
        let p = prune_seg_type1(&scores, &Cue::one_hot(3, 1).unwrap());
        assert_eq!(&p.0.data()[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert!(p.0.data()[4..].iter().all(|&v| v == MASKED_SCORE));
    }

    #[test]
    fn type1_flips_argmax_only_when_cued_class_beats_background() {
        // pixel 0: bg .2, c1 .5, c2 .9 → c1 after pruning
        // pixel 1: bg .6, c1 .5, c2 .9 → background after pruning
        let s = SegScores(Tensor::from_vec(&[3, 1, 2], vec![0.2, 0.6, 0.5, 0.5, 0.9, 0.9]).unwrap());
        assert_eq!(decode_labelmap(&s).labels(), &[2, 2]);
        let p = prune_seg_type1(&s, &Cue::one_hot(2, 1).unwrap());
        assert_eq!(decode_labelmap(&p).labels(), &[1, 0]);
    }

    #[test]
    fn type2_relabels_other_classes() {
        let m = LabelMap::new(2, 2, vec![1, 2, 2, 1]).unwrap();
        assert_eq!(prune_seg_type2(&m, &Cue::ones(2)), m);
        let bg = LabelMap::background(2, 2);
        assert_eq!(prune_seg_type2(&bg, &Cue::one_hot(2, 1).unwrap()), bg);
        let p = prune_seg_type2(&m, &Cue::one_hot(2, 1).unwrap());
        assert_eq!(p.labels(), &[1, 0, 0, 1]);
        let ign = LabelMap::new(1, 2, vec![255, 2]).unwrap();
        assert_eq!(prune_seg_type2(&ign, &Cue::one_hot(2, 1).unwrap()).labels(), &[255, 0]);
    }
}
