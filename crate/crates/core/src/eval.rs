//! Metrics, the free / prune / prime comparison and the experiment
//! protocols built on it.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{add_gaussian_noise, NoiseConfig};
use crate::error::{Error, Result};
use crate::geometry::{BBox, LabelMap};
use crate::nets::{decode_labelmap, BaseNetwork, Detection, NetOutput, SegScores, Task};
use crate::priming::{expand_block_mask, primed_forward, BlockMask, Cue, LayerMask, PrimingWeights};
use crate::pruning::{prune_detections, prune_seg_type1, prune_seg_type2};
use crate::tensor::{Tensor, IGNORE_LABEL};
use crate::training::{train_priming, GtBox, Sample, TrainConfig};

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Per-class average precision and their mean.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ApResult {
    pub per_class: BTreeMap<usize, f64>,
    pub map: f64,
}

/// Greedy matching of ranked detections to ground truth: each detection
/// takes the unmatched same-class box of highest IoU if that IoU reaches
/// `iou_thresh`. Returns per image, per detection whether it matched and
/// which gt index.
fn match_detections(dets: &[(usize, Detection)], gts: &[Vec<GtBox>], iou_thresh: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    dets.iter()
        .map(|&(img, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[img].iter().enumerate() {
                if g.class_id != d.class_id || used[img][j] {
                    continue;
                }
                let o = d.bbox.iou(&g.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the exact precision-recall curve with the precision envelope
/// (all-points interpolation).
fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Detection mAP over classes that have at least one ground-truth box.
/// Within a class, detections are ranked by score (descending), then image
/// index, then box coordinates, so input order never matters.
pub fn mean_ap(preds: &[Vec<Detection>], gts: &[Vec<GtBox>], iou_thresh: f64) -> Result<ApResult> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "mean_ap",
            format!("{} prediction lists for {} images", preds.len(), gts.len()),
        ));
    }
    let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gts.iter().flatten() {
        *n_gt.entry(g.class_id).or_default() += 1;
    }
    let mut per_class = BTreeMap::new();
    for (&class, &count) in &n_gt {
        let mut dets: Vec<(usize, Detection)> = preds
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.iter().filter(|d| d.class_id == class).map(move |&d| (i, d)))
            .collect();
        dets.sort_by(|(ia, a), (ib, b)| {
            b.score
                .total_cmp(&a.score)
                .then(ia.cmp(ib))
                .then(a.bbox.lex_cmp(&b.bbox))
        });
        let hits = match_detections(&dets, gts, iou_thresh);
        per_class.insert(class, average_precision(&hits, count));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(ApResult { per_class, map })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IouResult {
    pub per_class: BTreeMap<usize, f64>,
    pub miou: f64,
}

/// Dataset-level intersection over union per class (background included),
/// averaged over classes occurring in prediction or ground truth. Pixels
/// labelled [`IGNORE_LABEL`] in the ground truth are skipped.
pub fn mean_iou(preds: &[LabelMap], gts: &[LabelMap], n_classes: usize) -> Result<IouResult> {
    if preds.len() != gts.len() {
        return Err(Error::shape("mean_iou", format!("{} predictions for {} maps", preds.len(), gts.len())));
    }
    let k = n_classes + 1;
    let mut inter = vec![0u64; k];
    let mut union = vec![0u64; k];
    for (p, g) in preds.iter().zip(gts) {
        if (p.width(), p.height()) != (g.width(), g.height()) {
            return Err(Error::shape(
                "mean_iou",
                format!("{}x{} prediction for {}x{} ground truth", p.width(), p.height(), g.width(), g.height()),
            ));
        }
        for (&pl, &gl) in p.labels().iter().zip(g.labels()) {
            let (pl, gl) = (pl as usize, gl as usize);
            if gl == IGNORE_LABEL {
                continue;
            }
            if pl == gl {
                if gl < k {
                    inter[gl] += 1;
                    union[gl] += 1;
                }
            } else {
                if pl < k {
                    union[pl] += 1;
                }
                if gl < k {
                    union[gl] += 1;
                }
            }
        }
    }
    let per_class: BTreeMap<usize, f64> = (0..k)
        .filter(|&c| union[c] > 0)
        .map(|c| (c, inter[c] as f64 / union[c] as f64))
        .collect();
    let miou = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(IouResult { per_class, miou })
}

/// Ways of using a cue at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Unmodified network, cue ignored.
    Free,
    /// Free viewing, then cue-based pruning of detections.
    Prune,
    /// Free viewing, then type-1 (score) pruning.
    Prune1,
    /// Free viewing, then type-2 (label) pruning.
    Prune2,
    /// Per image, the better of the two segmentation prunings.
    PruneBest,
    /// Primed network. Detections are pruned to the cue; segmentation
    /// scores are used as is.
    Prime,
    /// Primed detector without pruning.
    PrimeRaw,
    /// Primed segmenter followed by type-1 pruning.
    PrimePrune1,
    /// Primed segmenter followed by type-2 pruning.
    PrimePrune2,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Free => "free",
            Strategy::Prune => "prune",
            Strategy::Prune1 => "prune1",
            Strategy::Prune2 => "prune2",
            Strategy::PruneBest => "prune-best",
            Strategy::Prime => "prime",
            Strategy::PrimeRaw => "prime-raw",
            Strategy::PrimePrune1 => "prime-prune1",
            Strategy::PrimePrune2 => "prime-prune2",
        }
    }

    /// Strategies reported by default for a task.
    pub fn defaults(task: Task) -> &'static [Strategy] {
        match task {
            Task::Detection => &[Strategy::Free, Strategy::Prune, Strategy::Prime, Strategy::PrimeRaw],
            Task::Segmentation => &[
                Strategy::Free,
                Strategy::Prune1,
                Strategy::Prune2,
                Strategy::PruneBest,
                Strategy::Prime,
                Strategy::PrimePrune1,
                Strategy::PrimePrune2,
            ],
        }
    }

    pub fn applies_to(self, task: Task) -> bool {
        Self::defaults(task).contains(&self)
    }

    fn primed(self) -> bool {
        matches!(
            self,
            Strategy::Prime | Strategy::PrimeRaw | Strategy::PrimePrune1 | Strategy::PrimePrune2
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        use Strategy::*;
        [Free, Prune, Prune1, Prune2, PruneBest, Prime, PrimeRaw, PrimePrune1, PrimePrune2]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::format("strategy", format!("unknown {s:?}")))
    }
}

/// Decoding and matching thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub iou_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.01,
            nms_iou: 0.45,
            iou_thresh: 0.5,
        }
    }
}

/// One metric value per strategy. The metric is mAP for detection and
/// mean IoU for segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyTable {
    pub task: Task,
    pub rows: Vec<(Strategy, f64)>,
}

impl StrategyTable {
    pub fn get(&self, s: Strategy) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == s).map(|r| r.1)
    }

    pub fn metric_name(&self) -> &'static str {
        metric_name(self.task)
    }
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Detection => "map",
        Task::Segmentation => "miou",
    }
}

/// Everything the strategies need for one image.
enum ImageOutputs {
    Detection {
        free: Vec<Detection>,
        /// Per cued class: primed detections.
        primed: Vec<(usize, Vec<Detection>)>,
    },
    Segmentation {
        free: SegScores,
        primed: Vec<(usize, SegScores)>,
    },
}

fn run_image(
    net: &BaseNetwork,
    pw: Option<&PrimingWeights>,
    image: &Tensor,
    cue: &Cue,
    cfg: &EvalConfig,
    need_primed: bool,
) -> Result<ImageOutputs> {
    let free = net.forward(image)?;
    let mut primed = Vec::new();
    if need_primed {
        for class in cue.classes() {
            let h = Cue::one_hot(cue.len(), class)?;
            let out = match pw {
                Some(pw) => primed_forward(net, pw, &h, image)?.0,
                None => free.clone(),
            };
            primed.push((class, out));
        }
    }
    Ok(match free {
        NetOutput::Detection(raw) => ImageOutputs::Detection {
            free: net.decode_detections(&raw, cfg.conf_threshold, cfg.nms_iou),
            primed: primed
                .into_iter()
                .map(|(c, o)| match o {
                    NetOutput::Detection(r) => (c, net.decode_detections(&r, cfg.conf_threshold, cfg.nms_iou)),
                    NetOutput::Segmentation(_) => unreachable!("same network"),
                })
                .collect(),
        },
        NetOutput::Segmentation(s) => ImageOutputs::Segmentation {
            free: s,
            primed: primed
                .into_iter()
                .map(|(c, o)| match o {
                    NetOutput::Segmentation(s) => (c, s),
                    NetOutput::Detection(_) => unreachable!("same network"),
                })
                .collect(),
        },
    })
}

/// Union of per-cue detection lists with exact duplicates removed, sorted by
/// descending score.
fn merge_detections(lists: impl IntoIterator<Item = Vec<Detection>>) -> Vec<Detection> {
    let mut all: Vec<Detection> = lists.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.bbox.lex_cmp(&b.bbox))
    });
    all.dedup();
    all
}

/// Element-wise maximum of per-cue score maps.
fn merge_scores(maps: &[SegScores]) -> SegScores {
    let mut out = maps[0].0.clone();
    for m in &maps[1..] {
        for (o, v) in out.data_mut().iter_mut().zip(m.0.data()) {
            *o = o.max(*v);
        }
    }
    SegScores(out)
}

fn single_iou(pred: &LabelMap, gt: &LabelMap, n: usize) -> f64 {
    mean_iou(std::slice::from_ref(pred), std::slice::from_ref(gt), n)
        .map(|r| r.miou)
        .unwrap_or(0.0)
}

enum Prediction {
    Boxes(Vec<Detection>),
    Labels(LabelMap),
}

fn apply_strategy(
    s: Strategy,
    out: &ImageOutputs,
    cue: &Cue,
    gt: &LabelMap,
    n_classes: usize,
) -> Prediction {
    match out {
        ImageOutputs::Detection { free, primed } => Prediction::Boxes(match s {
            Strategy::Free => free.clone(),
            Strategy::Prune => prune_detections(free, cue),
            Strategy::Prime => merge_detections(primed.iter().map(|(c, d)| {
                prune_detections(d, &Cue::one_hot(cue.len(), *c).expect("cued class"))
            })),
            Strategy::PrimeRaw => merge_detections(primed.iter().map(|(_, d)| d.clone())),
            _ => unreachable!("validated strategy"),
        }),
        ImageOutputs::Segmentation { free, primed } => {
            let primed_scores = || {
                if primed.is_empty() {
                    free.clone()
                } else {
                    merge_scores(&primed.iter().map(|p| p.1.clone()).collect::<Vec<_>>())
                }
            };
            Prediction::Labels(match s {
                Strategy::Free => decode_labelmap(free),
                Strategy::Prune1 => decode_labelmap(&prune_seg_type1(free, cue)),
                Strategy::Prune2 => prune_seg_type2(&decode_labelmap(free), cue),
                Strategy::PruneBest => {
                    let a = decode_labelmap(&prune_seg_type1(free, cue));
                    let b = prune_seg_type2(&decode_labelmap(free), cue);
                    if single_iou(&b, gt, n_classes) > single_iou(&a, gt, n_classes) {
                        b
                    } else {
                        a
                    }
                }
                Strategy::Prime => decode_labelmap(&primed_scores()),
                Strategy::PrimePrune1 => decode_labelmap(&prune_seg_type1(&primed_scores(), cue)),
                Strategy::PrimePrune2 => prune_seg_type2(&decode_labelmap(&primed_scores()), cue),
                _ => unreachable!("validated strategy"),
            })
        }
    }
}

/// Ground-truth classes of a sample as its test-time cue.
pub fn test_cue(sample: &Sample, n_classes: usize) -> Result<Cue> {
    Cue::from_classes(n_classes, &sample.classes())
}

/// Evaluates each strategy on the same images.
///
/// Every test image is cued with its ground-truth classes. Primed
/// strategies run one forward pass per cued class with a one-hot cue and
/// merge the per-cue outputs. Without priming weights the primed strategies
/// fall back to the unprimed network.
pub fn compare_strategies(
    net: &BaseNetwork,
    pw: Option<&PrimingWeights>,
    data: &[Sample],
    strategies: &[Strategy],
    cfg: &EvalConfig,
) -> Result<StrategyTable> {
    let images: Vec<&Tensor> = data.iter().map(|s| &s.image).collect();
    compare_on_images(net, pw, data, &images, strategies, cfg)
}

fn compare_on_images(
    net: &BaseNetwork,
    pw: Option<&PrimingWeights>,
    data: &[Sample],
    images: &[&Tensor],
    strategies: &[Strategy],
    cfg: &EvalConfig,
) -> Result<StrategyTable> {
    if let Some(bad) = strategies.iter().find(|s| !s.applies_to(net.task)) {
        return Err(Error::TaskMismatch(format!("strategy {bad} does not apply to {}", net.task)));
    }
    if let Some(pw) = pw {
        pw.validate(net)?;
    }
    let need_primed = strategies.iter().any(|s| s.primed());
    let preds: Vec<Vec<Prediction>> = data
        .par_iter()
        .zip(images.par_iter())
        .map(|(s, img)| {
            let cue = test_cue(s, net.n_classes)?;
            let out = run_image(net, pw, img, &cue, cfg, need_primed)?;
            Ok(strategies
                .iter()
                .map(|&st| apply_strategy(st, &out, &cue, &s.gt_mask, net.n_classes))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(strategies.len());
    for (k, &st) in strategies.iter().enumerate() {
        let metric = match net.task {
            Task::Detection => {
                let boxes: Vec<Vec<Detection>> = preds
                    .iter()
                    .map(|p| match &p[k] {
                        Prediction::Boxes(b) => b.clone(),
                        Prediction::Labels(_) => unreachable!(),
                    })
                    .collect();
                let gts: Vec<Vec<GtBox>> = data.iter().map(|s| s.gt_boxes.clone()).collect();
                mean_ap(&boxes, &gts, cfg.iou_thresh)?.map
            }
            Task::Segmentation => {
                let maps: Vec<LabelMap> = preds
                    .iter()
                    .map(|p| match &p[k] {
                        Prediction::Labels(l) => l.clone(),
                        Prediction::Boxes(_) => unreachable!(),
                    })
                    .collect();
                let gts: Vec<LabelMap> = data.iter().map(|s| s.gt_mask.clone()).collect();
                mean_iou(&maps, &gts, net.n_classes)?.miou
            }
        };
        rows.push((st, metric));
    }
    Ok(StrategyTable { task: net.task, rows })
}

/// One cell of a noise sweep; `sigma` is in 8-bit intensity steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    pub strategy: Strategy,
    pub metric: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise seed for one image at one noise level.
pub fn noise_seed(seed: u64, sigma: f64, image: usize) -> u64 {
    splitmix(splitmix(seed ^ splitmix(sigma.to_bits())) ^ image as u64)
}

/// Evaluates every strategy on copies of `data` corrupted at each noise
/// level. `sigmas` are in 8-bit steps (the image range `[0, 1]` spans 255)
/// and must be ascending. Only test images are corrupted.
pub fn noise_sweep(
    net: &BaseNetwork,
    pw: Option<&PrimingWeights>,
    data: &[Sample],
    sigmas: &[f64],
    strategies: &[Strategy],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if sigmas.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::invalid("noise_sweep", "sigmas must be sorted ascending"));
    }
    let mut rows = Vec::with_capacity(sigmas.len() * strategies.len());
    for &sigma in sigmas {
        let nc = NoiseConfig::from_8bit(sigma);
        let noisy: Vec<Tensor> = data
            .par_iter()
            .enumerate()
            .map(|(i, s)| add_gaussian_noise(&s.image, &nc, noise_seed(seed, sigma, i)))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = noisy.iter().collect();
        let table = compare_on_images(net, pw, data, &refs, strategies, cfg)?;
        rows.extend(table.rows.into_iter().map(|(strategy, metric)| SweepRow {
            sigma,
            strategy,
            metric,
        }));
    }
    Ok(rows)
}

/// One ablation configuration and its score.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub layers: LayerMask,
    pub metric: f64,
}

fn ablate(
    net: &BaseNetwork,
    train: &[Sample],
    test: &[Sample],
    configs: Vec<(String, LayerMask)>,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for (label, mask) in configs {
        log::info!("ablation {label}: priming layers {mask}");
        let (pw, _) = train_priming(net, &mask, train, cfg)?;
        let table = compare_strategies(net, Some(&pw), test, &[Strategy::Prime], eval)?;
        rows.push(AblationRow {
            label,
            layers: mask,
            metric: table.rows[0].1,
        });
    }
    Ok(rows)
}

/// Trains fresh priming weights per block mask under identical settings and
/// reports the primed metric of each.
pub fn block_ablation(
    net: &BaseNetwork,
    train: &[Sample],
    test: &[Sample],
    masks: &[BlockMask],
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    let configs = masks
        .iter()
        .map(|m| Ok((m.to_string(), expand_block_mask(net, m)?)))
        .collect::<Result<_>>()?;
    ablate(net, train, test, configs, cfg, eval)
}

/// As [`block_ablation`] with the first `k` primeable layers for each `k`.
pub fn layer_ablation(
    net: &BaseNetwork,
    train: &[Sample],
    test: &[Sample],
    prefixes: &[usize],
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    let configs = prefixes
        .iter()
        .map(|&k| Ok((k.to_string(), LayerMask::prefix(net, k)?)))
        .collect::<Result<_>>()?;
    ablate(net, train, test, configs, cfg, eval)
}

/// Counts ground-truth boxes found by one prediction set but not the other.
/// A box is found when some prediction of its class overlaps it with IoU at
/// least `iou_thresh`. Returns `(found by a only, found by b only)`.
pub fn count_discoveries(
    preds_a: &[Vec<Detection>],
    preds_b: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    iou_thresh: f64,
) -> Result<(usize, usize)> {
    if preds_a.len() != gts.len() || preds_b.len() != gts.len() {
        return Err(Error::shape("count_discoveries", "prediction and ground-truth lists differ in length"));
    }
    let found = |preds: &[Detection], g: &GtBox| {
        preds
            .iter()
            .any(|d| d.class_id == g.class_id && d.bbox.iou(&g.bbox) >= iou_thresh)
    };
    let mut counts = (0, 0);
    for ((a, b), g) in preds_a.iter().zip(preds_b).zip(gts) {
        for gt in g {
            match (found(a, gt), found(b, gt)) {
                (true, false) => counts.0 += 1,
                (false, true) => counts.1 += 1,
                _ => {}
            }
        }
    }
    Ok(counts)
}

/// 4-connected components of pixels where `pred(label)` holds, as lists of
/// pixel indices in scan order of their first pixel.
pub fn connected_components(map: &LabelMap, label: u8) -> Vec<Vec<usize>> {
    let (w, h) = (map.width(), map.height());
    let labels = map.labels();
    let mut seen = vec![false; labels.len()];
    let mut comps = Vec::new();
    for start in 0..labels.len() {
        if seen[start] || labels[start] != label {
            continue;
        }
        seen[start] = true;
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == label {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Whether a ground-truth instance (pixel set of class `class`) is found in
/// `pred`: the predicted components of that class touching the instance,
/// taken together, overlap it with IoU at least `iou_thresh`.
fn instance_found(pred: &LabelMap, instance: &[usize], class: u8, iou_thresh: f64) -> bool {
    let comps = connected_components(pred, class);
    let inst: std::collections::HashSet<usize> = instance.iter().copied().collect();
    let mut pred_pixels = 0usize;
    let mut inter = 0usize;
    for c in comps.iter().filter(|c| c.iter().any(|p| inst.contains(p))) {
        pred_pixels += c.len();
        inter += c.iter().filter(|p| inst.contains(p)).count();
    }
    let union = pred_pixels + instance.len() - inter;
    union > 0 && inter as f64 / union as f64 >= iou_thresh
}

/// Segmentation version of [`count_discoveries`], with instances taken as
/// 4-connected components of each ground-truth class.
pub fn count_discoveries_seg(
    preds_a: &[LabelMap],
    preds_b: &[LabelMap],
    gts: &[LabelMap],
    iou_thresh: f64,
) -> Result<(usize, usize)> {
    if preds_a.len() != gts.len() || preds_b.len() != gts.len() {
        return Err(Error::shape("count_discoveries", "prediction and ground-truth lists differ in length"));
    }
    let mut counts = (0, 0);
    for ((a, b), g) in preds_a.iter().zip(preds_b).zip(gts) {
        for class in g.foreground_classes() {
            let class = class as u8;
            for inst in connected_components(g, class) {
                match (
                    instance_found(a, &inst, class, iou_thresh),
                    instance_found(b, &inst, class, iou_thresh),
                ) {
                    (true, false) => counts.0 += 1,
                    (false, true) => counts.1 += 1,
                    _ => {}
                }
            }
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, score: f64, b: BBox) -> Detection {
        Detection {
            bbox: b,
            class_id,
            score,
        }
    }

    fn gt(class_id: usize, b: BBox) -> GtBox {
        GtBox { bbox: b, class_id }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let b = BBox::new(0., 0., 10., 10.);
        let gts = vec![vec![gt(1, b)], vec![gt(2, b)]];
        let perfect = vec![vec![det(1, 0.9, b)], vec![det(2, 0.8, b)]];
        assert_eq!(mean_ap(&perfect, &gts, 0.5).unwrap().map, 1.0);
        assert_eq!(mean_ap(&[vec![], vec![]], &gts, 0.5).unwrap().map, 0.0);
    }

    #[test]
    fn hand_computed_precision_recall_curve() {
        let g1 = BBox::new(0., 0., 10., 10.);
        let g2 = BBox::new(20., 20., 30., 30.);
        let gts = vec![vec![gt(1, g1), gt(1, g2)]];
        let preds = vec![vec![
            det(1, 0.9, g1),
            det(1, 0.8, BBox::new(40., 40., 50., 50.)),
            det(1, 0.7, g2),
        ]];
        // recall .5/.5/1, precision 1/.5/(2/3) → envelope 1, 2/3, 2/3
        let expected = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        assert_eq!(mean_ap(&preds, &gts, 0.5).unwrap().map, expected);
    }

    #[test]
    fn duplicate_detection_counts_as_false_positive() {
        let b = BBox::new(0., 0., 10., 10.);
        let gts = vec![vec![gt(1, b)]];
        let preds = vec![vec![det(1, 0.9, b), det(1, 0.8, b)]];
        assert_eq!(mean_ap(&preds, &gts, 0.5).unwrap().map, 1.0);
        let preds = vec![vec![det(1, 0.9, BBox::new(50., 50., 60., 60.)), det(1, 0.8, b)]];
        assert_eq!(mean_ap(&preds, &gts, 0.5).unwrap().map, 0.5);
    }

    #[test]
    fn mean_iou_hand_cases() {
        let g = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(mean_iou(&[g.clone()], &[g.clone()], 2).unwrap().miou, 1.0);
        let bg = LabelMap::background(2, 2);
        let r = mean_iou(&[bg.clone()], &[bg], 2).unwrap();
        assert_eq!(r.per_class[&0], 1.0);
        let p = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let r = mean_iou(&[p], &[g], 2).unwrap();
        assert!((r.per_class[&0] - 0.5).abs() < 1e-12);
        assert!((r.per_class[&1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let g = LabelMap::new(2, 1, vec![255, 1]).unwrap();
        let p = LabelMap::new(2, 1, vec![2, 1]).unwrap();
        let r = mean_iou(&[p], &[g], 2).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn discoveries_hand_case() {
        let b = |x: f64| BBox::new(x, 0., x + 10., 10.);
        let gts = vec![vec![gt(1, b(0.)), gt(1, b(20.))], vec![gt(2, b(0.))]];
        let a = vec![vec![det(1, 0.9, b(0.)), det(1, 0.9, b(20.))], vec![det(2, 0.5, b(0.))]];
        let bb = vec![vec![det(1, 0.9, b(0.))], vec![det(2, 0.5, b(0.))]];
        assert_eq!(count_discoveries(&a, &bb, &gts, 0.5).unwrap(), (1, 0));
        assert_eq!(count_discoveries(&a, &a, &gts, 0.5).unwrap(), (0, 0));
        let none = vec![vec![], vec![]];
        assert_eq!(count_discoveries(&a, &none, &gts, 0.5).unwrap(), (3, 0));
    }

    #[test]
    fn components_are_four_connected() {
        let m = LabelMap::new(3, 3, vec![1, 0, 1, 0, 1, 0, 1, 1, 0]).unwrap();
        let comps = connected_components(&m, 1);
        assert_eq!(comps, vec![vec![0], vec![2], vec![4, 6, 7]]);
    }

    #[test]
    fn segmentation_discoveries() {
        let g = LabelMap::new(4, 1, vec![1, 1, 0, 2]).unwrap();
        let a = g.clone();
        let b = LabelMap::new(4, 1, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(count_discoveries_seg(&[a], &[b], &[g], 0.5).unwrap(), (1, 0));
    }

    #[test]
    fn strategy_names_roundtrip() {
        for task in [Task::Detection, Task::Segmentation] {
            for &s in Strategy::defaults(task) {
                assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            }
        }
        assert!(!Strategy::Prune1.applies_to(Task::Detection));
    }
}
