//! Base-network pretraining and frozen-base priming training.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{BBox, LabelMap};
use crate::nets::{bias_name, weight_name, BaseNetwork, BoundParams, HeadVars, NoHook, Task};
use crate::priming::{
    primed_forward_on, Cue, InitScheme, LayerMask, ModulationVariant, Placement, PrimingConfig,
    PrimingWeights, PrimingVars,
};
use crate::tensor::{Tape, Tensor, TensorArchive, Var, IGNORE_LABEL};

/// A ground-truth box with its 1-based class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
}

/// One training or test example with ground truth for both tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    pub gt_boxes: Vec<GtBox>,
    pub gt_mask: LabelMap,
    pub cue: Cue,
}

impl Sample {
    /// Sorted distinct ground-truth classes from boxes and mask.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.gt_mask.foreground_classes();
        c.extend(self.gt_boxes.iter().map(|b| b.class_id));
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Copy whose ground truth keeps only `class`, cued with `e_class`.
    pub fn restricted_to(&self, class: usize) -> Result<Sample> {
        let mut mask = self.gt_mask.clone();
        for l in mask.labels_mut() {
            let c = *l as usize;
            if c != class && c != 0 && c != crate::tensor::IGNORE_LABEL {
                *l = 0;
            }
        }
        Ok(Sample {
            image: self.image.clone(),
            gt_boxes: self.gt_boxes.iter().filter(|b| b.class_id == class).copied().collect(),
            gt_mask: mask,
            cue: Cue::one_hot(self.cue.len(), class)?,
        })
    }
}

/// Splits a sample into one copy per ground-truth class, each cued with and
/// annotated for that class alone. Background-only samples expand to nothing.
pub fn expand_multicue(s: &Sample) -> Result<Vec<Sample>> {
    s.classes().into_iter().map(|c| s.restricted_to(c)).collect()
}

/// Expands a whole dataset, returning the samples and how many inputs were
/// skipped for lacking foreground.
pub fn expand_dataset(data: &[Sample]) -> Result<(Vec<Sample>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for s in data {
        let e = expand_multicue(s)?;
        if e.is_empty() {
            skipped += 1;
        }
        out.extend(e);
    }
    if skipped > 0 {
        log::warn!("multi-cue expansion skipped {skipped} background-only samples");
    }
    Ok((out, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CueMode {
    /// Train with each sample's own cue.
    #[default]
    PlainCue,
    /// Expand multi-class samples into single-class copies first.
    MultiCue,
}

impl fmt::Display for CueMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CueMode::PlainCue => "plain-cue",
            CueMode::MultiCue => "multi-cue",
        })
    }
}

impl FromStr for CueMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain-cue" => Ok(Self::PlainCue),
            "multi-cue" => Ok(Self::MultiCue),
            other => Err(Error::format("cue mode", format!("unknown {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: CueMode,
    pub variant: ModulationVariant,
    pub placement: Placement,
    pub init: InitScheme,
    /// Total optimizer steps; overrides `epochs` when set.
    pub iterations: Option<usize>,
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            learning_rate: match task {
                Task::Detection => 0.01,
                Task::Segmentation => 0.1,
            },
            momentum: 0.9,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            mode: CueMode::PlainCue,
            variant: ModulationVariant::default(),
            placement: Placement::default(),
            init: InitScheme::default(),
            iterations: None,
        }
    }

    /// Base-network training on the 64px synthetic benchmark.
    pub fn for_base(task: Task) -> Self {
        Self {
            learning_rate: match task {
                Task::Detection => 0.003,
                Task::Segmentation => 0.01,
            },
            epochs: 15,
            ..Self::for_task(task)
        }
    }

    /// Priming weights against a frozen base network.
    pub fn for_priming(task: Task) -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 8,
            ..Self::for_task(task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::invalid("train config", d.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.epochs == 0 && self.iterations.is_none() {
            return bad("epochs must be at least 1");
        }
        if self.iterations == Some(0) {
            return bad("iterations must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        Ok(())
    }

    pub fn priming(&self) -> PrimingConfig {
        PrimingConfig {
            variant: self.variant,
            placement: self.placement,
            init: self.init,
        }
    }
}

/// Per-cell targets for the detector heads.
struct DetTargets {
    classes: Vec<usize>,
    loc: Vec<f64>,
    loc_weights: Vec<f64>,
}

fn detection_targets(net: &BaseNetwork, sample: &Sample) -> Result<DetTargets> {
    let g = net.grid_size();
    let cells = g * g;
    let a = net.anchors;
    let cell = net.image_size as f64 / g as f64;
    let mut classes = vec![0; a * cells];
    let mut loc = vec![0.0; 4 * a * cells];
    let mut loc_weights = vec![0.0; 4 * a * cells];
    // larger boxes claim a cell first
    let mut boxes = sample.gt_boxes.clone();
    boxes.sort_by(|x, y| y.bbox.area().total_cmp(&x.bbox.area()).then(x.bbox.lex_cmp(&y.bbox)));
    let mut taken = vec![false; cells];
    let mut positives = Vec::new();
    for b in &boxes {
        if b.class_id == 0 || b.class_id > net.n_classes {
            return Err(Error::invalid(
                "detection targets",
                format!("box class {} outside 1..={}", b.class_id, net.n_classes),
            ));
        }
        let (cx, cy) = b.bbox.center();
        let gx = ((cx / cell).floor() as usize).min(g - 1);
        let gy = ((cy / cell).floor() as usize).min(g - 1);
        let idx = gy * g + gx;
        if taken[idx] {
            continue;
        }
        taken[idx] = true;
        let t = [
            cx / cell - (gx as f64 + 0.5),
            cy / cell - (gy as f64 + 0.5),
            b.bbox.width() / cell,
            b.bbox.height() / cell,
        ];
        positives.push((idx, b.class_id, t));
    }
    let w = if positives.is_empty() {
        0.0
    } else {
        1.0 / (positives.len() * a) as f64
    };
    for (idx, class, t) in positives {
        for k in 0..a {
            classes[k * cells + idx] = class;
            for (j, &tj) in t.iter().enumerate() {
                loc[(4 * k + j) * cells + idx] = tj;
                loc_weights[(4 * k + j) * cells + idx] = w;
            }
        }
    }
    Ok(DetTargets {
        classes,
        loc,
        loc_weights,
    })
}

/// Task loss of one forward pass against a sample's ground truth.
///
/// Detection: per-cell softmax cross-entropy, averaged separately over
/// positive and negative cells and summed, plus squared box error averaged
/// over positive cells. Segmentation: mean per-pixel cross-entropy.
pub fn task_loss(tape: &mut Tape, net: &BaseNetwork, heads: HeadVars, sample: &Sample) -> Result<Var> {
    match (net.task, heads) {
        (Task::Detection, HeadVars::Detection { loc, conf }) => {
            let t = detection_targets(net, sample)?;
            let split = |keep_pos: bool| -> Vec<usize> {
                t.classes
                    .iter()
                    .map(|&c| if (c != 0) == keep_pos { c } else { IGNORE_LABEL })
                    .collect()
            };
            let neg = tape.grouped_softmax_cross_entropy(conf, net.anchors, &split(false))?;
            let pos = tape.grouped_softmax_cross_entropy(conf, net.anchors, &split(true))?;
            let ce = tape.add(pos, neg)?;
            let l2 = tape.weighted_sse(loc, &t.loc, &t.loc_weights)?;
            tape.add(ce, l2)
        }
        (Task::Segmentation, HeadVars::Segmentation { scores }) => {
            let m = &sample.gt_mask;
            if (m.width(), m.height()) != (net.image_size, net.image_size) {
                return Err(Error::shape(
                    "segmentation loss",
                    format!("mask {}x{} for image size {}", m.width(), m.height(), net.image_size),
                ));
            }
            tape.softmax_cross_entropy(scores, &m.targets())
        }
        _ => Err(Error::TaskMismatch(format!("{} heads do not match the network", net.task))),
    }
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence {
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// SGD with momentum over a named parameter set.
struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            velocity: BTreeMap::new(),
        }
    }

    fn step(&mut self, params: &mut TensorArchive, grads: &BTreeMap<String, Vec<f64>>) {
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

type SampleGrad = (f64, Vec<(String, Vec<f64>)>);

/// Shared epoch/batch loop. `grad_fn` returns one sample's loss and
/// per-parameter gradients at the current parameters.
fn run_sgd<F>(
    params: &mut TensorArchive,
    data: &[Sample],
    cfg: &TrainConfig,
    grad_fn: F,
) -> Result<Vec<f64>>
where
    F: Fn(&TensorArchive, &Sample) -> Result<SampleGrad> + Sync,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Degenerate("training set is empty".into()));
    }
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.iterations.unwrap_or(cfg.epochs * batches_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg);
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mut epoch = 0;
    while step < total_steps {
        order.shuffle(&mut rng);
        let mut losses: Vec<Option<f64>> = vec![None; data.len()];
        for batch in order.chunks(cfg.batch_size) {
            if step == total_steps {
                break;
            }
            let results: Vec<Result<SampleGrad>> = batch
                .par_iter()
                .map(|&i| grad_fn(params, &data[i]))
                .collect();
            let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (&i, r) in batch.iter().zip(results) {
                let (loss, grads) = r.map_err(|e| divergence(epoch, e))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, loss });
                }
                losses[i] = Some(loss);
                for (name, g) in grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in sum.values_mut() {
                g.iter_mut().for_each(|v| *v *= inv);
            }
            sgd.step(params, &sum);
            if params.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    epoch,
                    loss: f64::NAN,
                });
            }
            step += 1;
        }
        let seen: Vec<f64> = losses.into_iter().flatten().collect();
        let mean = seen.iter().sum::<f64>() / seen.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
        epoch += 1;
    }
    Ok(curve)
}

fn check_task(net: &BaseNetwork, data: &[Sample]) -> Result<()> {
    for s in data {
        net.check_image(&s.image)?;
        if s.cue.len() != net.n_classes {
            return Err(Error::TaskMismatch(format!(
                "sample cue has {} bits, network has {} classes",
                s.cue.len(),
                net.n_classes
            )));
        }
    }
    Ok(())
}

fn collect_base_grads(tape: &mut Tape, bound: &BoundParams) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for (i, w, b) in bound.iter() {
        let gw = tape.take_grad(w).unwrap_or_else(|| vec![0.0; tape.value(w).numel()]);
        let gb = tape.take_grad(b).unwrap_or_else(|| vec![0.0; tape.value(b).numel()]);
        out.push((weight_name(i), gw));
        out.push((bias_name(i), gb));
    }
    out
}

/// Trains all base parameters on the task loss. Returns the trained network
/// and the mean per-sample loss of every epoch.
pub fn train_base(net: &BaseNetwork, data: &[Sample], cfg: &TrainConfig) -> Result<(BaseNetwork, Vec<f64>)> {
    check_task(net, data)?;
    let mut params = net.params.clone();
    let shell = BaseNetwork {
        params: TensorArchive::new(),
        ..net.clone()
    };
    let curve = run_sgd(&mut params, data, cfg, |p, s| {
        let current = BaseNetwork {
            params: p.clone(),
            ..shell.clone()
        };
        let mut tape = Tape::new();
        let bound = current.bind(&mut tape, true);
        let x = tape.constant(s.image.clone());
        let heads = current.forward_on(&mut tape, x, &bound, &mut NoHook)?;
        let loss = task_loss(&mut tape, &current, heads, s)?;
        tape.backward(loss)?;
        let l = tape.value(loss).item()?;
        Ok((l, collect_base_grads(&mut tape, &bound)))
    })?;
    Ok((BaseNetwork { params, ..shell }, curve))
}

fn primed_loss(
    tape: &mut Tape,
    net: &BaseNetwork,
    priming: &PrimingVars,
    sample: &Sample,
) -> Result<Var> {
    let params = net.bind(tape, false);
    let x = tape.constant(sample.image.clone());
    let (heads, _) = primed_forward_on(tape, net, &params, priming, &sample.cue, x)?;
    task_loss(tape, net, heads, sample)
}

/// Trains priming weights for `mask` against a frozen `net`, starting from
/// the configured initialization.
pub fn train_priming(
    net: &BaseNetwork,
    mask: &LayerMask,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<(PrimingWeights, Vec<f64>)> {
    let init = crate::priming::init_priming_with(net, mask, net.n_classes, cfg.seed, cfg.priming())?;
    train_priming_from(net, &init, data, cfg)
}

/// Continues training existing priming weights. The base network is only
/// read; its parameters never change.
pub fn train_priming_from(
    net: &BaseNetwork,
    init: &PrimingWeights,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<(PrimingWeights, Vec<f64>)> {
    init.validate(net)?;
    check_task(net, data)?;
    let expanded;
    let data = match cfg.mode {
        CueMode::PlainCue => data,
        CueMode::MultiCue => {
            expanded = expand_dataset(data)?.0;
            &expanded[..]
        }
    };
    if init.layers.is_empty() {
        // nothing to train; every epoch sees the base network's loss
        cfg.validate()?;
        let loss = dataset_loss(net, None, data)?;
        let epochs = match cfg.iterations {
            Some(steps) => steps.div_ceil(data.len().div_ceil(cfg.batch_size)),
            None => cfg.epochs,
        };
        return Ok((init.clone(), vec![loss; epochs]));
    }
    let mut archive = init.to_archive();
    let shape = PrimingWeights {
        layers: BTreeMap::new(),
        ..init.clone()
    };
    let curve = run_sgd(&mut archive, data, cfg, |a, s| {
        let pw = PrimingWeights {
            layers: layers_from(a, init)?,
            ..shape.clone()
        };
        let mut tape = Tape::new();
        let priming = pw.bind(&mut tape, true);
        let loss = primed_loss(&mut tape, net, &priming, s)?;
        if tape.needs_grad(loss) {
            tape.backward(loss)?;
        }
        let l = tape.value(loss).item()?;
        let mut grads = Vec::new();
        for (i, w, b) in priming.iter() {
            let gw = tape.take_grad(w).unwrap_or_else(|| vec![0.0; tape.value(w).numel()]);
            grads.push((crate::priming::weight_name(i), gw));
            if let Some(b) = b {
                let gb = tape.take_grad(b).unwrap_or_else(|| vec![0.0; tape.value(b).numel()]);
                grads.push((crate::priming::bias_name(i), gb));
            }
        }
        Ok((l, grads))
    })?;
    let trained = PrimingWeights {
        layers: layers_from(&archive, init)?,
        ..shape
    };
    Ok((trained, curve))
}

fn layers_from(
    a: &TensorArchive,
    like: &PrimingWeights,
) -> Result<BTreeMap<usize, crate::priming::LayerPriming>> {
    like.layers
        .iter()
        .map(|(&i, l)| {
            Ok((
                i,
                crate::priming::LayerPriming {
                    weight: a.require(&crate::priming::weight_name(i))?.clone(),
                    bias: match l.bias {
                        Some(_) => Some(a.require(&crate::priming::bias_name(i))?.clone()),
                        None => None,
                    },
                },
            ))
        })
        .collect()
}

/// Mean task loss over `data`, primed with each sample's cue when `pw` is
/// given, plain otherwise.
pub fn dataset_loss(net: &BaseNetwork, pw: Option<&PrimingWeights>, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    let losses: Vec<f64> = data
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let loss = match pw {
                Some(pw) => {
                    let priming = pw.bind(&mut tape, false);
                    primed_loss(&mut tape, net, &priming, s)?
                }
                None => {
                    let params = net.bind(&mut tape, false);
                    let x = tape.constant(s.image.clone());
                    let heads = net.forward_on(&mut tape, x, &params, &mut NoHook)?;
                    task_loss(&mut tape, net, heads, s)?
                }
            };
            tape.value(loss).item()
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
