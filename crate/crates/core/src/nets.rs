//! Toy base networks and their output decoding.
//!
//! The detector mirrors the four-part layout of a single-shot detector
//! (backbone, extra layers, a localization head and a class-confidence
//! head) with one prediction per grid cell and anchor. The segmenter is a
//! three-stage FCN with a 1×1 class head, one skip connection and bilinear
//! decoding back to input resolution. Class channel 0 is background in
//! both.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{BBox, LabelMap};
use crate::tensor::{Tape, Tensor, TensorArchive, Var};

/// Total downsampling of the detector backbone; one grid cell per stride².
pub const DETECTOR_STRIDE: usize = 8;
/// Output stride of the segmenter encoder.
pub const SEGMENTER_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Detection,
    Segmentation,
}

impl Task {
    /// Block tags in network order; this is also the bit order of block masks.
    pub fn block_order(self) -> &'static [BlockTag] {
        match self {
            Task::Detection => &[BlockTag::Backbone, BlockTag::Extra, BlockTag::Loc, BlockTag::Conf],
            Task::Segmentation => &[BlockTag::Encoder, BlockTag::Head, BlockTag::Decoder],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Detection => "detection",
            Task::Segmentation => "segmentation",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detection" => Ok(Task::Detection),
            "segmentation" => Ok(Task::Segmentation),
            other => Err(Error::format("task", format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockTag {
    Backbone,
    Extra,
    Loc,
    Conf,
    Encoder,
    Head,
    Decoder,
}

impl BlockTag {
    pub fn name(self) -> &'static str {
        match self {
            BlockTag::Backbone => "backbone",
            BlockTag::Extra => "extra",
            BlockTag::Loc => "loc",
            BlockTag::Conf => "conf",
            BlockTag::Encoder => "encoder",
            BlockTag::Head => "head",
            BlockTag::Decoder => "decoder",
        }
    }
}

impl fmt::Display for BlockTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "backbone" => BlockTag::Backbone,
            "extra" => BlockTag::Extra,
            "loc" => BlockTag::Loc,
            "conf" => BlockTag::Conf,
            "encoder" => BlockTag::Encoder,
            "head" => BlockTag::Head,
            "decoder" => BlockTag::Decoder,
            other => return Err(Error::format("block tag", format!("unknown tag {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Pool {
        kernel: usize,
        stride: usize,
    },
    Upsample {
        factor: usize,
    },
    /// Elementwise sum of this layer's input and the output of `other`.
    Add {
        other: usize,
    },
}

impl LayerKind {
    fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Add { .. } => "add",
        }
    }
}

/// One layer of a [`BaseNetwork`]. The layer reads the output of `input`,
/// or of the preceding layer (the image, for layer 0) when `input` is `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub block: BlockTag,
    pub input: Option<usize>,
}

impl LayerSpec {
    /// Conv outputs are the feature planes priming can act on.
    pub fn is_primeable(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }

    pub fn out_channels(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv { out_ch, .. } => Some(out_ch),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => out_ch * in_ch * kernel * kernel + out_ch,
            _ => 0,
        }
    }

    /// Manifest line: `index kind block key=value...`.
    pub fn manifest_line(&self) -> String {
        let mut s = format!("{} {} {}", self.index, self.kind.name(), self.block);
        match self.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => s += &format!(" in={in_ch} out={out_ch} k={kernel} stride={stride} pad={pad}"),
            LayerKind::Pool { kernel, stride } => s += &format!(" k={kernel} stride={stride}"),
            LayerKind::Upsample { factor } => s += &format!(" factor={factor}"),
            LayerKind::Add { other } => s += &format!(" other={other}"),
            LayerKind::Relu => {}
        }
        if let Some(input) = self.input {
            s += &format!(" input={input}");
        }
        s
    }

    pub fn parse_manifest_line(line: &str) -> Result<Self> {
        let bad = |d: String| Error::format("layer manifest", d);
        let mut it = line.split_whitespace();
        let index = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(format!("missing index in {line:?}")))?;
        let kind = it.next().ok_or_else(|| bad(format!("missing kind in {line:?}")))?;
        let block: BlockTag = it
            .next()
            .ok_or_else(|| bad(format!("missing block in {line:?}")))?
            .parse()?;
        let mut kv = BTreeMap::new();
        for tok in it {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {tok:?}")))?;
            let v: usize = v.parse().map_err(|_| bad(format!("bad number in {tok:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("{kind} needs {k}=")));
        let kind = match kind {
            "conv" => LayerKind::Conv {
                in_ch: get("in")?,
                out_ch: get("out")?,
                kernel: get("k")?,
                stride: get("stride")?,
                pad: get("pad")?,
            },
            "relu" => LayerKind::Relu,
            "pool" => LayerKind::Pool {
                kernel: get("k")?,
                stride: get("stride")?,
            },
            "upsample" => LayerKind::Upsample {
                factor: get("factor")?,
            },
            "add" => LayerKind::Add {
                other: get("other")?,
            },
            other => return Err(bad(format!("unknown layer kind {other:?}"))),
        };
        Ok(Self {
            index,
            kind,
            block,
            input: kv.get("input").copied(),
        })
    }
}

/// Called on every layer output during a forward pass; may substitute the
/// value seen by downstream layers. This is where priming plugs in.
pub trait LayerHook {
    fn after_layer(&mut self, tape: &mut Tape, layer: &LayerSpec, output: Var) -> Result<Var>;
}

/// Hook that leaves every layer untouched.
pub struct NoHook;

impl LayerHook for NoHook {
    fn after_layer(&mut self, _: &mut Tape, _: &LayerSpec, output: Var) -> Result<Var> {
        Ok(output)
    }
}

/// Parameters of a network placed on a tape: conv layer index → (weight, bias).
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<usize, (Var, Var)>,
}

impl BoundParams {
    pub fn get(&self, layer: usize) -> Option<(Var, Var)> {
        self.vars.get(&layer).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Var, Var)> + '_ {
        self.vars.iter().map(|(&i, &(w, b))| (i, w, b))
    }
}

/// Head outputs of a forward pass, as tape handles.
#[derive(Debug, Clone, Copy)]
pub enum HeadVars {
    Detection { loc: Var, conf: Var },
    Segmentation { scores: Var },
}

/// Raw detector head tensors: `loc` is `[4A, G, G]` (dx, dy, w, h per
/// anchor) and `conf` is `[(C+1)A, G, G]` class logits per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetections {
    pub loc: Tensor,
    pub conf: Tensor,
}

/// Per-class segmentation scores `[C+1, H, W]`; channel 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SegScores(pub Tensor);

impl SegScores {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims3("seg scores")?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetOutput {
    Detection(RawDetections),
    Segmentation(SegScores),
}

impl NetOutput {
    pub fn from_heads(tape: &Tape, heads: HeadVars) -> Self {
        match heads {
            HeadVars::Detection { loc, conf } => NetOutput::Detection(RawDetections {
                loc: tape.value(loc).clone(),
                conf: tape.value(conf).clone(),
            }),
            HeadVars::Segmentation { scores } => {
                NetOutput::Segmentation(SegScores(tape.value(scores).clone()))
            }
        }
    }

    /// All output values concatenated, for exact comparisons.
    pub fn flat_values(&self) -> Vec<f64> {
        match self {
            NetOutput::Detection(r) => r.loc.data().iter().chain(r.conf.data()).copied().collect(),
            NetOutput::Segmentation(s) => s.0.data().to_vec(),
        }
    }
}

/// Channel widths of the toy detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorWidths {
    pub backbone: [usize; 3],
    pub extra: usize,
}

impl Default for DetectorWidths {
    fn default() -> Self {
        Self {
            backbone: [8, 16, 24],
            extra: 32,
        }
    }
}

/// Channel widths of the toy segmenter's three encoder stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmenterWidths {
    pub encoder: [usize; 3],
}

impl Default for SegmenterWidths {
    fn default() -> Self {
        Self {
            encoder: [8, 16, 32],
        }
    }
}

/// A frozen-able layered network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseNetwork {
    pub task: Task,
    pub n_classes: usize,
    pub image_size: usize,
    /// Anchors per grid cell (detector only; 1 for the segmenter).
    pub anchors: usize,
    pub layers: Vec<LayerSpec>,
    pub params: TensorArchive,
}

pub fn weight_name(layer: usize) -> String {
    format!("layer.{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer.{layer}.bias")
}

fn conv(index: usize, block: BlockTag, in_ch: usize, out_ch: usize, kernel: usize) -> LayerSpec {
    LayerSpec {
        index,
        kind: LayerKind::Conv {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: kernel / 2,
        },
        block,
        input: None,
    }
}

fn simple(index: usize, kind: LayerKind, block: BlockTag) -> LayerSpec {
    LayerSpec {
        index,
        kind,
        block,
        input: None,
    }
}

const POOL: LayerKind = LayerKind::Pool {
    kernel: 2,
    stride: 2,
};

/// Builds the grid detector with default widths.
pub fn build_toy_detector(
    n_classes: usize,
    image_size: usize,
    anchors_per_cell: usize,
    seed: u64,
) -> Result<BaseNetwork> {
    build_detector_with(n_classes, image_size, anchors_per_cell, DetectorWidths::default(), seed)
}

pub fn build_detector_with(
    n_classes: usize,
    image_size: usize,
    anchors: usize,
    widths: DetectorWidths,
    seed: u64,
) -> Result<BaseNetwork> {
    if n_classes == 0 || anchors == 0 {
        return Err(Error::invalid("build_toy_detector", "need n_classes >= 1 and anchors >= 1"));
    }
    if image_size == 0 || image_size % DETECTOR_STRIDE != 0 {
        return Err(Error::invalid(
            "build_toy_detector",
            format!("image size {image_size} not divisible by stride {DETECTOR_STRIDE}"),
        ));
    }
    let [c1, c2, c3] = widths.backbone;
    use BlockTag::*;
    let mut layers = vec![
        conv(0, Backbone, 3, c1, 3),
        simple(1, LayerKind::Relu, Backbone),
        simple(2, POOL, Backbone),
        conv(3, Backbone, c1, c2, 3),
        simple(4, LayerKind::Relu, Backbone),
        simple(5, POOL, Backbone),
        conv(6, Backbone, c2, c3, 3),
        simple(7, LayerKind::Relu, Backbone),
        simple(8, POOL, Backbone),
        conv(9, Extra, c3, widths.extra, 3),
        simple(10, LayerKind::Relu, Extra),
        conv(11, Loc, widths.extra, 4 * anchors, 1),
    ];
    let mut conf = conv(12, Conf, widths.extra, (n_classes + 1) * anchors, 1);
    conf.input = Some(10);
    layers.push(conf);
    BaseNetwork::initialized(Task::Detection, n_classes, image_size, anchors, layers, seed)
}

/// Builds the FCN-style segmenter with default widths.
pub fn build_toy_segmenter(n_classes: usize, image_size: usize, seed: u64) -> Result<BaseNetwork> {
    build_segmenter_with(n_classes, image_size, SegmenterWidths::default(), seed)
}

pub fn build_segmenter_with(
    n_classes: usize,
    image_size: usize,
    widths: SegmenterWidths,
    seed: u64,
) -> Result<BaseNetwork> {
    if n_classes == 0 {
        return Err(Error::invalid("build_toy_segmenter", "need n_classes >= 1"));
    }
    if image_size == 0 || image_size % SEGMENTER_STRIDE != 0 {
        return Err(Error::invalid(
            "build_toy_segmenter",
            format!("image size {image_size} not divisible by stride {SEGMENTER_STRIDE}"),
        ));
    }
    let [c1, c2, c3] = widths.encoder;
    let k = n_classes + 1;
    use BlockTag::*;
    let mut layers = vec![
        conv(0, Encoder, 3, c1, 3),
        simple(1, LayerKind::Relu, Encoder),
        simple(2, POOL, Encoder),
        conv(3, Encoder, c1, c2, 3),
        simple(4, LayerKind::Relu, Encoder),
        simple(5, POOL, Encoder),
        conv(6, Encoder, c2, c3, 3),
        simple(7, LayerKind::Relu, Encoder),
        simple(8, POOL, Encoder),
        conv(9, Head, c3, k, 1),
        simple(10, LayerKind::Upsample { factor: 2 }, Decoder),
    ];
    // skip scores from the stride-4 features
    let mut skip = conv(11, Decoder, c2, k, 1);
    skip.input = Some(5);
    layers.push(skip);
    let mut fuse = simple(12, LayerKind::Add { other: 10 }, Decoder);
    fuse.input = Some(11);
    layers.push(fuse);
    layers.push(simple(13, LayerKind::Upsample { factor: 4 }, Decoder));
    BaseNetwork::initialized(Task::Segmentation, n_classes, image_size, 1, layers, seed)
}

impl BaseNetwork {
    fn initialized(
        task: Task,
        n_classes: usize,
        image_size: usize,
        anchors: usize,
        layers: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = TensorArchive::new();
        for l in &layers {
            if let LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } = l.kind
            {
                let fan_in = in_ch * kernel * kernel;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                let w: Vec<f64> = (0..out_ch * fan_in).map(|_| normal.sample(&mut rng)).collect();
                params.insert(
                    weight_name(l.index),
                    Tensor::from_vec(&[out_ch, in_ch, kernel, kernel], w)?,
                );
                params.insert(bias_name(l.index), Tensor::zeros(&[out_ch]));
            }
        }
        let net = Self {
            task,
            n_classes,
            image_size,
            anchors,
            layers,
            params,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks layer ordering, references and parameter shapes.
    pub fn validate(&self) -> Result<()> {
        let order = self.task.block_order();
        let mut last_rank = 0;
        for (pos, l) in self.layers.iter().enumerate() {
            if l.index != pos {
                return Err(Error::format("network", format!("layer {pos} has index {}", l.index)));
            }
            let rank = order.iter().position(|&b| b == l.block).ok_or_else(|| {
                Error::format("network", format!("block {} not valid for {}", l.block, self.task))
            })?;
            if rank < last_rank {
                return Err(Error::format("network", format!("block {} out of order", l.block)));
            }
            last_rank = rank;
            let refs = l.input.into_iter().chain(match l.kind {
                LayerKind::Add { other } => Some(other),
                _ => None,
            });
            for r in refs {
                if r >= pos {
                    return Err(Error::format(
                        "network",
                        format!("layer {pos} references later layer {r}"),
                    ));
                }
            }
            if let LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } = l.kind
            {
                let w = self.params.require(&weight_name(pos))?;
                let b = self.params.require(&bias_name(pos))?;
                if w.shape() != [out_ch, in_ch, kernel, kernel] || b.shape() != [out_ch] {
                    return Err(Error::format(
                        "network",
                        format!("parameter shapes of layer {pos} disagree with its spec"),
                    ));
                }
            }
        }
        if self.task == Task::Detection {
            self.head_layers()?;
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / DETECTOR_STRIDE
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn primeable_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_primeable())
    }

    /// Detector heads: (loc conv index, conf conv index).
    fn head_layers(&self) -> Result<(usize, usize)> {
        let last = |tag| {
            self.layers
                .iter()
                .rev()
                .find(|l| l.block == tag && l.is_primeable())
                .map(|l| l.index)
                .ok_or_else(|| Error::format("network", format!("detector lacks a {tag} conv")))
        };
        Ok((last(BlockTag::Loc)?, last(BlockTag::Conf)?))
    }

    /// Places parameters on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut vars = BTreeMap::new();
        for l in self.primeable_layers() {
            let w = self.params.get(&weight_name(l.index)).expect("validated").clone();
            let b = self.params.get(&bias_name(l.index)).expect("validated").clone();
            let (w, b) = if trainable {
                (tape.param(w), tape.param(b))
            } else {
                (tape.constant(w), tape.constant(b))
            };
            vars.insert(l.index, (w, b));
        }
        BoundParams { vars }
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let expected = [3, self.image_size, self.image_size];
        if image.shape() != expected {
            return Err(Error::shape(
                "forward",
                format!("image {:?}, network expects {expected:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// Runs every layer on the tape, passing each output through `hook`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        image: Var,
        params: &BoundParams,
        hook: &mut dyn LayerHook,
    ) -> Result<HeadVars> {
        self.check_image(tape.value(image))?;
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let x = match l.input {
                Some(i) => outs[i],
                None => outs.last().copied().unwrap_or(image),
            };
            let y = match l.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let (w, b) = params.get(l.index).ok_or_else(|| {
                        Error::invalid("forward", format!("layer {} has no bound params", l.index))
                    })?;
                    tape.conv2d(x, w, b, stride, pad)?
                }
                LayerKind::Relu => tape.relu(x)?,
                LayerKind::Pool { kernel, stride } => tape.maxpool2d(x, kernel, stride)?,
                LayerKind::Upsample { factor } => tape.bilinear_upsample(x, factor)?,
                LayerKind::Add { other } => tape.add(x, outs[other])?,
            };
            outs.push(hook.after_layer(tape, l, y)?);
        }
        Ok(match self.task {
            Task::Detection => {
                let (loc, conf) = self.head_layers()?;
                HeadVars::Detection {
                    loc: outs[loc],
                    conf: outs[conf],
                }
            }
            Task::Segmentation => HeadVars::Segmentation {
                scores: *outs.last().expect("validated network has layers"),
            },
        })
    }

    /// Plain inference; records no backward ops.
    pub fn forward(&self, image: &Tensor) -> Result<NetOutput> {
        self.forward_with(image, &mut NoHook)
    }

    pub fn forward_with(&self, image: &Tensor, hook: &mut dyn LayerHook) -> Result<NetOutput> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let heads = self.forward_on(&mut tape, x, &params, hook)?;
        Ok(NetOutput::from_heads(&tape, heads))
    }

    pub fn decode_detections(
        &self,
        raw: &RawDetections,
        conf_threshold: f64,
        nms_iou: f64,
    ) -> Vec<Detection> {
        decode_detections(raw, self.image_size, self.anchors, self.n_classes, conf_threshold, nms_iou)
    }

    /// Layer manifest text: `key = value` header lines, then one layer per line.
    pub fn manifest(&self) -> String {
        let mut s = format!(
            "task = {}\nn_classes = {}\nimage_size = {}\nanchors = {}\n",
            self.task, self.n_classes, self.image_size, self.anchors
        );
        for l in &self.layers {
            s += &l.manifest_line();
            s.push('\n');
        }
        s
    }

    pub fn from_manifest(text: &str, params: TensorArchive) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut layers = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            if let Some((k, v)) = line.split_once('=').filter(|(k, _)| !k.trim().contains(' ')) {
                header.insert(k.trim().to_owned(), v.trim().to_owned());
            } else {
                layers.push(LayerSpec::parse_manifest_line(line)?);
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| Error::format("layer manifest", format!("missing header {k:?}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format("layer manifest", format!("{k} is not a number")))
        };
        let net = Self {
            task: get("task")?.parse()?,
            n_classes: num("n_classes")?,
            image_size: num("image_size")?,
            anchors: num("anchors")?,
            layers,
            params,
        };
        net.validate()?;
        Ok(net)
    }

    /// Writes `path` (tensor archive) and `path.layers` (manifest).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let manifest = manifest_path(path);
        std::fs::write(&manifest, self.manifest()).map_err(|e| Error::io(manifest, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = TensorArchive::load(path)?;
        let manifest = manifest_path(path);
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(manifest, e))?;
        Self::from_manifest(&text, params)
    }
}

/// Location of the layer manifest that accompanies a network archive.
pub fn manifest_path(archive: &Path) -> std::path::PathBuf {
    let mut s = archive.as_os_str().to_owned();
    s.push(".layers");
    s.into()
}

/// A scored, class-labelled box. `class_id` is in `1..=n_classes`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Turns detector head tensors into boxes.
///
/// Per cell and anchor the class is the arg-max of the softmax over
/// foreground classes, the box is the cell centre plus the predicted offset
/// (in cell units) with the predicted size, clipped to the image. Boxes
/// scoring below `conf_threshold` are dropped, then greedy per-class NMS
/// suppresses boxes with IoU ≥ `nms_iou` against a kept one. Output is sorted
/// by descending score, ties by class then cell.
pub fn decode_detections(
    raw: &RawDetections,
    image_size: usize,
    anchors: usize,
    n_classes: usize,
    conf_threshold: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let k = n_classes + 1;
    let (_, grid, _) = raw.conf.dims3("decode").expect("conf head is [C, G, G]");
    let cells = grid * grid;
    let cell = image_size as f64 / grid as f64;
    let size = image_size as f64;
    let conf = raw.conf.data();
    let loc = raw.loc.data();
    let mut candidates: Vec<(Detection, usize)> = Vec::new();
    for a in 0..anchors {
        for idx in 0..cells {
            let logit = |c: usize| conf[(a * k + c) * cells + idx];
            let max = (0..k).map(logit).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (logit(c) - max).exp()).sum();
            let mut best = 1;
            for c in 2..k {
                if logit(c) > logit(best) {
                    best = c;
                }
            }
            let score = (logit(best) - max).exp() / z;
            if !(score >= conf_threshold) {
                continue;
            }
            let off = |j: usize| loc[(a * 4 + j) * cells + idx];
            let (gy, gx) = (idx / grid, idx % grid);
            let cx = ((gx as f64 + 0.5 + off(0)) * cell).clamp(0.0, size);
            let cy = ((gy as f64 + 0.5 + off(1)) * cell).clamp(0.0, size);
            let w = (off(2) * cell).clamp(1.0, size);
            let h = (off(3) * cell).clamp(1.0, size);
            let bbox = BBox::new(
                (cx - 0.5 * w).max(0.0),
                (cy - 0.5 * h).max(0.0),
                (cx + 0.5 * w).min(size),
                (cy + 0.5 * h).min(size),
            );
            candidates.push((
                Detection {
                    bbox,
                    class_id: best,
                    score,
                },
                idx * anchors + a,
            ));
        }
    }
    candidates.sort_by(|(a, ia), (b, ib)| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(ia.cmp(ib))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for (d, _) in candidates {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) >= nms_iou);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Per-pixel arg-max over class channels; the lowest index wins ties.
pub fn decode_labelmap(scores: &SegScores) -> LabelMap {
    let (c, h, w) = (scores.channels(), scores.height(), scores.width());
    let data = scores.0.data();
    let plane = h * w;
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if data[ch * plane + p] > data[best * plane + p] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(w, h, labels).expect("sizes agree")
}
