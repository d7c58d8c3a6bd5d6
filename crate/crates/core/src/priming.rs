//! Cue-driven residual modulation of feature planes.
//!
//! For every primed conv layer `i` a matrix `W_i` of shape `[c_i, n]` maps
//! the binary cue `h` to channel gains `alpha_i = W_i h`. The layer's output
//! planes are then rescaled as `x_ij ← (1 + alpha_ij) · x_ij`, with the same
//! scalar applied at every spatial position. The base network stays frozen;
//! only the `W_i` are trained.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nets::{BaseNetwork, BlockTag, BoundParams, HeadVars, LayerHook, LayerKind, LayerSpec, NetOutput, Task};
use crate::tensor::{Tape, Tensor, TensorArchive, Var};

/// Binary class-presence vector. Bit `k - 1` stands for class `k`, so
/// classes are numbered `1..=len` as in label maps.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Cue {
    bits: Vec<bool>,
}

impl Cue {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![false; n] }
    }

    pub fn ones(n: usize) -> Self {
        Self { bits: vec![true; n] }
    }

    /// `e_class` for `class` in `1..=n`.
    pub fn one_hot(n: usize, class: usize) -> Result<Self> {
        Self::from_classes(n, &[class])
    }

    pub fn from_classes(n: usize, classes: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &c in classes {
            if c == 0 || c > n {
                return Err(Error::invalid("cue", format!("class {c} outside 1..={n}")));
            }
            bits[c - 1] = true;
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Whether foreground class `class` (1-based) is cued. Background and
    /// out-of-range classes are never cued.
    pub fn is_set(&self, class: usize) -> bool {
        class >= 1 && self.bits.get(class - 1).copied().unwrap_or(false)
    }

    /// Cued classes, ascending, 1-based.
    pub fn classes(&self) -> Vec<usize> {
        (1..=self.bits.len()).filter(|&c| self.bits[c - 1]).collect()
    }

    pub fn is_zero(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn to_tensor(&self) -> Tensor {
        let v = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_parts(vec![self.bits.len()], v)
    }
}

impl fmt::Display for Cue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Cue {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::format("cue", format!("bit {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }
}

/// Which network blocks receive modulation, one bit per block in network
/// order (see [`Task::block_order`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    task: Task,
    enabled: Vec<bool>,
}

impl BlockMask {
    pub fn parse(task: Task, bits: &str) -> Result<Self> {
        let order = task.block_order();
        if bits.len() != order.len() {
            return Err(Error::format(
                "block mask",
                format!("{task} masks have {} bits, got {bits:?}", order.len()),
            ));
        }
        let enabled = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::format("block mask", format!("bad bit {other:?}"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { task, enabled })
    }

    pub fn from_tags(task: Task, tags: &[BlockTag]) -> Result<Self> {
        let order = task.block_order();
        if let Some(bad) = tags.iter().find(|t| !order.contains(t)) {
            return Err(Error::invalid("block mask", format!("no {bad} block in a {task} network")));
        }
        Ok(Self {
            task,
            enabled: order.iter().map(|t| tags.contains(t)).collect(),
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn tags(&self) -> Vec<BlockTag> {
        self.task
            .block_order()
            .iter()
            .zip(&self.enabled)
            .filter(|(_, &on)| on)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn contains(&self, tag: BlockTag) -> bool {
        self.tags().contains(&tag)
    }
}

impl fmt::Display for BlockMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.enabled {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Explicit set of primed conv layer indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerMask(BTreeSet<usize>);

impl LayerMask {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates that every index names a primeable layer of `net`.
    pub fn new(net: &BaseNetwork, layers: impl IntoIterator<Item = usize>) -> Result<Self> {
        let set: BTreeSet<usize> = layers.into_iter().collect();
        for &i in &set {
            match net.layers.get(i) {
                Some(l) if l.is_primeable() => {}
                Some(l) => {
                    return Err(Error::invalid(
                        "layer mask",
                        format!("layer {i} is a {:?} layer, not primeable", l.kind),
                    ))
                }
                None => return Err(Error::invalid("layer mask", format!("no layer {i}"))),
            }
        }
        Ok(Self(set))
    }

    pub fn all(net: &BaseNetwork) -> Self {
        Self(net.primeable_layers().map(|l| l.index).collect())
    }

    /// The first `k` primeable layers in network order.
    pub fn prefix(net: &BaseNetwork, k: usize) -> Result<Self> {
        let all: Vec<usize> = net.primeable_layers().map(|l| l.index).collect();
        if k > all.len() {
            return Err(Error::invalid(
                "layer mask",
                format!("prefix {k} exceeds {} primeable layers", all.len()),
            ));
        }
        Ok(Self(all[..k].iter().copied().collect()))
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.contains(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parses the comma-separated form produced by `Display` (empty string
    /// for the empty mask).
    pub fn parse(net: &BaseNetwork, s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "-" {
            return Ok(Self::empty());
        }
        let idx = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::format("layer mask", format!("bad index {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(net, idx)
    }
}

impl fmt::Display for LayerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("-");
        }
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// All primeable layers whose block is enabled in `bm`.
pub fn expand_block_mask(net: &BaseNetwork, bm: &BlockMask) -> Result<LayerMask> {
    if bm.task() != net.task {
        return Err(Error::TaskMismatch(format!(
            "{} block mask applied to a {} network",
            bm.task(),
            net.task
        )));
    }
    let tags = bm.tags();
    LayerMask::new(
        net,
        net.primeable_layers()
            .filter(|l| tags.contains(&l.block))
            .map(|l| l.index),
    )
}

/// Form of the modulation applied to a primed feature plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModulationVariant {
    /// `(1 + a) x`
    #[default]
    Residual,
    /// `a x`
    Multiplicative,
    /// `(1 + a) x + b` with `b = B h`
    ResidualBias,
    /// `relu((1 + a) x)`
    ResidualRelu,
}

impl ModulationVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModulationVariant::Residual => "residual",
            ModulationVariant::Multiplicative => "multiplicative",
            ModulationVariant::ResidualBias => "residual-bias",
            ModulationVariant::ResidualRelu => "residual-relu",
        }
    }
}

impl fmt::Display for ModulationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "residual" => Self::Residual,
            "multiplicative" => Self::Multiplicative,
            "residual-bias" => Self::ResidualBias,
            "residual-relu" => Self::ResidualRelu,
            other => return Err(Error::format("modulation variant", format!("unknown {other:?}"))),
        })
    }
}

/// Where modulation attaches relative to the layer's nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Placement {
    /// On the conv output, before its ReLU.
    #[default]
    PreRelu,
    /// After the ReLU that directly follows the conv (or on the conv output
    /// when no ReLU follows, as for head layers).
    PostRelu,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::PreRelu => "pre-relu",
            Placement::PostRelu => "post-relu",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-relu" => Ok(Self::PreRelu),
            "post-relu" => Ok(Self::PostRelu),
            other => Err(Error::format("placement", format!("unknown {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InitScheme {
    /// Start exactly at the unprimed network.
    #[default]
    Zero,
    /// i.i.d. normal entries with the given standard deviation.
    SmallRandom { std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrimingConfig {
    pub variant: ModulationVariant,
    pub placement: Placement,
    pub init: InitScheme,
}

/// Cue-to-gain matrices of one primed layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPriming {
    /// `[c, n]` gain matrix.
    pub weight: Tensor,
    /// `[c, n]` offset matrix, only for [`ModulationVariant::ResidualBias`].
    pub bias: Option<Tensor>,
}

/// The trainable priming branch.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimingWeights {
    pub n_cues: usize,
    pub variant: ModulationVariant,
    pub placement: Placement,
    pub layers: BTreeMap<usize, LayerPriming>,
}

pub fn weight_name(layer: usize) -> String {
    format!("prime.W.{layer}")
}

pub fn bias_name(layer: usize) -> String {
    format!("prime.B.{layer}")
}

impl PrimingWeights {
    /// Weights that prime nothing.
    pub fn empty(n_cues: usize) -> Self {
        Self {
            n_cues,
            variant: ModulationVariant::default(),
            placement: Placement::default(),
            layers: BTreeMap::new(),
        }
    }

    pub fn mask(&self) -> LayerMask {
        LayerMask(self.layers.keys().copied().collect())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .values()
            .map(|l| l.weight.numel() + l.bias.as_ref().map_or(0, Tensor::numel))
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.values().all(|l| {
            l.weight.data().iter().all(|&v| v == 0.0)
                && l.bias.as_ref().is_none_or(|b| b.data().iter().all(|&v| v == 0.0))
        })
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (&i, l) in &self.layers {
            a.insert(weight_name(i), l.weight.clone());
            if let Some(b) = &l.bias {
                a.insert(bias_name(i), b.clone());
            }
        }
        a
    }

    /// Rebuilds weights from an archive written by [`Self::to_archive`].
    pub fn from_archive(
        archive: &TensorArchive,
        net: &BaseNetwork,
        variant: ModulationVariant,
        placement: Placement,
    ) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for name in archive.names() {
            let Some(idx) = name.strip_prefix("prime.W.") else {
                if name.starts_with("prime.B.") {
                    continue;
                }
                return Err(Error::format("priming archive", format!("unexpected tensor {name:?}")));
            };
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::format("priming archive", format!("bad layer in {name:?}")))?;
            let weight = archive.require(name)?.clone();
            let bias = archive.get(&bias_name(idx)).cloned();
            if variant == ModulationVariant::ResidualBias && bias.is_none() {
                return Err(Error::format(
                    "priming archive",
                    format!("residual-bias variant needs {}", bias_name(idx)),
                ));
            }
            layers.insert(idx, LayerPriming { weight, bias });
        }
        let pw = Self {
            n_cues: net.n_classes,
            variant,
            placement,
            layers,
        };
        pw.validate(net)?;
        Ok(pw)
    }

    /// Checks the weights against the network they prime.
    pub fn validate(&self, net: &BaseNetwork) -> Result<()> {
        if self.n_cues != net.n_classes {
            return Err(Error::shape(
                "priming",
                format!("weights expect {} cue bits, network has {} classes", self.n_cues, net.n_classes),
            ));
        }
        LayerMask::new(net, self.layers.keys().copied())?;
        for (&i, l) in &self.layers {
            let c = net.layers[i].out_channels().expect("primeable layer is a conv");
            let expected = [c, self.n_cues];
            if l.weight.shape() != expected || l.bias.as_ref().is_some_and(|b| b.shape() != expected) {
                return Err(Error::shape(
                    "priming",
                    format!("layer {i}: expected [{c}, {}] matrices", self.n_cues),
                ));
            }
        }
        Ok(())
    }

    /// Places the matrices on a tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> PrimingVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|(&i, l)| (i, (put(&l.weight), l.bias.as_ref().map(&mut put))))
            .collect();
        PrimingVars {
            variant: self.variant,
            placement: self.placement,
            layers,
        }
    }
}

/// Priming matrices placed on a tape.
#[derive(Debug, Clone)]
pub struct PrimingVars {
    variant: ModulationVariant,
    placement: Placement,
    layers: BTreeMap<usize, (Var, Option<Var>)>,
}

impl PrimingVars {
    pub fn iter(&self) -> impl Iterator<Item = (usize, Var, Option<Var>)> + '_ {
        self.layers.iter().map(|(&i, &(w, b))| (i, w, b))
    }
}

/// Creates priming weights for the layers in `mask`, all zero.
pub fn init_priming(net: &BaseNetwork, mask: &LayerMask, n: usize, seed: u64) -> Result<PrimingWeights> {
    init_priming_with(net, mask, n, seed, PrimingConfig::default())
}

pub fn init_priming_with(
    net: &BaseNetwork,
    mask: &LayerMask,
    n: usize,
    seed: u64,
    cfg: PrimingConfig,
) -> Result<PrimingWeights> {
    let mask = LayerMask::new(net, mask.iter())?;
    if n != net.n_classes {
        return Err(Error::shape(
            "init_priming",
            format!("cue length {n} but network has {} classes", net.n_classes),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = |c: usize| -> Tensor {
        match cfg.init {
            InitScheme::Zero => Tensor::zeros(&[c, n]),
            InitScheme::SmallRandom { std } => {
                let normal = Normal::new(0.0, std).expect("finite std");
                let v = (0..c * n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::from_parts(vec![c, n], v)
            }
        }
    };
    let mut layers = BTreeMap::new();
    for i in mask.iter() {
        let c = net.layers[i].out_channels().expect("validated");
        let weight = matrix(c);
        let bias = (cfg.variant == ModulationVariant::ResidualBias).then(|| matrix(c));
        layers.insert(i, LayerPriming { weight, bias });
    }
    Ok(PrimingWeights {
        n_cues: n,
        variant: cfg.variant,
        placement: cfg.placement,
        layers,
    })
}

/// `W h`: with a one-hot cue this is the cued column of `W`.
pub fn compute_alpha(w: &Tensor, h: &Cue) -> Result<Tensor> {
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let hv = tape.constant(h.to_tensor());
    let a = tape.matvec(wv, hv)?;
    Ok(tape.value(a).clone())
}

/// `(1 + alpha[j]) · x[j, ..]` for every channel `j`.
pub fn modulate(x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let av = tape.constant(alpha.clone());
    let y = tape.modulate(xv, av)?;
    Ok(tape.value(y).clone())
}

/// Gains applied during one primed forward pass, by conv layer index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModulationTrace {
    pub alphas: BTreeMap<usize, Vec<f64>>,
}

/// Layer hook applying precomputed gains at their attachment points.
struct PrimingHook {
    variant: ModulationVariant,
    /// attachment layer → (alpha, beta)
    points: HashMap<usize, (Var, Option<Var>)>,
}

impl LayerHook for PrimingHook {
    fn after_layer(&mut self, tape: &mut Tape, layer: &LayerSpec, output: Var) -> Result<Var> {
        let Some(&(alpha, beta)) = self.points.get(&layer.index) else {
            return Ok(output);
        };
        match self.variant {
            ModulationVariant::Residual => tape.modulate(output, alpha),
            ModulationVariant::Multiplicative => tape.channel_scale(output, alpha),
            ModulationVariant::ResidualBias => {
                let y = tape.modulate(output, alpha)?;
                tape.channel_shift(y, beta.expect("bias variant binds offsets"))
            }
            ModulationVariant::ResidualRelu => {
                let y = tape.modulate(output, alpha)?;
                tape.relu(y)
            }
        }
    }
}

fn attachment_point(net: &BaseNetwork, conv: usize, placement: Placement) -> usize {
    match placement {
        Placement::PreRelu => conv,
        Placement::PostRelu => match net.layers.get(conv + 1) {
            Some(next) if next.kind == LayerKind::Relu && next.input.is_none() => conv + 1,
            _ => conv,
        },
    }
}

/// Runs the network on `tape` with the priming branch active.
///
/// Gains are computed from the cue up front and applied right after each
/// primed layer's attachment point. Only tensors bound as trainable receive
/// gradients, so binding the base parameters as constants freezes them.
pub fn primed_forward_on(
    tape: &mut Tape,
    net: &BaseNetwork,
    params: &BoundParams,
    priming: &PrimingVars,
    cue: &Cue,
    image: Var,
) -> Result<(HeadVars, ModulationTrace)> {
    if cue.len() != net.n_classes {
        return Err(Error::shape(
            "primed_forward",
            format!("cue has {} bits, network has {} classes", cue.len(), net.n_classes),
        ));
    }
    let h = tape.constant(cue.to_tensor());
    let mut points = HashMap::new();
    let mut trace = ModulationTrace::default();
    for (layer, w, b) in priming.iter() {
        let alpha = tape.matvec(w, h)?;
        let beta = b.map(|b| tape.matvec(b, h)).transpose()?;
        trace.alphas.insert(layer, tape.value(alpha).data().to_vec());
        points.insert(attachment_point(net, layer, priming.placement), (alpha, beta));
    }
    let mut hook = PrimingHook {
        variant: priming.variant,
        points,
    };
    let heads = net.forward_on(tape, image, params, &mut hook)?;
    Ok((heads, trace))
}

/// Primed inference with frozen base and priming weights.
pub fn primed_forward(
    net: &BaseNetwork,
    pw: &PrimingWeights,
    h: &Cue,
    image: &Tensor,
) -> Result<(NetOutput, ModulationTrace)> {
    if pw.n_cues != h.len() {
        return Err(Error::shape(
            "primed_forward",
            format!("cue has {} bits, priming expects {}", h.len(), pw.n_cues),
        ));
    }
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, false);
    let priming = pw.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let (heads, trace) = primed_forward_on(&mut tape, net, &params, &priming, h, x)?;
    Ok((NetOutput::from_heads(&tape, heads), trace))
}
