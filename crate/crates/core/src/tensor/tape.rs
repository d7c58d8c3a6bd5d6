//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every value produced during one forward pass. Nodes are
//! appended in evaluation order, so reverse append order is a valid
//! topological order for the backward sweep. An op whose inputs are all
//! constant is stored as a plain value with no backward record and no saved
//! intermediates.

use super::kernels::{self, AxisTaps, ConvGeometry, PoolGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Target value skipped by the cross-entropy loss.
pub const IGNORE_LABEL: usize = 255;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Value,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        dims: (usize, usize, usize),
        rows: AxisTaps,
        cols: AxisTaps,
    },
    MatVec {
        w: Var,
        h: Var,
    },
    /// `(1 + alpha[c]) * x[c, ..]`
    Modulate {
        x: Var,
        alpha: Var,
    },
    /// `alpha[c] * x[c, ..]`
    ChannelScale {
        x: Var,
        alpha: Var,
    },
    /// `x[c, ..] + beta[c]`
    ChannelShift {
        x: Var,
        beta: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Sum {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        classes: usize,
        positions: usize,
        count: usize,
    },
    WeightedSse {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a backward record.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Value))
            .count()
    }

    /// Adds an input. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Value, needs_grad)
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let tensor = tensor.with_requires_grad(false);
        self.push(tensor, Op::Value, false)
    }

    /// Adds a trainable input.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        let tensor = tensor.with_requires_grad(true);
        self.push(tensor, Op::Value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` only when some input needs a gradient.
    fn record(
        &mut self,
        name: &'static str,
        value: Tensor,
        inputs: &[Var],
        op: impl FnOnce() -> Op,
    ) -> Result<Var> {
        value.check_finite(name)?;
        let needs_grad = inputs.iter().any(|&v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op() } else { Op::Value };
        Ok(self.push(value, op, needs_grad))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let dims = x.dims3("conv2d")?;
        let wd = match w.shape() {
            &[o, c, kh, kw] => (o, c, kh, kw),
            other => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight must be [C_out, C_in, kH, kW], got {other:?}"),
                ))
            }
        };
        if b.shape() != [wd.0] {
            return Err(Error::shape(
                "conv2d",
                format!("axis C_out: bias {:?} vs weight C_out {}", b.shape(), wd.0),
            ));
        }
        let geom = ConvGeometry::new(dims, wd, stride, pad)?;
        let keep = self.nodes[weight.0].needs_grad;
        let (out, cols) = kernels::conv2d_forward(x.data(), w.data(), b.data(), &geom, keep);
        let value = Tensor::from_parts(vec![geom.out_ch, geom.out_h, geom.out_w], out);
        self.record("conv2d", value, &[input, weight, bias], || Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.record("relu", value, &[input], || Op::Relu { input })
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let geom = PoolGeometry::new(x.dims3("maxpool2d")?, kernel, stride)?;
        let (out, argmax) = kernels::maxpool_forward(x.data(), &geom);
        let value = Tensor::from_parts(vec![geom.channels, geom.out_h, geom.out_w], out);
        self.record("maxpool2d", value, &[input], || Op::MaxPool { input, argmax })
    }

    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("bilinear_upsample", "factor must be >= 1"));
        }
        let x = self.value(input);
        let dims = x.dims3("bilinear_upsample")?;
        let rows = AxisTaps::new(dims.1, factor);
        let cols = AxisTaps::new(dims.2, factor);
        let out = kernels::upsample_forward(x.data(), dims, &rows, &cols);
        let value = Tensor::from_parts(vec![dims.0, dims.1 * factor, dims.2 * factor], out);
        self.record("bilinear_upsample", value, &[input], || Op::Upsample {
            input,
            dims,
            rows,
            cols,
        })
    }

    pub fn matvec(&mut self, w: Var, h: Var) -> Result<Var> {
        let wt = self.value(w);
        let ht = self.value(h);
        let (m, n) = match wt.shape() {
            &[m, n] => (m, n),
            other => return Err(Error::shape("matvec", format!("W must be rank 2, got {other:?}"))),
        };
        if ht.shape() != [n] {
            return Err(Error::shape(
                "matvec",
                format!("inner axis: W is {m}x{n}, h is {:?}", ht.shape()),
            ));
        }
        let out = wt
            .data()
            .chunks_exact(n)
            .map(|row| row.iter().zip(ht.data()).fold(0.0, |acc, (a, b)| acc + a * b))
            .collect();
        let value = Tensor::from_parts(vec![m], out);
        self.record("matvec", value, &[w, h], || Op::MatVec { w, h })
    }

    fn channel_op(
        &mut self,
        name: &'static str,
        x: Var,
        coeff: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let xt = self.value(x);
        let ct = self.value(coeff);
        let channels = *xt.shape().first().unwrap_or(&1);
        if xt.rank() == 0 || ct.shape() != [channels] {
            return Err(Error::shape(
                name,
                format!("axis C: features {:?} vs coefficients {:?}", xt.shape(), ct.shape()),
            ));
        }
        let plane = xt.numel() / channels;
        let mut out = Vec::with_capacity(xt.numel());
        for (chunk, &c) in xt.data().chunks_exact(plane).zip(ct.data()) {
            out.extend(chunk.iter().map(|&v| f(v, c)));
        }
        Ok(Tensor::from_parts(xt.shape().to_vec(), out))
    }

    /// Residual per-channel gain: `(1 + alpha[c]) * x[c, ..]`.
    pub fn modulate(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let value = self.channel_op("modulate", x, alpha, |v, a| (1.0 + a) * v)?;
        self.record("modulate", value, &[x, alpha], || Op::Modulate { x, alpha })
    }

    /// Plain per-channel gain: `alpha[c] * x[c, ..]`.
    pub fn channel_scale(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let value = self.channel_op("channel_scale", x, alpha, |v, a| a * v)?;
        self.record("channel_scale", value, &[x, alpha], || Op::ChannelScale { x, alpha })
    }

    /// Per-channel offset: `x[c, ..] + beta[c]`.
    pub fn channel_shift(&mut self, x: Var, beta: Var) -> Result<Var> {
        let value = self.channel_op("channel_shift", x, beta, |v, b| v + b)?;
        self.record("channel_shift", value, &[x, beta], || Op::ChannelShift { x, beta })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let at = self.value(a);
        let bt = self.value(b);
        if at.shape() != bt.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", at.shape(), bt.shape()),
            ));
        }
        let out = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(at.shape().to_vec(), out);
        self.record("add", value, &[a, b], || Op::Add { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let at = self.value(a);
        let out = at.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_parts(at.shape().to_vec(), out);
        self.record("scale", value, &[a], || Op::Scale { a, factor })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(kernels::sum(self.value(a).data()));
        self.record("sum", value, &[a], || Op::Sum { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().with_requires_grad(false).reshape(shape)?;
        self.record("reshape", value, &[a], || Op::Reshape { a })
    }

    /// Mean negative log-likelihood of `targets` under a softmax over the
    /// leading axis of `logits` (`[C, ...]`). One target per trailing
    /// position; [`IGNORE_LABEL`] positions are skipped. Returns 0 when every
    /// position is ignored.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.grouped_softmax_cross_entropy(logits, 1, targets)
    }

    /// Cross-entropy where the leading axis packs `groups` independent
    /// softmaxes: logits are laid out `[groups, C, positions]` and targets
    /// `[groups, positions]`.
    pub fn grouped_softmax_cross_entropy(
        &mut self,
        logits: Var,
        groups: usize,
        targets: &[usize],
    ) -> Result<Var> {
        let lt = self.value(logits);
        let lead = *lt.shape().first().ok_or_else(|| {
            Error::shape("softmax_cross_entropy", "logits must have a class axis")
        })?;
        if groups == 0 || lead % groups != 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("class axis {lead} not divisible into {groups} groups"),
            ));
        }
        let classes = lead / groups;
        let positions = lt.numel() / lead;
        if targets.len() != groups * positions {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!(
                    "expected {} targets for logits {:?}, got {}",
                    groups * positions,
                    lt.shape(),
                    targets.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes && t != IGNORE_LABEL) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let data = lt.data();
        let mut probs = vec![0.0; data.len()];
        let mut total = 0.0;
        let mut count = 0;
        for g in 0..groups {
            let block = g * classes * positions;
            for p in 0..positions {
                let at = |c: usize| block + c * positions + p;
                let max = (0..classes).map(|c| data[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..classes {
                    let e = (data[at(c)] - max).exp();
                    probs[at(c)] = e;
                    z += e;
                }
                for c in 0..classes {
                    probs[at(c)] /= z;
                }
                let t = targets[g * positions + p];
                if t != IGNORE_LABEL {
                    total += -(data[at(t)] - max - z.ln());
                    count += 1;
                }
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let targets = targets.to_vec();
        self.record("softmax_cross_entropy", Tensor::scalar(loss), &[logits], || {
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                classes,
                positions,
                count,
            }
        })
    }

    /// `sum(weights * (pred - target)^2)`; `target` and `weights` are constants.
    pub fn weighted_sse(&mut self, pred: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
        let pt = self.value(pred);
        if target.len() != pt.numel() || weights.len() != pt.numel() {
            return Err(Error::shape(
                "weighted_sse",
                format!(
                    "prediction has {} values, target {} and weights {}",
                    pt.numel(),
                    target.len(),
                    weights.len()
                ),
            ));
        }
        let mut loss = 0.0;
        for ((p, t), w) in pt.data().iter().zip(target).zip(weights) {
            loss += w * (p - t) * (p - t);
        }
        let (target, weights) = (target.to_vec(), weights.to_vec());
        self.record("weighted_sse", Tensor::scalar(loss), &[pred], || Op::WeightedSse {
            pred,
            target,
            weights,
        })
    }

    /// Propagates d(loss)/d(node) to every node that needs a gradient and
    /// stores the result on requires-grad leaves. Gradients from a previous
    /// call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        for (node, grad) in self.nodes.iter_mut().zip(&self.grads) {
            if matches!(node.op, Op::Value) && node.value.requires_grad() {
                if let Some(g) = grad {
                    node.value.set_grad(g.clone());
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let node = &self.nodes[i];
        let mut updates: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Value => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    g,
                    self.value(*input).data(),
                    cols.as_deref(),
                    self.value(*weight).data(),
                    geom,
                    wants(*input),
                    wants(*weight),
                    wants(*bias),
                );
                updates.extend(dx.map(|d| (*input, d)));
                updates.extend(dw.map(|d| (*weight, d)));
                updates.extend(db.map(|d| (*bias, d)));
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                updates.push((*input, d));
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                updates.push((*input, d));
            }
            Op::Upsample {
                input,
                dims,
                rows,
                cols,
            } => {
                updates.push((*input, kernels::upsample_backward(g, *dims, rows, cols)));
            }
            Op::MatVec { w, h } => {
                let wt = self.value(*w);
                let ht = self.value(*h).data();
                let n = ht.len();
                if wants(*w) {
                    let mut dw = Vec::with_capacity(wt.numel());
                    for &gi in g {
                        dw.extend(ht.iter().map(|&hj| gi * hj));
                    }
                    updates.push((*w, dw));
                }
                if wants(*h) {
                    let mut dh = vec![0.0; n];
                    for (row, &gi) in wt.data().chunks_exact(n).zip(g) {
                        for (d, &wij) in dh.iter_mut().zip(row) {
                            *d += wij * gi;
                        }
                    }
                    updates.push((*h, dh));
                }
            }
            Op::Modulate { x, alpha } | Op::ChannelScale { x, alpha } => {
                let residual = matches!(node.op, Op::Modulate { .. });
                let xt = self.value(*x);
                let at = self.value(*alpha).data();
                let plane = xt.numel() / at.len();
                if wants(*x) {
                    let mut dx = Vec::with_capacity(xt.numel());
                    for (gc, &a) in g.chunks_exact(plane).zip(at) {
                        let gain = if residual { 1.0 + a } else { a };
                        dx.extend(gc.iter().map(|&gv| gain * gv));
                    }
                    updates.push((*x, dx));
                }
                if wants(*alpha) {
                    let da = g
                        .chunks_exact(plane)
                        .zip(xt.data().chunks_exact(plane))
                        .map(|(gc, xc)| kernels::dot(gc, xc))
                        .collect();
                    updates.push((*alpha, da));
                }
            }
            Op::ChannelShift { x, beta } => {
                let plane = g.len() / self.value(*beta).numel();
                if wants(*x) {
                    updates.push((*x, g.to_vec()));
                }
                if wants(*beta) {
                    updates.push((*beta, g.chunks_exact(plane).map(kernels::sum).collect()));
                }
            }
            Op::Add { a, b } => {
                updates.push((*a, g.to_vec()));
                updates.push((*b, g.to_vec()));
            }
            Op::Scale { a, factor } => {
                updates.push((*a, g.iter().map(|v| v * factor).collect()));
            }
            Op::Sum { a } => {
                updates.push((*a, vec![g[0]; self.value(*a).numel()]));
            }
            Op::Reshape { a } => updates.push((*a, g.to_vec())),
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                classes,
                positions,
                count,
            } => {
                let mut d = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = g[0] / *count as f64;
                    for (gi, tgroup) in targets.chunks_exact(*positions).enumerate() {
                        let block = gi * classes * positions;
                        for (p, &t) in tgroup.iter().enumerate() {
                            if t == IGNORE_LABEL {
                                continue;
                            }
                            for c in 0..*classes {
                                let at = block + c * positions + p;
                                let y = if c == t { 1.0 } else { 0.0 };
                                d[at] = (probs[at] - y) * scale;
                            }
                        }
                    }
                }
                updates.push((*logits, d));
            }
            Op::WeightedSse {
                pred,
                target,
                weights,
            } => {
                let p = self.value(*pred).data();
                let d = p
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((pv, tv), wv)| 2.0 * wv * (pv - tv) * g[0])
                    .collect();
                updates.push((*pred, d));
            }
        }
        for (v, d) in updates {
            self.accumulate(v, d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        assert_eq!(tape.value(x).grad().unwrap(), &[1.0; 6]);
    }

    #[test]
    fn unrelated_parameter_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let p = tape.param(t(&[2], &[3., 4.]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(p).is_none());
    }

    #[test]
    fn constant_inputs_record_nothing() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 4], &[0.5; 16]));
        let w = tape.constant(t(&[2, 1, 3, 3], &[0.1; 18]));
        let b = tape.constant(t(&[2], &[0.0, 1.0]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.maxpool2d(y, 2, 2).unwrap();
        let _ = tape.sum(y).unwrap();
        assert_eq!(tape.recorded_ops(), 0);
    }

    #[test]
    fn backward_on_vector_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn relu_gradient_masks_negative_inputs() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[-1., 2.]));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_labels() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 2], &[0.; 6]));
        assert!(tape.softmax_cross_entropy(x, &[0, 3]).is_err());
        assert!(tape.softmax_cross_entropy(x, &[0, IGNORE_LABEL]).is_ok());
        assert!(tape.softmax_cross_entropy(x, &[0]).is_err());
    }

    #[test]
    fn fully_ignored_cross_entropy_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let l = tape.softmax_cross_entropy(x, &[IGNORE_LABEL, IGNORE_LABEL]).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., -2.]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }
}
