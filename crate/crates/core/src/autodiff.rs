//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly in creation order, so node inputs always
//! refer to earlier nodes and a single reverse sweep computes all gradients.

use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use crate::regularizers::SatNlKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations available through [`Graph::forward_op`].
///
/// Shape rules:
/// - `MatMul`: `[m, k] × [k, n] → [m, n]`
/// - `Conv2d`: input `[B, C, H, W]`, kernel `[O, C, KH, KW]` → `[B, O, OH, OW]`
/// - `AddBias`: input of rank ≥ 2 plus bias `[input.shape[1]]`, broadcast over all other axes
/// - `AvgPool2d`: `[B, C, H, W]` with `H` and `W` divisible by the kernel
/// - `Flatten`: `[B, ...] → [B, rest]`
/// - `Transpose`: rank 2 only
/// - `Add`, `Mul`: identical shapes
/// - `Sum`: any shape to a scalar
/// - elementwise kinds accept any shape
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Conv2d { stride: usize, pad: usize },
    AddBias,
    Relu,
    Tanh,
    Flatten,
    AvgPool2d { kernel: usize },
    Transpose,
    Add,
    Mul,
    Scale(f64),
    Sum,
    Abs,
    SatNl(SatNlKind),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::AddBias => "add_bias",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Flatten => "flatten",
            OpKind::AvgPool2d { .. } => "avgpool2d",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Sum => "sum",
            OpKind::Abs => "abs",
            OpKind::SatNl(_) => "satnl",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::Conv2d { .. }
            | OpKind::AddBias
            | OpKind::Add
            | OpKind::Mul => 2,
            _ => 1,
        }
    }
}

/// Fake quantization with a learnable step: levels `[qmin, qmax]` around `zero_point`,
/// one step per slice along `axis` (or a single step when `axis` is `None`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FakeQuantSpec {
    pub axis: Option<usize>,
    pub qmin: i64,
    pub qmax: i64,
    pub zero_point: i64,
    pub grad_scale: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Basic(OpKind),
    /// Scalar-valued op whose local gradients were computed during the forward pass.
    Scalar(Vec<Tensor>),
    FakeQuant(FakeQuantSpec),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    trainable: bool,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, trainable: bool) -> NodeId {
        let requires_grad = trainable || inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            trainable,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input (data, labels, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, false)
    }

    /// Trainable leaf; its gradient is kept after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn params(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(NodeId)
            .collect()
    }

    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != kind.arity() {
            return Err(Error::invalid(format!(
                "{} takes {} inputs, got {}",
                kind.name(),
                kind.arity(),
                inputs.len()
            )));
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            eval_basic(kind, &vals)?
        };
        Ok(self.push(Op::Basic(kind), inputs.to_vec(), value, false))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.forward_op(OpKind::Conv2d { stride, pad }, &[x, w])
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::AddBias, &[x, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Relu, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Tanh, &[x])
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Flatten, &[x])
    }

    pub fn avgpool2d(&mut self, x: NodeId, kernel: usize) -> Result<NodeId> {
        self.forward_op(OpKind::AvgPool2d { kernel }, &[x])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Transpose, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.forward_op(OpKind::Scale(c), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Sum, &[x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Abs, &[x])
    }

    pub fn satnl(&mut self, x: NodeId, kind: SatNlKind) -> Result<NodeId> {
        self.forward_op(OpKind::SatNl(kind), &[x])
    }

    /// Records a scalar-valued op whose value and per-input gradients are already known.
    pub fn scalar_op(&mut self, inputs: &[NodeId], value: f64, local_grads: Vec<Tensor>) -> Result<NodeId> {
        if local_grads.len() != inputs.len() {
            return Err(Error::invalid("scalar_op needs one local gradient per input"));
        }
        for (i, g) in inputs.iter().zip(&local_grads) {
            let shape = self.nodes[i.0].value.shape();
            if shape != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "scalar_op",
                    lhs: shape.to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("scalar_op"));
        }
        Ok(self.push(
            Op::Scalar(local_grads),
            inputs.to_vec(),
            Tensor::scalar(value),
            false,
        ))
    }

    /// Mean cross-entropy of `logits[batch, classes]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let x = &self.nodes[logits.0].value;
        if x.rank() != 2 {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy expects [batch, classes], got {:?}",
                x.shape()
            )));
        }
        let (b, k) = (x.shape()[0], x.shape()[1]);
        if b == 0 || labels.is_empty() {
            return Err(Error::invalid("softmax_cross_entropy: empty batch"));
        }
        if labels.len() != b {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut loss = 0.0;
        let mut grad = vec![0.0; b * k];
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
            let row = &x.data()[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in row {
                z += (v - max).exp();
            }
            let log_z = z.ln() + max;
            loss += log_z - row[label];
            for (c, &v) in row.iter().enumerate() {
                let p = (v - log_z).exp();
                grad[r * k + c] = (p - if c == label { 1.0 } else { 0.0 }) / b as f64;
            }
        }
        let g = Tensor::new(vec![b, k], grad)?;
        self.scalar_op(&[logits], loss / b as f64, vec![g])
    }

    pub fn fake_quant(&mut self, x: NodeId, step: NodeId, spec: FakeQuantSpec) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[step.0].value;
        let channels = match spec.axis {
            Some(a) => xv.slice_dims(a)?.0,
            None => 1,
        };
        if sv.len() != channels {
            return Err(Error::ShapeMismatch {
                op: "fake_quant",
                lhs: xv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        if sv.data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("fake_quant: step sizes must be positive"));
        }
        let mut out = xv.clone();
        for_each_channel(xv, spec.axis, |c, idx| {
            let s = sv.data()[c];
            let v = xv.data()[idx] / s;
            let level = (v.round_ties_even() as i64 + spec.zero_point).clamp(spec.qmin, spec.qmax);
            out.data_mut()[idx] = (level - spec.zero_point) as f64 * s;
        });
        Ok(self.push(Op::FakeQuant(spec), vec![x, step], out, false))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of trainable leaves are retained.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|i| self.nodes[i.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = match &node.op {
                Op::Leaf => unreachable!("leaves have no inputs"),
                Op::Basic(kind) => backward_basic(*kind, &inputs, &node.value, &upstream, &wants)?,
                Op::Scalar(local) => {
                    let g = upstream.data()[0];
                    local
                        .iter()
                        .zip(&wants)
                        .map(|(l, &w)| w.then(|| l.map(|v| v * g)))
                        .collect()
                }
                Op::FakeQuant(spec) => backward_fake_quant(spec, inputs[0], inputs[1], &upstream, &wants),
            };
            let input_ids = node.inputs.clone();
            for (id, g) in input_ids.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut self.grads[id.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Every parameter ends with a gradient of its own shape, zero if unreachable.
        for idx in 0..self.nodes.len() {
            if self.nodes[idx].trainable && self.grads[idx].is_none() {
                self.grads[idx] = Some(Tensor::zeros(self.nodes[idx].value.shape()));
            }
        }
        Ok(())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn for_each_channel(x: &Tensor, axis: Option<usize>, mut f: impl FnMut(usize, usize)) {
    match axis {
        None => (0..x.len()).for_each(|i| f(0, i)),
        Some(a) => {
            let outer: usize = x.shape()[..a].iter().product();
            let inner: usize = x.shape()[a + 1..].iter().product();
            let c = x.shape()[a];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        f(ch, i);
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] || stride == 0 {
        return Err(mismatch("conv2d", x, w));
    }
    let g = ConvGeom {
        channels: x.shape()[1],
        height: x.shape()[2],
        width: x.shape()[3],
        kernel_h: w.shape()[2],
        kernel_w: w.shape()[3],
        stride,
        pad,
    };
    if g.height + 2 * pad < g.kernel_h || g.width + 2 * pad < g.kernel_w {
        return Err(mismatch("conv2d", x, w));
    }
    Ok(g)
}

fn eval_basic(kind: OpKind, v: &[&Tensor]) -> Result<Tensor> {
    let out = match kind {
        OpKind::MatMul => {
            let (a, b) = (v[0], v[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch("matmul", a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm_nn(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        }
        OpKind::Conv2d { stride, pad } => {
            let (x, w) = (v[0], v[1]);
            let g = conv_geom(x, w, stride, pad)?;
            let (batch, o) = (x.shape()[0], w.shape()[0]);
            let (oh, ow) = (g.out_h(), g.out_w());
            let ohw = oh * ow;
            let img = g.channels * g.height * g.width;
            let mut cols = vec![0.0; g.col_rows() * ohw];
            let mut out = vec![0.0; batch * o * ohw];
            for b in 0..batch {
                im2col(&x.data()[b * img..(b + 1) * img], &g, &mut cols);
                gemm_nn(
                    w.data(),
                    &cols,
                    &mut out[b * o * ohw..(b + 1) * o * ohw],
                    o,
                    g.col_rows(),
                    ohw,
                );
            }
            Tensor::new(vec![batch, o, oh, ow], out)?
        }
        OpKind::AddBias => {
            let (x, b) = (v[0], v[1]);
            if x.rank() < 2 || b.rank() != 1 || b.len() != x.shape()[1] {
                return Err(mismatch("add_bias", x, b));
            }
            let c = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let mut out = x.clone();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o += b.data()[(i / inner) % c];
            }
            out
        }
        OpKind::Relu => v[0].map(|x| x.max(0.0)),
        OpKind::Tanh => v[0].map(f64::tanh),
        OpKind::Abs => v[0].map(f64::abs),
        OpKind::SatNl(k) => v[0].map(|x| k.eval(x)),
        OpKind::Scale(c) => v[0].map(|x| x * c),
        OpKind::Flatten => {
            let x = v[0];
            if x.rank() < 2 {
                return Err(Error::invalid(format!(
                    "flatten needs rank >= 2, got {:?}",
                    x.shape()
                )));
            }
            let b = x.shape()[0];
            x.reshape(&[b, x.len() / b])?
        }
        OpKind::AvgPool2d { kernel } => {
            let x = v[0];
            if x.rank() != 4 || kernel == 0 || x.shape()[2] % kernel != 0 || x.shape()[3] % kernel != 0 {
                return Err(Error::invalid(format!(
                    "avgpool2d: kernel {kernel} incompatible with shape {:?}",
                    x.shape()
                )));
            }
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (oh, ow) = (h / kernel, w / kernel);
            let norm = 1.0 / (kernel * kernel) as f64;
            let mut out = vec![0.0; b * c * oh * ow];
            for bc in 0..b * c {
                let src = &x.data()[bc * h * w..(bc + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                acc += src[(oy * kernel + ky) * w + ox * kernel + kx];
                            }
                        }
                        out[(bc * oh + oy) * ow + ox] = acc * norm;
                    }
                }
            }
            Tensor::new(vec![b, c, oh, ow], out)?
        }
        OpKind::Transpose => {
            let x = v[0];
            if x.rank() != 2 {
                return Err(Error::invalid(format!(
                    "transpose needs rank 2, got {:?}",
                    x.shape()
                )));
            }
            transpose(x)
        }
        OpKind::Add | OpKind::Mul => {
            let (a, b) = (v[0], v[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(kind.name(), a, b));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| if kind == OpKind::Add { x + y } else { x * y })
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        }
        OpKind::Sum => Tensor::scalar(v[0].sum()),
    };
    if !out.all_finite() {
        return Err(Error::NonFinite(kind.name()));
    }
    Ok(out)
}

fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose keeps element count")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn backward_basic(
    kind: OpKind,
    v: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    wants: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let grads = match kind {
        OpKind::MatMul => {
            let (a, b) = (v[0], v[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let da = wants[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm_nt(g.data(), b.data(), &mut d, m, n, k);
                Tensor::new(vec![m, k], d).unwrap()
            });
            let db = wants[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm_tn(a.data(), g.data(), &mut d, m, k, n);
                Tensor::new(vec![k, n], d).unwrap()
            });
            vec![da, db]
        }
        OpKind::Conv2d { stride, pad } => {
            let (x, w) = (v[0], v[1]);
            let geom = conv_geom(x, w, stride, pad)?;
            let (batch, o) = (x.shape()[0], w.shape()[0]);
            let ohw = geom.out_h() * geom.out_w();
            let img = geom.channels * geom.height * geom.width;
            let rows = geom.col_rows();
            let mut cols = vec![0.0; rows * ohw];
            let mut dcols = vec![0.0; rows * ohw];
            let mut dx = wants[0].then(|| vec![0.0; x.len()]);
            let mut dw = wants[1].then(|| vec![0.0; w.len()]);
            for b in 0..batch {
                let gb = &g.data()[b * o * ohw..(b + 1) * o * ohw];
                if let Some(dw) = dw.as_mut() {
                    im2col(&x.data()[b * img..(b + 1) * img], &geom, &mut cols);
                    gemm_nt(gb, &cols, dw, o, ohw, rows);
                }
                if let Some(dx) = dx.as_mut() {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    gemm_tn(w.data(), gb, &mut dcols, o, rows, ohw);
                    col2im(&dcols, &geom, &mut dx[b * img..(b + 1) * img]);
                }
            }
            vec![
                dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
                dw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
            ]
        }
        OpKind::AddBias => {
            let (x, b) = (v[0], v[1]);
            let db = wants[1].then(|| {
                let c = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                let mut d = vec![0.0; c];
                for (i, gv) in g.data().iter().enumerate() {
                    d[(i / inner) % c] += gv;
                }
                Tensor::new(b.shape().to_vec(), d).unwrap()
            });
            vec![wants[0].then(|| g.clone()), db]
        }
        OpKind::Relu => vec![Some(zip_map(v[0], g, |x, gv| if x > 0.0 { gv } else { 0.0 }))],
        OpKind::Tanh => vec![Some(zip_map(out, g, |y, gv| gv * (1.0 - y * y)))],
        OpKind::SatNl(k) => vec![Some(zip_map(v[0], g, |x, gv| gv * k.derivative(x)))],
        OpKind::Abs => vec![Some(zip_map(v[0], g, |x, gv| {
            if x > 0.0 {
                gv
            } else if x < 0.0 {
                -gv
            } else {
                0.0
            }
        }))],
        OpKind::Scale(c) => vec![Some(g.map(|gv| gv * c))],
        OpKind::Flatten => vec![Some(g.reshape(v[0].shape())?)],
        OpKind::AvgPool2d { kernel } => {
            let x = v[0];
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let (oh, ow) = (h / kernel, w / kernel);
            let norm = 1.0 / (kernel * kernel) as f64;
            let mut d = vec![0.0; x.len()];
            for bc in 0..x.shape()[0] * x.shape()[1] {
                for y in 0..h {
                    for xx in 0..w {
                        d[bc * h * w + y * w + xx] =
                            g.data()[(bc * oh + y / kernel) * ow + xx / kernel] * norm;
                    }
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), d)?)]
        }
        OpKind::Transpose => vec![Some(transpose(g))],
        OpKind::Add => vec![wants[0].then(|| g.clone()), wants[1].then(|| g.clone())],
        OpKind::Mul => vec![
            wants[0].then(|| zip_map(v[1], g, |b, gv| b * gv)),
            wants[1].then(|| zip_map(v[0], g, |a, gv| a * gv)),
        ],
        OpKind::Sum => vec![Some(Tensor::full(v[0].shape(), g.data()[0]))],
    };
    Ok(grads)
}

fn backward_fake_quant(
    spec: &FakeQuantSpec,
    x: &Tensor,
    step: &Tensor,
    g: &Tensor,
    wants: &[bool],
) -> Vec<Option<Tensor>> {
    let mut dx = vec![0.0; x.len()];
    let mut ds = vec![0.0; step.len()];
    let lo = (spec.qmin - spec.zero_point) as f64;
    let hi = (spec.qmax - spec.zero_point) as f64;
    for_each_channel(x, spec.axis, |c, idx| {
        let s = step.data()[c];
        let v = x.data()[idx] / s;
        let gv = g.data()[idx];
        let dq_ds = if v < lo {
            lo
        } else if v > hi {
            hi
        } else {
            dx[idx] = gv;
            v.round_ties_even() - v
        };
        ds[c] += gv * dq_ds;
    });
    for d in ds.iter_mut() {
        *d *= spec.grad_scale;
    }
    vec![
        wants[0].then(|| Tensor::new(x.shape().to_vec(), dx).unwrap()),
        wants[1].then(|| Tensor::new(step.shape().to_vec(), ds).unwrap()),
    ]
}

/// Compares reverse-mode gradients against central differences.
///
/// `loss_fn` receives a fresh graph and one trainable node per entry of `params` and must
/// return a scalar loss node. Returns the maximum over all parameter elements of
/// `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn finite_difference_check<F>(loss_fn: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = loss_fn(&mut g, &ids)?;
        Ok(g.value(loss).data()[0])
    };

    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = loss_fn(&mut graph, &ids)?;
    graph.backward(loss)?;

    let mut worst = 0.0_f64;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = graph.grad(*id).expect("parameter gradient").clone();
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            probe[pi].data_mut()[e] = orig + epsilon;
            let up = eval(&probe)?;
            probe[pi].data_mut()[e] = orig - epsilon;
            let down = eval(&probe)?;
            probe[pi].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            let ad = analytic.data()[e];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
