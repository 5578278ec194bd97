//! Training loop (SGD with momentum, cosine schedule, optional SAM/ASAM and SymReg),
//! evaluation of frozen networks with optional quantization, and learned-step QAT.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::autodiff::{FakeQuantSpec, Graph, NodeId};
use crate::checkpoint::{Checkpoint, QatLayer};
use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::model::{LayerNodes, ModelSpec};
use crate::quantizer::{FitMethod, QuantParams, QuantScheme, calibrate_activation, fit_params, quantize};
use crate::regularizers::{MIN_SYMREG_FAN_IN, SymRegConfig, total_loss};
use crate::tensor::{Rng, Tensor};

const EVAL_CHUNK: usize = 500;
const CALIBRATION_SAMPLES: usize = 256;
const MIN_STEP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamConfig {
    pub enabled: bool,
    /// ASAM: scale the perturbation by `|w|` per element.
    pub adaptive: bool,
    pub rho: f64,
}

impl SamConfig {
    pub fn off() -> Self {
        Self {
            enabled: false,
            adaptive: false,
            rho: 0.0,
        }
    }

    pub fn sam(rho: f64) -> Self {
        Self {
            enabled: true,
            adaptive: false,
            rho,
        }
    }

    pub fn asam(rho: f64) -> Self {
        Self {
            enabled: true,
            adaptive: true,
            rho,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Applied to weight tensors only (latent weights for SatNL layers), not to biases.
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    /// Learning rate reached at the end of the cosine schedule.
    pub lr_floor: f64,
    pub seed: u64,
    pub sam: SamConfig,
    pub symreg: SymRegConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            weight_decay: 5e-4,
            momentum: 0.9,
            warmup_epochs: 2,
            lr_floor: 0.0,
            seed: 0,
            sam: SamConfig::off(),
            symreg: SymRegConfig::off(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || self.lr_floor < 0.0 || self.lr_floor > self.lr {
            return Err(Error::invalid("need lr > 0 and 0 ≤ lr_floor ≤ lr"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("momentum must lie in [0, 1) and weight_decay ≥ 0"));
        }
        if !(self.sam.rho >= 0.0) {
            return Err(Error::invalid("sam rho must be ≥ 0"));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a of the model and training configuration.
pub fn config_hash(spec: &ModelSpec, cfg: &TrainConfig) -> u64 {
    format!("{spec:?}|{cfg:?}")
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Linear warmup over `warmup_epochs`, then cosine annealing from `lr` down to `lr_floor`.
pub fn learning_rate(cfg: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let total = cfg.epochs * steps_per_epoch;
    let warm = (cfg.warmup_epochs * steps_per_epoch).min(total);
    if step < warm {
        return cfg.lr * (step + 1) as f64 / warm as f64;
    }
    let t = (step - warm) as f64 / (total - warm).max(1) as f64;
    cfg.lr_floor + (cfg.lr - cfg.lr_floor) * 0.5 * (1.0 + (PI * t.min(1.0)).cos())
}

/// SGD with heavy-ball momentum and L2 weight decay on the tensors selected by a mask.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    decay: Vec<bool>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    /// `decay[i]` selects whether tensor `i` receives weight decay.
    pub fn new(momentum: f64, weight_decay: f64, shapes: &[Tensor], decay: Vec<bool>) -> Self {
        Self {
            momentum,
            weight_decay,
            decay,
            velocity: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            let v = &mut self.velocity[i];
            for ((w, &gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vj = self.momentum * *vj + gj + wd * *w;
                *w -= lr * *vj;
            }
        }
    }
}

/// Perturbation `ε` of SAM (`ρ·g/‖g‖`) or ASAM (`ρ·T²g/‖Tg‖`, `T = diag(|w|)`). Returns
/// `None` when the (scaled) gradient norm is zero.
pub fn sam_perturbation(params: &[Tensor], grads: &[Tensor], sam: &SamConfig) -> Option<Vec<Tensor>> {
    let scale = |w: f64| if sam.adaptive { w.abs() } else { 1.0 };
    let mut norm_sq = 0.0;
    for (p, g) in params.iter().zip(grads) {
        for (&w, &gj) in p.data().iter().zip(g.data()) {
            let tg = scale(w) * gj;
            norm_sq += tg * tg;
        }
    }
    let norm = norm_sq.sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    Some(
        params
            .iter()
            .zip(grads)
            .map(|(p, g)| {
                let data = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&w, &gj)| sam.rho * scale(w) * scale(w) * gj / norm)
                    .collect();
                Tensor::new(p.shape().to_vec(), data).expect("same shape")
            })
            .collect(),
    )
}

/// Two-pass sharpness-aware update: gradients are re-evaluated by `closure` at
/// `params + ε`, then the base optimizer steps from the original `params` with them.
/// A zero gradient norm (or disabled SAM) falls back to a plain step with `grads`.
pub fn sam_step<F>(
    params: &mut [Tensor],
    grads: &[Tensor],
    sam: &SamConfig,
    opt: &mut Sgd,
    lr: f64,
    mut closure: F,
) -> Result<()>
where
    F: FnMut(&[Tensor]) -> Result<Vec<Tensor>>,
{
    let eps = if sam.enabled {
        sam_perturbation(params, grads, sam)
    } else {
        None
    };
    let Some(eps) = eps else {
        opt.step(params, grads, lr);
        return Ok(());
    };
    let perturbed: Vec<Tensor> = params
        .iter()
        .zip(&eps)
        .map(|(p, e)| {
            let data = p
                .data()
                .iter()
                .zip(e.data())
                .map(|(&w, &d)| if d == 0.0 { w } else { w + d })
                .collect();
            Tensor::new(p.shape().to_vec(), data).expect("same shape")
        })
        .collect();
    let g2 = closure(&perturbed)?;
    opt.step(params, &g2, lr);
    Ok(())
}

/// Fake-quant wiring of one layer during QAT; indices point into the parameter list.
#[derive(Debug, Clone, Copy)]
struct QatWiring {
    weight_step: usize,
    weight: FakeQuantSpec,
    act: Option<(usize, FakeQuantSpec)>,
}

/// Layers excluded from SymReg: the classifier, layers with fan-in below
/// [`MIN_SYMREG_FAN_IN`], and anything the config lists.
pub fn effective_symreg(spec: &ModelSpec, cfg: &SymRegConfig) -> SymRegConfig {
    let mut out = cfg.clone();
    let layers = spec.layers();
    for (i, l) in layers.iter().enumerate() {
        if i + 1 == layers.len() || l.fan_in() < MIN_SYMREG_FAN_IN {
            out.skip_layers.insert(l.name.clone());
        }
    }
    out
}

fn objective(
    spec: &ModelSpec,
    params: &[Tensor],
    qat: Option<&[QatWiring]>,
    x: &Tensor,
    y: &[usize],
    symreg: &SymRegConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let mut nodes = Vec::new();
    let mut effective = Vec::new();
    for (i, layer) in spec.layers().iter().enumerate() {
        let mut w = ids[2 * i];
        if let Some(kind) = spec.satnl_kind(&layer.name) {
            w = g.satnl(w, kind)?;
        }
        effective.push((layer.name.clone(), w));
        if let Some(q) = qat {
            w = g.fake_quant(w, ids[q[i].weight_step], q[i].weight)?;
        }
        nodes.push(LayerNodes {
            weight: w,
            bias: ids[2 * i + 1],
        });
    }
    let xn = g.constant(x.clone());
    let trace = spec.forward(&mut g, &nodes, xn, &mut |g, i, h| match qat.and_then(|q| q[i].act) {
        Some((step, fq)) => g.fake_quant(h, ids[step], fq),
        None => Ok(h),
    })?;
    let ce = g.softmax_cross_entropy(trace.logits, y)?;
    let loss = total_loss(&mut g, ce, &effective, symreg)?;
    g.backward(loss)?;
    let grads = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((g.value(loss).data()[0], grads))
}

/// Training loss (cross-entropy plus SymReg on the layers `symreg` leaves in scope) and
/// its gradient with respect to the flat `weight, bias` parameter list.
pub fn loss_and_grads(
    spec: &ModelSpec,
    params: &[Tensor],
    x: &Tensor,
    y: &[usize],
    symreg: &SymRegConfig,
) -> Result<(f64, Vec<Tensor>)> {
    objective(spec, params, None, x, y, &effective_symreg(spec, symreg))
}

fn check_data(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    if data.classes != spec.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model expects {}",
            data.classes, spec.classes
        )));
    }
    if data.sample_shape() != spec.input_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "dataset",
            lhs: spec.input_shape(),
            rhs: data.sample_shape().to_vec(),
        });
    }
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    Ok(())
}

/// Runs the epoch loop and returns the parameters of the best validation epoch (earliest on
/// ties) together with that epoch (1-based) and its accuracy.
#[allow(clippy::too_many_arguments)]
fn run_sgd(
    spec: &ModelSpec,
    mut params: Vec<Tensor>,
    decay: Vec<bool>,
    qat: Option<&[QatWiring]>,
    data: &DataSplit,
    cfg: &TrainConfig,
    lr_scale: f64,
    validate: &dyn Fn(&[Tensor]) -> Result<f64>,
) -> Result<(Vec<Tensor>, usize, f64)> {
    let symreg = effective_symreg(spec, &cfg.symreg);
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay, &params, decay);
    let mut rng = Rng::new(cfg.seed).fork(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(Vec<Tensor>, usize, f64)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged { epoch },
            other => other,
        };
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.batch(chunk);
            let lr = lr_scale * learning_rate(cfg, step, steps_per_epoch);
            let (loss, grads) = objective(spec, &params, qat, &x, &y, &symreg).map_err(diverged)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            sam_step(&mut params, &grads, &cfg.sam, &mut opt, lr, |p| {
                objective(spec, p, qat, &x, &y, &symreg).map(|(_, g)| g)
            })
            .map_err(diverged)?;
            if let Some(q) = qat {
                for w in q {
                    clamp_steps(&mut params[w.weight_step]);
                    if let Some((s, _)) = w.act {
                        clamp_steps(&mut params[s]);
                    }
                }
            }
            if params.iter().any(|p| !p.all_finite()) {
                return Err(Error::Diverged { epoch });
            }
            step += 1;
        }
        let acc = validate(&params).map_err(diverged)?;
        if best.as_ref().is_none_or(|b| acc > b.2) {
            best = Some((params.clone(), epoch, acc));
        }
    }
    Ok(best.expect("at least one epoch"))
}

fn clamp_steps(t: &mut Tensor) {
    for s in t.data_mut() {
        *s = s.max(MIN_STEP);
    }
}

fn param_names(spec: &ModelSpec) -> Vec<String> {
    spec.layers()
        .iter()
        .flat_map(|l| [l.weight_name(), l.bias_name()])
        .collect()
}

fn train_meta(spec: &ModelSpec, cfg: &TrainConfig, epoch: usize, acc: f64) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("config_hash".into(), format!("{:016x}", config_hash(spec, cfg)));
    meta.insert("epoch".into(), epoch.to_string());
    meta.insert("val_accuracy".into(), format!("{acc:.6}"));
    meta
}

/// Trains `spec` from a seeded initialization and returns the best-validation checkpoint.
pub fn train(spec: &ModelSpec, data: &DataSplit, cfg: &TrainConfig) -> Result<Checkpoint> {
    spec.validate()?;
    cfg.validate()?;
    check_data(spec, &data.train)?;
    check_data(spec, &data.val)?;
    let names = param_names(spec);
    let params: Vec<Tensor> = spec.init_params(cfg.seed).into_iter().map(|(_, t)| t).collect();
    let decay = names.iter().map(|n| n.ends_with(".weight")).collect();
    let validate = |p: &[Tensor]| Network::from_params(spec, p).accuracy(&data.val, None);
    let (best, epoch, acc) = run_sgd(spec, params, decay, None, data, cfg, 1.0, &validate)?;
    Checkpoint::new(
        spec.clone(),
        names.into_iter().zip(best).collect(),
        train_meta(spec, cfg, epoch, acc),
    )
}

/// Per-layer quantization applied at evaluation time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerQuant {
    pub weight: Option<(QuantScheme, QuantParams)>,
    pub act: Option<(QuantScheme, QuantParams)>,
}

/// Output of [`Network::run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub logits: Tensor,
    pub layer_inputs: Vec<Tensor>,
    pub layer_outputs: Vec<Tensor>,
}

/// A frozen network: effective weights and biases per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: ModelSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Network {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            spec: ckpt.spec.clone(),
            weights: ckpt.effective_weights(),
            biases: ckpt.biases(),
        }
    }

    /// From the flat `weight, bias` parameter list used during training.
    fn from_params(spec: &ModelSpec, params: &[Tensor]) -> Self {
        let layers = spec.layers();
        Self {
            spec: spec.clone(),
            weights: layers
                .iter()
                .enumerate()
                .map(|(i, l)| spec.effective_weight(&l.name, &params[2 * i]))
                .collect(),
            biases: (0..layers.len()).map(|i| params[2 * i + 1].clone()).collect(),
        }
    }

    /// Replaces the weights of every layer that has a weight quantizer.
    pub fn with_quantized_weights(&self, quant: &[LayerQuant]) -> Result<Self> {
        let mut out = self.clone();
        for (w, q) in out.weights.iter_mut().zip(quant) {
            if let Some((s, p)) = &q.weight {
                *w = quantize(w, p, s)?;
            }
        }
        Ok(out)
    }

    pub fn run(&self, x: &Tensor, quant: Option<&[LayerQuant]>) -> Result<RunOutput> {
        let mut g = Graph::new();
        let nodes: Vec<LayerNodes> = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| LayerNodes {
                weight: g.constant(w.clone()),
                bias: g.constant(b.clone()),
            })
            .collect();
        let xn = g.constant(x.clone());
        let trace = self.spec.forward(&mut g, &nodes, xn, &mut |g, i, h| {
            match quant.and_then(|q| q.get(i)).and_then(|l| l.act.as_ref()) {
                Some((s, p)) => {
                    let v = quantize(g.value(h), p, s)?;
                    Ok(g.constant(v))
                }
                None => Ok(h),
            }
        })?;
        Ok(RunOutput {
            logits: g.value(trace.logits).clone(),
            layer_inputs: trace.layer_inputs.iter().map(|&n| g.value(n).clone()).collect(),
            layer_outputs: trace.layer_outputs.iter().map(|&n| g.value(n).clone()).collect(),
        })
    }

    /// Top-1 predictions; the first maximal logit wins.
    pub fn predict(&self, data: &Dataset, quant: Option<&[LayerQuant]>) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(data.len());
        for start in (0..data.len()).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
            let (x, _) = data.batch(&idx);
            let logits = self.run(&x, quant)?.logits;
            let k = logits.shape()[1];
            for row in logits.data().chunks(k) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Activation quantizers are taken from `quant`; weights are used as stored.
    pub fn accuracy(&self, data: &Dataset, quant: Option<&[LayerQuant]>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        let pred = self.predict(data, quant)?;
        let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Top-1 accuracy of `ckpt` on `data`, optionally with per-layer weight and activation
/// quantization applied to the effective weights.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, quant: Option<&[LayerQuant]>) -> Result<f64> {
    check_data(&ckpt.spec, data)?;
    let net = Network::from_checkpoint(ckpt);
    match quant {
        Some(q) => net.with_quantized_weights(q)?.accuracy(data, Some(q)),
        None => net.accuracy(data, None),
    }
}

/// Quantizers stored in a QAT checkpoint, in evaluation form.
pub fn qat_quant(ckpt: &Checkpoint) -> Option<Vec<LayerQuant>> {
    ckpt.qat.as_ref().map(|layers| {
        layers
            .iter()
            .map(|l| LayerQuant {
                weight: Some(l.weight.clone()),
                act: l.act.clone(),
            })
            .collect()
    })
}

/// Bit-widths of a QAT run per layer: `(weights, activations)`, `None` keeps activations
/// in floating point.
#[derive(Debug, Clone, PartialEq)]
pub struct QatPlan {
    pub layers: Vec<(u32, Option<u32>)>,
}

impl QatPlan {
    /// `bits_w`/`bits_a` everywhere except the first and last layers, which stay at 8 bits.
    pub fn pinned(spec: &ModelSpec, bits_w: u32, bits_a: Option<u32>) -> Self {
        let n = spec.layers().len();
        let layers = (0..n)
            .map(|i| {
                if i == 0 || i + 1 == n {
                    (8, bits_a.map(|_| 8))
                } else {
                    (bits_w, bits_a)
                }
            })
            .collect();
        Self { layers }
    }
}

/// Learned-step QAT starting from `ckpt`: fake quantization on effective weights
/// (per-channel symmetric) and layer inputs (per-tensor asymmetric), step sizes trained
/// with the straight-through estimator at a tenth of `cfg.lr`.
pub fn qat_finetune(ckpt: &Checkpoint, plan: &QatPlan, data: &DataSplit, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let spec = &ckpt.spec;
    check_data(spec, &data.train)?;
    check_data(spec, &data.val)?;
    let layers = spec.layers();
    if plan.layers.len() != layers.len() {
        return Err(Error::invalid("QAT plan needs one entry per layer"));
    }
    let names = param_names(spec);
    let mut params: Vec<Tensor> = names
        .iter()
        .map(|n| ckpt.tensor(n).expect("checkpoint validated").clone())
        .collect();
    let mut decay: Vec<bool> = names.iter().map(|n| n.ends_with(".weight")).collect();

    let net = Network::from_checkpoint(ckpt);
    let calib = data.train.calibration_subset(CALIBRATION_SAMPLES);
    let (cx, _) = calib.batch(&(0..calib.len()).collect::<Vec<_>>());
    let calib_inputs = net.run(&cx, None)?.layer_inputs;

    let mut wiring = Vec::new();
    let mut schemes = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let (bits_w, bits_a) = plan.layers[i];
        let ws = QuantScheme::weight(bits_w, 0, FitMethod::MinMax)?;
        let wp = fit_params(&net.weights[i], &ws)?;
        let (wmin, wmax) = ws.level_range();
        let weight = FakeQuantSpec {
            axis: Some(0),
            qmin: wmin,
            qmax: wmax,
            zero_point: 0,
            grad_scale: 1.0 / ((wmax as f64) * layer.fan_in() as f64).sqrt(),
        };
        params.push(Tensor::from_vec(wp.step.clone()));
        decay.push(false);
        let weight_step = params.len() - 1;
        let act = match bits_a {
            Some(b) => {
                let (s, p) = calibrate_activation(&calib_inputs[i], b)?;
                let (amin, amax) = s.level_range();
                let per_sample: usize = calib_inputs[i].shape()[1..].iter().product();
                params.push(Tensor::from_vec(p.step.clone()));
                decay.push(false);
                schemes.push((ws, Some((s, p.zero_point[0]))));
                Some((
                    params.len() - 1,
                    FakeQuantSpec {
                        axis: None,
                        qmin: amin,
                        qmax: amax,
                        zero_point: p.zero_point[0],
                        grad_scale: 1.0 / ((amax as f64) * per_sample as f64).sqrt(),
                    },
                ))
            }
            None => {
                schemes.push((ws, None));
                None
            }
        };
        wiring.push(QatWiring {
            weight_step,
            weight,
            act,
        });
    }

    let n_model = names.len();
    let to_state = |p: &[Tensor]| -> Result<Vec<QatLayer>> {
        wiring
            .iter()
            .zip(&schemes)
            .map(|(w, (ws, act))| {
                let c = p[w.weight_step].len();
                let weight = (*ws, QuantParams::from_steps(p[w.weight_step].data().to_vec(), vec![0; c], ws)?);
                let act = match (w.act, act) {
                    (Some((idx, _)), Some((s, z))) => {
                        Some((*s, QuantParams::from_steps(p[idx].data().to_vec(), vec![*z], s)?))
                    }
                    _ => None,
                };
                Ok(QatLayer { weight, act })
            })
            .collect()
    };
    let validate = |p: &[Tensor]| -> Result<f64> {
        let q: Vec<LayerQuant> = to_state(p)?
            .into_iter()
            .map(|l| LayerQuant {
                weight: Some(l.weight),
                act: l.act,
            })
            .collect();
        Network::from_params(spec, &p[..n_model])
            .with_quantized_weights(&q)?
            .accuracy(&data.val, Some(&q))
    };
    let (best, epoch, acc) = run_sgd(spec, params, decay, Some(&wiring), data, cfg, 0.1, &validate)?;
    let state = to_state(&best)?;
    let mut meta = train_meta(spec, cfg, epoch, acc);
    for (k, v) in &ckpt.meta {
        meta.entry(format!("pretrain.{k}")).or_insert_with(|| v.clone());
    }
    Checkpoint::new(spec.clone(), names.into_iter().zip(best).collect(), meta)?.with_qat(state)
}
