//! Symmetry regularization of per-channel weight distributions and saturating weight
//! nonlinearities.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Odd, bounded, saturating maps applied to latent weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SatNlKind {
    Tanh,
    /// `erf(√π·x/2)`: unit slope at the origin, Gaussian-shaped derivative.
    Erf,
    /// Scaled Gudermannian `(2/π)·atan(sinh(πx/2))`: unit slope at the origin, `sech` derivative.
    Gudermannian,
}

impl SatNlKind {
    pub const ALL: [SatNlKind; 3] = [SatNlKind::Tanh, SatNlKind::Erf, SatNlKind::Gudermannian];

    pub fn name(self) -> &'static str {
        match self {
            SatNlKind::Tanh => "tanh",
            SatNlKind::Erf => "erf",
            SatNlKind::Gudermannian => "gd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(SatNlKind::Tanh),
            "erf" | "alternative_1" => Ok(SatNlKind::Erf),
            "gd" | "gudermannian" | "alternative_2" => Ok(SatNlKind::Gudermannian),
            other => Err(Error::Config(format!("unknown satnl kind `{other}`"))),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            SatNlKind::Tanh => x.tanh(),
            SatNlKind::Erf => libm::erf(0.5 * PI.sqrt() * x),
            SatNlKind::Gudermannian => 2.0 / PI * (0.5 * PI * x).sinh().atan(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            SatNlKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            SatNlKind::Erf => (-0.25 * PI * x * x).exp(),
            SatNlKind::Gudermannian => 1.0 / (0.5 * PI * x).cosh(),
        }
    }

    /// Inverse on the open interval `(−1, 1)`.
    pub fn inverse(self, y: f64) -> f64 {
        match self {
            SatNlKind::Tanh => y.atanh(),
            SatNlKind::Gudermannian => 2.0 / PI * (0.5 * PI * y).tan().asinh(),
            SatNlKind::Erf => {
                if y == 0.0 {
                    return 0.0;
                }
                // erf saturates faster than gd, so the root lies in [0, gd⁻¹(|y|)]. Newton
                // steps that leave the bracket fall back to bisection.
                let target = y.abs();
                let (mut lo, mut hi) = (0.0, SatNlKind::Gudermannian.inverse(target));
                let mut x = hi;
                for _ in 0..200 {
                    let f = self.eval(x) - target;
                    if f > 0.0 {
                        hi = x;
                    } else {
                        lo = x;
                    }
                    let newton = x - f / self.derivative(x);
                    let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
                    if (next - x).abs() < 1e-15 * x.abs().max(1.0) {
                        x = next;
                        break;
                    }
                    x = next;
                }
                x.copysign(y)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatNlConfig {
    pub kind: SatNlKind,
    /// Layer names with the nonlinearity active.
    pub layers: BTreeSet<String>,
}

impl SatNlConfig {
    pub fn disabled() -> Self {
        Self {
            kind: SatNlKind::Tanh,
            layers: BTreeSet::new(),
        }
    }

    pub fn on(kind: SatNlKind, layers: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            kind,
            layers: layers.into_iter().map(Into::into).collect(),
        }
    }

    pub fn enabled(&self, layer: &str) -> bool {
        self.layers.contains(layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymRegConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub channel_axis: usize,
    pub skip_layers: BTreeSet<String>,
}

impl Default for SymRegConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            channel_axis: 0,
            skip_layers: BTreeSet::new(),
        }
    }
}

impl SymRegConfig {
    pub fn off() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0
    }
}

/// Per-channel element count below which a layer is treated as depthwise-like and left
/// unregularized.
pub const MIN_SYMREG_FAN_IN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Relation {
    /// 1:1 mirror pairs `(i, N−1−i)` of the sorted channel.
    Pair,
    /// 2:2 groups `{2i, 2i+1, N−1−2i, N−2−2i}` of the sorted channel.
    Group,
}

/// Loss value and its gradient with respect to `w`.
fn symmetry_loss(w: &Tensor, axis: usize, relation: Relation) -> Result<(f64, Tensor)> {
    let (channels, n) = w.slice_dims(axis)?;
    let min_n = match relation {
        Relation::Pair => 2,
        Relation::Group => 4,
    };
    if n < min_n {
        return Err(Error::invalid(format!(
            "symmetry loss needs at least {min_n} elements per channel, got {n}"
        )));
    }
    // Both relations share the 2/(C·N) prefactor, i.e. the mean over mirror pairs; see
    // `sym_loss2` for why the group relation is not rescaled.
    let scale = 2.0 / (channels * n) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(w.shape());
    for c in 0..channels {
        let idx = w.slice_indices(axis, c);
        let mut order: Vec<usize> = (0..n).collect();
        // Stable: ties keep original index order.
        order.sort_by(|&a, &b| w.data()[idx[a]].total_cmp(&w.data()[idx[b]]));
        let sorted: Vec<usize> = order.iter().map(|&o| idx[o]).collect();
        let (count, width) = match relation {
            Relation::Pair => (n / 2, 2),
            Relation::Group => (n / 4, 4),
        };
        for i in 0..count {
            let group = [
                sorted[width / 2 * i],
                sorted[n - 1 - width / 2 * i],
                sorted[2 * i + 1],
                sorted[n - 2 - 2 * i],
            ];
            let term = &group[..width];
            let s: f64 = term.iter().map(|&j| w.data()[j]).sum();
            loss += scale * s.abs();
            let sign = if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            };
            for &j in term {
                grad.data_mut()[j] += scale * sign;
            }
        }
    }
    Ok((loss, grad))
}

/// Strict mirror-pair symmetry loss, averaged over channels and pairs.
pub fn sym_loss1(g: &mut Graph, w: NodeId, channel_axis: usize) -> Result<NodeId> {
    let (value, grad) = symmetry_loss(g.value(w), channel_axis, Relation::Pair)?;
    g.scalar_op(&[w], value, vec![grad])
}

/// Relaxed 2:2 group symmetry loss. Normalized by the number of mirror pairs (not groups)
/// so it never exceeds [`sym_loss1`] on the same tensor.
pub fn sym_loss2(g: &mut Graph, w: NodeId, channel_axis: usize) -> Result<NodeId> {
    let (value, grad) = symmetry_loss(g.value(w), channel_axis, Relation::Group)?;
    g.scalar_op(&[w], value, vec![grad])
}

pub fn sym_loss1_value(w: &Tensor, channel_axis: usize) -> Result<f64> {
    symmetry_loss(w, channel_axis, Relation::Pair).map(|(v, _)| v)
}

pub fn sym_loss2_value(w: &Tensor, channel_axis: usize) -> Result<f64> {
    symmetry_loss(w, channel_axis, Relation::Group).map(|(v, _)| v)
}

/// `ce + λ1·mean(sym_loss1) + λ2·mean(sym_loss2)` over the named weight nodes not listed in
/// `cfg.skip_layers`. Terms with a zero coefficient are not added at all.
pub fn total_loss(
    g: &mut Graph,
    ce: NodeId,
    weights: &[(String, NodeId)],
    cfg: &SymRegConfig,
) -> Result<NodeId> {
    let active: Vec<NodeId> = weights
        .iter()
        .filter(|(name, _)| !cfg.skip_layers.contains(name))
        .map(|(_, id)| *id)
        .collect();
    let mut loss = ce;
    if active.is_empty() {
        return Ok(loss);
    }
    let layers = active.len() as f64;
    for (lambda, relation) in [(cfg.lambda1, Relation::Pair), (cfg.lambda2, Relation::Group)] {
        if lambda == 0.0 {
            continue;
        }
        let mut acc: Option<NodeId> = None;
        for &w in &active {
            let term = match relation {
                Relation::Pair => sym_loss1(g, w, cfg.channel_axis)?,
                Relation::Group => sym_loss2(g, w, cfg.channel_axis)?,
            };
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        let mean = g.scale(acc.expect("non-empty"), lambda / layers)?;
        loss = g.add(loss, mean)?;
    }
    Ok(loss)
}

/// Inserts the effective weight `f(w_latent)` into the graph.
pub fn satnl_apply(g: &mut Graph, w_latent: NodeId, kind: SatNlKind) -> Result<NodeId> {
    g.satnl(w_latent, kind)
}

/// Latent weights whose image under `kind` reproduces `w_target` clamped to ±0.999.
pub fn init_latent(w_target: &Tensor, kind: SatNlKind) -> Tensor {
    w_target.map(|w| kind.inverse(w.clamp(-0.999, 0.999)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatNlValidity {
    pub valid: bool,
    pub violations: Vec<String>,
}

/// 2001 evenly spaced points over `[−10, 10]`.
pub fn default_probe_grid() -> Vec<f64> {
    (0..=2000).map(|i| -10.0 + i as f64 * 0.01).collect()
}

/// Checks the three properties a weight nonlinearity needs: odd symmetry, a bounded
/// saturating range, and a slope that never increases away from the origin.
pub fn is_valid_satnl(f: impl Fn(f64) -> f64, grid: &[f64], bound: f64) -> SatNlValidity {
    let mut violations = Vec::new();
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if grid.len() < 1000 || lo > -10.0 || hi < 10.0 || (lo + hi).abs() > 1e-9 {
        violations.push(format!(
            "probe grid must hold >= 1000 points symmetric over [-10, 10], got {} over [{lo}, {hi}]",
            grid.len()
        ));
    }

    if let Some(x) = grid.iter().find(|&&x| (f(-x) + f(x)).abs() > 1e-12) {
        violations.push(format!("not odd: f(-{x}) != -f({x})"));
    }

    let sup = grid.iter().map(|&x| f(x).abs()).fold(0.0_f64, f64::max);
    if !(sup <= bound) {
        violations.push(format!("unbounded: sup|f| = {sup} exceeds {bound}"));
    }
    let tail = f(10.0) - f(9.0);
    if !(tail.abs() < 1e-3) {
        violations.push(format!("not saturating: f(10) - f(9) = {tail}"));
    }

    let mut positive: Vec<f64> = grid.iter().cloned().filter(|&x| x >= 0.0).collect();
    positive.sort_by(f64::total_cmp);
    let slopes: Vec<f64> = positive
        .windows(2)
        .map(|w| (f(w[1]) - f(w[0])) / (w[1] - w[0]))
        .collect();
    if let Some(i) = (1..slopes.len()).find(|&i| slopes[i] > slopes[i - 1] + 1e-9) {
        violations.push(format!("slope increases near x = {}", positive[i]));
    }

    SatNlValidity {
        valid: violations.is_empty(),
        violations,
    }
}
