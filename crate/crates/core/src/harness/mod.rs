//! Measurement procedures behind the `robquant` command-line tool. Each returns a
//! [`Report`] whose rows can be written as CSV.

mod config;
mod gradcheck;
mod report;

pub use config::ExperimentConfig;
pub use gradcheck::{GRADCHECK_OPS, gradcheck};
pub use report::{Cell, Report, ReportRow, format_sig6};

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::error_model::{DominanceReport, bias_drift, verify_dominance};
use crate::quantizer::{FitMethod, QuantScheme, calibrate_activation, fit_params, quantize_single_level, scale_step};
use crate::trainer::{LayerQuant, Network, effective_symreg, evaluate};

/// Maps `f` over `items` on up to `jobs` worker threads; results keep the input order.
pub fn parallel_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if jobs <= 1 {
        return items.iter().map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

pub const CALIBRATION_SAMPLES: usize = 256;
pub const KL_BINS: usize = 64;
pub const KL_SMOOTHING: f64 = 1e-8;

/// Outcome of [`ptq_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct PtqResult {
    pub bits_w: Option<u32>,
    pub bits_a: Option<u32>,
    pub fit: FitMethod,
    pub fp_accuracy: f64,
    pub accuracy: f64,
    /// Max `|bias_drift|` per layer (zero where weights stay in floating point).
    pub drift: Vec<f64>,
    pub quant: Vec<LayerQuant>,
}

fn bits_label(b: Option<u32>) -> String {
    b.map_or_else(|| "FP".to_string(), |b| b.to_string())
}

impl PtqResult {
    pub fn drift_max(&self) -> f64 {
        self.drift.iter().cloned().fold(0.0, f64::max)
    }

    pub fn drop(&self) -> f64 {
        self.fp_accuracy - self.accuracy
    }

    pub fn row(&self) -> ReportRow {
        ReportRow::new()
            .with("bits_w", bits_label(self.bits_w))
            .with("bits_a", bits_label(self.bits_a))
            .with("fit", self.fit.to_string())
            .with("fp_accuracy", self.fp_accuracy)
            .with("accuracy", self.accuracy)
            .with("drop", self.drop())
            .with("drift_max", self.drift_max())
    }
}

/// Inputs of every layer on the first [`CALIBRATION_SAMPLES`] training samples.
pub fn calibration_inputs(ckpt: &Checkpoint, train: &Dataset) -> Result<Vec<crate::Tensor>> {
    let calib = train.calibration_subset(CALIBRATION_SAMPLES);
    let (x, _) = calib.batch(&(0..calib.len()).collect::<Vec<_>>());
    Ok(Network::from_checkpoint(ckpt).run(&x, None)?.layer_inputs)
}

/// Per-layer quantizers: per-output-channel symmetric weights fitted with `fit`, per-tensor
/// asymmetric activations calibrated on `calib_inputs`. With `pin_outer`, the first and
/// last layers use 8 bits whenever the rest are quantized.
pub fn build_quant(
    ckpt: &Checkpoint,
    calib_inputs: &[crate::Tensor],
    bits_w: Option<u32>,
    bits_a: Option<u32>,
    fit: FitMethod,
    pin_outer: bool,
) -> Result<Vec<LayerQuant>> {
    let weights = ckpt.effective_weights();
    let n = weights.len();
    let pinned = |i: usize, b: u32| if pin_outer && (i == 0 || i + 1 == n) { 8 } else { b };
    let mut out = Vec::with_capacity(n);
    for (i, w) in weights.iter().enumerate() {
        let weight = match bits_w {
            Some(b) => {
                let s = QuantScheme::weight(pinned(i, b), 0, fit)?;
                Some((s, fit_params(w, &s)?))
            }
            None => None,
        };
        let act = match bits_a {
            Some(b) => Some(calibrate_activation(&calib_inputs[i], pinned(i, b))?),
            None => None,
        };
        out.push(LayerQuant { weight, act });
    }
    Ok(out)
}

/// Post-training quantization of `ckpt`, evaluated on `data.val`. `None` bit-widths keep
/// that side in floating point; the FP/FP case is exactly [`evaluate`] without quantization.
pub fn ptq_pipeline(
    ckpt: &Checkpoint,
    data: &DataSplit,
    bits_w: Option<u32>,
    bits_a: Option<u32>,
    fit: FitMethod,
) -> Result<PtqResult> {
    let fp_accuracy = evaluate(ckpt, &data.val, None)?;
    let calib = calibration_inputs(ckpt, &data.train)?;
    let quant = build_quant(ckpt, &calib, bits_w, bits_a, fit, true)?;
    let accuracy = if bits_w.is_none() && bits_a.is_none() {
        evaluate(ckpt, &data.val, None)?
    } else {
        evaluate(ckpt, &data.val, Some(&quant))?
    };
    let net = Network::from_checkpoint(ckpt);
    let qnet = net.with_quantized_weights(&quant)?;
    let mut drift = Vec::with_capacity(quant.len());
    for i in 0..quant.len() {
        let mu = calib[i].mean();
        let d = bias_drift(&net.weights[i], &qnet.weights[i], mu, 0)?;
        drift.push(d.max_abs());
    }
    Ok(PtqResult {
        bits_w,
        bits_a,
        fit,
        fp_accuracy,
        accuracy,
        drift,
        quant,
    })
}

/// Mean over output channels of `|mean_i w[c, i]|`, over the layers SymReg acts on.
pub fn channel_mean_abs(ckpt: &Checkpoint) -> Result<f64> {
    let scope = effective_symreg(&ckpt.spec, &crate::regularizers::SymRegConfig::off());
    let mut total = 0.0;
    let mut count = 0usize;
    for (layer, w) in ckpt.spec.layers().iter().zip(ckpt.effective_weights()) {
        if scope.skip_layers.contains(&layer.name) {
            continue;
        }
        for s in w.slices(0)? {
            total += (s.iter().sum::<f64>() / s.len() as f64).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("model has no layer in SymReg scope"));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Quantize the checkpoint as trained.
    Ptq,
    /// The checkpoint came from QAT; its step sizes are re-fitted by min/max at each width.
    QatTrained,
}

/// Accuracy of one checkpoint across weight bit-widths, without retraining. Activations stay
/// in floating point for PTQ checkpoints; QAT checkpoints that quantized activations are
/// evaluated with activations at the same width.
pub fn sweep_bits(ckpt: &Checkpoint, data: &DataSplit, bits: &[u32], mode: SweepMode, fit: FitMethod) -> Result<Report> {
    let act = mode == SweepMode::QatTrained
        && ckpt
            .qat
            .as_ref()
            .is_some_and(|q| q.iter().any(|l| l.act.is_some()));
    let fit = match mode {
        SweepMode::Ptq => fit,
        SweepMode::QatTrained => FitMethod::MinMax,
    };
    let mut report = Report::default();
    for &b in bits {
        let r = ptq_pipeline(ckpt, data, Some(b), act.then_some(b), fit)?;
        report.push(
            ReportRow::new()
                .with("bits", b)
                .with("fp_accuracy", r.fp_accuracy)
                .with("accuracy", r.accuracy)
                .with("drop", r.drop()),
        )?;
    }
    Ok(report)
}

/// 21 points over `[0.8, 1.2]` plus the endpoints 0.5 and 2.0, ascending.
pub fn default_ratios() -> Vec<f64> {
    let mut r = vec![0.5];
    r.extend((0..=20).map(|i| (80 + 2 * i) as f64 / 100.0));
    r.push(2.0);
    r
}

/// Trapezoidal area under `(ratio, accuracy)` restricted to ratios in `[lo, hi]`.
pub fn area_under(points: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .cloned()
        .filter(|(r, _)| *r >= lo - 1e-12 && *r <= hi + 1e-12)
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum()
}

/// Accuracy with all weight step sizes multiplied by each ratio (activations FP). The
/// report summary carries the area under the curve over `[0.8, 1.2]` as `auc`.
pub fn sweep_step_ratio(ckpt: &Checkpoint, data: &DataSplit, bits: u32, ratios: &[f64], fit: FitMethod) -> Result<(Report, f64)> {
    if let Some(r) = ratios.iter().find(|&&r| !(0.5..=2.0).contains(&r)) {
        return Err(Error::invalid(format!("step ratio {r} outside [0.5, 2.0]")));
    }
    let base = ptq_pipeline(ckpt, data, Some(bits), None, fit)?;
    let mut report = Report::default();
    let mut points = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let scaled: Vec<LayerQuant> = base
            .quant
            .iter()
            .map(|l| {
                let weight = match &l.weight {
                    Some((s, p)) => Some((*s, scale_step(p, ratio, s)?)),
                    None => None,
                };
                Ok(LayerQuant { weight, act: None })
            })
            .collect::<Result<_>>()?;
        let acc = evaluate(ckpt, &data.val, Some(&scaled))?;
        points.push((ratio, acc));
        report.push(
            ReportRow::new()
                .with("ratio", ratio)
                .with("fp_accuracy", base.fp_accuracy)
                .with("accuracy", acc),
        )?;
    }
    let auc = area_under(&points, 0.8, 1.2);
    report.summary.push(("auc".into(), format_sig6(auc)));
    Ok((report, auc))
}

/// For every level of a `bits`-bit symmetric weight quantizer, quantizes only the weights
/// nearest that level, in all layers at once, and evaluates.
pub fn probe_single_level(ckpt: &Checkpoint, data: &DataSplit, bits: u32, fit: FitMethod) -> Result<Report> {
    let fp = evaluate(ckpt, &data.val, None)?;
    let net = Network::from_checkpoint(ckpt);
    let scheme = QuantScheme::weight(bits, 0, fit)?;
    let params: Vec<_> = net
        .weights
        .iter()
        .map(|w| fit_params(w, &scheme))
        .collect::<Result<_>>()?;
    let (qmin, qmax) = scheme.level_range();
    let mut report = Report::default();
    for level in qmin..=qmax {
        let mut probed = net.clone();
        for (w, p) in probed.weights.iter_mut().zip(&params) {
            *w = quantize_single_level(w, p, &scheme, level)?;
        }
        let acc = probed.accuracy(&data.val, None)?;
        report.push(
            ReportRow::new()
                .with("level", level)
                .with("fp_accuracy", fp)
                .with("accuracy", acc)
                .with("drop", fp - acc),
        )?;
    }
    Ok(report)
}

/// Mean drop of the levels `±1` (nearest zero among nonzero levels) and of `±qmax`.
pub fn level_drop_summary(report: &Report) -> Result<(f64, f64)> {
    let levels = report.column("level");
    let drops = report.column("drop");
    let qmax = levels.iter().cloned().fold(0.0, f64::max);
    let pick = |targets: [f64; 2]| -> Result<f64> {
        let mut s = 0.0;
        for t in targets {
            let i = levels
                .iter()
                .position(|&l| l == t)
                .ok_or_else(|| Error::invalid(format!("level {t} missing from probe report")))?;
            s += drops[i];
        }
        Ok(s / 2.0)
    };
    Ok((pick([-1.0, 1.0])?, pick([-qmax, qmax])?))
}

/// `KL(P ‖ Q)` between histograms of two samples over their pooled range.
pub fn histogram_kl(p: &[f64], q: &[f64], bins: usize, smoothing: f64) -> Result<f64> {
    if p.is_empty() || q.is_empty() || bins == 0 {
        return Err(Error::invalid("histogram_kl needs nonempty samples and bins"));
    }
    let (lo, hi) = p
        .iter()
        .chain(q)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Ok(0.0);
    }
    let hist = |v: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; bins];
        for &x in v {
            let b = (((x - lo) / (hi - lo)) * bins as f64) as usize;
            h[b.min(bins - 1)] += 1.0;
        }
        let total = v.len() as f64 + smoothing * bins as f64;
        h.iter().map(|c| (c + smoothing) / total).collect()
    };
    let (hp, hq) = (hist(p), hist(q));
    Ok(hp.iter().zip(&hq).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// Per-layer KL divergence between the pre-activation outputs of the FP network and of the
/// network with all weights quantized to `bits_w` (no layer pinned), in depth order.
pub fn kl_propagation(ckpt: &Checkpoint, bits_w: Option<u32>, probe: &Dataset, fit: FitMethod) -> Result<Report> {
    if probe.is_empty() {
        return Err(Error::invalid("probe batch is empty"));
    }
    let (x, _) = probe.batch(&(0..probe.len()).collect::<Vec<_>>());
    let net = Network::from_checkpoint(ckpt);
    let fp = net.run(&x, None)?;
    let q = match bits_w {
        Some(_) => {
            let quant = build_quant(ckpt, &[], bits_w, None, fit, false)?;
            net.with_quantized_weights(&quant)?.run(&x, None)?
        }
        None => fp.clone(),
    };
    let mut report = Report::default();
    for (depth, (layer, (a, b))) in ckpt
        .spec
        .layers()
        .iter()
        .zip(fp.layer_outputs.iter().zip(&q.layer_outputs))
        .enumerate()
    {
        let kl = histogram_kl(a.data(), b.data(), KL_BINS, KL_SMOOTHING)?;
        report.push(
            ReportRow::new()
                .with("depth", depth + 1)
                .with("layer", layer.name.as_str())
                .with("bits_w", bits_label(bits_w))
                .with("kl", kl),
        )?;
    }
    Ok(report)
}

/// Optimal-clip error of the unbounded and clamped normal models over the grid, plus the
/// dominance verdict.
pub fn error_curves(d_grid: &[f64], bits_list: &[u32]) -> Result<(Report, DominanceReport)> {
    let dom = verify_dominance(d_grid, bits_list)?;
    let mut report = Report::default();
    for r in &dom.rows {
        report.push(
            ReportRow::new()
                .with("d", r.d)
                .with("bits", r.bits)
                .with("alpha_normal", r.alpha_normal)
                .with("alpha_clamped", r.alpha_clamped)
                .with("normal_total", r.normal_total)
                .with("clamped_total", r.clamped_total)
                .with("holds", if r.holds { "true" } else { "false" }),
        )?;
    }
    report
        .summary
        .push(("dominance".into(), if dom.passed() { "pass".into() } else { format!("fail {:?}", dom.violations) }));
    Ok((report, dom))
}
