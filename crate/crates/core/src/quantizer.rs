//! Fake quantization: uniform symmetric/asymmetric quantizers with per-tensor or
//! per-channel step sizes, step scaling, single-level probing, and the non-uniform
//! logarithmic and k-means schemes.

use std::fmt;

use crate::error::{Error, Result};
use crate::error_model::{optimal_alpha, ErrorModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    /// Restricted range `[−(2^(b−1)−1), 2^(b−1)−1]`, zero point 0.
    Symmetric,
    /// Range `[0, 2^b − 1]` with an integer zero point.
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    PerChannel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FitMethod {
    MinMax,
    AciqAnalytic,
    MseGrid,
}

impl FitMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "minmax" => Ok(FitMethod::MinMax),
            "aciq" | "aciq_analytic" => Ok(FitMethod::AciqAnalytic),
            "mse" | "mse_grid" => Ok(FitMethod::MseGrid),
            other => Err(Error::Config(format!("unknown fit method `{other}`"))),
        }
    }
}

impl fmt::Display for FitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitMethod::MinMax => "minmax",
            FitMethod::AciqAnalytic => "aciq_analytic",
            FitMethod::MseGrid => "mse_grid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantScheme {
    pub bits: u32,
    pub mode: QuantMode,
    pub granularity: Granularity,
    pub fit: FitMethod,
}

impl QuantScheme {
    pub fn new(bits: u32, mode: QuantMode, granularity: Granularity, fit: FitMethod) -> Result<Self> {
        if !(2..=30).contains(&bits) {
            return Err(Error::invalid(format!("bits must be in [2, 30], got {bits}")));
        }
        Ok(Self {
            bits,
            mode,
            granularity,
            fit,
        })
    }

    /// Per-output-channel symmetric weight quantizer.
    pub fn weight(bits: u32, axis: usize, fit: FitMethod) -> Result<Self> {
        Self::new(bits, QuantMode::Symmetric, Granularity::PerChannel(axis), fit)
    }

    /// Per-tensor asymmetric activation quantizer.
    pub fn activation(bits: u32) -> Result<Self> {
        Self::new(bits, QuantMode::Asymmetric, Granularity::PerTensor, FitMethod::MinMax)
    }

    /// Inclusive integer level range.
    pub fn level_range(&self) -> (i64, i64) {
        match self.mode {
            QuantMode::Symmetric => {
                let m = (1i64 << (self.bits - 1)) - 1;
                (-m, m)
            }
            QuantMode::Asymmetric => (0, (1i64 << self.bits) - 1),
        }
    }

    pub fn axis(&self) -> Option<usize> {
        match self.granularity {
            Granularity::PerTensor => None,
            Granularity::PerChannel(a) => Some(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    /// One step per channel (or a single entry per tensor).
    pub step: Vec<f64>,
    /// Integer zero point per channel; all zero for symmetric schemes.
    pub zero_point: Vec<i64>,
    /// Largest representable positive value per channel, `step × (qmax − zero_point)`.
    pub clip: Vec<f64>,
    /// Channels that were all-zero at fit time (step forced to 1).
    pub degenerate: Vec<bool>,
}

impl QuantParams {
    pub fn from_steps(step: Vec<f64>, zero_point: Vec<i64>, scheme: &QuantScheme) -> Result<Self> {
        if step.len() != zero_point.len() || step.is_empty() {
            return Err(Error::invalid("step and zero point counts differ"));
        }
        if step.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("step sizes must be positive and finite"));
        }
        let (_, qmax) = scheme.level_range();
        let clip = step
            .iter()
            .zip(&zero_point)
            .map(|(s, z)| s * (qmax - z) as f64)
            .collect();
        let degenerate = vec![false; step.len()];
        Ok(Self {
            step,
            zero_point,
            clip,
            degenerate,
        })
    }

    pub fn channels(&self) -> usize {
        self.step.len()
    }
}

fn slices_for(t: &Tensor, scheme: &QuantScheme) -> Result<Vec<Vec<usize>>> {
    match scheme.axis() {
        None => Ok(vec![(0..t.len()).collect()]),
        Some(axis) => {
            let (c, _) = t.slice_dims(axis)?;
            Ok((0..c).map(|j| t.slice_indices(axis, j)).collect())
        }
    }
}

pub(crate) fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (v.len() - 1) as f64).sqrt()
}

#[inline]
fn level_of(x: f64, step: f64, zero_point: i64, qmin: i64, qmax: i64) -> i64 {
    ((x / step).round_ties_even() as i64 + zero_point).clamp(qmin, qmax)
}

#[inline]
fn quantize_value(x: f64, step: f64, zero_point: i64, qmin: i64, qmax: i64) -> f64 {
    (level_of(x, step, zero_point, qmin, qmax) - zero_point) as f64 * step
}

fn symmetric_sse(v: &[f64], clip: f64, qmax: i64) -> f64 {
    let step = clip / qmax as f64;
    v.iter()
        .map(|&x| {
            let e = x - quantize_value(x, step, 0, -qmax, qmax);
            e * e
        })
        .sum()
}

fn asymmetric_step(lo: f64, hi: f64, qmax: i64) -> (f64, i64) {
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    let step = (hi - lo) / qmax as f64;
    let z = (-lo / step).round_ties_even() as i64;
    (step, z.clamp(0, qmax))
}

fn asymmetric_sse(v: &[f64], lo: f64, hi: f64, qmax: i64) -> f64 {
    let (step, z) = asymmetric_step(lo, hi, qmax);
    v.iter()
        .map(|&x| {
            let e = x - quantize_value(x, step, z, 0, qmax);
            e * e
        })
        .sum()
}

/// Index of the smallest value; earliest wins on ties.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    values
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best })
        .0
}

/// Fits step sizes (and zero points) of `scheme` to `t`.
///
/// All-zero slices get step 1 and are flagged in [`QuantParams::degenerate`].
pub fn fit_params(t: &Tensor, scheme: &QuantScheme) -> Result<QuantParams> {
    if t.is_empty() {
        return Err(Error::invalid("cannot fit quantizer to an empty tensor"));
    }
    let (_, qmax) = scheme.level_range();
    let alpha = match scheme.fit {
        FitMethod::AciqAnalytic => optimal_alpha(scheme.bits, ErrorModel::Normal),
        _ => 0.0,
    };
    let grid: Vec<f64> = (1..=100).map(|k| k as f64 / 100.0).collect();
    let mut step = Vec::new();
    let mut zero_point = Vec::new();
    let mut degenerate = Vec::new();
    for idx in slices_for(t, scheme)? {
        let v: Vec<f64> = idx.iter().map(|&i| t.data()[i]).collect();
        let max_abs = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if max_abs == 0.0 {
            step.push(1.0);
            zero_point.push(0);
            degenerate.push(true);
            continue;
        }
        degenerate.push(false);
        match scheme.mode {
            QuantMode::Symmetric => {
                let clip = match scheme.fit {
                    FitMethod::MinMax => max_abs,
                    FitMethod::AciqAnalytic => {
                        let c = sample_std(&v) * alpha;
                        if c > 0.0 {
                            c
                        } else {
                            max_abs
                        }
                    }
                    FitMethod::MseGrid => {
                        let best = argmin(grid.iter().map(|r| symmetric_sse(&v, max_abs * r, qmax)));
                        max_abs * grid[best]
                    }
                };
                step.push(clip / qmax as f64);
                zero_point.push(0);
            }
            QuantMode::Asymmetric => {
                let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let (lo, hi) = match scheme.fit {
                    FitMethod::MinMax => (min, max),
                    FitMethod::AciqAnalytic => {
                        let mean = v.iter().sum::<f64>() / v.len() as f64;
                        let half = sample_std(&v) * alpha;
                        if half > 0.0 {
                            ((mean - half).max(min), (mean + half).min(max))
                        } else {
                            (min, max)
                        }
                    }
                    FitMethod::MseGrid => {
                        let best = argmin(
                            grid.iter()
                                .map(|r| asymmetric_sse(&v, min * r, max * r, qmax)),
                        );
                        (min * grid[best], max * grid[best])
                    }
                };
                let (s, z) = asymmetric_step(lo, hi, qmax);
                step.push(s);
                zero_point.push(z);
            }
        }
    }
    let mut p = QuantParams::from_steps(step, zero_point, scheme)?;
    p.degenerate = degenerate;
    Ok(p)
}

/// Asymmetric per-tensor activation parameters from the 0.1 / 99.9 percentiles of `t`.
pub fn calibrate_activation(t: &Tensor, bits: u32) -> Result<(QuantScheme, QuantParams)> {
    if t.is_empty() {
        return Err(Error::invalid("empty calibration tensor"));
    }
    let scheme = QuantScheme::activation(bits)?;
    let mut sorted = t.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let pick = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    let (lo, hi) = (pick(0.001), pick(0.999));
    let (_, qmax) = scheme.level_range();
    if lo.min(0.0) == hi.max(0.0) {
        let mut p = QuantParams::from_steps(vec![1.0], vec![0], &scheme)?;
        p.degenerate = vec![true];
        return Ok((scheme, p));
    }
    let (s, z) = asymmetric_step(lo, hi, qmax);
    Ok((scheme, QuantParams::from_steps(vec![s], vec![z], &scheme)?))
}

fn check_compat(t: &Tensor, p: &QuantParams, scheme: &QuantScheme) -> Result<Vec<Vec<usize>>> {
    let slices = slices_for(t, scheme)?;
    if slices.len() != p.channels() || p.zero_point.len() != p.channels() {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            lhs: t.shape().to_vec(),
            rhs: vec![p.channels()],
        });
    }
    Ok(slices)
}

/// Quantize-dequantize: round to the nearest level (ties to even), clamp to the level
/// range, and map back to real values.
pub fn quantize(t: &Tensor, p: &QuantParams, scheme: &QuantScheme) -> Result<Tensor> {
    let slices = check_compat(t, p, scheme)?;
    let (qmin, qmax) = scheme.level_range();
    let mut out = t.clone();
    for (c, idx) in slices.iter().enumerate() {
        for &i in idx {
            out.data_mut()[i] = quantize_value(t.data()[i], p.step[c], p.zero_point[c], qmin, qmax);
        }
    }
    Ok(out)
}

/// Integer level of every element, counted from the zero point.
pub fn quantize_levels(t: &Tensor, p: &QuantParams, scheme: &QuantScheme) -> Result<Vec<i64>> {
    let slices = check_compat(t, p, scheme)?;
    let (qmin, qmax) = scheme.level_range();
    let mut out = vec![0; t.len()];
    for (c, idx) in slices.iter().enumerate() {
        for &i in idx {
            out[i] = level_of(t.data()[i], p.step[c], p.zero_point[c], qmin, qmax) - p.zero_point[c];
        }
    }
    Ok(out)
}

pub fn scale_step(p: &QuantParams, ratio: f64, scheme: &QuantScheme) -> Result<QuantParams> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::invalid(format!("step ratio must be positive, got {ratio}")));
    }
    let step = p.step.iter().map(|s| s * ratio).collect();
    let mut out = QuantParams::from_steps(step, p.zero_point.clone(), scheme)?;
    out.degenerate = p.degenerate.clone();
    Ok(out)
}

/// Quantizes only the elements whose nearest level is `level` (counted from the zero
/// point); every other element passes through unchanged.
pub fn quantize_single_level(
    t: &Tensor,
    p: &QuantParams,
    scheme: &QuantScheme,
    level: i64,
) -> Result<Tensor> {
    let slices = check_compat(t, p, scheme)?;
    let (qmin, qmax) = scheme.level_range();
    let mut out = t.clone();
    for (c, idx) in slices.iter().enumerate() {
        let z = p.zero_point[c];
        let (lo, hi) = (qmin - z, qmax - z);
        if level < lo || level > hi {
            return Err(Error::LevelOutOfRange {
                level,
                min: lo,
                max: hi,
            });
        }
        for &i in idx {
            if level_of(t.data()[i], p.step[c], z, qmin, qmax) - z == level {
                out.data_mut()[i] = level as f64 * p.step[c];
            }
        }
    }
    Ok(out)
}

/// Power-of-two quantization: `sign(x)·2^round(log2|x|)` with the exponent clamped to the
/// `2^(bits−1)` exponents ending at the largest one present. Zeros pass through.
pub fn log_quantize(t: &Tensor, bits: u32) -> Result<Tensor> {
    if !(2..=16).contains(&bits) {
        return Err(Error::invalid(format!(
            "log quantization needs bits in [2, 16], got {bits}"
        )));
    }
    let exponent = |x: f64| x.abs().log2().round();
    let Some(e_max) = t
        .data()
        .iter()
        .filter(|&&x| x != 0.0)
        .map(|&x| exponent(x))
        .reduce(f64::max)
    else {
        return Ok(t.clone());
    };
    let e_min = e_max - ((1u64 << (bits - 1)) - 1) as f64;
    Ok(t.map(|x| {
        if x == 0.0 {
            0.0
        } else {
            x.signum() * exponent(x).clamp(e_min, e_max).exp2()
        }
    }))
}

/// One-dimensional Lloyd's k-means with `2^bits` centroids seeded at uniform quantiles.
pub fn kmeans_quantize(t: &Tensor, bits: u32, max_iters: usize) -> Result<Tensor> {
    if t.is_empty() {
        return Err(Error::invalid("kmeans_quantize: empty tensor"));
    }
    if !(1..=16).contains(&bits) {
        return Err(Error::invalid(format!(
            "kmeans_quantize: bits must be in [1, 16], got {bits}"
        )));
    }
    let k = 1usize << bits;
    let mut sorted = t.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() <= k {
        return Ok(t.clone());
    }
    let n = sorted.len();
    let mut centroids: Vec<f64> = (0..k)
        .map(|j| sorted[((((j as f64 + 0.5) / k as f64) * n as f64) as usize).min(n - 1)])
        .collect();
    // Centroids stay sorted: each is the mean of a contiguous run of sorted values.
    let assign = |centroids: &[f64], x: f64| -> usize {
        let pos = centroids.partition_point(|&c| c < x);
        if pos == 0 {
            0
        } else if pos == centroids.len() || x - centroids[pos - 1] <= centroids[pos] - x {
            pos - 1
        } else {
            pos
        }
    };
    let mut labels: Vec<usize> = sorted.iter().map(|&x| assign(&centroids, x)).collect();
    for _ in 0..max_iters {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&x, &l) in sorted.iter().zip(&labels) {
            sums[l] += x;
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        let next: Vec<usize> = sorted.iter().map(|&x| assign(&centroids, x)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(t.map(|x| centroids[assign(&centroids, x)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn sym3() -> QuantScheme {
        QuantScheme::new(3, QuantMode::Symmetric, Granularity::PerTensor, FitMethod::MinMax).unwrap()
    }

    #[test]
    fn minmax_symmetric_step() {
        let t = Tensor::from_vec(vec![-1.5, 0.2, 1.5]);
        let p = fit_params(&t, &sym3()).unwrap();
        assert_eq!(p.step, vec![0.5]);
        assert_eq!(p.clip, vec![1.5]);
        let q = quantize(&t, &p, &sym3()).unwrap();
        assert_eq!(q.data(), &[-1.5, 0.0, 1.5]);
    }

    #[test]
    fn zero_tensor_is_degenerate() {
        let t = Tensor::zeros(&[4]);
        let p = fit_params(&t, &sym3()).unwrap();
        assert_eq!(p.step, vec![1.0]);
        assert_eq!(p.degenerate, vec![true]);
        assert_eq!(quantize(&t, &p, &sym3()).unwrap(), t);
    }

    #[test]
    fn per_channel_params_count() {
        let t = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 0.25, 0.0, 0.0]).unwrap();
        let s = QuantScheme::weight(4, 0, FitMethod::MinMax).unwrap();
        let p = fit_params(&t, &s).unwrap();
        assert_eq!(p.channels(), 3);
        assert_eq!(p.degenerate, vec![false, false, true]);
        assert!((p.step[0] - 2.0 / 7.0).abs() < 1e-15);
        let wrong = QuantScheme::weight(4, 1, FitMethod::MinMax).unwrap();
        assert!(quantize(&t, &p, &wrong).is_err());
    }

    #[test]
    fn asymmetric_minmax_contains_zero() {
        let s = QuantScheme::activation(8).unwrap();
        let p = fit_params(&Tensor::from_vec(vec![0.5, 1.0, 3.0]), &s).unwrap();
        assert_eq!(p.zero_point, vec![0]);
        assert!((p.step[0] - 3.0 / 255.0).abs() < 1e-15);
        let t2 = Tensor::from_vec(vec![-1.0, 0.0, 3.0]);
        let p2 = fit_params(&t2, &s).unwrap();
        let q = quantize(&t2, &p2, &s).unwrap();
        assert_eq!(q.data()[1], 0.0);
        assert!((q.data()[0] + 1.0).abs() <= p2.step[0] / 2.0);
        assert!((q.data()[2] - 3.0).abs() <= p2.step[0] / 2.0);
    }

    #[test]
    fn scale_step_identity_and_arithmetic() {
        let s = sym3();
        let p = QuantParams::from_steps(vec![0.5], vec![0], &s).unwrap();
        assert_eq!(scale_step(&p, 1.0, &s).unwrap(), p);
        let q = scale_step(&p, 1.1, &s).unwrap();
        assert!((q.step[0] - 0.55).abs() < 1e-15);
        assert!((q.clip[0] - 1.65).abs() < 1e-12);
        assert!(scale_step(&p, 0.0, &s).is_err());
    }

    #[test]
    fn single_level_examples() {
        let s = sym3();
        let p = QuantParams::from_steps(vec![0.5], vec![0], &s).unwrap();
        let small = Tensor::from_vec(vec![0.1, -0.2, 0.24]);
        let q = quantize_single_level(&small, &p, &s, 0).unwrap();
        assert_eq!(q.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(quantize_single_level(&small, &p, &s, 3).unwrap(), small);
        let t = Tensor::from_vec(vec![0.2, 0.9]);
        assert_eq!(quantize_single_level(&t, &p, &s, 2).unwrap().data(), &[0.2, 1.0]);
        assert!(matches!(
            quantize_single_level(&t, &p, &s, 4),
            Err(Error::LevelOutOfRange { .. })
        ));
    }

    #[test]
    fn log_quantize_examples() {
        let t = Tensor::from_vec(vec![4.0, -2.0, 1.0, 0.5]);
        assert_eq!(log_quantize(&t, 3).unwrap(), t);
        assert_eq!(log_quantize(&Tensor::from_vec(vec![0.0]), 3).unwrap().data(), &[0.0]);
        let t = Tensor::from_vec(vec![3.0, 2.0]);
        assert_eq!(log_quantize(&t, 3).unwrap().data(), &[4.0, 2.0]);
        // window of 2 exponents ending at 2^3: 0.01 is lifted to 2^2
        let t = Tensor::from_vec(vec![8.0, 0.01, -0.01]);
        assert_eq!(log_quantize(&t, 2).unwrap().data(), &[8.0, 4.0, -4.0]);
    }

    /// Minimum within-cluster SSE over all contiguous two-way splits of the sorted sample.
    fn brute_force_two_means(v: &[f64]) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let sse = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
        };
        (1..s.len())
            .map(|i| sse(&s[..i]) + sse(&s[i..]))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn kmeans_examples() {
        let four = Tensor::from_vec(vec![0.1, -3.0, 2.5, 0.1, 7.0, -3.0]);
        assert_eq!(kmeans_quantize(&four, 2, 50).unwrap(), four);
        let c = Tensor::full(&[10], 0.7);
        assert_eq!(kmeans_quantize(&c, 3, 50).unwrap(), c);

        let mut rng = Rng::new(5);
        let v: Vec<f64> = (0..400)
            .map(|i| if i % 2 == 0 { -1.0 } else { 1.0 } + rng.uniform(-0.01, 0.01))
            .collect();
        let t = Tensor::from_vec(v.clone());
        let q = kmeans_quantize(&t, 1, 100).unwrap();
        let mse = t.data().iter().zip(q.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 400.0;
        let best = brute_force_two_means(&v) / 400.0;
        assert!((mse - best).abs() < 1e-12, "{mse} vs {best}");
        assert!(mse < 1e-4);
        let mut centroids: Vec<f64> = q.data().to_vec();
        centroids.sort_by(f64::total_cmp);
        centroids.dedup();
        assert_eq!(centroids.len(), 2);
        assert!((centroids[0] + 1.0).abs() < 0.01 && (centroids[1] - 1.0).abs() < 0.01);
    }

    #[test]
    fn aciq_and_mse_grid_agree_on_gaussian() {
        let mut rng = Rng::new(2024);
        let t = rng.normal_tensor(&[1_000_000], 1.0);
        let aciq = QuantScheme::new(4, QuantMode::Symmetric, Granularity::PerTensor, FitMethod::AciqAnalytic)
            .unwrap();
        let mse = QuantScheme {
            fit: FitMethod::MseGrid,
            ..aciq
        };
        let pa = fit_params(&t, &aciq).unwrap();
        let pm = fit_params(&t, &mse).unwrap();
        let sigma = sample_std(t.data());
        let alpha = optimal_alpha(4, ErrorModel::Normal);
        assert!((pa.clip[0] - sigma * alpha).abs() < 1e-9);
        let rel = (pm.clip[0] - pa.clip[0]).abs() / pa.clip[0];
        assert!(rel <= 0.05, "mse grid clip {} vs aciq {}", pm.clip[0], pa.clip[0]);
    }

    #[test]
    fn activation_calibration_uses_percentiles() {
        let mut v: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        v[999] = 1000.0;
        let (s, p) = calibrate_activation(&Tensor::from_vec(v), 8).unwrap();
        assert_eq!(s.mode, QuantMode::Asymmetric);
        assert!(p.clip[0] < 2.0);
        assert_eq!(p.zero_point, vec![0]);
    }
}
