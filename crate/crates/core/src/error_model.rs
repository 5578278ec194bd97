//! Expected squared quantization error of Gaussian weights, with and without hard
//! clamping of the weight range, plus a Monte Carlo reference and the output bias-drift
//! estimator for quantized linear layers.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF via `erfc`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 − F(x)`, accurate far into the tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Piecewise CDF of the standard normal clamped to `[−d, d]`: 0 up to `−d`,
/// `F(x) + F(−|d|)` inside, 1 from `d` on.
pub fn clamped_cdf(x: f64, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::invalid(format!("clamp target must be positive, got {d}")));
    }
    Ok(if x <= -d {
        0.0
    } else if x >= d {
        1.0
    } else {
        normal_cdf(x) + normal_cdf(-d.abs())
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorEstimate {
    pub truncation: f64,
    pub rounding: f64,
    pub total: f64,
    pub alpha: f64,
    pub bits: u32,
}

impl ErrorEstimate {
    fn new(truncation: f64, alpha: f64, bits: u32) -> Self {
        let rounding = rounding_error(alpha, bits);
        Self {
            truncation,
            rounding,
            total: truncation + rounding,
            alpha,
            bits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorModel {
    Normal,
    /// Standard normal clamped to `[−d, d]`.
    Clamped(f64),
}

/// `α² / (3·2^(2b))`: uniform rounding noise of `2^b` bins over `[−α, α]`.
pub fn rounding_error(alpha: f64, bits: u32) -> f64 {
    alpha * alpha / (3.0 * 4f64.powi(bits as i32))
}

/// `∫_a^b f(x)(x − α)² dx` from the antiderivative `(1+α²)F(x) − (x − 2α)f(x)`.
fn gaussian_sq_moment(alpha: f64, a: f64, b: f64) -> f64 {
    // F(b) − F(a) as a difference of upper tails keeps precision for large arguments.
    let mass = if b.is_infinite() {
        normal_sf(a)
    } else {
        normal_sf(a) - normal_sf(b)
    };
    let edge = |x: f64| {
        if x.is_infinite() {
            0.0
        } else {
            (x - 2.0 * alpha) * normal_pdf(x)
        }
    };
    (1.0 + alpha * alpha) * mass - edge(b) + edge(a)
}

fn check_bits(bits: u32) -> Result<()> {
    if bits < 2 || bits > 30 {
        return Err(Error::invalid(format!("bits must be in [2, 30], got {bits}")));
    }
    Ok(())
}

/// Truncation plus rounding error for `N(0, 1)` weights clipped at `±alpha`.
pub fn quant_error_normal(alpha: f64, bits: u32) -> Result<ErrorEstimate> {
    check_bits(bits)?;
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let truncation = 2.0 * gaussian_sq_moment(alpha, alpha, f64::INFINITY);
    Ok(ErrorEstimate::new(truncation, alpha, bits))
}

/// Truncation plus rounding error for `N(0, 1)` weights clamped to `±d` and clipped at
/// `±alpha ≤ d`.
pub fn quant_error_clamped(alpha: f64, d: f64, bits: u32) -> Result<ErrorEstimate> {
    check_bits(bits)?;
    if !(alpha > 0.0) || !(d > 0.0) {
        return Err(Error::invalid(format!(
            "alpha and d must be positive, got alpha={alpha}, d={d}"
        )));
    }
    if alpha > d {
        return Err(Error::invalid(format!(
            "truncation boundary {alpha} lies beyond the clamp target {d}"
        )));
    }
    let point_mass = normal_cdf(-d.abs()) * (d - alpha) * (d - alpha);
    let truncation = 2.0 * (point_mass + gaussian_sq_moment(alpha, alpha, d));
    Ok(ErrorEstimate::new(truncation, alpha, bits))
}

pub fn model_error(alpha: f64, bits: u32, model: ErrorModel) -> Result<ErrorEstimate> {
    match model {
        ErrorModel::Normal => quant_error_normal(alpha, bits),
        ErrorModel::Clamped(d) => quant_error_clamped(alpha, d, bits),
    }
}

const ALPHA_LOWER: f64 = 1e-3;
const ALPHA_UPPER: f64 = 8.0;
const ALPHA_TOL: f64 = 1e-6;

/// Golden-section minimization of `f` on `[lo, hi]`; the endpoints are also compared so a
/// boundary optimum is returned exactly.
fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    [lo, hi]
        .into_iter()
        .fold((mid, f(mid)), |best, x| {
            let fx = f(x);
            if fx < best.1 {
                (x, fx)
            } else {
                best
            }
        })
        .0
}

/// Truncation boundary minimizing the modeled total error, searched over
/// `(1e-3, 8]` (normal) or `(1e-3, d]` (clamped).
///
/// # Panics
/// If `bits < 2` or a clamped model has a non-positive `d`.
pub fn optimal_alpha(bits: u32, model: ErrorModel) -> f64 {
    check_bits(bits).expect("optimal_alpha: bits");
    let hi = match model {
        ErrorModel::Normal => ALPHA_UPPER,
        ErrorModel::Clamped(d) => {
            assert!(d > 0.0, "optimal_alpha: clamp target must be positive");
            d.min(ALPHA_UPPER).max(ALPHA_LOWER)
        }
    };
    golden_section(
        |a| model_error(a, bits, model).map(|e| e.total).unwrap_or(f64::INFINITY),
        ALPHA_LOWER,
        hi,
        ALPHA_TOL,
    )
}

/// Monte Carlo mean squared error of `n` standard-normal draws (clamped to `±d` when
/// given) under the quantizer the closed forms describe: values beyond `±alpha` are clipped
/// to the boundary, values inside are rounded to the midpoint of one of `2^bits` equal bins
/// spanning `[−alpha, alpha]`.
pub fn mc_quant_error(n: usize, alpha: f64, bits: u32, d: Option<f64>, seed: u64) -> Result<f64> {
    check_bits(bits)?;
    if n < 100_000 {
        return Err(Error::invalid(format!("Monte Carlo needs n >= 1e5, got {n}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("alpha must be positive"));
    }
    if let Some(d) = d {
        if !(d > 0.0) {
            return Err(Error::invalid("clamp target must be positive"));
        }
    }
    let delta = 2.0 * alpha / 2f64.powi(bits as i32);
    let half_levels = 2f64.powi(bits as i32 - 1);
    let mut rng = Rng::new(seed);
    let mut acc = 0.0;
    for _ in 0..n {
        let mut x = rng.normal();
        if let Some(d) = d {
            x = x.clamp(-d, d);
        }
        let q = if x.abs() >= alpha {
            alpha.copysign(x)
        } else {
            ((x / delta).floor().clamp(-half_levels, half_levels - 1.0) + 0.5) * delta
        };
        acc += (x - q) * (x - q);
    }
    Ok(acc / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceRow {
    pub d: f64,
    pub bits: u32,
    pub alpha_normal: f64,
    pub alpha_clamped: f64,
    pub normal_total: f64,
    pub clamped_total: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DominanceReport {
    pub rows: Vec<DominanceRow>,
    pub violations: Vec<(f64, u32)>,
}

impl DominanceReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that the optimally clipped clamped model never has more error than the
/// optimally clipped unbounded model, for every `(d, bits)` pair.
pub fn verify_dominance(d_grid: &[f64], bits_list: &[u32]) -> Result<DominanceReport> {
    if let Some(d) = d_grid.iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::invalid(format!("clamp targets must be positive, got {d}")));
    }
    for &b in bits_list {
        check_bits(b)?;
    }
    let mut report = DominanceReport::default();
    for &d in d_grid {
        for &bits in bits_list {
            let alpha_normal = optimal_alpha(bits, ErrorModel::Normal);
            let alpha_clamped = optimal_alpha(bits, ErrorModel::Clamped(d));
            let normal_total = quant_error_normal(alpha_normal, bits)?.total;
            let clamped_total = quant_error_clamped(alpha_clamped, d, bits)?.total;
            let holds = clamped_total <= normal_total + 1e-9;
            if !holds {
                report.violations.push((d, bits));
            }
            report.rows.push(DominanceRow {
                d,
                bits,
                alpha_normal,
                alpha_clamped,
                normal_total,
                clamped_total,
                holds,
            });
        }
    }
    Ok(report)
}

/// Expected output drift per output channel `j` of a linear map whose inputs have mean
/// `mu_x`: `N·mu_x·(mean_i w_q[j,i] − mean_i w[j,i])`, with `N` elements per channel.
pub fn bias_drift(w: &Tensor, w_q: &Tensor, mu_x: f64, axis: usize) -> Result<Tensor> {
    if w.shape() != w_q.shape() {
        return Err(Error::ShapeMismatch {
            op: "bias_drift",
            lhs: w.shape().to_vec(),
            rhs: w_q.shape().to_vec(),
        });
    }
    let (channels, n) = w.slice_dims(axis)?;
    let drift = (0..channels)
        .map(|j| {
            let idx = w.slice_indices(axis, j);
            let before = idx.iter().map(|&i| w.data()[i]).sum::<f64>() / n as f64;
            let after = idx.iter().map(|&i| w_q.data()[i]).sum::<f64>() / n as f64;
            n as f64 * mu_x * (after - before)
        })
        .collect();
    Ok(Tensor::from_vec(drift))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson quadrature of `f(x)(x − α)²`, independent of the antiderivative.
    fn simpson_moment(alpha: f64, a: f64, b: f64) -> f64 {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let g = |x: f64| normal_pdf(x) * (x - alpha) * (x - alpha);
        let mut s = g(a) + g(b);
        for i in 1..n {
            s += g(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn antiderivative_matches_quadrature() {
        for &(alpha, a, b) in &[(2.0, 2.0, 12.0), (1.2, 1.2, 3.0), (0.5, 0.5, 0.9)] {
            let closed = gaussian_sq_moment(alpha, a, b);
            assert!((closed - simpson_moment(alpha, a, b)).abs() < 1e-12, "{alpha} {a} {b}");
        }
    }

    #[test]
    fn cdf_accuracy() {
        // Φ(1) and Φ(−2) to 12 digits
        assert!((normal_cdf(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((normal_cdf(-2.0) - 0.022_750_131_948_179_2).abs() < 1e-12);
    }

    #[test]
    fn clamped_cdf_examples() {
        for d in [0.5, 1.0, 3.0] {
            // the interior clause F(x) + F(−|d|) is taken as written, so G(0) = 0.5 + F(−d)
            assert_eq!(clamped_cdf(0.0, d).unwrap(), 0.5 + normal_cdf(-d));
            assert_eq!(clamped_cdf(d, d).unwrap(), 1.0);
            assert_eq!(clamped_cdf(-d, d).unwrap(), 0.0);
        }
        let v = clamped_cdf(1.0, 2.0).unwrap();
        assert!((v - (normal_cdf(1.0) + normal_cdf(-2.0))).abs() < 1e-15);
        assert!((v - 0.8641).abs() < 1e-4);
        assert!(clamped_cdf(0.0, 0.0).is_err());
    }

    #[test]
    fn clamped_cdf_monotone() {
        for d in [0.5, 1.0, 2.0, 4.0] {
            let mut prev = 0.0;
            for i in 0..1000 {
                let x = -5.0 + 10.0 * i as f64 / 999.0;
                let g = clamped_cdf(x, d).unwrap();
                assert!(g >= prev);
                prev = g;
            }
        }
    }

    #[test]
    fn normal_error_limits() {
        let e = quant_error_normal(40.0, 4).unwrap();
        assert!(e.truncation < 1e-300);
        assert_eq!(e.total, e.truncation + e.rounding);
        assert_eq!(e.rounding, 40.0 * 40.0 / (3.0 * 256.0));
        let fine = quant_error_normal(2.0, 30).unwrap();
        assert!(fine.rounding < 1e-17);
    }

    #[test]
    fn clamped_error_limits() {
        let a = quant_error_clamped(2.0, 60.0, 4).unwrap();
        let b = quant_error_normal(2.0, 4).unwrap();
        assert!((a.total - b.total).abs() < 1e-15);
        let at = quant_error_clamped(1.5, 1.5, 4).unwrap();
        assert_eq!(at.truncation, 0.0);
        assert_eq!(at.total, 1.5 * 1.5 / (3.0 * 256.0));
        assert!(quant_error_clamped(2.5, 2.0, 4).is_err());
    }

    #[test]
    fn optimal_alpha_properties() {
        let alphas: Vec<f64> = (2..=8).map(|b| optimal_alpha(b, ErrorModel::Normal)).collect();
        assert!(alphas.windows(2).all(|w| w[1] > w[0]), "{alphas:?}");
        // Known Gaussian clipping values: 1.71 (2-bit), 2.55 (4-bit), 3.92 (8-bit)
        assert!((alphas[0] - 1.71).abs() < 0.01);
        assert!((alphas[2] - 2.55).abs() < 0.01);
        assert!((alphas[6] - 3.92).abs() < 0.01);
        // the rounding term's slope keeps the optimum a few 1e-6 inside d
        assert!((optimal_alpha(8, ErrorModel::Clamped(0.5)) - 0.5).abs() < 1e-5);
        for bits in 2..=8 {
            let a = optimal_alpha(bits, ErrorModel::Normal);
            for i in 0..=35 {
                let d = 0.5 + 0.1 * i as f64;
                let ac = optimal_alpha(bits, ErrorModel::Clamped(d));
                assert!(ac <= a.min(d) + 1e-6, "bits {bits} d {d}: {ac} vs {a}");
            }
        }
    }

    #[test]
    fn monte_carlo_basics() {
        assert!(mc_quant_error(200_000, 8.0, 16, None, 1).unwrap() < 1e-6);
        let a = mc_quant_error(100_000, 2.0, 4, Some(2.0), 9).unwrap();
        let b = mc_quant_error(100_000, 2.0, 4, Some(2.0), 9).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(mc_quant_error(10, 2.0, 4, None, 1).is_err());
    }

    #[test]
    fn dominance_examples() {
        let empty = verify_dominance(&[], &[4]).unwrap();
        assert!(empty.rows.is_empty() && empty.passed());
        let r = verify_dominance(&[4.0, 1.0], &[8, 3]).unwrap();
        assert!(r.passed());
        let d4b8 = &r.rows[0];
        assert!((d4b8.normal_total - d4b8.clamped_total).abs() < 1e-4);
        let d1b3 = &r.rows[3];
        assert_eq!((d1b3.d, d1b3.bits), (1.0, 3));
        assert!(d1b3.clamped_total < d1b3.normal_total);
        assert!(verify_dominance(&[0.0], &[4]).is_err());
    }

    #[test]
    fn bias_drift_examples() {
        let w = Tensor::new(vec![1, 2], vec![0.4, 0.2]).unwrap();
        let wq = Tensor::new(vec![1, 2], vec![0.5, 0.25]).unwrap();
        let d = bias_drift(&w, &wq, 1.0, 0).unwrap();
        assert!((d.data()[0] - 0.15).abs() < 1e-15);
        assert_eq!(bias_drift(&w, &w, 3.0, 0).unwrap().data(), &[0.0]);
        let bad = Tensor::zeros(&[2, 1]);
        assert!(bias_drift(&w, &bad, 1.0, 0).is_err());
    }
}
