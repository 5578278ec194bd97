use crate::autodiff::{Graph, NodeId, finite_difference_check};
use crate::error::Result;
use crate::regularizers::{SatNlKind, sym_loss1, sym_loss2};
use crate::tensor::{Rng, Tensor};

use super::report::{Report, ReportRow};

/// Op kinds covered by [`gradcheck`].
pub const GRADCHECK_OPS: &[&str] = &[
    "matmul",
    "conv2d",
    "conv2d_stride2",
    "add_bias",
    "relu",
    "tanh",
    "flatten",
    "avgpool2d",
    "transpose",
    "add",
    "mul",
    "scale",
    "sum",
    "abs",
    "satnl_tanh",
    "satnl_erf",
    "satnl_gudermannian",
    "softmax_cross_entropy",
    "sym_loss1",
    "sym_loss2",
];

/// Uniform values in `[-1, 1]` with magnitude at least `margin`.
fn away_from_zero(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.uniform(-1.0, 1.0);
            if v.abs() >= margin {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Values whose sorted gaps and mirror sums all exceed `margin`, so the symmetry losses are
/// differentiable in an `margin`-neighbourhood.
fn sym_point(rng: &mut Rng, channels: usize, n: usize, margin: f64) -> Tensor {
    loop {
        let t = rng.normal_tensor(&[channels, n], 1.0);
        let ok = t.slices(0).expect("rank 2").iter().all(|s| {
            let mut v = s.clone();
            v.sort_by(f64::total_cmp);
            let gaps = v.windows(2).all(|w| w[1] - w[0] > margin);
            let pairs = (0..n / 2).all(|i| (v[i] + v[n - 1 - i]).abs() > margin);
            let groups = (0..n / 4).all(|i| {
                (v[2 * i] + v[2 * i + 1] + v[n - 1 - 2 * i] + v[n - 2 - 2 * i]).abs() > margin
            });
            gaps && pairs && groups
        });
        if ok {
            return t;
        }
    }
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape, 1.0)
}

/// `sum(out ⊙ r)` for a fixed random `r`, turning any op output into a scalar loss.
fn project(g: &mut Graph, out: NodeId, r: &Tensor) -> Result<NodeId> {
    let rn = g.constant(r.clone());
    let m = g.mul(out, rn)?;
    g.sum(m)
}

fn check_op(op: &str, rng: &mut Rng, epsilon: f64) -> Result<f64> {
    let margin = 1e-3;
    let (params, weights): (Vec<Tensor>, Tensor) = match op {
        "matmul" => (vec![normal(rng, &[3, 4]), normal(rng, &[4, 2])], normal(rng, &[3, 2])),
        "conv2d" => (vec![normal(rng, &[2, 2, 5, 5]), normal(rng, &[3, 2, 3, 3])], normal(rng, &[2, 3, 5, 5])),
        "conv2d_stride2" => (vec![normal(rng, &[1, 2, 5, 5]), normal(rng, &[2, 2, 3, 3])], normal(rng, &[1, 2, 2, 2])),
        "add_bias" => (vec![normal(rng, &[2, 3, 2, 2]), normal(rng, &[3])], normal(rng, &[2, 3, 2, 2])),
        "relu" | "abs" => (vec![away_from_zero(rng, &[3, 4], margin)], normal(rng, &[3, 4])),
        "flatten" => (vec![normal(rng, &[2, 2, 3])], normal(rng, &[2, 6])),
        "avgpool2d" => (vec![normal(rng, &[1, 2, 4, 4])], normal(rng, &[1, 2, 2, 2])),
        "transpose" => (vec![normal(rng, &[3, 5])], normal(rng, &[5, 3])),
        "add" | "mul" => (vec![normal(rng, &[2, 3]), normal(rng, &[2, 3])], normal(rng, &[2, 3])),
        "softmax_cross_entropy" => (vec![normal(rng, &[4, 3])], Tensor::zeros(&[0])),
        "sym_loss1" | "sym_loss2" => (vec![sym_point(rng, 2, 8, 0.05)], Tensor::zeros(&[0])),
        _ => (vec![normal(rng, &[3, 4])], normal(rng, &[3, 4])),
    };
    let op = op.to_string();
    let loss = move |g: &mut Graph, p: &[NodeId]| -> Result<NodeId> {
        let out = match op.as_str() {
            "matmul" => g.matmul(p[0], p[1])?,
            "conv2d" => g.conv2d(p[0], p[1], 1, 1)?,
            "conv2d_stride2" => g.conv2d(p[0], p[1], 2, 0)?,
            "add_bias" => g.add_bias(p[0], p[1])?,
            "relu" => g.relu(p[0])?,
            "tanh" => g.tanh(p[0])?,
            "flatten" => g.flatten(p[0])?,
            "avgpool2d" => g.avgpool2d(p[0], 2)?,
            "transpose" => g.transpose(p[0])?,
            "add" => g.add(p[0], p[1])?,
            "mul" => g.mul(p[0], p[1])?,
            "scale" => g.scale(p[0], -1.7)?,
            "sum" => {
                let t = g.tanh(p[0])?;
                let s = g.sum(t)?;
                return g.mul(s, s);
            }
            "abs" => g.abs(p[0])?,
            "satnl_tanh" => g.satnl(p[0], SatNlKind::Tanh)?,
            "satnl_erf" => g.satnl(p[0], SatNlKind::Erf)?,
            "satnl_gudermannian" => g.satnl(p[0], SatNlKind::Gudermannian)?,
            "softmax_cross_entropy" => return g.softmax_cross_entropy(p[0], &[0, 2, 1, 2]),
            "sym_loss1" => return sym_loss1(g, p[0], 0),
            "sym_loss2" => return sym_loss2(g, p[0], 0),
            other => unreachable!("unknown gradcheck op {other}"),
        };
        project(g, out, &weights)
    };
    finite_difference_check(loss, &params, epsilon)
}

/// Finite-difference check of every op in [`GRADCHECK_OPS`] at `points` random points
/// each; the report lists the worst relative error per op.
pub fn gradcheck(points: usize, seed: u64, epsilon: f64) -> Result<Report> {
    let mut report = Report::default();
    for (k, op) in GRADCHECK_OPS.iter().enumerate() {
        let mut rng = Rng::new(seed).fork(k as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            worst = worst.max(check_op(op, &mut rng, epsilon)?);
        }
        report.push(
            ReportRow::new()
                .with("op", *op)
                .with("points", points)
                .with("max_rel_error", worst),
        )?;
    }
    Ok(report)
}
