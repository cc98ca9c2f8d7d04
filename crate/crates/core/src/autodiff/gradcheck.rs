//! Central finite-difference gradient oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::seed;
use crate::tensor::Tensor;

use super::{Graph, TensorError, Var};

/// Denominator floor of the relative error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the analytic gradient of the scalar built by `f` with respect to
/// every coordinate of every input against `(f(x+e) - f(x-e)) / 2e`.
///
/// The relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    epsilon: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let up = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig - epsilon;
            let down = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (i, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Step used by [`run_suite`].
pub const SUITE_EPSILON: f64 = 1e-5;
/// Pass threshold of [`run_suite`].
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Inputs of kinked ops are kept this far from the kink.
pub const KINK_BAND: f64 = 1e-3;

/// Worst error of one op over all its random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

pub const SUITE_OPS: [&str; 14] = [
    "conv2d",
    "conv_transpose2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "tanh",
    "add",
    "scale",
    "l1_loss",
    "kl_unit_gaussian",
    "linear",
    "global_avg_pool",
    "cross_entropy",
    "composite",
];

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Uniform in `[-1, 1]` with `|v| > KINK_BAND`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        if v.abs() <= KINK_BAND {
            *v = if *v < 0.0 { -0.5 } else { 0.5 };
        }
    }
    t
}

type Case = (
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>,
);

/// Projects `y` onto fixed random weights so non-scalar ops become scalar.
fn project(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var, TensorError> {
    g.weighted_sum(y, w)
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let hw = rng.gen_range(3..=6);
    let ksz = rng.gen_range(1..=3).min(hw);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    match op {
        "conv2d" => {
            let out = (hw + 2 * pad - ksz) / stride + 1;
            let w = randn(rng, &[n, k, out, out]);
            let inputs = vec![
                randn(rng, &[n, c, hw, hw]),
                randn(rng, &[k, c, ksz, ksz]),
                randn(rng, &[k]),
            ];
            (
                inputs,
                Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    project(g, y, &w)
                }),
            )
        }
        "conv_transpose2d" => {
            let ksz = ksz.max(2);
            let pad = pad.min(ksz - 1);
            let out = (hw - 1) * stride + ksz - 2 * pad;
            let w = randn(rng, &[n, k, out, out]);
            let inputs = vec![
                randn(rng, &[n, c, hw, hw]),
                randn(rng, &[c, k, ksz, ksz]),
                randn(rng, &[k]),
            ];
            (
                inputs,
                Box::new(move |g, v| {
                    let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    project(g, y, &w)
                }),
            )
        }
        "batch_norm_train" => {
            let w = randn(rng, &[n, c, hw, hw]);
            let inputs = vec![
                randn(rng, &[n, c, hw, hw]),
                randn(rng, &[c]),
                randn(rng, &[c]),
            ];
            (
                inputs,
                Box::new(move |g, v| {
                    let (y, _) = g.batch_norm_train(v[0], v[1], v[2])?;
                    project(g, y, &w)
                }),
            )
        }
        "batch_norm_eval" => {
            let w = randn(rng, &[n, c, hw, hw]);
            let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
            let inputs = vec![
                randn(rng, &[n, c, hw, hw]),
                randn(rng, &[c]),
                randn(rng, &[c]),
            ];
            (
                inputs,
                Box::new(move |g, v| {
                    let y = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var)?;
                    project(g, y, &w)
                }),
            )
        }
        "relu" | "tanh" | "scale" | "global_avg_pool" => {
            let shape = [n, c, hw, hw];
            let x = if op == "relu" {
                away_from_zero(rng, &shape)
            } else {
                randn(rng, &shape)
            };
            let factor = rng.gen_range(-2.0..2.0);
            let pooled = [n, c];
            let w = randn(
                rng,
                if op == "global_avg_pool" {
                    &pooled[..]
                } else {
                    &shape[..]
                },
            );
            let op = op.to_string();
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = match op.as_str() {
                        "relu" => g.relu(v[0]),
                        "tanh" => g.tanh(v[0]),
                        "scale" => g.scale(v[0], factor),
                        _ => g.global_avg_pool(v[0])?,
                    };
                    project(g, y, &w)
                }),
            )
        }
        "add" => {
            let shape = [n, c, hw];
            let w = randn(rng, &shape);
            (
                vec![randn(rng, &shape), randn(rng, &shape)],
                Box::new(move |g, v| {
                    let y = g.add(v[0], v[1])?;
                    project(g, y, &w)
                }),
            )
        }
        "l1_loss" => {
            let a = randn(rng, &[n, c, hw]);
            let d = away_from_zero(rng, &[n, c, hw]);
            let mut b = a.clone();
            b.data_mut()
                .iter_mut()
                .zip(d.data())
                .for_each(|(v, &e)| *v += e);
            (vec![a, b], Box::new(|g, v| g.l1_loss(v[0], v[1])))
        }
        "kl_unit_gaussian" => (
            vec![randn(rng, &[n, c, hw])],
            Box::new(|g, v| Ok(g.kl_unit_gaussian(v[0]))),
        ),
        "linear" => {
            let f = rng.gen_range(1..=6);
            let w = randn(rng, &[n, k]);
            (
                vec![randn(rng, &[n, f]), randn(rng, &[k, f]), randn(rng, &[k])],
                Box::new(move |g, v| {
                    let y = g.linear(v[0], v[1], Some(v[2]))?;
                    project(g, y, &w)
                }),
            )
        }
        "cross_entropy" => {
            let classes = k + 1;
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            (
                vec![randn(rng, &[n, classes])],
                Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
            )
        }
        "composite" => {
            let target = randn(rng, &[n, c, hw, hw]);
            let inputs = vec![
                randn(rng, &[n, c, hw, hw]),
                randn(rng, &[k, c, 3, 3]),
                randn(rng, &[k, c, 3, 3]),
            ];
            (
                inputs,
                Box::new(move |g, v| {
                    let h = g.conv2d(v[0], v[1], None, 1, 1)?;
                    let h = g.tanh(h);
                    let y = g.conv_transpose2d(h, v[2], None, 1, 1)?;
                    let t = g.input(target.clone());
                    let l = g.l1_loss(y, t)?;
                    let kl = g.kl_unit_gaussian(h);
                    g.add(l, kl)
                }),
            )
        }
        _ => unreachable!("unknown op {op}"),
    }
}

/// Checks every differentiable primitive on `instances` random cases each.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<OpCheck>, TensorError> {
    let key = seed::derive_key(seed, "gradcheck");
    let mut out = Vec::with_capacity(SUITE_OPS.len());
    for op in SUITE_OPS {
        let mut check = OpCheck {
            op,
            instances,
            coordinates: 0,
            max_rel_error: 0.0,
        };
        for i in 0..instances {
            let mut rng = seed::stream(&key, op, i as u64);
            let (inputs, f) = case(op, &mut rng);
            let r = gradient_check(f, &inputs, SUITE_EPSILON)?;
            check.coordinates += r.coordinates;
            check.max_rel_error = check.max_rel_error.max(r.max_rel_error);
        }
        out.push(check);
    }
    Ok(out)
}
