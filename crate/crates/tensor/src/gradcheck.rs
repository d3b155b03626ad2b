//! Central finite-difference gradient checks.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of the backward rules it checks.

use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients from
/// turning round-off into large relative errors.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        // NaN must not hide behind `max`
        if e.is_nan() || e > self.max_rel_err {
            self.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
        }
        self.checked += 1;
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
    }

    pub fn passes(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// Checks d(loss)/d(input) for every entry of every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut report = GradCheck::default();
    let mut xs = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - STEP;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            report.record(grad.data()[i], (up - down) / (2.0 * STEP));
        }
    }
    Ok(report)
}

/// Checks d(loss)/d(parameter) for the parameters of `store`.
///
/// When `max_coords` is set, at most that many randomly chosen entries of each
/// parameter are perturbed.
pub fn check_params<F>(
    store: &ParamStore,
    f: F,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut store = store.clone();
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &store)?;
    tape.backward(loss)?;
    store.accumulate_grads(&tape)?;
    let analytic: Vec<Tensor> = store
        .iter()
        .map(|p| {
            p.grad
                .clone()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect();

    let mut rng = StdRng::seed_from_u64(seed);
    let mut report = GradCheck::default();
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let len = store.value(id).len();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < len => sample(&mut rng, len, m).into_vec(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + STEP;
            let up = eval_loss(&store, &f)?;
            store.value_mut(id).data_mut()[i] = orig - STEP;
            let down = eval_loss(&store, &f)?;
            store.value_mut(id).data_mut()[i] = orig;
            report.record(grad.data()[i], (up - down) / (2.0 * STEP));
        }
    }
    Ok(report)
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.value(loss).item()
}

/// Reduces any output to a scalar with fixed, non-uniform weights so every
/// output entry contributes a distinct amount to the loss.
pub fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n)
        .map(|i| (0.37 * i as f64 + 0.11).sin() + 0.5)
        .collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum_all(p))
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub check: GradCheck,
}

fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn dim(rng: &mut StdRng) -> usize {
    rng.gen_range(1..=4)
}

type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Builds one random instance of `op`: input tensors plus the loss closure.
fn op_case(op: &'static str, rng: &mut StdRng) -> (Vec<Tensor>, Case) {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    match op {
        "matmul" => (
            vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y)
            }),
        ),
        "bmm" => {
            let b = dim(rng);
            (
                vec![rand_tensor(rng, &[b, m, k]), rand_tensor(rng, &[b, k, n])],
                Box::new(|t, v| {
                    let y = t.bmm(v[0], v[1])?;
                    weighted_sum(t, y)
                }),
            )
        }
        "transpose_last" => (
            vec![rand_tensor(rng, &[2, m, n])],
            Box::new(|t, v| {
                let y = t.transpose_last(v[0])?;
                weighted_sum(t, y)
            }),
        ),
        "add" | "sub" | "mul" => (
            vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])],
            Box::new(move |t, v| {
                let y = match op {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                weighted_sum(t, y)
            }),
        ),
        "add_bias" => (
            vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n])],
            Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1])?;
                weighted_sum(t, y)
            }),
        ),
        "mul_col" => (
            vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, 1])],
            Box::new(|t, v| {
                let y = t.mul_col(v[0], v[1])?;
                weighted_sum(t, y)
            }),
        ),
        "mul_scalar" => (
            vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[1])],
            Box::new(|t, v| {
                let y = t.mul_scalar(v[0], v[1])?;
                weighted_sum(t, y)
            }),
        ),
        "affine" => (
            vec![rand_tensor(rng, &[m, n])],
            Box::new(|t, v| {
                let y = t.affine(v[0], -1.5, 0.25);
                weighted_sum(t, y)
            }),
        ),
        "concat" => {
            let axis = rng.gen_range(0..2);
            let (s1, s2) = if axis == 0 {
                ([m, n], [k, n])
            } else {
                ([m, n], [m, k])
            };
            (
                vec![rand_tensor(rng, &s1), rand_tensor(rng, &s2)],
                Box::new(move |t, v| {
                    let y = t.concat(&[v[0], v[1]], axis)?;
                    weighted_sum(t, y)
                }),
            )
        }
        "slice" => {
            let len = rng.gen_range(1..=n + 1);
            let start = rng.gen_range(0..=n + 1 - len);
            (
                vec![rand_tensor(rng, &[m, n + 1, 2])],
                Box::new(move |t, v| {
                    let y = t.slice(v[0], 1, start, len)?;
                    weighted_sum(t, y)
                }),
            )
        }
        "reshape" => (
            vec![rand_tensor(rng, &[m, n * 2])],
            Box::new(move |t, v| {
                let y = t.reshape(v[0], &[2 * m, n])?;
                weighted_sum(t, y)
            }),
        ),
        "gather_rows" => {
            let idx: Vec<usize> = (0..k + 2).map(|_| rng.gen_range(0..m)).collect();
            (
                vec![rand_tensor(rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = t.gather_rows(v[0], &idx)?;
                    weighted_sum(t, y)
                }),
            )
        }
        "scatter_add_rows" => {
            let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
            (
                vec![rand_tensor(rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = t.scatter_add_rows(v[0], &idx, k)?;
                    weighted_sum(t, y)
                }),
            )
        }
        "segment_max" => {
            let seg: Vec<usize> = (0..m + 2).map(|_| rng.gen_range(0..k)).collect();
            (
                vec![rand_tensor(rng, &[m + 2, n])],
                Box::new(move |t, v| {
                    let y = t.segment_max(v[0], &seg, k)?;
                    weighted_sum(t, y)
                }),
            )
        }
        "reduce_sum" | "reduce_mean" | "reduce_max" => {
            let axis = rng.gen_range(0..3);
            (
                vec![rand_tensor(rng, &[m, k, n])],
                Box::new(move |t, v| {
                    let y = match op {
                        "reduce_sum" => t.reduce_sum(v[0], axis)?,
                        "reduce_mean" => t.reduce_mean(v[0], axis)?,
                        _ => t.reduce_max(v[0], axis)?,
                    };
                    weighted_sum(t, y)
                }),
            )
        }
        "sum_all" => (
            vec![rand_tensor(rng, &[m, n])],
            Box::new(|t, v| {
                let y = t.sum_all(v[0]);
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            }),
        ),
        "relu" | "leaky_relu" | "tanh" | "sigmoid" | "exp" => (
            vec![rand_tensor(rng, &[m, n])],
            Box::new(move |t, v| {
                let y = match op {
                    "relu" => t.relu(v[0]),
                    "leaky_relu" => t.leaky_relu(v[0], 0.2),
                    "tanh" => t.tanh(v[0]),
                    "sigmoid" => t.sigmoid(v[0]),
                    _ => t.exp(v[0]),
                };
                weighted_sum(t, y)
            }),
        ),
        "softmax" => (
            vec![rand_tensor(rng, &[m, n + 1])],
            Box::new(|t, v| {
                let y = t.softmax(v[0])?;
                weighted_sum(t, y)
            }),
        ),
        "segment_softmax" => {
            let seg: Vec<usize> = (0..m + 3).map(|_| rng.gen_range(0..k)).collect();
            (
                vec![rand_tensor(rng, &[m + 3, n])],
                Box::new(move |t, v| {
                    let y = t.segment_softmax(v[0], &seg, k)?;
                    weighted_sum(t, y)
                }),
            )
        }
        "l2_normalize_rows" => (
            vec![rand_tensor(rng, &[m, n + 1])],
            Box::new(|t, v| {
                let y = t.l2_normalize_rows(v[0], 1e-12)?;
                weighted_sum(t, y)
            }),
        ),
        "cross_entropy" => {
            let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n + 1)).collect();
            (
                vec![rand_tensor(rng, &[m, n + 1])],
                Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
            )
        }
        other => unreachable!("no gradient case for {other}"),
    }
}

pub const OPS: &[&str] = &[
    "matmul",
    "bmm",
    "transpose_last",
    "add",
    "sub",
    "mul",
    "add_bias",
    "mul_col",
    "mul_scalar",
    "affine",
    "concat",
    "slice",
    "reshape",
    "gather_rows",
    "scatter_add_rows",
    "segment_max",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "sum_all",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "exp",
    "softmax",
    "segment_softmax",
    "l2_normalize_rows",
    "cross_entropy",
];

/// Finite-difference check of every differentiable op over `trials` random
/// shapes and values each.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = StdRng::seed_from_u64(seed);
    OPS.iter()
        .map(|&op| {
            let mut check = GradCheck::default();
            for _ in 0..trials {
                let (inputs, f) = op_case(op, &mut rng);
                check.merge(&check_inputs(&inputs, f)?);
            }
            Ok(OpReport { op, check })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_matches_finite_difference() {
        let x = Tensor::scalar(3.0);
        let r = check_inputs(&[x], |t, v| t.mul(v[0], v[0])).unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu through a constant that is then ignored still checks fine; a
        // mismatching function (forward uses x², backward of identity) must not.
        let x = Tensor::scalar(2.0);
        let r = check_inputs(&[x], |t, v| {
            // forward depends on the input only through a constant copy
            let c = t.constant(t.value(v[0]).clone());
            let sq = t.mul(c, c)?;
            t.add(sq, v[0])
        })
        .unwrap();
        assert!(!r.passes());
    }

    #[test]
    fn every_op_passes() {
        for rep in op_suite(20, 11).unwrap() {
            assert!(rep.check.passes(), "{} failed: {:?}", rep.op, rep.check);
            assert!(rep.check.checked > 0);
        }
    }
}
