//! Central finite-difference verification of reverse-mode gradients.
//!
//! Graphs under test are rebuilt in `f64` for every perturbed evaluation,
//! so the closure passed to [`check`] must be a pure function of its inputs
//! (seed any randomness inside it).

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance on `|analytic - numeric| / max(|analytic|, |numeric|)`.
    pub rel_tol: f64,
    /// Absolute floor below which a discrepancy always passes; relative
    /// error is meaningless for gradients that are numerically zero.
    pub abs_tol: f64,
    /// Check at most this many evenly spaced entries per input.
    pub max_entries_per_input: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-3,
            abs_tol: 1e-7,
            max_entries_per_input: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub mismatches: Vec<EntryMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.mismatches.extend(other.mismatches);
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.values(loss)[0])
}

/// Analytic gradients of a scalar function with respect to each input.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let value = g.values(loss)[0];
    let grads = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok((value, grads))
}

fn entry_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if cap < n && cap > 0 => (0..cap).map(|i| i * n / cap).collect(),
        _ => (0..n).collect(),
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(inputs, &f)?;
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (input, grads) in analytic.iter().enumerate() {
        for index in entry_indices(grads.len(), cfg.max_entries_per_input) {
            let original = work[input].values()[index];
            work[input].values_mut()[index] = original + cfg.step;
            let plus = evaluate(&work, &f)?;
            work[input].values_mut()[index] = original - cfg.step;
            let minus = evaluate(&work, &f)?;
            work[input].values_mut()[index] = original;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grads[index];
            let abs_err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel_err = if scale > 0.0 { abs_err / scale } else { 0.0 };
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs_err);
            if abs_err > cfg.abs_tol {
                report.max_rel_err = report.max_rel_err.max(rel_err);
            }
            if abs_err > cfg.abs_tol && rel_err > cfg.rel_tol {
                report.mismatches.push(EntryMismatch {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}

/// Outcome of checking one operation over several random shapes.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub shapes: Vec<Vec<Vec<usize>>>,
    pub report: GradCheckReport,
}

mod suite {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{check, GradCheckConfig, OpCheck};
    use crate::error::Result;
    use crate::graph::{Graph, Var};
    use crate::tensor::Tensor;

    type Loss = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let vals = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), vals).expect("shape and buffer agree")
    }

    fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
        (0..rank).map(|_| rng.random_range(1..=4)).collect()
    }

    /// Weighted sum `Σ out ⊙ probe` so every output entry carries a distinct
    /// upstream gradient.
    fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(out).to_vec();
        let w = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
        let prod = g.mul(out, w)?;
        Ok(g.sum(prod))
    }

    /// One random case: input tensors plus the scalar function under test.
    fn case(op: &'static str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Loss) {
        let seed: u64 = rng.random();
        match op {
            "matmul" => {
                let (m, k, n) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5));
                let inputs = vec![random_tensor(rng, &[m, k], -1.0, 1.0), random_tensor(rng, &[k, n], -1.0, 1.0)];
                (inputs, Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    probe(g, y, seed)
                }))
            }
            "transpose" => {
                let s = dims(rng, 2);
                (vec![random_tensor(rng, &s, -1.0, 1.0)], Box::new(move |g, v| {
                    let y = g.transpose(v[0])?;
                    probe(g, y, seed)
                }))
            }
            "add" | "mul" | "sub" => {
                let a = { let rank = rng.random_range(1..=3); dims(rng, rank) };
                // b is a, a suffix of a, or a with some axes collapsed to 1
                let b: Vec<usize> = match rng.random_range(0..3) {
                    0 => a.clone(),
                    1 => a[rng.random_range(0..a.len())..].to_vec(),
                    _ => a.iter().map(|&d| if rng.random_bool(0.5) { 1 } else { d }).collect(),
                };
                let inputs = vec![random_tensor(rng, &a, -1.0, 1.0), random_tensor(rng, &b, -1.0, 1.0)];
                (inputs, Box::new(move |g, v| {
                    let y = match op {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    probe(g, y, seed)
                }))
            }
            "scale" => {
                let s = dims(rng, 2);
                let f = rng.random_range(-2.0..2.0);
                (vec![random_tensor(rng, &s, -1.0, 1.0)], Box::new(move |g, v| {
                    let y = g.scale(v[0], f);
                    probe(g, y, seed)
                }))
            }
            "concat" => {
                let base = dims(rng, 2);
                let axis = rng.random_range(0..2);
                let inputs: Vec<Tensor<f64>> = (0..3)
                    .map(|_| {
                        let mut s = base.clone();
                        s[axis] = rng.random_range(1..=3);
                        random_tensor(rng, &s, -1.0, 1.0)
                    })
                    .collect();
                (inputs, Box::new(move |g, v| {
                    let y = g.concat(v, axis)?;
                    probe(g, y, seed)
                }))
            }
            "narrow" => {
                let s = dims(rng, 2);
                let axis = rng.random_range(0..2);
                let start = rng.random_range(0..s[axis]);
                let len = rng.random_range(1..=s[axis] - start);
                (vec![random_tensor(rng, &s, -1.0, 1.0)], Box::new(move |g, v| {
                    let y = g.narrow(v[0], axis, start, len)?;
                    probe(g, y, seed)
                }))
            }
            "reshape" => {
                let s = dims(rng, 2);
                let n = s[0] * s[1];
                (vec![random_tensor(rng, &s, -1.0, 1.0)], Box::new(move |g, v| {
                    let y = g.reshape(v[0], [n])?;
                    probe(g, y, seed)
                }))
            }
            "sum" | "mean" => {
                let s = { let rank = rng.random_range(1..=3); dims(rng, rank) };
                (vec![random_tensor(rng, &s, -1.0, 1.0)], Box::new(move |g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    Ok(if op == "sum" { g.sum(sq) } else { g.mean(sq) })
                }))
            }
            "sigmoid" | "silu" | "exp" | "log" => {
                let s = { let rank = rng.random_range(1..=3); dims(rng, rank) };
                let (lo, hi) = if op == "log" { (0.2, 2.0) } else { (-2.0, 2.0) };
                (vec![random_tensor(rng, &s, lo, hi)], Box::new(move |g, v| {
                    let y = match op {
                        "sigmoid" => g.sigmoid(v[0]),
                        "silu" => g.silu(v[0]),
                        "exp" => g.exp(v[0]),
                        _ => g.log(v[0]),
                    };
                    probe(g, y, seed)
                }))
            }
            "softmax" | "layer_norm" => {
                let rank = rng.random_range(1..=3);
                let mut s = dims(rng, rank);
                let axis = rng.random_range(0..rank);
                s[axis] = s[axis].max(2);
                (vec![random_tensor(rng, &s, -2.0, 2.0)], Box::new(move |g, v| {
                    let y = if op == "softmax" { g.softmax(v[0], axis)? } else { g.layer_norm(v[0], axis, 1e-5)? };
                    probe(g, y, seed)
                }))
            }
            "embedding" => {
                let s = dims(rng, 2);
                let idx: Vec<usize> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(0..s[0])).collect();
                (vec![random_tensor(rng, &s, -1.0, 1.0)], Box::new(move |g, v| {
                    let y = g.embedding(v[0], &idx)?;
                    probe(g, y, seed)
                }))
            }
            "dropout" => {
                let s = dims(rng, 2);
                let p = rng.random_range(0.1..0.6);
                (vec![random_tensor(rng, &s, -1.0, 1.0)], Box::new(move |g, v| {
                    let mut drng = ChaCha8Rng::seed_from_u64(seed);
                    let y = g.dropout(v[0], p, &mut drng, true)?;
                    probe(g, y, seed)
                }))
            }
            "kl_div" => {
                let s = dims(rng, 2);
                let inputs = vec![random_tensor(rng, &s, -2.0, 2.0), random_tensor(rng, &s, -2.0, 2.0)];
                (inputs, Box::new(move |g, v| {
                    let p = g.softmax(v[0], 1)?;
                    let q = g.softmax(v[1], 1)?;
                    g.kl_div(p, q)
                }))
            }
            "row_cosine" => {
                let (r, c, d) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(2..=5));
                let inputs = vec![random_tensor(rng, &[r, d], -1.0, 1.0), random_tensor(rng, &[c, d], -1.0, 1.0)];
                (inputs, Box::new(move |g, v| {
                    let y = g.row_cosine(v[0], v[1])?;
                    probe(g, y, seed)
                }))
            }
            "cosine_sim" => {
                let d = rng.random_range(2..=6);
                let inputs = vec![random_tensor(rng, &[d], -1.0, 1.0), random_tensor(rng, &[d], -1.0, 1.0)];
                (inputs, Box::new(move |g, v| g.cosine_sim(v[0], v[1])))
            }
            "gather" => {
                let s = dims(rng, 2);
                let idx: Vec<usize> = (0..s[0]).map(|_| rng.random_range(0..s[1])).collect();
                (vec![random_tensor(rng, &s, -1.0, 1.0)], Box::new(move |g, v| {
                    let y = g.gather(v[0], &idx)?;
                    probe(g, y, seed)
                }))
            }
            "shift_rows" => {
                let s = dims(rng, 2);
                let offset = rng.random_range(-2i64..=2) as isize;
                (vec![random_tensor(rng, &s, -1.0, 1.0)], Box::new(move |g, v| {
                    let y = g.shift_rows(v[0], offset)?;
                    probe(g, y, seed)
                }))
            }
            other => unreachable!("no gradient case for {other}"),
        }
    }

    pub const OPS: &[&str] = &[
        "matmul", "transpose", "add", "sub", "mul", "scale", "concat", "narrow", "reshape", "sum",
        "mean", "sigmoid", "silu", "exp", "log", "softmax", "layer_norm", "embedding", "dropout",
        "kl_div", "row_cosine", "cosine_sim", "gather", "shift_rows",
    ];

    pub fn run(seed: u64, shapes_per_op: usize, cfg: GradCheckConfig) -> Result<Vec<OpCheck>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(OPS.len());
        for &op in OPS {
            let mut result = OpCheck {
                op,
                shapes: Vec::new(),
                report: Default::default(),
            };
            for _ in 0..shapes_per_op {
                let (inputs, f) = case(op, &mut rng);
                result.shapes.push(inputs.iter().map(|t| t.shape().to_vec()).collect());
                result.report.merge(check(&inputs, f, cfg)?);
            }
            out.push(result);
        }
        Ok(out)
    }
}

pub use suite::OPS as CHECKED_OPS;

/// Finite-difference check of every differentiable operation on
/// `shapes_per_op` random shapes drawn from `seed`.
pub fn op_suite(seed: u64, shapes_per_op: usize, cfg: GradCheckConfig) -> Result<Vec<OpCheck>> {
    suite::run(seed, shapes_per_op, cfg)
}
