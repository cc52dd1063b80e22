//! Small layer helpers shared by the encoder and heads.

use vega_autodiff::{Graph, Scalar, Var};

use crate::error::Result;
use crate::params::{Bound, Init, ParamSpec};

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x · W + b` using `{prefix}.w` and `{prefix}.b`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

/// Layer norm over the last axis followed by the learned `{prefix}.g` / `{prefix}.b` affine.
pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    let n = g.layer_norm(x, axis, LN_EPS)?;
    let gamma = p.get(&format!("{prefix}.g"))?;
    let beta = p.get(&format!("{prefix}.b"))?;
    let y = g.mul(n, gamma)?;
    Ok(g.add(y, beta)?)
}

pub fn layer_norm_specs(prefix: &str, d: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.g"), [d], Init::Ones),
        ParamSpec::new(format!("{prefix}.b"), [d], Init::Zeros),
    ]
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
        assert_eq!(argmax(&[2.0, 0.0]), 0);
    }
}
