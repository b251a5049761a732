//! Reference solvers used to cross-check the diffusion engine. Both handle
//! dangling columns by completing them with `1/n` (the same convention the
//! solver's pool drain implements) and solve `X = d Q' X + (1 - d) V`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::Graph;
use crate::solver::Personalization;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("dense solve limited to 500 nodes, got {n}")]
    TooLarge { n: usize },
    #[error("system is singular")]
    Singular,
}

#[derive(Debug, Clone)]
pub struct PowerResult {
    pub x: Vec<f64>,
    pub iterations: u64,
}

/// Applies the completed operator once: `d Q' x + (1 - d) v`.
fn apply(g: &Graph, damping: f64, v: &[f64], x: &[f64]) -> Vec<f64> {
    let n = g.n();
    let mut out = vec![0.0; n];
    let mut dangling_mass = 0.0;
    for j in 0..n {
        let deg = g.out_degree(j);
        if deg == 0 {
            dangling_mass += x[j];
            continue;
        }
        let share = damping * x[j] / deg as f64;
        for &c in g.children(j) {
            out[c as usize] += share;
        }
    }
    let uniform = damping * dangling_mass / n as f64;
    for (o, &vi) in out.iter_mut().zip(v) {
        *o += uniform + (1.0 - damping) * vi;
    }
    out
}

/// Fixed-point iteration from `X = V` until the successive-iterate L1
/// change drops to `tol`.
pub fn power_iteration(
    g: &Graph,
    damping: f64,
    personalization: &Personalization,
    tol: f64,
) -> PowerResult {
    let v = personalization.vector(g.n());
    let mut x = v.clone();
    let mut iterations = 0u64;
    loop {
        let next = apply(g, damping, &v, &x);
        let delta: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        iterations += 1;
        if delta <= tol {
            return PowerResult { x, iterations };
        }
        assert!(iterations < 10_000_000, "power iteration failed to reach tol {tol}");
    }
}

/// Direct solve of `(I - d Q') X = (1 - d) V` by LU with partial pivoting.
/// Quadratic memory, so capped at 500 nodes.
pub fn dense_solve(
    g: &Graph,
    damping: f64,
    personalization: &Personalization,
) -> Result<Vec<f64>, OracleError> {
    let n = g.n();
    if n > 500 {
        return Err(OracleError::TooLarge { n });
    }
    let mut a = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        let deg = g.out_degree(j);
        if deg == 0 {
            let w = damping / n as f64;
            for i in 0..n {
                a[(i, j)] -= w;
            }
        } else {
            let w = damping / deg as f64;
            for &c in g.children(j) {
                a[(c as usize, j)] -= w;
            }
        }
    }
    let v = personalization.vector(n);
    let b = DVector::from_iterator(n, v.iter().map(|&x| (1.0 - damping) * x));
    let solved = a.lu().solve(&b).ok_or(OracleError::Singular)?;
    Ok(solved.into_iter().copied().collect())
}
