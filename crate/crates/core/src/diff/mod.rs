//! Differentiation engine.
//!
//! Gradients are exact for the discretized computation: reverse mode over a
//! thread-local tape for scalar objectives, forward-mode duals for the ODE
//! sensitivities that feed into it. Hessians are central differences of
//! exact gradients.

mod dual;
mod params;
mod real;
mod tape;

pub use dual::Dual;
pub use params::{Layout, ParamVector, Segment};
pub use real::{normal_cdf, sigmoid, Real};
pub use tape::{Tape, Var};

use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("non-finite gradient (component {index})")]
    NonFiniteGradient { index: usize },
    #[error("non-finite objective value")]
    NonFiniteValue,
    #[error("layout error: {0}")]
    Layout(String),
}

/// Value and gradient of a tape objective at `at`.
///
/// The objective receives one tape input per entry of `at` (in layout order)
/// and returns the output node.
pub fn value_and_gradient<F, E>(objective: F, at: &ParamVector) -> Result<(f64, Vec<f64>), E>
where
    F: FnOnce(&[Var]) -> Result<Var, E>,
    E: From<DiffError>,
{
    let tape = Tape::new();
    let inputs = tape.inputs(&at.values);
    let out = objective(&inputs)?;
    let value = out.value();
    if !value.is_finite() {
        return Err(DiffError::NonFiniteValue.into());
    }
    let grad = tape.gradient(out, &inputs);
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(DiffError::NonFiniteGradient { index }.into());
    }
    Ok((value, grad))
}

#[derive(Clone, Debug)]
pub struct HessianResult {
    /// Symmetrized Hessian over the requested indices.
    pub matrix: Matrix,
    /// `max |H - Hᵀ|` before symmetrization.
    pub asymmetry: f64,
    pub indices: Vec<usize>,
}

/// Hessian of `objective` restricted to the named segments, from
/// fourth-order central differences of exact gradients with step
/// `1e-4·(1+|x_k|)`.
pub fn hessian<F, E>(objective: F, at: &ParamVector, subset: &[&str]) -> Result<HessianResult, E>
where
    F: Fn(&[Var]) -> Result<Var, E>,
    E: From<DiffError>,
{
    let indices = at.layout.indices(subset)?;
    hessian_from_gradient(
        |x| value_and_gradient(&objective, x).map(|(_, g)| g),
        at,
        &indices,
    )
}

/// Finite-difference stencil for differentiating a gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(g(x+h) − g(x−h)) / 2h`; error O(h²).
    Central2,
    /// `(8[g(x+h) − g(x−h)] − [g(x+2h) − g(x−2h)]) / 12h`; error O(h⁴).
    Central4,
}

/// Same as [`hessian`] but for any exact-gradient oracle.
pub fn hessian_from_gradient<G, E>(
    grad: G,
    at: &ParamVector,
    indices: &[usize],
) -> Result<HessianResult, E>
where
    G: Fn(&ParamVector) -> Result<Vec<f64>, E>,
{
    hessian_with_stencil(grad, at, indices, Stencil::Central4)
}

pub fn hessian_with_stencil<G, E>(
    grad: G,
    at: &ParamVector,
    indices: &[usize],
    stencil: Stencil,
) -> Result<HessianResult, E>
where
    G: Fn(&ParamVector) -> Result<Vec<f64>, E>,
{
    let m = indices.len();
    let mut raw = Matrix::zeros(m, m);
    let mut probe = at.clone();
    let mut diff = |k: usize, h: f64| -> Result<Vec<f64>, E> {
        let x0 = at.values[k];
        probe.values[k] = x0 + h;
        let gp = grad(&probe)?;
        probe.values[k] = x0 - h;
        let gm = grad(&probe)?;
        probe.values[k] = x0;
        Ok(gp.iter().zip(&gm).map(|(a, b)| a - b).collect())
    };
    for (col, &k) in indices.iter().enumerate() {
        let h = 1e-4 * (1.0 + at.values[k].abs());
        let d1 = diff(k, h)?;
        let column: Vec<f64> = match stencil {
            Stencil::Central2 => d1.iter().map(|d| d / (2.0 * h)).collect(),
            Stencil::Central4 => {
                let d2 = diff(k, 2.0 * h)?;
                d1.iter()
                    .zip(&d2)
                    .map(|(a, b)| (8.0 * a - b) / (12.0 * h))
                    .collect()
            }
        };
        for (row, &j) in indices.iter().enumerate() {
            raw[(row, col)] = column[j];
        }
    }
    let mut asymmetry: f64 = 0.0;
    let mut matrix = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            asymmetry = asymmetry.max((raw[(i, j)] - raw[(j, i)]).abs());
            matrix[(i, j)] = 0.5 * (raw[(i, j)] + raw[(j, i)]);
        }
    }
    Ok(HessianResult {
        matrix,
        asymmetry,
        indices: indices.to_vec(),
    })
}

/// Central finite-difference gradient of a plain function, used as a test
/// oracle.
pub fn finite_difference_gradient<F, E>(f: F, at: &[f64], h: f64) -> Result<Vec<f64>, E>
where
    F: Fn(&[f64]) -> Result<f64, E>,
{
    let mut x = at.to_vec();
    let mut g = Vec::with_capacity(at.len());
    for k in 0..at.len() {
        let x0 = x[k];
        x[k] = x0 + h;
        let fp = f(&x)?;
        x[k] = x0 - h;
        let fm = f(&x)?;
        x[k] = x0;
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}
