//! Finite-difference gradient checking.
//!
//! The checker rebuilds the graph twice per input component (central
//! differences), so it is strictly independent of the backward rules it
//! validates. `bad_square` exists as a negative control: a checker that
//! cannot flag a deliberately broken gradient proves nothing.

use super::{Graph, Tensor, TensorError, Var};

/// Step used by central differences unless a caller overrides it.
pub const DEFAULT_H: f64 = 1e-5;
/// Maximum relative error accepted for a correct gradient.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct CheckReport {
    /// Largest relative error over all checked components.
    pub max_rel_err: f64,
    /// Index of the input tensor holding the worst component.
    pub worst_input: usize,
    /// Flat index of the worst component within that input.
    pub worst_component: usize,
    /// Analytic gradient at the worst component.
    pub analytic: f64,
    /// Central-difference estimate at the worst component.
    pub numeric: f64,
    /// Total components compared.
    pub checked: usize,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with an absolute floor so tiny gradients do not divide by
/// zero: |a - n| / max(|a|, |n|, 1e-8).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every component of every input of a scalar-valued graph builder
/// against central differences with step `h`.
///
/// `build` receives leaf vars in the order of `inputs` and must return the
/// scalar loss; it is re-invoked on a fresh graph for every perturbation.
pub fn finite_diff_check_inputs(
    build: &dyn Fn(&Graph, &[Var]) -> Result<Var, TensorError>,
    inputs: &[Tensor],
    h: f64,
) -> Result<CheckReport, TensorError> {
    let eval = |points: &[Tensor]| -> Result<f64, TensorError> {
        let g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&g, &vars)?;
        Ok(g.value(loss).item())
    };

    // Analytic gradients from one reverse sweep.
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_component: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut points: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.len() {
            let orig = input.data()[ci];
            points[ti].data_mut()[ci] = orig + h;
            let up = eval(&points)?;
            points[ti].data_mut()[ci] = orig - h;
            let down = eval(&points)?;
            points[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[ci];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_input = ti;
                report.worst_component = ci;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Convenience wrapper: true when every gradient component is within
/// [`DEFAULT_TOL`] of its central-difference estimate at [`DEFAULT_H`].
pub fn finite_diff_check(
    build: &dyn Fn(&Graph, &[Var]) -> Result<Var, TensorError>,
    inputs: &[Tensor],
) -> Result<bool, TensorError> {
    Ok(finite_diff_check_inputs(build, inputs, DEFAULT_H)?.passes(DEFAULT_TOL))
}
