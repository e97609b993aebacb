//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error, so that coordinates whose
/// true derivative is essentially zero are judged on absolute error. Central
/// differences at h = 1e-5 carry about 1e-9 of rounding noise on deep 64-bit
/// graphs (e.g. a conv bias feeding a training-mode batch norm, whose exact
/// gradient is 0); below this magnitude the check is absolute at tol * floor.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    /// (input index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compare backward() against central differences with step `h` for every
/// input tensor of `f`. `f` builds a scalar loss from leaf variables.
///
/// When `max_coords` is set, at most that many evenly spaced elements of each
/// input are perturbed.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, max_coords: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let picks: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let orig = t.data()[idx];
            work[ti].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data()[idx];
            let rel = relative_error(a, numeric);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, idx));
            }
        }
    }
    Ok(report)
}
