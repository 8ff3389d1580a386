//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Denominator floor for the relative error, so that gradients that are
/// numerically zero are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    /// Number of scalar entries checked.
    pub entries: usize,
    /// Entries whose relative error exceeded the tolerance.
    pub failures: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss);
    if v.shape() != [1, 1] {
        return Err(Error::contract("grad_check: function must return a scalar"));
    }
    Ok(v.item())
}

/// Compares the analytic gradient of `f` against central differences with
/// the given `step`, for every entry of every parameter.
///
/// `f` builds the loss from parameter leaves; any noise it uses must be
/// frozen so that repeated evaluations agree exactly.
pub fn grad_check<F>(params: &[Tensor], step: f64, tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item();
    let again = eval(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Nondeterministic {
            first: base,
            second: again,
        });
    }
    let grads = g.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut entries = 0;
    let mut failures = 0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param gradient");
        let mut worst: f64 = 0.0;
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let plus = eval(&f, &work)?;
            work[pi].data_mut()[i] = orig - step;
            let minus = eval(&f, &work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.data()[i], numeric);
            if err >= tolerance {
                failures += 1;
            }
            worst = worst.max(err);
            entries += 1;
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        entries,
        failures,
        tolerance,
    })
}
