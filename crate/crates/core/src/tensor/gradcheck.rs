//! Central finite-difference verification of analytic gradients.
//!
//! Every differentiable op and composite block in the crate is expected to
//! pass [`grad_check`] in 64-bit precision at tolerance 1e-4, step 1e-4.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub per_parameter_errors: Vec<(String, f64)>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: max_rel_err={:.3e} {}",
            self.op_name,
            self.max_relative_error,
            if self.passed { "ok" } else { "FAILED" }
        )
    }
}

/// Named f64 input to a gradient check.
#[derive(Clone)]
pub struct CheckInput {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl CheckInput {
    pub fn new(name: &str, shape: &[usize], data: Vec<f64>) -> Self {
        CheckInput {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Compare analytic gradients of a scalar-valued closure against central
/// finite differences `(f(x+eps) - f(x-eps)) / 2 eps`, per input element.
///
/// The closure receives leaf tensors in the order of `inputs` and must
/// return a scalar; relative error uses `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(
    op_name: &str,
    f: F,
    inputs: &[CheckInput],
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let eval = |datas: &[Vec<f64>]| -> Result<f64> {
        let g = Graph::<f64>::new();
        let leaves: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(datas)
            .map(|(inp, d)| g.leaf(d.clone(), &inp.shape, false))
            .collect();
        let out = f(&g, &leaves)?;
        if out.numel() != 1 {
            return Err(Error::Arg(format!(
                "grad_check({op_name}): closure output must be scalar, got {:?}",
                out.shape()
            )));
        }
        Ok(out.item())
    };

    // analytic pass
    let graph = Graph::<f64>::new();
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|inp| graph.leaf(inp.data.clone(), &inp.shape, true))
        .collect();
    let out = f(&graph, &leaves)?;
    if out.numel() != 1 {
        return Err(Error::Arg(format!(
            "grad_check({op_name}): closure output must be scalar, got {:?}",
            out.shape()
        )));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut datas: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    let mut per_parameter_errors = Vec::with_capacity(inputs.len());
    let mut max_relative_error = 0.0f64;
    for (pi, inp) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        for ei in 0..inp.data.len() {
            let orig = datas[pi][ei];
            datas[pi][ei] = orig + step;
            let fp = eval(&datas)?;
            datas[pi][ei] = orig - step;
            let fm = eval(&datas)?;
            datas[pi][ei] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi][ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
        per_parameter_errors.push((inp.name.clone(), worst));
        if worst > max_relative_error {
            max_relative_error = worst;
        }
    }

    Ok(GradCheckReport {
        op_name: op_name.into(),
        max_relative_error,
        per_parameter_errors,
        passed: max_relative_error < tolerance,
    })
}
