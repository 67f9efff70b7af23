//! Central finite-difference verification of tape gradients.

use crate::{Graph, Result, Tensor, Var};

/// Denominator floor for relative errors, so entries whose true gradient is
/// essentially zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Evenly spaced subsample of entries per parameter; `None` checks all.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamGradCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamGradCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamGradCheck> {
        self.params
            .iter()
            .filter(move |p| p.max_rel_error >= self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(params: &[(String, Tensor<f64>)], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares tape gradients of `f` against central differences, parameter by
/// parameter. `f` receives one var per entry of `params`, in order, and must
/// return a one-element loss.
pub fn grad_check<F>(
    params: &[(String, Tensor<f64>)],
    f: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.numel();
        let stride = match config.max_entries_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut entry = ParamGradCheck {
            name: name.clone(),
            entries_checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in (0..n).step_by(stride) {
            let orig = tensor.data()[idx];
            work[pi].1.data_mut()[idx] = orig + config.step;
            let plus = evaluate(&work, &f)?;
            work[pi].1.data_mut()[idx] = orig - config.step;
            let minus = evaluate(&work, &f)?;
            work[pi].1.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[pi].data()[idx];
            let err = relative_error(a, numeric);
            entry.entries_checked += 1;
            if err > entry.max_rel_error || entry.entries_checked == 1 {
                entry.max_rel_error = err;
                entry.worst_index = idx;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.push(entry);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: config.tolerance,
    })
}
