use crate::{Graph, Real, Result, Tensor, Var};

/// Settings for a central-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Perturbation half-width.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Relative error denominator floor, so near-zero gradients are compared
    /// on an absolute scale.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates of each parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose stencil crossed a non-differentiable point.
    pub skipped_kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn coords(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

fn evaluate<F>(params: &[Tensor<f64>], f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.value(loss).item().unwrap_or(f64::NAN);
    Ok((value, g.kink_signature()))
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences for every (or a subsample of every) parameter coordinate.
pub fn grad_check<F>(params: &[Tensor<f64>], f: F, cfg: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let base_signature = g.kink_signature();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();
    drop(g);

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in coords(grad.len(), cfg.max_coords_per_param) {
            let original = work[pi].data()[ci];
            work[pi].data_mut()[ci] = original + cfg.step;
            let (plus, sig_plus) = evaluate(&work, &f)?;
            work[pi].data_mut()[ci] = original - cfg.step;
            let (minus, sig_minus) = evaluate(&work, &f)?;
            work[pi].data_mut()[ci] = original;
            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let exact = grad.data()[ci];
            let denom = exact.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (exact - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
            }
        }
    }
    report.passed = report.checked > 0 && report.max_rel_error < cfg.tolerance;
    Ok(report)
}

/// Casts a parameter set to the verification precision.
pub fn to_f64_params<R: Real>(params: &[Tensor<R>]) -> Vec<Tensor<f64>> {
    params.iter().map(|p| p.cast()).collect()
}
