//! Central finite-difference validation of backward-pass gradients.

use super::graph::Graph;
use super::tensor::{Tensor, TensorError};

/// Tolerances for [`finite_difference_check`]. An entry passes when its
/// absolute error is under the floor or its relative error is under `rel_tol`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
        }
    }
}

/// Per-parameter worst-case errors.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// Max relative error over entries that exceed the absolute floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub pass: bool,
    pub step: f64,
    /// Set when probing produced a non-finite value, with its location.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let mut lines = Vec::new();
        for p in &self.params {
            lines.push(format!(
                "{}: max_rel={:.3e} max_abs={:.3e} {}",
                p.name,
                p.max_rel_err,
                p.max_abs_err,
                if p.pass { "ok" } else { "FAIL" }
            ));
        }
        if let Some(f) = &self.failure {
            lines.push(format!("failure: {f}"));
        }
        lines.push(format!(
            "overall: {} (step {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.step
        ));
        lines.join("\n")
    }
}

/// Compare backward-pass gradients of the scalar function built by `f`
/// against central finite differences (f(p+h) − f(p−h)) / 2h, entry by entry,
/// for every listed parameter. `f` must be deterministic in the parameters.
pub fn finite_difference_check<F>(
    params: &[(String, Tensor)],
    config: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph) -> Result<Tensor, TensorError>,
{
    if config.step <= 0.0 {
        return Err(TensorError::Domain {
            op: "finite_difference_check",
            detail: format!("step {} must be positive", config.step),
        });
    }
    let h = config.step;

    for (_, p) in params {
        p.zero_grad();
    }
    let mut graph = Graph::new();
    let loss = f(&mut graph)?;
    graph.backward(&loss)?;
    drop(graph);

    let eval = |report: &mut GradCheckReport, name: &str, index: usize| -> Option<f64> {
        let mut g = Graph::new();
        let v = f(&mut g).and_then(|t| t.item());
        match v {
            Ok(v) if v.is_finite() => Some(v),
            Ok(v) => {
                report.pass = false;
                report.failure = Some(format!("non-finite value {v} probing {name}[{index}]"));
                None
            }
            Err(e) => {
                report.pass = false;
                report.failure = Some(format!("error probing {name}[{index}]: {e}"));
                None
            }
        }
    };

    let mut report = GradCheckReport {
        params: Vec::new(),
        pass: true,
        step: h,
        failure: None,
    };

    'outer: for (name, p) in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            pass: true,
        };
        for (i, &an) in analytic.iter().enumerate() {
            let x0 = p.value(i);
            p.set_value(i, x0 + h);
            let plus = eval(&mut report, name, i);
            p.set_value(i, x0 - h);
            let minus = eval(&mut report, name, i);
            p.set_value(i, x0);
            let (plus, minus) = match (plus, minus) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    check.pass = false;
                    report.params.push(check);
                    break 'outer;
                }
            };
            let fd = (plus - minus) / (2.0 * h);
            let abs_err = (fd - an).abs();
            let denom = fd.abs().max(an.abs());
            let rel_err = if denom == 0.0 { 0.0 } else { abs_err / denom };
            check.max_abs_err = check.max_abs_err.max(abs_err);
            if abs_err >= config.abs_floor {
                check.max_rel_err = check.max_rel_err.max(rel_err);
                if rel_err >= config.rel_tol {
                    check.pass = false;
                }
            }
        }
        report.pass &= check.pass;
        report.params.push(check);
    }
    Ok(report)
}
