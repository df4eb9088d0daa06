use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-6,
            floor: 1e-6,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckOptions {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
    pub diagnostic: Option<String>,
}

impl GradCheckReport {
    fn failure(msg: String) -> Self {
        GradCheckReport {
            max_rel_error: f64::INFINITY,
            worst: None,
            checked: 0,
            passed: false,
            diagnostic: Some(msg),
        }
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the reverse-mode gradient of the scalar function `f` against
/// central finite differences over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = match f(&mut g, &vars) {
        Ok(v) => v,
        Err(e) => return GradCheckReport::failure(format!("forward failed: {e}")),
    };
    if g.value(out).numel() != 1 {
        return GradCheckReport::failure(format!(
            "function is not scalar-valued: shape {:?}",
            g.shape(out)
        ));
    }
    if !g.value(out).item().is_finite() {
        return GradCheckReport::failure("non-finite function value".into());
    }
    let grads = match g.backward(out) {
        Ok(gr) => gr,
        Err(e) => return GradCheckReport::failure(format!("backward failed: {e}")),
    };
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
        diagnostic: None,
    };
    for (i, a) in analytic.iter().enumerate() {
        for e in 0..a.numel() {
            let orig = probe[i].data()[e];
            probe[i].data_mut()[e] = orig + opts.step;
            let plus = eval(&f, &probe);
            probe[i].data_mut()[e] = orig - opts.step;
            let minus = eval(&f, &probe);
            probe[i].data_mut()[e] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                _ => {
                    return GradCheckReport {
                        passed: false,
                        diagnostic: Some(format!(
                            "non-finite or failed evaluation perturbing input {i} element {e}"
                        )),
                        ..report
                    }
                }
            };
            let numeric = (plus - minus) / (2.0 * opts.step);
            let an = a.data()[e];
            if !an.is_finite() {
                return GradCheckReport {
                    passed: false,
                    diagnostic: Some(format!("non-finite analytic gradient at input {i} element {e}")),
                    ..report
                };
            }
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, e));
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    report
}
