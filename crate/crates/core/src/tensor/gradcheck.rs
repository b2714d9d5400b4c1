//! Central-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement found for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub index: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the analytic gradient of a scalar function with central
/// differences `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// `build` records the function on a fresh graph from leaf handles for
/// `params` and returns the scalar output. The relative error of an element is
/// `|a - n| / max(|a|, |n|, abs_floor)`; `abs_floor` keeps elements whose true
/// gradient is zero from dividing by round-off. `stride` > 1 checks every
/// `stride`-th element of each parameter (always including the first).
pub fn finite_difference_check<B>(
    build: B,
    params: &[Tensor<f64>],
    h: f64,
    tol: f64,
    abs_floor: f64,
    stride: usize,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| Error::GradCheck(format!("parameter {pi} has no gradient")))?
            .clone();
        let mut worst = ParamError {
            index: pi,
            max_rel_err: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in (0..params[pi].numel()).step_by(stride.max(1)) {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval(&work);
            work[pi].data_mut()[e] = orig - h;
            let minus = eval(&work);
            work[pi].data_mut()[e] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                _ => {
                    return Err(Error::GradCheck(format!(
                        "non-finite function value perturbing parameter {pi} element {e}"
                    )))
                }
            };
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(abs_floor);
            if rel > worst.max_rel_err {
                worst = ParamError {
                    index: pi,
                    max_rel_err: rel,
                    worst_element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
        per_param.push(worst);
    }
    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let report = finite_difference_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            1e-6,
            1e-8,
            1e-12,
            1,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!((report.per_param[0].analytic - 6.0).abs() < 1e-15);
        assert!((report.per_param[0].numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn reports_non_finite_location() {
        let x = Tensor::from_f64(&[2], &[1.0, 1.7e308]).unwrap();
        let err = finite_difference_check(
            |g, v| {
                let s = g.scale(v[0], 1.0)?;
                g.sum(s)
            },
            &[x],
            1e308,
            1e-4,
            1e-12,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("element"), "{err}");
    }
}
