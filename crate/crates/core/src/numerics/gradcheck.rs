//! Central-difference verification of analytic gradients.

use rayon::prelude::*;
use serde::Serialize;

use super::Tensor;
use crate::error::{Error, Result};

/// A named, ordered collection of parameter tensors.
///
/// `tensors` and `tensors_mut` must enumerate the same tensors in the same order.
pub trait ParamSet<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

/// Denominator floor for relative errors, so that entries whose true gradient is
/// numerically zero are compared absolutely rather than amplified.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "gradcheck h={:e} tol={:e} loss={:.9}\n",
            self.step, self.tolerance, self.loss
        );
        for p in &self.params {
            out.push_str(&format!(
                "  {:<28} n={:<6} max_rel={:.3e} max|g|={:.3e} {}\n",
                p.name,
                p.numel,
                p.max_rel_error,
                p.max_abs_analytic,
                if p.passed { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "max relative error {:.3e}: {}\n",
            self.max_rel_error,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Compares analytic gradients with central differences `(f(θ+h) − f(θ−h)) / 2h`
/// for every scalar entry of every parameter tensor.
///
/// `objective(params, want_grad)` returns the loss and, when asked, gradients with
/// the same structure as `params`.
pub fn gradcheck<P, F>(params: &P, objective: F, h: f64, tol: f64) -> Result<GradcheckReport>
where
    P: ParamSet<f64> + Clone + Sync,
    F: Fn(&P, bool) -> Result<(f64, Option<P>)> + Sync,
{
    let (loss, grads) = objective(params, true)?;
    let grads = grads.ok_or_else(|| Error::Usage("objective returned no gradients".into()))?;
    if !loss.is_finite() {
        return Err(Error::numeric("loss", format!("non-finite value {loss}")));
    }
    let named = params.tensors();
    let grad_named = grads.tensors();
    if named.len() != grad_named.len() {
        return Err(Error::Dimension(format!(
            "{} gradient tensors for {} parameters",
            grad_named.len(),
            named.len()
        )));
    }

    let coords: Vec<(usize, usize)> = named
        .iter()
        .enumerate()
        .flat_map(|(t, (_, tensor))| (0..tensor.numel()).map(move |i| (t, i)))
        .collect();

    let numeric: Vec<f64> = coords
        .par_iter()
        .map(|&(t, i)| {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                let mut slots = p.tensors_mut();
                let cell = &mut slots[t].data_mut()[i];
                *cell += delta;
                let (l, _) = objective(&p, false)?;
                Ok(l)
            };
            let (plus, minus) = (eval(h)?, eval(-h)?);
            let g = (plus - minus) / (2.0 * h);
            if !g.is_finite() {
                return Err(Error::numeric(
                    format!("{}[{i}]", named[t].0),
                    "finite difference is not finite",
                ));
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;

    let mut checks = Vec::with_capacity(named.len());
    let mut offset = 0;
    for ((name, tensor), (_, grad)) in named.iter().zip(&grad_named) {
        if grad.shape() != tensor.shape() {
            return Err(Error::Dimension(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                grad.shape(),
                tensor.shape()
            )));
        }
        let mut worst = 0.0f64;
        let mut biggest = 0.0f64;
        for (i, &a) in grad.data().iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::numeric(format!("{name}[{i}]"), "analytic gradient is NaN"));
            }
            worst = worst.max(relative_error(a, numeric[offset + i]));
            biggest = biggest.max(a.abs());
        }
        offset += tensor.numel();
        checks.push(ParamCheck {
            name: name.clone(),
            numel: tensor.numel(),
            max_rel_error: worst,
            max_abs_analytic: biggest,
            passed: worst < tol,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        step: h,
        tolerance: tol,
        loss,
        passed: checks.iter().all(|c| c.passed),
        params: checks,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    #[derive(Clone)]
    struct Linear {
        w: Tensor<f64>,
        b: Tensor<f64>,
    }

    impl ParamSet<f64> for Linear {
        fn tensors(&self) -> Vec<(String, &Tensor<f64>)> {
            vec![("w".into(), &self.w), ("b".into(), &self.b)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
            vec![&mut self.w, &mut self.b]
        }
    }

    fn linear_objective(p: &Linear, want: bool) -> Result<(f64, Option<Linear>)> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?);
        let target = g.constant(Tensor::matrix(2, 2, vec![1.0, -1.0, 0.0, 2.0])?);
        let w = g.param(p.w.clone());
        let b = g.param(p.b.clone());
        let y = g.matmul(x, w)?;
        let y = g.add_row(y, b)?;
        let loss = g.squared_l2(y, target)?;
        let value = g.value(loss).item();
        if !want {
            return Ok((value, None));
        }
        g.backward(loss)?;
        Ok((
            value,
            Some(Linear {
                w: g.grad(w).unwrap(),
                b: g.grad(b).unwrap(),
            }),
        ))
    }

    fn linear() -> Linear {
        Linear {
            w: Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap(),
            b: Tensor::vector(vec![0.05, -0.05]).unwrap(),
        }
    }

    #[test]
    fn linear_layer_is_exact() {
        let report = gradcheck(&linear(), linear_objective, 1e-3, 1e-8).unwrap();
        assert!(report.passed, "{}", report.render());
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_fails() {
        let report = gradcheck(
            &linear(),
            |p, want| {
                let (l, g) = linear_objective(p, want)?;
                Ok((
                    l,
                    g.map(|mut g| {
                        g.b.data_mut()[0] *= 1.1;
                        g
                    }),
                ))
            },
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.params[0].passed && !report.params[1].passed);
    }

    #[test]
    fn nan_is_reported_with_parameter_name() {
        let err = gradcheck(
            &linear(),
            |p, want| {
                let (l, g) = linear_objective(p, want)?;
                Ok((
                    l,
                    g.map(|mut g| {
                        g.w.data_mut()[2] = f64::NAN;
                        g
                    }),
                ))
            },
            1e-3,
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("w[2]"), "{err}");
    }
}
