//! Central-difference gradient checking.

use serde::Serialize;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator so
/// that near-zero gradients are judged on absolute error instead.
pub const DEFAULT_FLOOR: f64 = 1e-6;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Settings for one gradient check. `softmax_fault` corrupts the analytic
/// graph's softmax backward and exists for negative controls.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
    pub softmax_fault: Option<f64>,
}

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheck {
            eps,
            tol,
            floor: DEFAULT_FLOOR,
            softmax_fault: None,
        }
    }

    pub fn with_softmax_fault(mut self, factor: f64) -> Self {
        self.softmax_fault = Some(factor);
        self
    }

    fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::shape("grad_check", "function must return a scalar"));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::Numerical(format!("function value {} is not finite", y)));
        }
        Ok(y)
    }

    /// Compares reverse-mode gradients of `f` against
    /// `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of every input.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        g.set_softmax_backward_fault(self.softmax_fault);
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).item().is_finite() {
            return Err(Error::Numerical("function value is not finite".into()));
        }
        g.backward(out)?;

        let mut reports = Vec::with_capacity(inputs.len());
        let mut overall: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = g
                .grad(vars[i])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; input.numel()]);
            let mut numeric = vec![0.0; input.numel()];
            let mut work: Vec<Tensor> = inputs.to_vec();
            let mut worst = (0.0f64, 0usize);
            for e in 0..input.numel() {
                let orig = input.data()[e];
                work[i].data_mut()[e] = orig + self.eps;
                let up = Self::eval(&f, &work)?;
                work[i].data_mut()[e] = orig - self.eps;
                let down = Self::eval(&f, &work)?;
                work[i].data_mut()[e] = orig;
                numeric[e] = (up - down) / (2.0 * self.eps);
                let denom = analytic[e].abs().max(numeric[e].abs()).max(self.floor);
                let rel = (analytic[e] - numeric[e]).abs() / denom;
                if rel > worst.0 || rel.is_nan() {
                    worst = (rel, e);
                }
            }
            overall = overall.max(worst.0);
            reports.push(InputReport {
                input: i,
                max_rel_err: worst.0,
                worst_element: worst.1,
                analytic,
                numeric,
            });
        }
        Ok(GradCheckReport {
            inputs: reports,
            max_rel_err: overall,
            tol: self.tol,
        })
    }
}

/// Convenience wrapper around [`GradCheck::run`].
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    GradCheck::new(eps, tol).run(f, inputs)
}
