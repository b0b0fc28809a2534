use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i|` over compared components, divided by
    /// the largest magnitude of the analytic gradient or a compared estimate.
    ///
    /// Central differences of an `f32` function carry absolute noise of order
    /// `ulp(f) / eps` in every component, so errors are measured against the
    /// gradient's scale rather than each (possibly near-zero) component.
    pub max_rel_error: f64,
    /// Flat index of the component attaining `max_rel_error`.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Components whose stencil crossed a ReLU, max-pool or clamp switch.
    /// Finite differences are meaningless there, so they are left out of
    /// `max_rel_error`.
    pub skipped: usize,
    /// Components compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Compares the tape gradient of a scalar function `f` at `x` with central
/// differences `(f(x + eps e_i) - f(x - eps e_i)) / 2eps` in every component.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_components(f, x, eps, &all)
}

/// [`grad_check`] restricted to the listed components of `x`. The error scale
/// still covers the whole analytic gradient, so a sample of a large tensor is
/// judged against the same norm as an exhaustive check.
///
/// Each step is measured after rounding `x_i ± eps` to `f32`.
pub fn grad_check_components<F>(f: F, x: &Tensor, eps: f32, components: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !x.is_finite() {
        return Err(NumError::NonFinite("grad_check input"));
    }
    if let Some(&bad) = components.iter().find(|&&i| i >= x.len()) {
        return Err(NumError::IndexOutOfRange {
            op: "grad_check",
            index: bad,
            extent: x.len(),
        });
    }
    let mut graph = Graph::new();
    let xv = graph.param(x.clone());
    let loss = f(&mut graph, xv)?;
    let f0 = graph
        .scalar(loss)
        .ok_or_else(|| NumError::NotScalar(graph.shape(loss).to_vec()))?;
    if !f0.is_finite() {
        return Err(NumError::NonFinite("grad_check f(x)"));
    }
    graph.backward(loss)?;
    let analytic = graph.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    let analytic: Vec<f64> = analytic.data().iter().map(|&v| v as f64).collect();

    let signature = graph.branch_signature();
    let eval = |data: Vec<f32>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut g, v)?;
        let val = g
            .scalar(out)
            .ok_or_else(|| NumError::NotScalar(g.shape(out).to_vec()))?;
        if !val.is_finite() {
            return Err(NumError::NonFinite("grad_check f(x ± eps)"));
        }
        Ok((val, g.branch_signature()))
    };

    let base = x.to_vec();
    let mut kept = Vec::with_capacity(components.len());
    for &i in components {
        let (hi, lo) = (base[i] + eps, base[i] - eps);
        let mut plus = base.clone();
        plus[i] = hi;
        let mut minus = base.clone();
        minus[i] = lo;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp == signature && sm == signature {
            kept.push((i, (fp - fm) / (hi as f64 - lo as f64)));
        }
    }
    let scale = kept
        .iter()
        .map(|&(_, n)| n.abs())
        .chain(analytic.iter().map(|a| a.abs()))
        .fold(0.0f64, f64::max);
    let first = components.first().copied().unwrap_or(0);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        index: first,
        analytic: analytic.get(first).copied().unwrap_or(0.0),
        numeric: kept.first().map_or(0.0, |&(_, n)| n),
        skipped: components.len() - kept.len(),
        checked: kept.len(),
    };
    for &(i, n) in &kept {
        let diff = (analytic[i] - n).abs();
        if diff == 0.0 {
            continue;
        }
        let err = diff / scale;
        if err > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                index: i,
                analytic: analytic[i],
                numeric: n,
                ..report
            };
        }
    }
    Ok(report)
}
