use super::{Graph, Tensor, Value};
use crate::error::Result;

/// Outcome of comparing analytic gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor, keeps near-zero gradients from dominating the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `loss(params)` for every element of every parameter tensor.
///
/// `loss` receives a fresh graph with the parameters bound as trainable leaves (in order) and
/// must return a scalar value.
pub fn grad_check<F>(params: &[Tensor], loss: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Value]) -> Result<Value>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Value> = ps.iter().map(|p| g.param(p.clone())).collect();
        let root = loss(&mut g, &vs)?;
        Ok(g.scalar(root))
    };

    let mut g = Graph::new();
    let vs: Vec<Value> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = loss(&mut g, &vs)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vs
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.dim())))
        .collect();

    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut evaluations = 1;
    for (k, p) in params.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for idx in 0..p.len() {
            let (r, c) = (idx / p.ncols(), idx % p.ncols());
            let orig = p[[r, c]];
            work[k][[r, c]] = orig + cfg.step;
            let up = eval(&work)?;
            work[k][[r, c]] = orig - cfg.step;
            let down = eval(&work)?;
            work[k][[r, c]] = orig;
            evaluations += 2;
            let numeric = (up - down) / (2.0 * cfg.step);
            worst = worst.max(relative_error(analytic[k][[r, c]], numeric, cfg.floor));
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        evaluations,
    })
}
