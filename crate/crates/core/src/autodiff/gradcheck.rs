use super::{Gradients, Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor: relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude among the checked entries.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Records `loss_fn` on a fresh graph, differentiates it, and compares every
/// trainable parameter against central differences.
pub fn grad_check<F>(loss_fn: F, store: &ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, store)?;
    let analytic = graph.gradients(loss)?;
    compare_gradients(
        &analytic,
        store,
        |s| {
            let mut g = Graph::new();
            let l = loss_fn(&mut g, s)?;
            Ok(g.value(l).item())
        },
        cfg,
    )
}

/// Compares supplied analytic gradients with central differences of `eval`.
/// Trainable parameters missing from `analytic` are treated as zero-gradient.
pub fn compare_gradients<E>(
    analytic: &Gradients,
    store: &ParamStore,
    eval: E,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    E: Fn(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let len = store.get(&name)?.len();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
            _ => (0..len).collect(),
        };
        let mut worst: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &idx in &entries {
            let original = store.get(&name)?.data()[idx];
            work.get_mut(&name)?.data_mut()[idx] = original + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[idx] = original - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[idx]);
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((a - numeric).abs() / denom);
            max_abs = max_abs.max(a.abs());
        }
        params.push(ParamCheck {
            name,
            checked: entries.len(),
            max_rel_error: worst,
            max_abs_grad: max_abs,
        });
    }
    Ok(GradCheckReport {
        params,
        tol: cfg.tol,
    })
}
