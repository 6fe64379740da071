//! Central finite-difference gradient checking.
//!
//! The numeric side only runs forward passes, so it is independent of the
//! backward rules it validates.

use crate::error::Result;
use crate::nn::Graph;
use crate::params::ParamStore;
use crate::tape::Var;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / (|analytic| + 1e-8)` seen.
    pub max_rel_err: f64,
    /// `(parameter, element, analytic, numeric)` at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares backprop gradients of `loss` against central differences with
/// step `h` for every trainable parameter. At most `max_per_param` evenly
/// spaced elements are probed per tensor.
pub fn check_gradients<F>(
    store: &ParamStore,
    h: f64,
    max_per_param: usize,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let g = Graph::new(store);
        let out = loss(&g)?;
        g.backward(out)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new(s);
        let out = loss(&g)?;
        Ok(g.item(out))
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let names: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let n = store.get(&name).map_or(0, |t| t.numel());
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let grad = analytic.get(&name);
        for idx in (0..n).step_by(stride) {
            let orig = store.get(&name).expect("listed above").data()[idx];
            probe.get_mut(&name).expect("cloned").data_mut()[idx] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(&name).expect("cloned").data_mut()[idx] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(&name).expect("cloned").data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = grad.map_or(0.0, |g| g[idx]);
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), idx, a, numeric));
            }
        }
    }
    Ok(report)
}
