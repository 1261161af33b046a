use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat entry index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares analytic gradients of a scalar against central differences.
///
/// `loss` must build the same deterministic scalar on every call; dropout
/// has to be off. Frozen params are skipped. The per-entry error is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    {
        let mut g = Graph::new(store);
        let out = loss(&mut g)?;
        let grads = g.backward(out)?;
        g.accumulate_into(&grads, &mut analytic);
    }

    let mut eval = |s: &ParamStore, name: &str| -> Result<f64> {
        let mut g = Graph::new(s);
        let out = loss(&mut g)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss while perturbing {name}")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let mut probe = store.clone();
    for (id, param) in store.iter() {
        if param.frozen {
            continue;
        }
        for k in 0..param.value.len() {
            let orig = param.value.data()[k];
            probe.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval(&probe, &param.name)?;
            probe.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval(&probe, &param.name)?;
            probe.get_mut(id).value.data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).grad.data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((param.name.clone(), k));
            }
        }
    }
    Ok(report)
}
