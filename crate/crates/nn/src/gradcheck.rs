//! Central finite-difference gradient checking.

use crate::error::NnError;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// Per-parameter-group outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GroupReport> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_err < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Base step; the actual step is `step · max(1, |θ|)`.
    pub step: f64,
    /// Denominator floor of the relative error, so entries whose true gradient is ~0 are judged
    /// by absolute error.
    pub floor: f64,
    /// Evenly spaced subset per group when set.
    pub max_entries_per_group: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            floor: 1e-5,
            max_entries_per_group: None,
        }
    }
}

/// Compares reverse-mode gradients of `forward` with central differences, entry by entry.
///
/// `forward` must be deterministic (reseed any dropout RNG inside it).
pub fn grad_check<E, Fw>(
    store: &mut ParamStore<f64>,
    mut forward: Fw,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    E: From<NnError>,
    Fw: FnMut(&mut Graph<f64>, &Bound) -> Result<Var, E>,
{
    let analytic = {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let loss = forward(&mut g, &bound)?;
        let grads = g.backward(loss)?;
        store.collect_grads(&bound, &grads)
    };
    let mut eval = |store: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let loss = forward(&mut g, &bound)?;
        Ok(g.scalar(loss))
    };
    let mut report = GradCheckReport {
        groups: Vec::new(),
        tolerance: opts.tolerance,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let len = grad.len();
        let picks: Vec<usize> = match opts.max_entries_per_group {
            Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
            _ => (0..len).collect(),
        };
        let mut group = GroupReport {
            name: store.name(id).to_string(),
            checked: picks.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for j in picks {
            let orig = store.get(id).data()[j];
            let h = opts.step * orig.abs().max(1.0);
            store.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            group.max_abs_err = group.max_abs_err.max(abs);
            group.max_rel_err = group.max_rel_err.max(rel);
        }
        report.groups.push(group);
    }
    Ok(report)
}
