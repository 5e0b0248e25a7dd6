use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::{Graph, ParamId, ParamStore, TensorError, Var};

/// Which scalar coordinates of the store to probe.
#[derive(Clone, Debug)]
pub enum Probes {
    /// Every coordinate of every parameter.
    All,
    /// `count` coordinates drawn uniformly over all parameters.
    Sample {
        count: usize,
        seed: u64,
    },
    Explicit(Vec<(ParamId, usize)>),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over probes of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    pub worst: Option<(ParamId, usize)>,
    pub probes: usize,
}

/// Compares backward gradients of a scalar function of the store's
/// parameters against central differences with step `eps`.
pub fn finite_difference_check<E, F>(
    store: &mut ParamStore,
    probes: Probes,
    eps: f64,
    mut f: F,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")).into());
    }
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    g.accumulate_param_grads(store);

    let coords: Vec<(ParamId, usize)> = match probes {
        Probes::All => store.ids().flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i))).collect(),
        Probes::Sample { count, seed } => {
            let total = store.num_scalars();
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let mut flat = rng.gen_range(0..total);
                    let id = store
                        .ids()
                        .find(|&id| {
                            let n = store.value(id).numel();
                            if flat < n {
                                true
                            } else {
                                flat -= n;
                                false
                            }
                        })
                        .expect("flat index within total");
                    (id, flat)
                })
                .collect()
        }
        Probes::Explicit(list) => list,
    };

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::inference();
        let loss = f(&mut g, store)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_difference_check" }.into());
        }
        Ok(v)
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, probes: coords.len() };
    for (id, i) in coords {
        let analytic = store.grad(id).data()[i];
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(store);
        store.value_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(store);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some((id, i));
        }
    }
    Ok(report)
}
