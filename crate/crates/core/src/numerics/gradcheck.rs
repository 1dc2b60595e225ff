use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares autodiff gradients against central finite differences.
///
/// `loss` builds the scalar loss on a fresh graph from the given parameters.
/// Every coordinate is checked when there are at most `max_coords` of them,
/// otherwise a seeded uniform subsample of `max_coords` coordinates is used.
pub fn grad_check<L>(
    store: &ParamStore<f64>,
    loss: L,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    L: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    if !g.scalar_value(l).is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    g.backward(l)?;
    let analytic = g.param_grads(store);

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, t) in store.tensors().iter().enumerate() {
        coords.extend((0..t.len()).map(|j| (pi, j)));
    }
    let picked: Vec<(usize, usize)> = if coords.len() <= max_coords {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(s, &mut g)?;
        let v = g.scalar_value(l);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords_checked: picked.len(),
        worst: None,
    };
    for (pi, j) in picked {
        let id = ParamId(pi);
        let orig = work.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + h;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig - h;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[pi].data()[j];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((store.name(id).to_string(), j));
        }
    }
    Ok(report)
}
