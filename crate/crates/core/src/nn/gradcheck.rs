use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute rather than relative terms.
const FD_FLOOR: f64 = 1e-4;

/// Worst discrepancy between `analytic` gradients and central differences of `loss`
/// on `probes` randomly chosen coordinates.
pub fn finite_difference_check<F>(
    store: &mut ParameterStore,
    analytic: &[Tensor],
    probes: usize,
    seed: u64,
    mut loss: F,
) -> Result<f64>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = store.ids().map(|id| store.value(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    if total == 0 {
        return Ok(0.0);
    }
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let id = ParamId(k);
        let original = store.value(id).data()[flat];
        store.value_mut(id).data_mut()[flat] = original + FD_STEP;
        let up = loss(store)?;
        store.value_mut(id).data_mut()[flat] = original - FD_STEP;
        let down = loss(store)?;
        store.value_mut(id).data_mut()[flat] = original;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let exact = analytic[k].data()[flat];
        let err = (numeric - exact).abs() / exact.abs().max(numeric.abs()).max(FD_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Run `build` once with backward to get analytic gradients, then probe them.
pub fn check_gradients<F>(store: &mut ParameterStore, probes: usize, seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic = store.grads().to_vec();
    finite_difference_check(store, &analytic, probes, seed, |s| {
        let mut g = Graph::new();
        let v = build(&mut g, s)?;
        Ok(g.value(v).item())
    })
}
