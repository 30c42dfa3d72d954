//! Finite-difference check of the hand-written backward pass.

use rand::Rng;

use super::transformer::ToyLm;
use crate::error::Result;
use crate::text::TokenId;

/// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Mean masked NLL, the quantity whose gradient is checked.
pub fn mean_nll(model: &ToyLm, tokens: &[TokenId], mask: &[bool]) -> Result<f64> {
    let (nll, n) = model.masked_nll(tokens, mask)?;
    Ok(nll / n as f64)
}

/// Compares the analytic gradient of the mean masked NLL with central
/// differences on `n_coords` randomly chosen parameter values. Returns the
/// largest relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn gradcheck<R: Rng + ?Sized>(
    model: &ToyLm,
    tokens: &[TokenId],
    mask: &[bool],
    eps: f64,
    n_coords: usize,
    rng: &mut R,
) -> Result<f64> {
    let n_targets = mask.iter().filter(|&&m| m).count().max(1);
    let (_, _, grads) = model.loss_and_grad(tokens, mask, 1.0 / n_targets as f64)?;
    let grad_vals: Vec<Vec<f64>> = grads
        .named()
        .into_iter()
        .map(|(_, _, v)| v.to_vec())
        .collect();
    let sizes: Vec<usize> = grad_vals.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();

    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..n_coords {
        let mut flat = rng.random_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let orig = probe.params.slices_mut()[tensor][flat];
        probe.params.slices_mut()[tensor][flat] = orig + eps;
        let plus = mean_nll(&probe, tokens, mask)?;
        probe.params.slices_mut()[tensor][flat] = orig - eps;
        let minus = mean_nll(&probe, tokens, mask)?;
        probe.params.slices_mut()[tensor][flat] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grad_vals[tensor][flat];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
