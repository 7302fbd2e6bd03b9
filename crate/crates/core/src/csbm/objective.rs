use super::loss::{point_loss, LossKind, LossPoint, LossValue, SparseGradient};
use super::model::{BridgeCache, Direction, TabularEndpointModel};
use crate::error::{Error, Result};
use crate::prob::Coupling;
use crate::projections::ReciprocalProcess;
use crate::reference::EXACT_STATE_LIMIT;

/// Probability of each conditioning state for transition `n` given `(x0, x1)`.
fn conditioning_law(cache: &BridgeCache, direction: Direction, n: usize, x0: usize, x1: usize) -> Result<Vec<f64>> {
    let r = cache.reference();
    let k = r.space().num_states();
    let time = match direction {
        Direction::Forward => n - 1,
        Direction::Backward => n,
    };
    let t = r.grid().terminal();
    let mut out = vec![0.0; k];
    if time == 0 {
        out[x0] = 1.0;
    } else if time == t {
        out[x1] = 1.0;
    } else {
        out.copy_from_slice(r.bridge_endpoint_posterior(time, x0, x1)?.as_slice());
    }
    Ok(out)
}

/// Exact expectation of the training loss when `(x0, x1)` is drawn from
/// `coupling`, together with its gradient.
pub fn expected_loss(
    model: &TabularEndpointModel,
    cache: &BridgeCache,
    kind: LossKind,
    lambda: f64,
    coupling: &Coupling,
) -> Result<(LossValue, SparseGradient)> {
    let space = model.space();
    if space.num_states() > EXACT_STATE_LIMIT {
        return Err(Error::EnumerationTooLarge {
            count: space.num_states() as u128,
            limit: EXACT_STATE_LIMIT as u128,
        });
    }
    if coupling.space() != space || cache.reference().space() != space || cache.reference().grid() != model.grid() {
        return Err(Error::ReferenceMismatch);
    }
    let lambda = if kind == LossKind::Mse { 0.0 } else { lambda };
    let mut total = LossValue::default();
    let mut grad = SparseGradient::default();
    for ((x0, x1), &w) in coupling.probs().indexed_iter() {
        if w == 0.0 {
            continue;
        }
        for n in 1..=model.grid().terminal() {
            let law = conditioning_law(cache, model.direction(), n, x0, x1)?;
            for (x, &p) in law.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let v = point_loss(model, cache, kind, lambda, LossPoint { n, x }, (x0, x1), w * p, Some(&mut grad));
                total.loss += v.loss;
                total.kl_term += v.kl_term;
                total.simple_term += v.simple_term;
            }
        }
    }
    Ok((total, grad))
}

/// Endpoint model whose rows are the per-coordinate conditional endpoint laws
/// of a reciprocal process: `q(x_1^d | x_{t_{n-1}})` for forward models,
/// `q(x_0^d | x_{t_n})` for backward models. Unvisited rows keep zero logits.
pub fn optimal_endpoint_model(r: &ReciprocalProcess, direction: Direction) -> Result<TabularEndpointModel> {
    let reference = r.reference();
    let space = reference.space();
    let grid = reference.grid();
    let (k, s, t) = (space.num_states(), space.num_categories(), grid.terminal());
    if k > EXACT_STATE_LIMIT {
        return Err(Error::EnumerationTooLarge {
            count: k as u128,
            limit: EXACT_STATE_LIMIT as u128,
        });
    }
    let plan = r.coupling().probs();
    let mut model = TabularEndpointModel::uniform(direction, space, grid);
    for n in 1..=t {
        let time = match direction {
            Direction::Forward => n - 1,
            Direction::Backward => n,
        };
        // joint[x][e] = P(x_time = x, endpoint = e) with the endpoint being x1 or x0.
        let mut joint = vec![0.0; k * k];
        for ((x0, x1), &w) in plan.indexed_iter() {
            if w == 0.0 {
                continue;
            }
            let e = match direction {
                Direction::Forward => x1,
                Direction::Backward => x0,
            };
            if time == 0 {
                joint[x0 * k + e] += w;
            } else if time == t {
                joint[x1 * k + e] += w;
            } else {
                let post = reference.bridge_endpoint_posterior(time, x0, x1)?;
                for (x, &p) in post.as_slice().iter().enumerate() {
                    joint[x * k + e] += w * p;
                }
            }
        }
        for x in 0..k {
            let row = &joint[x * k..(x + 1) * k];
            let mass: f64 = row.iter().sum();
            if mass <= 0.0 {
                continue;
            }
            for d in 0..space.num_dimensions() {
                let mut marg = vec![0.0; s];
                for (e, &v) in row.iter().enumerate() {
                    marg[space.coordinate(e, d)] += v / mass;
                }
                let off = model.row_offset(x, n, d);
                for (c, &p) in marg.iter().enumerate() {
                    model.logits_mut()[off + c] = if p > 0.0 { p.ln().max(-700.0) } else { -700.0 };
                }
            }
        }
    }
    Ok(model)
}
