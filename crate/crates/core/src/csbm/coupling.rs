use ndarray::Array2;

use crate::eot::{reference_pair_cost, sinkhorn_plan_approx};
use crate::error::{Error, Result};
use crate::reference::ReferenceProcess;

const BATCH_SINKHORN_ITERS: usize = 5_000;
const BATCH_SINKHORN_TOL: f64 = 1e-9;

/// Pairs two equally sized batches through the entropic plan between their
/// empirical measures.
///
/// The cost is the reference transport cost divided by `temperature`. Each
/// `batch0[i]` is paired with the `batch1` element of largest plan mass in
/// row `i`, ties going to the lowest index, so a `batch1` element may be used
/// more than once.
pub fn minibatch_ot_coupling(
    batch0: &[usize],
    batch1: &[usize],
    reference: &ReferenceProcess,
    temperature: f64,
) -> Result<Vec<(usize, usize)>> {
    if batch0.len() != batch1.len() {
        return Err(Error::BatchMismatch {
            left: batch0.len(),
            right: batch1.len(),
        });
    }
    if batch0.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
    }
    let space = reference.space();
    for &x in batch0.iter().chain(batch1) {
        space.check(x)?;
    }
    let b = batch0.len();
    let cost = Array2::from_shape_fn((b, b), |(i, j)| reference_pair_cost(reference, batch0[i], batch1[j]) / temperature);
    if let Some(((i, j), _)) = cost.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::ZeroTransition {
            from: batch0[i],
            to: batch1[j],
        });
    }
    let uniform = vec![1.0 / b as f64; b];
    let plan = sinkhorn_plan_approx(&uniform, &uniform, cost.view(), BATCH_SINKHORN_ITERS, BATCH_SINKHORN_TOL);
    Ok(plan
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            (batch0[i], batch1[best])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::build_gaussian_reference;
    use crate::rng::component_rng;
    use crate::space::{StateSpace, TimeGrid};
    use rand::Rng;

    fn reference() -> ReferenceProcess {
        build_gaussian_reference(StateSpace::line(20).unwrap(), TimeGrid::new(3), 0.1).unwrap()
    }

    #[test]
    fn single_pair() {
        let r = reference();
        assert_eq!(minibatch_ot_coupling(&[3], &[17], &r, 1.0).unwrap(), vec![(3, 17)]);
    }

    #[test]
    fn identical_batches_pair_with_themselves() {
        let r = reference();
        let xs = [0, 5, 10, 15, 19];
        let pairs = minibatch_ot_coupling(&xs, &xs, &r, 1.0).unwrap();
        assert!(pairs.iter().all(|(a, b)| a == b));
    }

    #[test]
    fn mismatched_sizes() {
        let r = reference();
        assert!(matches!(
            minibatch_ot_coupling(&[1, 2], &[1], &r, 1.0),
            Err(Error::BatchMismatch { left: 2, right: 1 })
        ));
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn cold_limit_matches_exhaustive_assignment() {
        let r = reference();
        let mut rng = component_rng(11, 0);
        let mut checked = 0;
        for _ in 0..40 {
            let a: Vec<usize> = (0..4).map(|_| rng.random_range(0..20)).collect();
            let b: Vec<usize> = (0..4).map(|_| rng.random_range(0..20)).collect();
            let mut costs: Vec<(f64, Vec<usize>)> = permutations(4)
                .into_iter()
                .map(|p| ((0..4).map(|i| reference_pair_cost(&r, a[i], b[p[i]])).sum(), p))
                .collect();
            costs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
            // Only instances with a clear winner have a well-defined cold limit.
            if costs[1].0 - costs[0].0 < 0.2 {
                continue;
            }
            let best = &costs[0].1;
            let pairs = minibatch_ot_coupling(&a, &b, &r, 0.01).unwrap();
            for i in 0..4 {
                assert_eq!(pairs[i], (a[i], b[best[i]]));
            }
            checked += 1;
        }
        assert!(checked >= 10);
    }
}
