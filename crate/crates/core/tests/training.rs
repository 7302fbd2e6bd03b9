//! End-to-end behaviour of bidirectional training on small problems.

use std::sync::Arc;

use catbridge::csbm::{csbm_train, induced_coupling, BridgeCache, Direction, LossKind, Optimizer, TrainConfig};
use catbridge::datasets::{marginals_linear, CategoricalSampler};
use catbridge::prob::{coupling_marginals, tv_distance};
use catbridge::reference::{build_gaussian_reference, build_uniform_reference, ReferenceProcess};
use catbridge::space::{StateSpace, TimeGrid};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn instance(uniform: bool) -> (Arc<ReferenceProcess>, CategoricalSampler, CategoricalSampler) {
    let sp = StateSpace::line(6).unwrap();
    let r = if uniform {
        build_uniform_reference(sp, TimeGrid::new(3), 0.3).unwrap()
    } else {
        build_gaussian_reference(sp, TimeGrid::new(3), 0.8).unwrap()
    };
    let (p0, p1) = marginals_linear(6).unwrap();
    (Arc::new(r), CategoricalSampler::new(&p0), CategoricalSampler::new(&p1))
}

#[test]
fn first_outer_iteration_lowers_both_losses() {
    for uniform in [false, true] {
        for loss in [LossKind::Kl, LossKind::Mse] {
            let (r, s0, s1) = instance(uniform);
            let config = TrainConfig {
                outer_iterations: 2,
                steps_per_phase: 600,
                batch_size: 128,
                loss,
                seed: 5,
                ..Default::default()
            };
            let out = csbm_train(&s0, &s1, &r, &config).unwrap();
            assert_eq!(out.metrics.len(), 2 * 2 * 600);
            // Later iterations start near their optimum and only fluctuate.
            for phase in [Direction::Forward, Direction::Backward] {
                let xs: Vec<f64> =
                    out.metrics.iter().filter(|m| m.outer_iter == 1 && m.phase == phase).map(|m| m.loss).collect();
                let (first, last) = (mean(&xs[..60]), mean(&xs[540..]));
                assert!(last < first, "{loss:?} uniform={uniform} {}: {first} -> {last}", phase.name());
            }
        }
    }
}

#[test]
fn adagrad_reaches_the_target_marginal() {
    let (r, s0, s1) = instance(false);
    let config = TrainConfig {
        outer_iterations: 2,
        steps_per_phase: 800,
        batch_size: 256,
        optimizer: Optimizer::Adagrad,
        learning_rate: 0.5,
        seed: 2,
        ..Default::default()
    };
    let out = csbm_train(&s0, &s1, &r, &config).unwrap();
    let cache = BridgeCache::new(&r).unwrap();
    let (p0, p1) = marginals_linear(6).unwrap();
    let (_, m1) = coupling_marginals(&induced_coupling(&out.forward, &cache, &p0).unwrap());
    let (m0, _) = coupling_marginals(&induced_coupling(&out.backward, &cache, &p1).unwrap());
    assert!(tv_distance(&m1, &p1).unwrap() < 0.05);
    assert!(tv_distance(&m0, &p0).unwrap() < 0.05);
}
