//! Gaussian to swiss roll on a 2D grid with CSBM.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use catbridge::csbm::{csbm_train, rollout_batch, with_pool, write_metrics_csv, BridgeCache};
use catbridge::datasets::{empirical_marginal, write_samples_csv, StateSampler, Toy2dKind, Toy2dSampler};
use catbridge::prob::tv_distance;
use catbridge::rng::{component_rng, streams};
use catbridge::space::StateSpace;
use serde::Serialize;

use crate::config::{Failure, Toy2dConfig};
use crate::output::OutDir;
use crate::CommonArgs;

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config: &'a Toy2dConfig,
    /// TV between the terminal law of forward rollouts and the exact swiss-roll grid law.
    tv_to_target: f64,
    /// The same distance for fresh data of equal size; the best a perfect model could show.
    tv_sampling_floor: f64,
    /// Steps per trajectory that change the state.
    jumps_per_trajectory: f64,
    /// Mean sup-norm displacement per step.
    mean_step: f64,
    max_step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_seconds: Option<f64>,
}

/// Sup-norm distance between two grid cells.
fn step(space: StateSpace, a: usize, b: usize) -> usize {
    (0..space.num_dimensions())
        .map(|d| space.coordinate(a, d).abs_diff(space.coordinate(b, d)))
        .max()
        .unwrap_or(0)
}

pub fn run(cfg: &Toy2dConfig, common: &CommonArgs) -> Result<(), Failure> {
    let out = OutDir::create(&common.out)?;
    let spec = cfg.grid()?;
    let space = spec.space();
    let r = Arc::new(cfg.reference()?);
    let s0 = Toy2dSampler { spec, kind: Toy2dKind::Gaussian, roll: cfg.swiss_roll };
    let s1 = Toy2dSampler { spec, kind: Toy2dKind::SwissRoll, roll: cfg.swiss_roll };

    let start = Instant::now();
    let trained = csbm_train(&s0, &s1, &r, &cfg.train)?;
    let secs = start.elapsed().as_secs_f64();
    out.write("metrics.csv", |w| Ok(write_metrics_csv(&trained.metrics, w)?))?;

    let cache = BridgeCache::new(&r)?;
    let mut rng = component_rng(cfg.seed, streams::EVAL);
    let starts = s0.sample_many(cfg.eval_samples, &mut rng);
    let paths = with_pool(&cfg.train, || rollout_batch(&trained.forward, &cache, &starts, &mut rng))??;
    let ends: Vec<usize> = paths.iter().map(|p| p.1).collect();
    let data = s1.sample_many(cfg.eval_samples, &mut rng);

    let p1 = s1.exact_marginal()?;
    let tv = tv_distance(&empirical_marginal(&ends, space)?, &p1)?;
    let floor = tv_distance(&empirical_marginal(&data, space)?, &p1)?;
    let (mut jumps, mut total, mut max_step) = (0usize, 0usize, 0usize);
    for (path, _) in &paths {
        for w in path.windows(2) {
            let d = step(space, w[0], w[1]);
            jumps += (d > 0) as usize;
            total += d;
            max_step = max_step.max(d);
        }
    }
    let transitions = paths.first().map_or(1, |(p, _)| p.len().saturating_sub(1).max(1));
    let m = paths.len() as f64;

    out.write("samples_p0.csv", |w| Ok(write_samples_csv(space, &starts, w)?))?;
    out.write("samples_p1.csv", |w| Ok(write_samples_csv(space, &data, w)?))?;
    out.write("samples_model.csv", |w| Ok(write_samples_csv(space, &ends, w)?))?;
    out.write("trajectories.csv", |w| {
        writeln!(w, "trajectory,n,d0,d1")?;
        for (i, (path, _)) in paths.iter().take(cfg.trajectories).enumerate() {
            for (n, &x) in path.iter().enumerate() {
                writeln!(w, "{i},{n},{},{}", space.coordinate(x, 0), space.coordinate(x, 1))?;
            }
        }
        Ok(())
    })?;

    println!(
        "toy2d {} alpha={}: TV {tv:.4} (sampling floor {floor:.4}), jumps/trajectory {:.3}, max step {max_step}, trained in {secs:.1}s",
        cfg.reference.name(),
        cfg.alpha,
        jumps as f64 / m
    );
    out.write_json(
        "summary.json",
        &Summary {
            config: cfg,
            tv_to_target: tv,
            tv_sampling_floor: floor,
            jumps_per_trajectory: jumps as f64 / m,
            mean_step: total as f64 / (m * transitions as f64),
            max_step,
            train_seconds: (!common.deterministic).then_some(secs),
        },
    )?;
    Ok(())
}
