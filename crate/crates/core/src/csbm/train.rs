use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coupling::minibatch_ot_coupling;
use super::loss::{batch_loss, LossKind, LossValue};
use super::model::{rollout, BridgeCache, Direction, TabularEndpointModel};
use crate::datasets::StateSampler;
use crate::error::{Error, Result};
use crate::reference::ReferenceProcess;
use crate::rng::{child_rng, component_rng, streams};

/// Environment variable capping the worker threads used by training.
pub const THREADS_ENV: &str = "CATBRIDGE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitCoupling {
    Independent,
    #[serde(alias = "minibatch")]
    MinibatchOt,
}

/// Starting logits of both models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelInit {
    /// All-zero logits: every endpoint equally likely.
    Uniform,
    /// The reference endpoint law, each row floored at `reference_floor`
    /// below its maximum.
    Reference,
}

/// Update rule for the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient steps, optionally with heavy-ball momentum.
    Sgd,
    /// Per-logit step sizes scaled by the accumulated squared gradient.
    /// Rarely visited rows keep large steps, which matters for tabular
    /// models over big state spaces.
    Adagrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_simple: f64,
    pub outer_iterations: usize,
    pub steps_per_phase: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    pub loss: LossKind,
    pub init: InitCoupling,
    pub model_init: ModelInit,
    pub reference_floor: f64,
    pub minibatch_temperature: f64,
    pub seed: u64,
    /// Forces a single worker so that runs are bit-for-bit repeatable.
    pub deterministic: bool,
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_simple: 0.001,
            outer_iterations: 5,
            steps_per_phase: 500,
            batch_size: 128,
            learning_rate: 1.0,
            momentum: 0.0,
            optimizer: Optimizer::Sgd,
            loss: LossKind::Kl,
            init: InitCoupling::Independent,
            model_init: ModelInit::Uniform,
            reference_floor: 30.0,
            minibatch_temperature: 1.0,
            seed: 0,
            deterministic: false,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda_simple >= 0.0 && self.lambda_simple.is_finite()) {
            return bad(format!("lambda_simple must be >= 0, got {}", self.lambda_simple));
        }
        if self.outer_iterations == 0 {
            return bad("outer_iterations must be >= 1".into());
        }
        if self.steps_per_phase == 0 || self.batch_size == 0 {
            return bad("steps_per_phase and batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.optimizer == Optimizer::Adagrad && self.momentum > 0.0 {
            return bad("momentum is only supported by the sgd optimizer".into());
        }
        if !(self.minibatch_temperature > 0.0 && self.minibatch_temperature.is_finite()) {
            return bad(format!("minibatch_temperature must be positive, got {}", self.minibatch_temperature));
        }
        if !(self.reference_floor > 0.0) {
            return bad(format!("reference_floor must be positive, got {}", self.reference_floor));
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1".into());
        }
        Ok(())
    }

    fn num_threads(&self) -> usize {
        if self.deterministic {
            return 1;
        }
        self.threads
            .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0))
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMetric {
    pub outer_iter: usize,
    pub phase: Direction,
    pub step: usize,
    pub loss: f64,
    pub kl_term: f64,
    pub simple_term: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub forward: TabularEndpointModel,
    pub backward: TabularEndpointModel,
    pub metrics: Vec<PhaseMetric>,
}

/// Writes metrics as CSV `outer_iter,phase,step,loss,kl_term,simple_term`.
pub fn write_metrics_csv<W: Write>(metrics: &[PhaseMetric], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["outer_iter", "phase", "step", "loss", "kl_term", "simple_term"])?;
    for m in metrics {
        w.write_record([
            m.outer_iter.to_string(),
            m.phase.name().to_string(),
            m.step.to_string(),
            format!("{:e}", m.loss),
            format!("{:e}", m.kl_term),
            format!("{:e}", m.simple_term),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `f` on a pool sized by the config (or the ambient pool when unset).
pub fn with_pool<T: Send>(config: &TrainConfig, f: impl FnOnce() -> T + Send) -> Result<T> {
    match config.num_threads() {
        0 => Ok(f()),
        n => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Rolls the model out from every start state, one generator per start.
pub fn rollout_batch<R: Rng + ?Sized>(
    model: &TabularEndpointModel,
    cache: &BridgeCache,
    starts: &[usize],
    rng: &mut R,
) -> Result<Vec<(Vec<usize>, usize)>> {
    let seeds: Vec<_> = starts.iter().map(|_| child_rng(rng)).collect();
    starts
        .par_iter()
        .zip(seeds)
        .map(|(&x, mut r)| rollout(model, cache, x, &mut r))
        .collect()
}

/// Far endpoints of rollouts, without keeping the paths.
pub fn rollout_endpoints<R: Rng + ?Sized>(
    model: &TabularEndpointModel,
    cache: &BridgeCache,
    starts: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let seeds: Vec<_> = starts.iter().map(|_| child_rng(rng)).collect();
    starts
        .par_iter()
        .zip(seeds)
        .map(|(&x, mut r)| rollout(model, cache, x, &mut r).map(|(_, end)| end))
        .collect()
}

const ADAGRAD_EPS: f64 = 1e-10;

struct Sgd {
    lr: f64,
    optimizer: Optimizer,
    momentum: f64,
    /// Momentum velocity or Adagrad accumulator; empty for plain steps.
    state: Vec<f64>,
}

impl Sgd {
    fn new(config: &TrainConfig, len: usize) -> Self {
        let needs_state = config.optimizer == Optimizer::Adagrad || config.momentum > 0.0;
        Self {
            lr: config.learning_rate,
            optimizer: config.optimizer,
            momentum: config.momentum,
            state: if needs_state { vec![0.0; len] } else { Vec::new() },
        }
    }

    fn step(&mut self, model: &mut TabularEndpointModel, grad: &super::loss::SparseGradient) {
        let logits = model.logits_mut();
        match self.optimizer {
            Optimizer::Adagrad => {
                for (off, row) in grad.rows() {
                    let acc = &mut self.state[off..off + row.len()];
                    for ((p, a), g) in logits[off..off + row.len()].iter_mut().zip(acc).zip(row) {
                        *a += g * g;
                        *p -= self.lr * g / (a.sqrt() + ADAGRAD_EPS);
                    }
                }
            }
            Optimizer::Sgd if self.momentum == 0.0 => {
                for (off, row) in grad.rows() {
                    for (p, g) in logits[off..off + row.len()].iter_mut().zip(row) {
                        *p -= self.lr * g;
                    }
                }
            }
            Optimizer::Sgd => {
                self.state.iter_mut().for_each(|v| *v *= self.momentum);
                for (off, row) in grad.rows() {
                    for (v, g) in self.state[off..off + row.len()].iter_mut().zip(row) {
                        *v += g;
                    }
                }
                for (p, v) in logits.iter_mut().zip(&self.state) {
                    *p -= self.lr * v;
                }
            }
        }
    }
}

/// Bidirectional training: each outer iteration fits the forward model on
/// pairs from the backward model (or the initial coupling in the first
/// iteration), then the backward model on pairs from the forward model.
///
/// Training pairs are resampled for every batch.
pub fn csbm_train(
    p0: &dyn StateSampler,
    p1: &dyn StateSampler,
    reference: &Arc<ReferenceProcess>,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let space = reference.space();
    if p0.space() != space || p1.space() != space {
        return Err(Error::SpaceMismatch);
    }
    let cache = BridgeCache::new(reference)?;
    with_pool(config, || train_loop(p0, p1, reference, &cache, config))?
}

fn train_loop(
    p0: &dyn StateSampler,
    p1: &dyn StateSampler,
    reference: &Arc<ReferenceProcess>,
    cache: &BridgeCache,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let init = |direction| match config.model_init {
        ModelInit::Uniform => TabularEndpointModel::uniform(direction, reference.space(), reference.grid()),
        ModelInit::Reference => TabularEndpointModel::from_reference(direction, reference, config.reference_floor),
    };
    let mut forward = init(Direction::Forward);
    let mut backward = init(Direction::Backward);
    let mut sgd_f = Sgd::new(config, forward.logits().len());
    let mut sgd_b = Sgd::new(config, backward.logits().len());
    let mut rng = component_rng(config.seed, streams::TRAIN);
    let mut metrics = Vec::with_capacity(2 * config.outer_iterations * config.steps_per_phase);
    let b = config.batch_size;

    for outer in 1..=config.outer_iterations {
        for step in 0..config.steps_per_phase {
            let pairs: Vec<(usize, usize)> = if outer == 1 {
                let x0 = p0.sample_many(b, &mut rng);
                let x1 = p1.sample_many(b, &mut rng);
                match config.init {
                    InitCoupling::Independent => x0.into_iter().zip(x1).collect(),
                    InitCoupling::MinibatchOt => minibatch_ot_coupling(&x0, &x1, reference, config.minibatch_temperature)?,
                }
            } else {
                let x1 = p1.sample_many(b, &mut rng);
                let x0 = rollout_endpoints(&backward, cache, &x1, &mut rng)?;
                x0.into_iter().zip(x1).collect()
            };
            let (value, grad) = batch_loss(&forward, cache, config.loss, config.lambda_simple, &pairs, &mut rng)?;
            sgd_f.step(&mut forward, &grad);
            metrics.push(metric(outer, Direction::Forward, step, &value));
        }
        for step in 0..config.steps_per_phase {
            let x0 = p0.sample_many(b, &mut rng);
            let x1 = rollout_endpoints(&forward, cache, &x0, &mut rng)?;
            let pairs: Vec<_> = x0.into_iter().zip(x1).collect();
            let (value, grad) = batch_loss(&backward, cache, config.loss, config.lambda_simple, &pairs, &mut rng)?;
            sgd_b.step(&mut backward, &grad);
            metrics.push(metric(outer, Direction::Backward, step, &value));
        }
    }
    Ok(TrainOutput {
        forward,
        backward,
        metrics,
    })
}

fn metric(outer_iter: usize, phase: Direction, step: usize, v: &LossValue) -> PhaseMetric {
    PhaseMetric {
        outer_iter,
        phase,
        step,
        loss: v.loss,
        kl_term: v.kl_term,
        simple_term: v.simple_term,
    }
}
