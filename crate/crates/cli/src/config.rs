//! Experiment configs: JSON files with flag overrides, validated before any work starts.

use std::fmt;
use std::fs;
use std::path::Path;

use catbridge::csbm::{InitCoupling, LossKind, ModelInit, Optimizer, TrainConfig};
use catbridge::datasets::{GridSpec2D, SwissRollParams};
use catbridge::reference::{ReferenceConfig, ReferenceKind, ReferenceProcess, EXACT_STATE_LIMIT};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CommonArgs;

/// Why a command stopped; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(catbridge::Error),
    Property(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Property(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(msg) => write!(f, "config: {msg}"),
            Failure::Numerical(e) => write!(f, "{e}"),
            Failure::Property(msg) => write!(f, "property check failed: {msg}"),
        }
    }
}

impl From<catbridge::Error> for Failure {
    fn from(e: catbridge::Error) -> Self {
        Failure::Numerical(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numerical(e.into())
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Config(msg.into()))
}

/// Overrides for the reference process and state space.
#[derive(Args, Debug, Clone, Default)]
pub struct ProblemOverrides {
    /// Categories per dimension.
    #[arg(long = "S")]
    pub s: Option<usize>,
    /// Number of dimensions.
    #[arg(long = "D")]
    pub d: Option<usize>,
    /// Intermediate time steps (comma-separated list where a sweep is allowed).
    #[arg(long = "N", value_delimiter = ',')]
    pub n: Vec<usize>,
    /// Reference process: unif or gauss.
    #[arg(long = "ref")]
    pub reference: Option<ReferenceKind>,
    /// Stochasticity parameter (comma-separated list where a sweep is allowed).
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainOverrides {
    /// Loss: kl or mse.
    #[arg(long)]
    pub loss: Option<String>,
    /// Initial coupling: independent or minibatch.
    #[arg(long)]
    pub init: Option<String>,
}

/// Reads a JSON config laid over the command defaults, so nested objects
/// such as `train` only need the keys that change.
fn read_config<T: DeserializeOwned + Serialize + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let err = |e: &dyn fmt::Display| Failure::Config(format!("{}: {e}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| err(&e))?;
    let file: Value = serde_json::from_str(&text).map_err(|e| err(&e))?;
    let mut merged = serde_json::to_value(T::default()).map_err(|e| err(&e))?;
    merge(&mut merged, file);
    serde_json::from_value(merged).map_err(|e| err(&e))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn single<T: Copy>(values: &[T], flag: &str) -> Result<Option<T>, Failure> {
    match values {
        [] => Ok(None),
        [v] => Ok(Some(*v)),
        _ => bad(format!("--{flag} takes a single value for this command")),
    }
}

/// Builds the reference and checks it has full support; any problem is a config error.
pub fn checked_reference(cfg: ReferenceConfig) -> Result<ReferenceProcess, Failure> {
    if cfg.num_categories < 2 || cfg.num_dimensions == 0 {
        return bad(format!("need S >= 2 and D >= 1, got S = {}, D = {}", cfg.num_categories, cfg.num_dimensions));
    }
    let r = cfg.build().map_err(|e| Failure::Config(e.to_string()))?;
    r.require_full_support().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(r)
}

fn exact_size(s: usize, d: usize) -> Result<(), Failure> {
    let states = (s as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if states > EXACT_STATE_LIMIT as u128 {
        return bad(format!("S^D = {states} states exceeds the exact-computation limit of {EXACT_STATE_LIMIT}"));
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<(), Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        bad(format!("{name} must be positive, got {v}"))
    }
}

/// D-IMF convergence sweep over `alpha x N`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    #[serde(rename = "ref")]
    pub reference: ReferenceKind,
    pub alpha: Vec<f64>,
    #[serde(rename = "S")]
    pub num_categories: usize,
    #[serde(rename = "D")]
    pub num_dimensions: usize,
    #[serde(rename = "N")]
    pub num_intermediate: Vec<usize>,
    /// Budget of Markovian projections.
    pub max_iters: usize,
    /// Stop once the path KL to the bridge is below this.
    pub kl_tol: f64,
    /// Sup-norm tolerance for declaring the final coupling equal to the plan.
    pub match_tol: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    pub seed: u64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            reference: ReferenceKind::Gaussian,
            alpha: vec![0.3, 0.5, 0.7],
            num_categories: 50,
            num_dimensions: 1,
            num_intermediate: vec![4],
            max_iters: 200,
            kl_tol: 1e-14,
            match_tol: 1e-6,
            sinkhorn_max_iters: 200_000,
            sinkhorn_tol: 1e-14,
            seed: 0,
        }
    }
}

impl ConvergenceConfig {
    pub fn references(&self) -> Result<Vec<(f64, usize, ReferenceProcess)>, Failure> {
        let mut out = Vec::new();
        for &alpha in &self.alpha {
            for &n in &self.num_intermediate {
                let r = checked_reference(ReferenceConfig {
                    kind: self.reference,
                    alpha,
                    num_categories: self.num_categories,
                    num_dimensions: self.num_dimensions,
                    num_intermediate: n,
                })?;
                out.push((alpha, n, r));
            }
        }
        Ok(out)
    }
}

pub fn load_convergence(common: &CommonArgs, o: &ProblemOverrides) -> Result<ConvergenceConfig, Failure> {
    let mut cfg: ConvergenceConfig = read_config(common.config.as_deref())?;
    if let Some(s) = o.s {
        cfg.num_categories = s;
    }
    if let Some(d) = o.d {
        cfg.num_dimensions = d;
    }
    if !o.n.is_empty() {
        cfg.num_intermediate = o.n.clone();
    }
    if let Some(k) = o.reference {
        cfg.reference = k;
    }
    if !o.alpha.is_empty() {
        cfg.alpha = o.alpha.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if cfg.alpha.is_empty() || cfg.num_intermediate.is_empty() {
        return bad("alpha and N need at least one value each");
    }
    if cfg.max_iters == 0 || cfg.sinkhorn_max_iters == 0 {
        return bad("iteration budgets must be >= 1");
    }
    if !(cfg.kl_tol >= 0.0) {
        return bad("kl_tol must be >= 0");
    }
    positive("match_tol", cfg.match_tol)?;
    positive("sinkhorn_tol", cfg.sinkhorn_tol)?;
    exact_size(cfg.num_categories, cfg.num_dimensions)?;
    cfg.references()?;
    Ok(cfg)
}

fn toy_train_defaults() -> TrainConfig {
    TrainConfig {
        lambda_simple: 3.0,
        outer_iterations: 2,
        steps_per_phase: 3500,
        batch_size: 256,
        learning_rate: 2.0,
        optimizer: Optimizer::Adagrad,
        model_init: ModelInit::Reference,
        reference_floor: 12.0,
        ..Default::default()
    }
}

/// CSBM from a 2D Gaussian to a swiss roll.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toy2dConfig {
    #[serde(rename = "ref")]
    pub reference: ReferenceKind,
    pub alpha: f64,
    #[serde(rename = "S")]
    pub num_categories: usize,
    #[serde(rename = "D")]
    pub num_dimensions: usize,
    #[serde(rename = "N")]
    pub num_intermediate: usize,
    pub box_min: f64,
    pub box_max: f64,
    pub swiss_roll: SwissRollParams,
    pub train: TrainConfig,
    /// Rollouts used for the terminal-marginal and jump statistics.
    pub eval_samples: usize,
    /// Rollouts written out in full.
    pub trajectories: usize,
    pub seed: u64,
}

impl Default for Toy2dConfig {
    fn default() -> Self {
        Self {
            reference: ReferenceKind::Gaussian,
            alpha: 0.02,
            num_categories: 50,
            num_dimensions: 2,
            num_intermediate: 10,
            box_min: -5.0,
            box_max: 5.0,
            swiss_roll: SwissRollParams::default(),
            train: toy_train_defaults(),
            eval_samples: 100_000,
            trajectories: 256,
            seed: 0,
        }
    }
}

impl Toy2dConfig {
    pub fn grid(&self) -> Result<GridSpec2D, Failure> {
        GridSpec2D::new(self.num_categories, self.box_min, self.box_max).map_err(|e| Failure::Config(e.to_string()))
    }

    pub fn reference(&self) -> Result<ReferenceProcess, Failure> {
        checked_reference(ReferenceConfig {
            kind: self.reference,
            alpha: self.alpha,
            num_categories: self.num_categories,
            num_dimensions: self.num_dimensions,
            num_intermediate: self.num_intermediate,
        })
    }
}

fn parse_loss(s: &str) -> Result<LossKind, Failure> {
    match s {
        "kl" => Ok(LossKind::Kl),
        "mse" => Ok(LossKind::Mse),
        other => bad(format!("unknown loss `{other}` (expected kl or mse)")),
    }
}

fn parse_init(s: &str) -> Result<InitCoupling, Failure> {
    match s {
        "independent" => Ok(InitCoupling::Independent),
        "minibatch" | "minibatch_ot" => Ok(InitCoupling::MinibatchOt),
        other => bad(format!("unknown init `{other}` (expected independent or minibatch)")),
    }
}

pub fn load_toy2d(common: &CommonArgs, o: &ProblemOverrides, t: &TrainOverrides) -> Result<Toy2dConfig, Failure> {
    let mut cfg: Toy2dConfig = read_config(common.config.as_deref())?;
    if let Some(s) = o.s {
        cfg.num_categories = s;
    }
    if let Some(d) = o.d {
        cfg.num_dimensions = d;
    }
    if let Some(n) = single(&o.n, "N")? {
        cfg.num_intermediate = n;
    }
    if let Some(k) = o.reference {
        cfg.reference = k;
    }
    if let Some(a) = single(&o.alpha, "alpha")? {
        cfg.alpha = a;
    }
    if let Some(l) = &t.loss {
        cfg.train.loss = parse_loss(l)?;
    }
    if let Some(i) = &t.init {
        cfg.train.init = parse_init(i)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    cfg.train.deterministic |= common.deterministic;
    if cfg.num_dimensions != 2 {
        return bad(format!("the toy experiment is two-dimensional, got D = {}", cfg.num_dimensions));
    }
    if cfg.eval_samples == 0 {
        return bad("eval_samples must be >= 1");
    }
    if cfg.trajectories > cfg.eval_samples {
        return bad("trajectories cannot exceed eval_samples");
    }
    cfg.grid()?;
    cfg.swiss_roll_check()?;
    cfg.train.validate().map_err(|e| Failure::Config(e.to_string()))?;
    cfg.reference()?;
    Ok(cfg)
}

impl Toy2dConfig {
    fn swiss_roll_check(&self) -> Result<(), Failure> {
        let p = &self.swiss_roll;
        if !(p.t_max_pi > p.t_min_pi && p.t_min_pi >= 0.0) {
            return bad("swiss roll needs 0 <= t_min_pi < t_max_pi");
        }
        if !(p.radius_frac > 0.0 && p.noise_frac >= 0.0) {
            return bad("swiss roll needs radius_frac > 0 and noise_frac >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalKind {
    Uniform,
    /// Per-coordinate weights proportional to `1, .., S`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `-log` of the end-to-end reference transition.
    Reference,
    /// Zero cost everywhere; the plan is the product coupling.
    Constant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    #[serde(rename = "ref")]
    pub reference: ReferenceKind,
    pub alpha: f64,
    #[serde(rename = "S")]
    pub num_categories: usize,
    #[serde(rename = "D")]
    pub num_dimensions: usize,
    #[serde(rename = "N")]
    pub num_intermediate: usize,
    pub p0: MarginalKind,
    pub p1: MarginalKind,
    pub cost: CostKind,
    pub max_iters: usize,
    pub tol: f64,
    /// Number of random competitors in the optimality check; 0 skips it.
    pub optimality_competitors: usize,
    pub seed: u64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            reference: ReferenceKind::Gaussian,
            alpha: 0.5,
            num_categories: 50,
            num_dimensions: 1,
            num_intermediate: 4,
            p0: MarginalKind::Uniform,
            p1: MarginalKind::Linear,
            cost: CostKind::Reference,
            max_iters: 200_000,
            tol: 1e-12,
            optimality_competitors: 8,
            seed: 0,
        }
    }
}

impl SinkhornConfig {
    pub fn reference(&self) -> Result<ReferenceProcess, Failure> {
        checked_reference(ReferenceConfig {
            kind: self.reference,
            alpha: self.alpha,
            num_categories: self.num_categories,
            num_dimensions: self.num_dimensions,
            num_intermediate: self.num_intermediate,
        })
    }
}

pub fn load_sinkhorn(common: &CommonArgs, o: &ProblemOverrides) -> Result<SinkhornConfig, Failure> {
    let mut cfg: SinkhornConfig = read_config(common.config.as_deref())?;
    if let Some(s) = o.s {
        cfg.num_categories = s;
    }
    if let Some(d) = o.d {
        cfg.num_dimensions = d;
    }
    if let Some(n) = single(&o.n, "N")? {
        cfg.num_intermediate = n;
    }
    if let Some(k) = o.reference {
        cfg.reference = k;
    }
    if let Some(a) = single(&o.alpha, "alpha")? {
        cfg.alpha = a;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if cfg.max_iters == 0 {
        return bad("max_iters must be >= 1");
    }
    positive("tol", cfg.tol)?;
    exact_size(cfg.num_categories, cfg.num_dimensions)?;
    cfg.reference()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Random instances per property.
    pub cases: usize,
    pub inject_perturbation: bool,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            cases: 10,
            inject_perturbation: false,
            seed: 0,
        }
    }
}

pub fn load_verify(common: &CommonArgs, inject: bool) -> Result<VerifyConfig, Failure> {
    let mut cfg: VerifyConfig = read_config(common.config.as_deref())?;
    cfg.inject_perturbation |= inject;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if cfg.cases == 0 {
        return bad("cases must be >= 1");
    }
    Ok(cfg)
}
