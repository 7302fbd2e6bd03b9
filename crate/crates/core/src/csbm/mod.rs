//! Categorical bridge matching with tabular endpoint models.
//!
//! A model predicts an endpoint per coordinate and mixes the reference bridge
//! step over that prediction. Forward models are fitted on pairs drawn from
//! the backward model and vice versa.

mod coupling;
mod loss;
mod model;
mod objective;
mod train;

pub use coupling::minibatch_ot_coupling;
pub use loss::{
    batch_loss, loss_kl_backward, loss_kl_forward, loss_mse_backward, loss_mse_forward, sample_point, LossKind,
    LossPoint, LossValue, SparseGradient,
};
pub use model::{
    induced_chain, induced_coupling, model_transition, model_transition_matrix, rollout, BridgeCache, Direction,
    TabularEndpointModel,
};
pub use objective::{expected_loss, optimal_endpoint_model};
pub use train::{
    csbm_train, rollout_batch, rollout_endpoints, with_pool, write_metrics_csv, InitCoupling, ModelInit, Optimizer, PhaseMetric,
    TrainConfig, TrainOutput, THREADS_ENV,
};
