//! Trajectory-prediction ensemble with a learned routing function.
//!
//! Two experts forecast an ego vehicle's future: a closed-form
//! constant-velocity model and a compact multi-modal neural regressor. A
//! routing function, trained concurrently with the regressor on pairwise ADE
//! rankings of both experts' outputs, picks the more reliable prediction per
//! scene at inference time. The crate also ships the evaluation metrics
//! (minADE, minFDE, miss rate, mAP), a bootstrap-variance fallback router, a
//! synthetic scenario generator with a controllable distribution-shift axis,
//! and binary checkpointing.

pub mod checkpoint;
pub mod error;
pub mod experts;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prediction;
pub mod routing;
pub mod scenariogen;
pub mod scene;

pub use error::{Error, Result};
pub use experts::{
    const_velocity_predict, learned_predict, predictor_loss_and_grad, predictor_update,
    FeatureSpec, LearnedExpertParams, TrainConfig,
};
pub use metrics::{
    evaluate, is_miss, map_score, min_ade, min_fde, perf_gain, MetricReport, MissTolerance,
};
pub use pipeline::{
    attach_bootstrap, infer, infer_dataset, pair_candidates, train, train_with_dims, ModelDims,
    PairingMode, RouterKind, RoutingBuffer, TrainOutput, TrainedEnsemble,
};
pub use prediction::{ExpertKind, PredictionCandidate, PredictionSet, SetSource};
pub use routing::{
    route_score, router_update, routing_loss_and_grad, select_prediction, variance_route,
    variance_statistic, RankingLink, RouterParams, RoutingPair, SelectionMode,
    VarianceRouterConfig,
};
pub use scenariogen::{
    derive_seed, generate, generate_mixture, load_scenes, save_scenes, DistributionSpec, MixSpec,
};
pub use scene::{
    displacement, from_ego_frame, split_history_future, to_ego_frame, AgentState, ContextFeature,
    ContextKind, Frame, HorizonSpec, Scene, Trajectory, Waypoint,
};
