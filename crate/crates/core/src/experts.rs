//! The two prediction experts.
//!
//! The rule-based expert extrapolates the last observed state with constant
//! velocity and heading. The learned expert is a compact multi-modal
//! regressor: a dense encoder over flattened ego-history features plus
//! mean-pooled context attributes, K regression heads emitting per-step
//! offsets, and a K-way logit head. Training minimizes a hard-assignment
//! mixture negative log-likelihood with analytic gradients.

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ade;
use crate::nn::{log_sum_exp, softmax, Activation, DenseLayer, Mlp, MlpGrad};
use crate::prediction::{ExpertKind, PredictionCandidate, PredictionSet, SetSource};
use crate::scene::{Frame, Scene, Trajectory, Waypoint};

pub const DEFAULT_K_MODES: usize = 6;
pub const DEFAULT_EMBED_WIDTH: usize = 64;
pub const DEFAULT_ATTR_WIDTH: usize = 4;

/// Isotropic regression sigma of the mixture likelihood, in meters.
pub const SIGMA_G: f64 = 1.0;

/// Positions and velocities are divided by this before entering a network,
/// keeping tanh layers away from saturation at driving scales.
pub const COORD_SCALE: f64 = 0.02;

/// Candidate waypoints enter the router as per-step offsets (at most a few
/// meters each), scaled separately so every horizon length lands in the same
/// numeric range.
pub const OFFSET_SCALE: f64 = 0.2;

/// Long candidates are subsampled to at most this many waypoints before
/// entering the router, keeping its input dimension (and sample complexity)
/// horizon-independent.
pub const MAX_ROUTER_WAYPOINTS: usize = 20;

/// Input layout shared by the learned expert and the routing function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub t_history: usize,
    pub t_future: usize,
    pub attr_width: usize,
}

impl FeatureSpec {
    pub fn new(t_history: usize, t_future: usize, attr_width: usize) -> Self {
        Self {
            t_history,
            t_future,
            attr_width,
        }
    }

    /// Flattened history (5 values per step) plus pooled context attributes.
    pub fn scene_feature_dim(&self) -> usize {
        self.t_history * 5 + self.attr_width
    }

    /// Flattened (possibly subsampled) candidate waypoints.
    pub fn candidate_feature_dim(&self) -> usize {
        2 * self.t_future.min(MAX_ROUTER_WAYPOINTS)
    }

    /// Extract the encoder input from an ego-frame scene.
    pub fn scene_features(&self, scene: &Scene) -> Result<Vec<f64>> {
        if !matches!(scene.frame, Frame::Ego(_)) {
            return Err(Error::validation(format!(
                "scene `{}` must be in the ego frame",
                scene.id
            )));
        }
        if scene.horizon.t_history != self.t_history || scene.horizon.t_future != self.t_future {
            return Err(Error::shape(format!(
                "scene horizon ({}, {}) != trained horizon ({}, {})",
                scene.horizon.t_history, scene.horizon.t_future, self.t_history, self.t_future
            )));
        }
        let mut features = Vec::with_capacity(self.scene_feature_dim());
        for state in &scene.ego_history.states {
            features.push(state.x * COORD_SCALE);
            features.push(state.y * COORD_SCALE);
            features.push(state.vx * COORD_SCALE);
            features.push(state.vy * COORD_SCALE);
            features.push(state.heading);
        }
        // Mean-pool context attributes; no context pools to zeros.
        let mut pooled = vec![0.0; self.attr_width];
        if !scene.context.is_empty() {
            for feature in &scene.context {
                if feature.attributes.len() != self.attr_width {
                    return Err(Error::shape(format!(
                        "context attribute width {} != expected {}",
                        feature.attributes.len(),
                        self.attr_width
                    )));
                }
                for (p, a) in pooled.iter_mut().zip(&feature.attributes) {
                    *p += a;
                }
            }
            let n = scene.context.len() as f64;
            for p in &mut pooled {
                *p = *p / n * COORD_SCALE;
            }
        }
        features.extend_from_slice(&pooled);
        Ok(features)
    }

    /// Flattened candidate waypoints for the router, expressed as rescaled
    /// offsets between consecutive sample points (the first relative to the
    /// ego origin). Horizons longer than [`MAX_ROUTER_WAYPOINTS`] are
    /// subsampled on an even grid that always includes the final waypoint,
    /// with offsets normalized by the sampling stride.
    pub fn candidate_features(&self, candidate: &PredictionCandidate) -> Result<Vec<f64>> {
        if candidate.waypoints.len() != self.t_future {
            return Err(Error::shape(format!(
                "candidate length {} != t_future {}",
                candidate.waypoints.len(),
                self.t_future
            )));
        }
        let n_samples = self.t_future.min(MAX_ROUTER_WAYPOINTS);
        let scale = OFFSET_SCALE * n_samples as f64 / self.t_future as f64;
        let mut features = Vec::with_capacity(self.candidate_feature_dim());
        let mut prev = [0.0, 0.0];
        for k in 0..n_samples {
            let idx = (k + 1) * self.t_future / n_samples - 1;
            let wp = candidate.waypoints[idx];
            features.push((wp[0] - prev[0]) * scale);
            features.push((wp[1] - prev[1]) * scale);
            prev = wp;
        }
        Ok(features)
    }
}

/// Parameters of the learned multi-modal predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedExpertParams {
    pub feature_spec: FeatureSpec,
    /// Scene encoder: feature vector -> embedding.
    pub encoder: Mlp,
    /// K single-layer regression heads, each emitting `2 * t_future` offsets.
    pub mode_heads: Vec<Mlp>,
    /// K-way mode classification head.
    pub mode_logit_head: Mlp,
}

impl LearnedExpertParams {
    /// Fresh parameters: encoder layers uniform in `+/- 1/sqrt(fan_in)`,
    /// output heads all zero, so an untrained model predicts the origin with
    /// uniform mode confidences.
    pub fn init(feature_spec: FeatureSpec, k_modes: usize, embed_width: usize, seed: u64) -> Self {
        assert!(k_modes >= 1, "k_modes must be >= 1");
        let mut rng = StdRng::seed_from_u64(seed);
        let in_dim = feature_spec.scene_feature_dim();
        let encoder = Mlp::new(vec![
            DenseLayer::init(in_dim, embed_width, Activation::Tanh, &mut rng),
            DenseLayer::init(embed_width, embed_width, Activation::Tanh, &mut rng),
        ]);
        let out_dim = 2 * feature_spec.t_future;
        let mode_heads = (0..k_modes)
            .map(|_| Mlp::new(vec![DenseLayer::zeros(embed_width, out_dim, Activation::Identity)]))
            .collect();
        let mode_logit_head =
            Mlp::new(vec![DenseLayer::zeros(embed_width, k_modes, Activation::Identity)]);
        Self {
            feature_spec,
            encoder,
            mode_heads,
            mode_logit_head,
        }
    }

    pub fn k_modes(&self) -> usize {
        self.mode_heads.len()
    }

    pub fn embed_width(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate_finite()?;
        self.mode_logit_head.validate_finite()?;
        if self.mode_heads.is_empty() {
            return Err(Error::validation("expert needs at least one mode head"));
        }
        let out_dim = 2 * self.feature_spec.t_future;
        for head in &self.mode_heads {
            head.validate_finite()?;
            if head.output_dim() != out_dim {
                return Err(Error::shape(format!(
                    "mode head output {} != 2 * t_future {}",
                    head.output_dim(),
                    out_dim
                )));
            }
        }
        if self.mode_logit_head.output_dim() != self.k_modes() {
            return Err(Error::shape("logit head width != number of modes"));
        }
        if self.encoder.input_dim() != self.feature_spec.scene_feature_dim() {
            return Err(Error::shape("encoder input != scene feature dim"));
        }
        Ok(())
    }
}

/// Gradients matching [`LearnedExpertParams`].
#[derive(Debug, Clone)]
pub struct ExpertGrad {
    pub encoder: MlpGrad,
    pub mode_heads: Vec<MlpGrad>,
    pub mode_logit_head: MlpGrad,
}

impl ExpertGrad {
    fn zeros(params: &LearnedExpertParams) -> Self {
        Self {
            encoder: params.encoder.zero_grad(),
            mode_heads: params.mode_heads.iter().map(Mlp::zero_grad).collect(),
            mode_logit_head: params.mode_logit_head.zero_grad(),
        }
    }

    fn accumulate(&mut self, other: &ExpertGrad) {
        self.encoder.accumulate(&other.encoder);
        for (mine, theirs) in self.mode_heads.iter_mut().zip(&other.mode_heads) {
            mine.accumulate(theirs);
        }
        self.mode_logit_head.accumulate(&other.mode_logit_head);
    }

    fn scale(&mut self, factor: f64) {
        self.encoder.scale(factor);
        for head in &mut self.mode_heads {
            head.scale(factor);
        }
        self.mode_logit_head.scale(factor);
    }
}

/// Hyperparameters of the concurrent expert/router training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_predictor: f64,
    pub lr_router: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Both learning rates are multiplied by this factor...
    pub lr_decay_factor: f64,
    /// ...once every this many epochs.
    pub lr_decay_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for lr in [self.lr_predictor, self.lr_router] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::validation("learning rates must be > 0"));
            }
        }
        if self.batch_size < 1 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::validation("lr_decay_factor must be in (0, 1]"));
        }
        if self.lr_decay_every < 1 {
            return Err(Error::validation("lr_decay_every must be >= 1"));
        }
        Ok(())
    }

    /// Step-decayed learning rate at a given epoch.
    pub fn decayed(&self, base: f64, epoch: usize) -> f64 {
        base * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_predictor: 1e-4,
            lr_router: 3e-3,
            epochs: 10,
            batch_size: 32,
            seed: 1,
            lr_decay_factor: 0.5,
            lr_decay_every: 2,
        }
    }
}

/// Extrapolate the last observed state with constant velocity and heading.
pub fn const_velocity_predict(history: &Trajectory, t_future: usize) -> PredictionSet {
    let last = history.last();
    let dt = history.dt;
    let mut waypoints = Vec::with_capacity(t_future);
    let (mut x, mut y) = (last.x, last.y);
    for _ in 0..t_future {
        x += last.vx * dt;
        y += last.vy * dt;
        waypoints.push([x, y]);
    }
    PredictionSet {
        candidates: vec![PredictionCandidate {
            waypoints,
            confidence: 1.0,
            source: ExpertKind::Rule,
        }],
        source: SetSource::Rule,
    }
}

/// Run the learned expert on an ego-frame scene. Waypoints are the cumulative
/// sum of predicted per-step offsets from the origin; confidences are the
/// softmax of the mode logits.
pub fn learned_predict(params: &LearnedExpertParams, scene: &Scene) -> Result<PredictionSet> {
    let features = params.feature_spec.scene_features(scene)?;
    let embedding = params.encoder.forward(&features);
    let logits = params.mode_logit_head.forward(&embedding);
    let confidences = softmax(&logits);

    let t_future = params.feature_spec.t_future;
    let mut candidates = Vec::with_capacity(params.k_modes());
    for (head, &confidence) in params.mode_heads.iter().zip(&confidences) {
        let offsets = head.forward(&embedding);
        let mut waypoints = Vec::with_capacity(t_future);
        let (mut x, mut y) = (0.0, 0.0);
        for t in 0..t_future {
            x += offsets[2 * t];
            y += offsets[2 * t + 1];
            waypoints.push([x, y]);
        }
        candidates.push(PredictionCandidate {
            waypoints,
            confidence,
            source: ExpertKind::Learned,
        });
    }
    Ok(PredictionSet {
        candidates,
        source: SetSource::Learned,
    })
}

/// Hard-assignment mixture NLL and its analytic gradient for one scene.
///
/// The mode closest to the ground truth by ADE carries the regression term
/// `sum_t ||wp_t - gt_t||^2 / (2 sigma^2)`; the logit head is trained with
/// cross-entropy toward that mode. Only the selected mode's regression head
/// receives regression gradient.
pub fn predictor_loss_and_grad(
    params: &LearnedExpertParams,
    scene: &Scene,
) -> Result<(f64, ExpertGrad)> {
    let gt = scene.ground_truth()?;
    let features = params.feature_spec.scene_features(scene)?;

    let encoder_trace = params.encoder.forward_traced(&features);
    let embedding = encoder_trace.output().to_vec();
    let t_future = params.feature_spec.t_future;

    // Forward every head; pick the mode with the smallest ADE (lowest index
    // wins ties).
    let mut head_traces = Vec::with_capacity(params.k_modes());
    let mut mode_waypoints: Vec<Vec<Waypoint>> = Vec::with_capacity(params.k_modes());
    for head in &params.mode_heads {
        let trace = head.forward_traced(&embedding);
        let offsets = trace.output();
        let mut waypoints = Vec::with_capacity(t_future);
        let (mut x, mut y) = (0.0, 0.0);
        for t in 0..t_future {
            x += offsets[2 * t];
            y += offsets[2 * t + 1];
            waypoints.push([x, y]);
        }
        mode_waypoints.push(waypoints);
        head_traces.push(trace);
    }
    let mut selected = 0usize;
    let mut best_ade = f64::INFINITY;
    for (idx, waypoints) in mode_waypoints.iter().enumerate() {
        let mode_ade = ade(waypoints, gt)?;
        if mode_ade < best_ade {
            best_ade = mode_ade;
            selected = idx;
        }
    }

    // Regression term on the selected mode.
    let inv_var = 1.0 / (SIGMA_G * SIGMA_G);
    let mut reg_loss = 0.0;
    let mut d_waypoints = vec![[0.0; 2]; t_future];
    for (t, (wp, state)) in mode_waypoints[selected].iter().zip(&gt.states).enumerate() {
        let ex = wp[0] - state.x;
        let ey = wp[1] - state.y;
        reg_loss += 0.5 * inv_var * (ex * ex + ey * ey);
        d_waypoints[t] = [inv_var * ex, inv_var * ey];
    }

    // d offset_t = sum over later waypoints of their gradient (cumulative sum
    // in reverse).
    let mut d_offsets = vec![0.0; 2 * t_future];
    let (mut sx, mut sy) = (0.0, 0.0);
    for t in (0..t_future).rev() {
        sx += d_waypoints[t][0];
        sy += d_waypoints[t][1];
        d_offsets[2 * t] = sx;
        d_offsets[2 * t + 1] = sy;
    }

    // Cross-entropy of the logits against the selected mode.
    let logit_trace = params.mode_logit_head.forward_traced(&embedding);
    let logits = logit_trace.output();
    let ce_loss = log_sum_exp(logits) - logits[selected];
    let mut d_logits = softmax(logits);
    d_logits[selected] -= 1.0;

    let loss = reg_loss + ce_loss;

    // Backward: selected head and logit head feed the encoder.
    let mut grad = ExpertGrad::zeros(params);
    let (head_grad, d_embed_head) =
        params.mode_heads[selected].backward(&head_traces[selected], &d_offsets);
    grad.mode_heads[selected] = head_grad;
    let (logit_grad, d_embed_logits) =
        params.mode_logit_head.backward(&logit_trace, &d_logits);
    grad.mode_logit_head = logit_grad;

    let d_embedding: Vec<f64> = d_embed_head
        .iter()
        .zip(&d_embed_logits)
        .map(|(a, b)| a + b)
        .collect();
    let (encoder_grad, _) = params.encoder.backward(&encoder_trace, &d_embedding);
    grad.encoder = encoder_grad;

    Ok((loss, grad))
}

/// One gradient-descent step on the mean loss over a batch of scenes.
/// Returns the updated parameters and the mean loss; the input is untouched.
pub fn predictor_update(
    params: &LearnedExpertParams,
    batch: &[Scene],
    lr: f64,
) -> Result<(LearnedExpertParams, f64)> {
    if batch.is_empty() {
        return Err(Error::validation("predictor batch is empty"));
    }
    let mut total = ExpertGrad::zeros(params);
    let mut loss_sum = 0.0;
    for scene in batch {
        let (loss, grad) = predictor_loss_and_grad(params, scene)?;
        loss_sum += loss;
        total.accumulate(&grad);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);

    let mut updated = params.clone();
    updated.encoder.step(&total.encoder, lr);
    for (head, grad) in updated.mode_heads.iter_mut().zip(&total.mode_heads) {
        head.step(grad, lr);
    }
    updated.mode_logit_head.step(&total.mode_logit_head, lr);
    Ok((updated, loss_sum * inv))
}

/// Deterministic scene fixtures shared by the unit tests of this crate.
#[cfg(test)]
pub(crate) mod test_fixtures {
    use super::*;
    use crate::scene::{to_ego_frame, AgentState, HorizonSpec};

    /// Pseudo-random world scene with ground truth, transformed to ego frame.
    pub(crate) fn ego_scene(seed: u64, t_history: usize, t_future: usize) -> Scene {
        let mut rng_state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let dt = 0.1;
        let mut states = Vec::new();
        let (mut x, mut y) = (next() * 10.0, next() * 10.0);
        let heading = next() * 3.0;
        let speed = 8.0 + next() * 4.0;
        let omega = next() * 0.4;
        let mut h = heading;
        for _ in 0..t_history + t_future {
            let vx = speed * h.cos();
            let vy = speed * h.sin();
            states.push(AgentState::new(x, y, vx, vy, h).unwrap());
            x += vx * dt;
            y += vy * dt;
            h += omega * dt;
        }
        let horizon = HorizonSpec::new(t_history, t_future, dt).unwrap();
        let history = Trajectory::new(states[..t_history].to_vec(), dt).unwrap();
        let future = Trajectory::new(states[t_history..].to_vec(), dt).unwrap();
        let scene = Scene::new(
            format!("scene-{seed}"),
            horizon,
            history,
            vec![],
            Some(future),
            "unit",
        )
        .unwrap();
        to_ego_frame(&scene).unwrap()
    }
}
