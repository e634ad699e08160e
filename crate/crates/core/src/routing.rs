//! The learned routing function and the bootstrap-variance baseline router.
//!
//! The router scores a (scene, candidate) pair: the scene runs through a
//! frozen copy of the expert's encoder, the candidate waypoints through a
//! dedicated encoder, and a dense head maps the concatenated embeddings to a
//! scalar. Training minimizes a pairwise ranking loss over (chosen, rejected)
//! candidate pairs labeled by ADE against ground truth; router updates never
//! touch the shared encoder.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::experts::{FeatureSpec, LearnedExpertParams};
use crate::nn::{Activation, DenseLayer, Mlp, MlpGrad, MlpTrace};
use crate::prediction::{PredictionCandidate, PredictionSet, SetSource};
use crate::scene::Scene;

/// Floor used by the literal-ReLU reading of the ranking loss.
pub const RELU_EPS: f64 = 1e-6;

/// Link applied to the score gap inside the ranking loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankingLink {
    /// `-log(sigmoid(delta))`; the default.
    #[default]
    Logistic,
    /// `-log(max(delta, RELU_EPS))`, the literal ReLU reading.
    ReluEps,
}

/// Router parameters. `shared_encoder` is a copy of the expert's scene
/// encoder and stays frozen through [`router_update`]; the training loop
/// refreshes it after each predictor update.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub feature_spec: FeatureSpec,
    pub shared_encoder: Mlp,
    pub candidate_encoder: Mlp,
    pub routing_head: Mlp,
}

impl RouterParams {
    /// Initialize from a learned expert: the scene encoder is cloned, the
    /// candidate encoder is randomly initialized, and the routing head's
    /// output layer starts at zero so fresh routers score everything 0.
    pub fn init(expert: &LearnedExpertParams, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let embed = expert.embed_width();
        let cand_in = expert.feature_spec.candidate_feature_dim();
        let candidate_encoder = Mlp::new(vec![
            DenseLayer::init(cand_in, embed, Activation::Tanh, &mut rng),
            DenseLayer::init(embed, embed, Activation::Tanh, &mut rng),
        ]);
        let routing_head = Mlp::new(vec![
            DenseLayer::init(2 * embed, embed, Activation::Tanh, &mut rng),
            DenseLayer::init(embed, embed, Activation::Tanh, &mut rng),
            DenseLayer::zeros(embed, 1, Activation::Identity),
        ]);
        Self {
            feature_spec: expert.feature_spec,
            shared_encoder: expert.encoder.clone(),
            candidate_encoder,
            routing_head,
        }
    }

    /// Adopt the expert's current encoder (the shared backbone).
    pub fn refresh_shared_encoder(&mut self, expert: &LearnedExpertParams) {
        self.shared_encoder = expert.encoder.clone();
    }

    pub fn validate(&self) -> Result<()> {
        self.shared_encoder.validate_finite()?;
        self.candidate_encoder.validate_finite()?;
        self.routing_head.validate_finite()?;
        if self.routing_head.output_dim() != 1 {
            return Err(Error::shape("routing head must emit one scalar"));
        }
        if self.shared_encoder.input_dim() != self.feature_spec.scene_feature_dim() {
            return Err(Error::shape("shared encoder input != scene feature dim"));
        }
        if self.candidate_encoder.input_dim() != self.feature_spec.candidate_feature_dim() {
            return Err(Error::shape(
                "candidate encoder input != candidate feature dim",
            ));
        }
        Ok(())
    }

    pub(crate) fn score_from_features(
        &self,
        scene_features: &[f64],
        candidate: &PredictionCandidate,
    ) -> Result<f64> {
        if scene_features.len() != self.shared_encoder.input_dim() {
            return Err(Error::shape(format!(
                "scene feature dim {} != encoder input {}",
                scene_features.len(),
                self.shared_encoder.input_dim()
            )));
        }
        let scene_embedding = self.shared_encoder.forward(scene_features);
        let cand_features = self.feature_spec.candidate_features(candidate)?;
        let cand_embedding = self.candidate_encoder.forward(&cand_features);
        let mut joint = scene_embedding;
        joint.extend_from_slice(&cand_embedding);
        Ok(self.routing_head.forward(&joint)[0])
    }

    /// Score one candidate recording the traces needed for backprop.
    fn traced_score(
        &self,
        scene_embedding: &[f64],
        candidate: &PredictionCandidate,
    ) -> Result<(f64, MlpTrace, MlpTrace)> {
        let cand_features = self.feature_spec.candidate_features(candidate)?;
        let cand_trace = self.candidate_encoder.forward_traced(&cand_features);
        let mut joint = scene_embedding.to_vec();
        joint.extend_from_slice(cand_trace.output());
        let head_trace = self.routing_head.forward_traced(&joint);
        let score = head_trace.output()[0];
        Ok((score, cand_trace, head_trace))
    }
}

/// Reliability score for one candidate in one ego-frame scene; higher means
/// more reliable.
pub fn route_score(
    params: &RouterParams,
    scene: &Scene,
    candidate: &PredictionCandidate,
) -> Result<f64> {
    let features = params.feature_spec.scene_features(scene)?;
    params.score_from_features(&features, candidate)
}

/// A (chosen, rejected) training record; the chosen candidate is the one with
/// the smaller ADE against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPair {
    pub scene_id: String,
    /// Scene features at pair-collection time (encoder input).
    pub scene_features: Vec<f64>,
    pub chosen: PredictionCandidate,
    pub rejected: PredictionCandidate,
    pub ade_chosen: f64,
    pub ade_rejected: f64,
}

impl RoutingPair {
    pub fn new(
        scene_id: impl Into<String>,
        scene_features: Vec<f64>,
        chosen: PredictionCandidate,
        rejected: PredictionCandidate,
        ade_chosen: f64,
        ade_rejected: f64,
    ) -> Result<Self> {
        if !ade_chosen.is_finite() || !ade_rejected.is_finite() || ade_chosen > ade_rejected {
            return Err(Error::validation(format!(
                "chosen ADE {ade_chosen} must be <= rejected ADE {ade_rejected}"
            )));
        }
        Ok(Self {
            scene_id: scene_id.into(),
            scene_features,
            chosen,
            rejected,
            ade_chosen,
            ade_rejected,
        })
    }
}

/// Gradients for the trainable router parts. The shared encoder has no slot
/// here: it is frozen by construction.
#[derive(Debug, Clone)]
pub struct RouterGrad {
    pub candidate_encoder: MlpGrad,
    pub routing_head: MlpGrad,
}

impl RouterGrad {
    fn zeros(params: &RouterParams) -> Self {
        Self {
            candidate_encoder: params.candidate_encoder.zero_grad(),
            routing_head: params.routing_head.zero_grad(),
        }
    }

    fn accumulate(&mut self, other: &RouterGrad) {
        self.candidate_encoder.accumulate(&other.candidate_encoder);
        self.routing_head.accumulate(&other.routing_head);
    }

    fn scale(&mut self, factor: f64) {
        self.candidate_encoder.scale(factor);
        self.routing_head.scale(factor);
    }
}

/// `-log(sigmoid(delta))`, computed stably.
fn logistic_loss(delta: f64) -> f64 {
    if delta > 0.0 {
        (-delta).exp().ln_1p()
    } else {
        -delta + delta.exp().ln_1p()
    }
}

/// Ranking loss and analytic gradient for one pair.
pub fn routing_loss_and_grad(
    params: &RouterParams,
    pair: &RoutingPair,
    link: RankingLink,
) -> Result<(f64, RouterGrad)> {
    if pair.scene_features.len() != params.shared_encoder.input_dim() {
        return Err(Error::shape(format!(
            "pair feature dim {} != encoder input {}",
            pair.scene_features.len(),
            params.shared_encoder.input_dim()
        )));
    }
    // The scene embedding is input to the routing head; no gradient flows
    // back into the shared encoder.
    let scene_embedding = params.shared_encoder.forward(&pair.scene_features);

    let (score_chosen, chosen_cand_trace, chosen_head_trace) =
        params.traced_score(&scene_embedding, &pair.chosen)?;
    let (score_rejected, rejected_cand_trace, rejected_head_trace) =
        params.traced_score(&scene_embedding, &pair.rejected)?;

    let delta = score_chosen - score_rejected;
    let (loss, d_delta) = match link {
        RankingLink::Logistic => {
            // d/d delta of -log(sigmoid(delta)) = sigmoid(delta) - 1.
            let sig = 1.0 / (1.0 + (-delta).exp());
            (logistic_loss(delta), sig - 1.0)
        }
        RankingLink::ReluEps => {
            if delta > RELU_EPS {
                (-(delta.ln()), -1.0 / delta)
            } else {
                (-(RELU_EPS.ln()), 0.0)
            }
        }
    };

    let mut grad = RouterGrad::zeros(params);
    let embed = scene_embedding.len();
    let mut backward_side = |d_score: f64, cand_trace, head_trace| {
        let (head_grad, d_joint) = params.routing_head.backward(head_trace, &[d_score]);
        grad.routing_head.accumulate(&head_grad);
        let (cand_grad, _) = params
            .candidate_encoder
            .backward(cand_trace, &d_joint[embed..]);
        grad.candidate_encoder.accumulate(&cand_grad);
    };
    backward_side(d_delta, &chosen_cand_trace, &chosen_head_trace);
    backward_side(-d_delta, &rejected_cand_trace, &rejected_head_trace);

    Ok((loss, grad))
}

/// One descent step on the mean pair loss. The shared encoder is bit-identical
/// before and after. Returns the updated parameters and the mean loss.
pub fn router_update(
    params: &RouterParams,
    pairs: &[&RoutingPair],
    link: RankingLink,
    lr: f64,
) -> Result<(RouterParams, f64)> {
    if pairs.is_empty() {
        return Err(Error::validation("router batch is empty"));
    }
    let mut total = RouterGrad::zeros(params);
    let mut loss_sum = 0.0;
    for pair in pairs {
        let (loss, grad) = routing_loss_and_grad(params, pair, link)?;
        loss_sum += loss;
        total.accumulate(&grad);
    }
    let inv = 1.0 / pairs.len() as f64;
    total.scale(inv);

    let mut updated = params.clone();
    updated.candidate_encoder.step(&total.candidate_encoder, lr);
    updated.routing_head.step(&total.routing_head, lr);
    Ok((updated, loss_sum * inv))
}

/// How [`select_prediction`] combines candidate scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Score each expert's set by its best candidate and return the whole
    /// winning set. The default.
    ExpertLevel,
    /// Pool all candidates and return the `k_out` best by score, with
    /// confidences renormalized.
    CandidateLevel { k_out: usize },
}

fn source_priority(source: SetSource) -> u8 {
    match source {
        SetSource::Learned => 0,
        SetSource::Rule => 1,
        SetSource::Mixed => 2,
    }
}

/// Pick the most reliable prediction from the experts' candidate sets.
/// Ties break toward the learned expert, then toward lower candidate index.
pub fn select_prediction(
    params: &RouterParams,
    scene: &Scene,
    sets: &[PredictionSet],
    mode: SelectionMode,
) -> Result<PredictionSet> {
    if sets.is_empty() {
        return Err(Error::validation("select_prediction needs at least one set"));
    }
    for set in sets {
        set.validate()?;
    }
    let features = params.feature_spec.scene_features(scene)?;
    // scores[i][j]: candidate j of set i.
    let mut scores = Vec::with_capacity(sets.len());
    for set in sets {
        let mut set_scores = Vec::with_capacity(set.len());
        for candidate in &set.candidates {
            set_scores.push(params.score_from_features(&features, candidate)?);
        }
        scores.push(set_scores);
    }

    match mode {
        SelectionMode::ExpertLevel => {
            let mut best: Option<(usize, f64, u8)> = None;
            for (idx, set) in sets.iter().enumerate() {
                let max_score = scores[idx]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let priority = source_priority(set.source);
                let better = match &best {
                    None => true,
                    Some((_, best_score, best_priority)) => {
                        max_score > *best_score
                            || (max_score == *best_score && priority < *best_priority)
                    }
                };
                if better {
                    best = Some((idx, max_score, priority));
                }
            }
            let (winner, _, _) = best.expect("at least one set");
            Ok(sets[winner].clone())
        }
        SelectionMode::CandidateLevel { k_out } => {
            if k_out < 1 {
                return Err(Error::validation("k_out must be >= 1"));
            }
            let mut pooled: Vec<(f64, u8, usize, &PredictionCandidate)> = Vec::new();
            let mut index = 0usize;
            for (set_idx, set) in sets.iter().enumerate() {
                for (cand_idx, candidate) in set.candidates.iter().enumerate() {
                    pooled.push((
                        scores[set_idx][cand_idx],
                        source_priority(set.source),
                        index,
                        candidate,
                    ));
                    index += 1;
                }
            }
            pooled.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("finite scores")
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            pooled.truncate(k_out.min(index));
            let total: f64 = pooled.iter().map(|(_, _, _, c)| c.confidence).sum();
            let candidates = pooled
                .into_iter()
                .map(|(_, _, _, c)| {
                    let mut c = c.clone();
                    if total > 0.0 {
                        c.confidence /= total;
                    }
                    c
                })
                .collect();
            Ok(PredictionSet {
                candidates,
                source: SetSource::Mixed,
            })
        }
    }
}

/// Configuration of the bootstrap-variance fallback router.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceRouterConfig {
    /// Ensemble size, including the primary expert.
    pub n_bootstrap: usize,
    /// Fall back to the rule expert above this statistic, in m^2.
    pub variance_threshold: f64,
}

impl VarianceRouterConfig {
    pub fn new(n_bootstrap: usize, variance_threshold: f64) -> Result<Self> {
        if n_bootstrap < 2 {
            return Err(Error::validation("n_bootstrap must be >= 2"));
        }
        if !variance_threshold.is_finite() || variance_threshold <= 0.0 {
            return Err(Error::validation("variance_threshold must be > 0"));
        }
        Ok(Self {
            n_bootstrap,
            variance_threshold,
        })
    }
}

/// Mean over steps of the per-step positional variance across the ensemble
/// members' top-confidence candidates (trace of the per-step covariance).
pub fn variance_statistic(ensemble_sets: &[PredictionSet]) -> Result<f64> {
    if ensemble_sets.len() < 2 {
        return Err(Error::validation("variance needs at least two members"));
    }
    let mut tops = Vec::with_capacity(ensemble_sets.len());
    for set in ensemble_sets {
        tops.push(&set.top_confidence()?.waypoints);
    }
    let len = tops[0].len();
    for wp in &tops {
        if wp.len() != len {
            return Err(Error::shape(
                "ensemble members predict different horizon lengths",
            ));
        }
    }
    let n = tops.len() as f64;
    let mut total = 0.0;
    for t in 0..len {
        let (mut mx, mut my) = (0.0, 0.0);
        for wp in &tops {
            mx += wp[t][0];
            my += wp[t][1];
        }
        mx /= n;
        my /= n;
        let mut var = 0.0;
        for wp in &tops {
            let dx = wp[t][0] - mx;
            let dy = wp[t][1] - my;
            var += dx * dx + dy * dy;
        }
        total += var / n;
    }
    Ok(total / len as f64)
}

/// Uncertainty-based fallback: if the ensemble disagrees more than the
/// threshold, return the rule expert's set, otherwise the first member's set.
/// The decision itself is invariant to member ordering.
pub fn variance_route(
    config: &VarianceRouterConfig,
    ensemble_sets: &[PredictionSet],
    rule_set: &PredictionSet,
) -> Result<PredictionSet> {
    if ensemble_sets.len() != config.n_bootstrap {
        return Err(Error::validation(format!(
            "expected {} ensemble members, got {}",
            config.n_bootstrap,
            ensemble_sets.len()
        )));
    }
    let stat = variance_statistic(ensemble_sets)?;
    if stat > config.variance_threshold {
        Ok(rule_set.clone())
    } else {
        Ok(ensemble_sets[0].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::test_fixtures;
    use crate::experts::{
        const_velocity_predict, learned_predict, FeatureSpec, DEFAULT_ATTR_WIDTH,
    };
    use crate::prediction::ExpertKind;

    fn ego_scene(seed: u64) -> Scene {
        test_fixtures::ego_scene(seed, 4, 4)
    }

    fn params_for(seed: u64) -> (LearnedExpertParams, RouterParams) {
        let spec = FeatureSpec::new(4, 4, DEFAULT_ATTR_WIDTH);
        let expert = LearnedExpertParams::init(spec, 3, 16, seed);
        let router = RouterParams::init(&expert, seed + 1);
        (expert, router)
    }

    fn candidate(points: Vec<[f64; 2]>) -> PredictionCandidate {
        PredictionCandidate {
            waypoints: points,
            confidence: 1.0,
            source: ExpertKind::Rule,
        }
    }

    fn make_pair(seed: u64, router: &RouterParams) -> RoutingPair {
        let scene = ego_scene(seed);
        let features = router.feature_spec.scene_features(&scene).unwrap();
        RoutingPair::new(
            scene.id.clone(),
            features,
            candidate(vec![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]]),
            candidate(vec![[1.0, 2.0], [2.0, 3.0], [3.0, 4.0], [4.0, 5.0]]),
            0.1,
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn fresh_router_scores_zero() {
        let (_, router) = params_for(0);
        let scene = ego_scene(1);
        let cand = candidate(vec![[0.5, 0.0], [1.0, 0.2], [1.5, 0.4], [2.0, 0.8]]);
        assert_eq!(route_score(&router, &scene, &cand).unwrap(), 0.0);
    }

    #[test]
    fn scores_are_deterministic() {
        let (_, mut router) = params_for(2);
        // Non-zero head so the score is not trivially zero.
        let n = router.routing_head.n_params();
        let flat: Vec<f64> = (0..n).map(|i| ((i % 7) as f64 - 3.0) * 1e-3).collect();
        router.routing_head.assign_params(&flat);
        let scene = ego_scene(3);
        let cand = candidate(vec![[0.5, 0.0], [1.0, 0.2], [1.5, 0.4], [2.0, 0.8]]);
        let a = route_score(&router, &scene, &cand).unwrap();
        let b = route_score(&router, &scene, &cand).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pair_invariant_enforced() {
        assert!(RoutingPair::new(
            "s",
            vec![],
            candidate(vec![[0.0, 0.0]]),
            candidate(vec![[0.0, 0.0]]),
            2.0,
            1.0,
        )
        .is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)] // 0.6931 is the pinned reference value
    fn logistic_loss_reference_values() {
        // Zero-initialized head gives delta = 0 -> loss = ln 2.
        let (_, router) = params_for(4);
        let pair = make_pair(5, &router);
        let (loss, _) = routing_loss_and_grad(&router, &pair, RankingLink::Logistic).unwrap();
        assert!((loss - 0.6931).abs() < 1e-4);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        // Direct evaluation at delta = 1 and -1.
        assert!((logistic_loss(1.0) - 0.3132616875182228).abs() < 1e-12);
        assert!((logistic_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        // relu_eps at delta = 1 -> -log 1 = 0.
        assert_eq!(-(1.0f64.ln()), 0.0);
    }

    #[test]
    fn logistic_loss_strictly_decreasing_in_delta() {
        let mut prev = f64::INFINITY;
        for i in -20..=20 {
            let loss = logistic_loss(i as f64 * 0.25);
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn router_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (_, mut router) = params_for(seed + 20);
            // Randomize the zero head so gradients flow everywhere.
            let mut rng = StdRng::seed_from_u64(seed + 77);
            let embed = router.shared_encoder.output_dim();
            router.routing_head = Mlp::new(vec![
                DenseLayer::init(2 * embed, embed, Activation::Tanh, &mut rng),
                DenseLayer::init(embed, embed, Activation::Tanh, &mut rng),
                DenseLayer::init(embed, 1, Activation::Identity, &mut rng),
            ]);
            let pair = make_pair(seed + 40, &router);
            let (_, grad) = routing_loss_and_grad(&router, &pair, RankingLink::Logistic).unwrap();

            let loss_of = |r: &RouterParams| -> f64 {
                routing_loss_and_grad(r, &pair, RankingLink::Logistic)
                    .unwrap()
                    .0
            };

            fn get_cand(r: &mut RouterParams) -> &mut Mlp {
                &mut r.candidate_encoder
            }
            fn get_head(r: &mut RouterParams) -> &mut Mlp {
                &mut r.routing_head
            }
            type Getter = fn(&mut RouterParams) -> &mut Mlp;

            let eps = 1e-6;
            let checks: [(&MlpGrad, Getter); 2] = [
                (&grad.candidate_encoder, get_cand),
                (&grad.routing_head, get_head),
            ];
            for (analytic, get) in checks {
                let mut flat_analytic = Vec::new();
                for layer in &analytic.layers {
                    flat_analytic.extend_from_slice(&layer.d_weights);
                    flat_analytic.extend_from_slice(&layer.d_bias);
                }
                let mut probe = router.clone();
                let base = get(&mut probe).flatten_params();
                let mut num_sq = 0.0;
                let mut diff_sq = 0.0;
                for i in 0..base.len() {
                    let mut plus = base.clone();
                    plus[i] += eps;
                    get(&mut probe).assign_params(&plus);
                    let lp = loss_of(&probe);
                    let mut minus = base.clone();
                    minus[i] -= eps;
                    get(&mut probe).assign_params(&minus);
                    let lm = loss_of(&probe);
                    get(&mut probe).assign_params(&base);
                    let numeric = (lp - lm) / (2.0 * eps);
                    num_sq += numeric * numeric;
                    diff_sq += (numeric - flat_analytic[i]) * (numeric - flat_analytic[i]);
                }
                let rel = diff_sq.sqrt() / num_sq.sqrt().max(1.0);
                assert!(rel < 1e-5, "relative gradient error {rel}");
            }
        }
    }

    #[test]
    fn repeated_updates_separate_a_fixed_pair() {
        let (_, mut router) = params_for(30);
        let pair = make_pair(31, &router);
        for _ in 0..100 {
            let batch = [&pair];
            router = router_update(&router, &batch, RankingLink::Logistic, 0.05)
                .unwrap()
                .0;
        }
        let s_chosen = router
            .score_from_features(&pair.scene_features, &pair.chosen)
            .unwrap();
        let s_rejected = router
            .score_from_features(&pair.scene_features, &pair.rejected)
            .unwrap();
        assert!(
            s_chosen > s_rejected,
            "chosen {s_chosen} should outscore rejected {s_rejected}"
        );
    }

    #[test]
    fn router_update_freezes_shared_encoder_and_zero_lr_is_identity() {
        let (_, router) = params_for(33);
        let pair = make_pair(34, &router);
        let before: Vec<u64> = router
            .shared_encoder
            .flatten_params()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let mut current = router.clone();
        for _ in 0..50 {
            let batch = [&pair];
            current = router_update(&current, &batch, RankingLink::Logistic, 0.05)
                .unwrap()
                .0;
        }
        let after: Vec<u64> = current
            .shared_encoder
            .flatten_params()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(before, after);

        let (same, _) = router_update(&router, &[&pair], RankingLink::Logistic, 0.0).unwrap();
        assert_eq!(same, router);
    }

    fn learned_set_for(scene: &Scene, expert: &LearnedExpertParams) -> PredictionSet {
        learned_predict(expert, scene).unwrap()
    }

    #[test]
    fn expert_level_selection_returns_winning_set() {
        let (expert, mut router) = params_for(50);
        let scene = ego_scene(51);
        let learned = learned_set_for(&scene, &expert);
        let rule = const_velocity_predict(&scene.ego_history, 4);

        // Train the router briefly to prefer the rule candidate.
        let features = router.feature_spec.scene_features(&scene).unwrap();
        let pair = RoutingPair::new(
            scene.id.clone(),
            features.clone(),
            rule.candidates[0].clone(),
            learned.candidates[0].clone(),
            0.0,
            1.0,
        )
        .unwrap();
        for _ in 0..60 {
            router = router_update(&router, &[&pair], RankingLink::Logistic, 0.05)
                .unwrap()
                .0;
        }
        let picked = select_prediction(
            &router,
            &scene,
            &[learned.clone(), rule.clone()],
            SelectionMode::ExpertLevel,
        )
        .unwrap();
        assert_eq!(picked.source, SetSource::Rule);

        // Single-set input comes back unchanged.
        let only = select_prediction(&router, &scene, std::slice::from_ref(&learned), SelectionMode::ExpertLevel)
            .unwrap();
        assert_eq!(only, learned);
    }

    #[test]
    fn fresh_router_ties_break_toward_learned() {
        let (expert, router) = params_for(52);
        let scene = ego_scene(53);
        let learned = learned_set_for(&scene, &expert);
        let rule = const_velocity_predict(&scene.ego_history, 4);
        // All scores are zero on a fresh router; priority favors learned.
        let picked = select_prediction(
            &router,
            &scene,
            &[rule, learned.clone()],
            SelectionMode::ExpertLevel,
        )
        .unwrap();
        assert_eq!(picked.source, SetSource::Learned);
    }

    #[test]
    fn candidate_level_matches_brute_force_sort() {
        let (expert, mut router) = params_for(54);
        let scene = ego_scene(55);
        // Give the router nontrivial scores.
        let n = router.routing_head.n_params();
        let flat: Vec<f64> = (0..n).map(|i| (((i * 31) % 17) as f64 - 8.0) * 2e-3).collect();
        router.routing_head.assign_params(&flat);

        let learned = learned_set_for(&scene, &expert);
        let rule = const_velocity_predict(&scene.ego_history, 4);
        let sets = [learned.clone(), rule.clone()];
        let total: usize = sets.iter().map(PredictionSet::len).sum();
        let pooled = select_prediction(
            &router,
            &scene,
            &sets,
            SelectionMode::CandidateLevel { k_out: total },
        )
        .unwrap();
        assert_eq!(pooled.len(), total);
        assert_eq!(pooled.source, SetSource::Mixed);
        let total_conf: f64 = pooled.candidates.iter().map(|c| c.confidence).sum();
        assert!((total_conf - 1.0).abs() < 1e-9);

        // Brute-force oracle: score every candidate, sort descending.
        let mut expected: Vec<(f64, usize)> = Vec::new();
        let mut idx = 0;
        for set in &sets {
            for c in &set.candidates {
                expected.push((route_score(&router, &scene, c).unwrap(), idx));
                idx += 1;
            }
        }
        expected.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let all: Vec<&PredictionCandidate> = sets
            .iter()
            .flat_map(|s| s.candidates.iter())
            .collect();
        for (out, (_, original_idx)) in pooled.candidates.iter().zip(&expected) {
            assert_eq!(out.waypoints, all[*original_idx].waypoints);
        }
    }

    #[test]
    fn selection_invariant_under_monotone_score_transform() {
        // Ranking depends only on score order: shifting every routing-head
        // output bias by a constant adds the same amount to all scores.
        let (expert, mut router) = params_for(56);
        let n = router.routing_head.n_params();
        let flat: Vec<f64> = (0..n).map(|i| (((i * 13) % 11) as f64 - 5.0) * 3e-3).collect();
        router.routing_head.assign_params(&flat);
        let scene = ego_scene(57);
        let learned = learned_set_for(&scene, &expert);
        let rule = const_velocity_predict(&scene.ego_history, 4);
        let sets = [learned, rule];

        let before = select_prediction(&router, &scene, &sets, SelectionMode::ExpertLevel).unwrap();
        let mut shifted = router.clone();
        let last = shifted.routing_head.layers.last_mut().unwrap();
        last.bias[0] += 42.0;
        let after = select_prediction(&shifted, &scene, &sets, SelectionMode::ExpertLevel).unwrap();
        assert_eq!(before.source, after.source);
    }

    fn set_from(waypoints: Vec<Vec<[f64; 2]>>) -> PredictionSet {
        let k = waypoints.len();
        PredictionSet {
            candidates: waypoints
                .into_iter()
                .map(|wp| PredictionCandidate {
                    waypoints: wp,
                    confidence: 1.0 / k as f64,
                    source: ExpertKind::Learned,
                })
                .collect(),
            source: SetSource::Learned,
        }
    }

    #[test]
    fn variance_statistic_matches_brute_force() {
        let members = vec![
            set_from(vec![vec![[0.0, 0.0], [1.0, 0.0]]]),
            set_from(vec![vec![[0.5, 0.5], [1.5, -0.5]]]),
            set_from(vec![vec![[1.0, -1.0], [2.0, 1.0]]]),
        ];
        let stat = variance_statistic(&members).unwrap();

        // Brute force: explicit per-step centroid and squared deviations.
        let tops: Vec<&Vec<[f64; 2]>> = members
            .iter()
            .map(|s| &s.candidates[0].waypoints)
            .collect();
        let mut expected = 0.0;
        for t in 0..2 {
            let mean_x: f64 = tops.iter().map(|w| w[t][0]).sum::<f64>() / 3.0;
            let mean_y: f64 = tops.iter().map(|w| w[t][1]).sum::<f64>() / 3.0;
            let mut v = 0.0;
            for w in &tops {
                v += (w[t][0] - mean_x).powi(2) + (w[t][1] - mean_y).powi(2);
            }
            expected += v / 3.0;
        }
        expected /= 2.0;
        assert!((stat - expected).abs() < 1e-12);
    }

    #[test]
    fn variance_route_decision() {
        let config = VarianceRouterConfig::new(3, 0.5).unwrap();
        let rule = PredictionSet {
            candidates: vec![candidate(vec![[9.0, 9.0], [9.0, 9.0]])],
            source: SetSource::Rule,
        };

        // Identical members: variance zero, keep the first learned set.
        let agree = vec![
            set_from(vec![vec![[0.0, 0.0], [1.0, 0.0]]]),
            set_from(vec![vec![[0.0, 0.0], [1.0, 0.0]]]),
            set_from(vec![vec![[0.0, 0.0], [1.0, 0.0]]]),
        ];
        let picked = variance_route(&config, &agree, &rule).unwrap();
        assert_eq!(picked, agree[0]);

        // Wild disagreement: fall back to the rule set.
        let disagree = vec![
            set_from(vec![vec![[0.0, 0.0], [1.0, 0.0]]]),
            set_from(vec![vec![[10.0, 10.0], [20.0, 20.0]]]),
            set_from(vec![vec![[-10.0, 5.0], [-20.0, 10.0]]]),
        ];
        let picked = variance_route(&config, &disagree, &rule).unwrap();
        assert_eq!(picked, rule);

        // The route decision ignores member order.
        let permuted = vec![disagree[2].clone(), disagree[0].clone(), disagree[1].clone()];
        let picked = variance_route(&config, &permuted, &rule).unwrap();
        assert_eq!(picked, rule);

        // Member count must match the config.
        assert!(variance_route(&config, &agree[..2], &rule).is_err());
    }

    #[test]
    fn variance_members_with_mismatched_lengths_error() {
        let members = vec![
            set_from(vec![vec![[0.0, 0.0], [1.0, 0.0]]]),
            set_from(vec![vec![[0.0, 0.0]]]),
        ];
        assert!(variance_statistic(&members).is_err());
    }

    #[test]
    fn relu_eps_link_values() {
        let (_, mut router) = params_for(60);
        let pair = make_pair(61, &router);
        // Fresh router: delta = 0 <= eps, so the loss is the clamped constant.
        let (loss, grad) = routing_loss_and_grad(&router, &pair, RankingLink::ReluEps).unwrap();
        assert!((loss - (-(RELU_EPS.ln()))).abs() < 1e-12);
        // Clamped region has zero gradient.
        for layer in &grad.routing_head.layers {
            assert!(layer.d_weights.iter().all(|&v| v == 0.0));
        }

        // Push delta positive, then the loss is -ln(delta).
        for _ in 0..80 {
            router = router_update(&router, &[&pair], RankingLink::Logistic, 0.05)
                .unwrap()
                .0;
        }
        let s_c = router
            .score_from_features(&pair.scene_features, &pair.chosen)
            .unwrap();
        let s_r = router
            .score_from_features(&pair.scene_features, &pair.rejected)
            .unwrap();
        let delta = s_c - s_r;
        assert!(delta > RELU_EPS);
        let (loss, _) = routing_loss_and_grad(&router, &pair, RankingLink::ReluEps).unwrap();
        assert!((loss - (-(delta.ln()))).abs() < 1e-12);
    }

    #[test]
    fn variance_config_validation() {
        assert!(VarianceRouterConfig::new(1, 0.5).is_err());
        assert!(VarianceRouterConfig::new(3, 0.0).is_err());
        assert!(VarianceRouterConfig::new(3, 0.5).is_ok());
    }
}
