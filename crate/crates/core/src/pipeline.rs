//! End-to-end training and inference.
//!
//! Training interleaves the two learners: every batch first runs both experts
//! on each scene, takes one predictor descent step, ranks the (learned, rule)
//! candidate pairs by ADE into the routing buffer, refreshes the router's
//! frozen copy of the scene encoder, and takes one router step on a uniform
//! sample from the whole buffer. Inference picks a candidate set per scene
//! according to the configured router kind.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{
    const_velocity_predict, learned_predict, predictor_update, FeatureSpec, LearnedExpertParams,
    TrainConfig, DEFAULT_ATTR_WIDTH, DEFAULT_EMBED_WIDTH, DEFAULT_K_MODES,
};
use crate::metrics::{ade, min_ade};
use crate::prediction::PredictionSet;
use crate::routing::{
    router_update, select_prediction, variance_route, variance_statistic, RankingLink,
    RouterParams, RoutingPair, SelectionMode, VarianceRouterConfig,
};
use crate::scene::{to_ego_frame, Frame, Scene, Trajectory, Waypoint};
use crate::scenariogen::derive_seed;

/// ADE ties tighter than this produce no routing pair.
pub const PAIR_TIE_EPS: f64 = 1e-9;

/// Append-only store of routing pairs with uniform sampling.
#[derive(Debug, Clone, Default)]
pub struct RoutingBuffer {
    records: Vec<RoutingPair>,
    capacity: Option<usize>,
}

impl RoutingBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_limit(capacity: usize) -> Self {
        Self {
            records: Vec::new(),
            capacity: Some(capacity),
        }
    }

    /// Append a record; returns false when a capacity limit rejects it.
    pub fn push(&mut self, pair: RoutingPair) -> bool {
        if let Some(cap) = self.capacity {
            if self.records.len() >= cap {
                return false;
            }
        }
        self.records.push(pair);
        true
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[RoutingPair] {
        &self.records
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, n: usize, rng: &mut StdRng) -> Vec<&RoutingPair> {
        (0..n)
            .map(|_| &self.records[rng.gen_range(0..self.records.len())])
            .collect()
    }
}

/// How candidate pairs are formed from one scene's predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingMode {
    /// One pair: the learned expert's best mode against the rule candidate.
    BestMode,
    /// K pairs: every learned mode against the rule candidate. The default.
    PerMode,
}

/// Rank the learned and rule candidates by ADE into routing pairs.
/// Ties within [`PAIR_TIE_EPS`] are dropped.
pub fn pair_candidates(
    scene_id: &str,
    scene_features: &[f64],
    learned: &PredictionSet,
    rule: &PredictionSet,
    gt: &Trajectory,
    mode: PairingMode,
) -> Result<Vec<RoutingPair>> {
    let rule_candidate = &rule.candidates[0];
    let rule_ade = ade(&rule_candidate.waypoints, gt)?;

    let mut learned_ades = Vec::with_capacity(learned.len());
    for candidate in &learned.candidates {
        learned_ades.push(ade(&candidate.waypoints, gt)?);
    }

    let indices: Vec<usize> = match mode {
        PairingMode::PerMode => (0..learned.len()).collect(),
        PairingMode::BestMode => {
            let mut best = 0usize;
            for (idx, &value) in learned_ades.iter().enumerate() {
                if value < learned_ades[best] {
                    best = idx;
                }
            }
            vec![best]
        }
    };

    let mut pairs = Vec::with_capacity(indices.len());
    for idx in indices {
        let learned_ade = learned_ades[idx];
        if (learned_ade - rule_ade).abs() < PAIR_TIE_EPS {
            continue;
        }
        let learned_candidate = learned.candidates[idx].clone();
        let pair = if learned_ade < rule_ade {
            RoutingPair::new(
                scene_id,
                scene_features.to_vec(),
                learned_candidate,
                rule_candidate.clone(),
                learned_ade,
                rule_ade,
            )?
        } else {
            RoutingPair::new(
                scene_id,
                scene_features.to_vec(),
                rule_candidate.clone(),
                learned_candidate,
                rule_ade,
                learned_ade,
            )?
        };
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Network width and pairing knobs; the defaults match the shipped
/// configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub k_modes: usize,
    pub embed_width: usize,
    pub attr_width: usize,
    pub pairing: PairingMode,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            k_modes: DEFAULT_K_MODES,
            embed_width: DEFAULT_EMBED_WIDTH,
            attr_width: DEFAULT_ATTR_WIDTH,
            pairing: PairingMode::PerMode,
        }
    }
}

/// Where a trained ensemble came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_tag: String,
    pub seed: u64,
    pub epochs: usize,
}

/// Everything produced by training that inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEnsemble {
    pub expert: LearnedExpertParams,
    pub router: RouterParams,
    /// Extra bootstrap members (the primary expert is member zero).
    pub bootstrap: Vec<LearnedExpertParams>,
    /// Fallback threshold for the variance router, in m^2.
    pub variance_threshold: Option<f64>,
    pub train_config: TrainConfig,
    pub provenance: Provenance,
}

impl TrainedEnsemble {
    pub fn validate(&self) -> Result<()> {
        self.expert.validate()?;
        self.router.validate()?;
        let spec = self.expert.feature_spec;
        if self.router.feature_spec != spec {
            return Err(Error::shape("router feature spec differs from expert"));
        }
        for member in &self.bootstrap {
            member.validate()?;
            if member.feature_spec != spec {
                return Err(Error::shape(
                    "bootstrap member feature spec differs from expert",
                ));
            }
        }
        Ok(())
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        self.expert.feature_spec
    }
}

/// Loss curves recorded once per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub predictor_loss: f64,
    pub router_loss: f64,
    /// Fraction of this epoch's fresh pairs ranked correctly at epoch end.
    pub router_pair_accuracy: f64,
}

/// Training artifacts: the ensemble, the pair buffer, and per-epoch curves.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub ensemble: TrainedEnsemble,
    pub buffer: RoutingBuffer,
    pub epochs: Vec<EpochStats>,
}

struct PreparedScene {
    ego: Scene,
    features: Vec<f64>,
    rule_set: PredictionSet,
}

fn prepare_scenes(dataset: &[Scene], spec: FeatureSpec) -> Result<Vec<PreparedScene>> {
    let mut prepared = Vec::with_capacity(dataset.len());
    for scene in dataset {
        scene.ground_truth()?;
        let ego = match scene.frame {
            Frame::World => to_ego_frame(scene)?,
            Frame::Ego(_) => scene.clone(),
        };
        let features = spec.scene_features(&ego)?;
        let rule_set = const_velocity_predict(&ego.ego_history, ego.horizon.t_future);
        prepared.push(PreparedScene {
            ego,
            features,
            rule_set,
        });
    }
    Ok(prepared)
}

fn validate_dataset(dataset: &[Scene]) -> Result<(String, FeatureSpec)> {
    if dataset.is_empty() {
        return Err(Error::validation("training dataset is empty"));
    }
    let tag = dataset[0].dataset_tag.clone();
    let horizon = dataset[0].horizon;
    for scene in dataset {
        if scene.dataset_tag != tag {
            return Err(Error::validation(format!(
                "mixed dataset tags `{tag}` and `{}`",
                scene.dataset_tag
            )));
        }
        if scene.horizon != horizon {
            return Err(Error::validation("mixed horizons in training dataset"));
        }
    }
    Ok((tag, FeatureSpec::new(horizon.t_history, horizon.t_future, DEFAULT_ATTR_WIDTH)))
}

/// Train the learned expert and the routing function concurrently.
/// Deterministic given `config.seed`; epochs = 0 returns the fresh
/// initialization with an empty buffer.
pub fn train(dataset: &[Scene], config: &TrainConfig) -> Result<TrainOutput> {
    train_with_dims(dataset, config, ModelDims::default())
}

pub fn train_with_dims(
    dataset: &[Scene],
    config: &TrainConfig,
    dims: ModelDims,
) -> Result<TrainOutput> {
    config.validate()?;
    let (tag, mut spec) = validate_dataset(dataset)?;
    spec.attr_width = dims.attr_width;

    let expert = LearnedExpertParams::init(
        spec,
        dims.k_modes,
        dims.embed_width,
        derive_seed(config.seed, "expert-init"),
    );
    let router = RouterParams::init(&expert, derive_seed(config.seed, "router-init"));
    train_loop(dataset, config, tag, expert, Some(router), dims.pairing)
}

/// Train only an expert (used for bootstrap ensemble members); the data
/// stream matches [`train`] exactly so members differ only in their
/// initialization seed.
fn train_expert_only(
    dataset: &[Scene],
    config: &TrainConfig,
    dims: ModelDims,
    init_seed: u64,
) -> Result<LearnedExpertParams> {
    config.validate()?;
    let (tag, mut spec) = validate_dataset(dataset)?;
    spec.attr_width = dims.attr_width;
    let expert = LearnedExpertParams::init(spec, dims.k_modes, dims.embed_width, init_seed);
    let output = train_loop(dataset, config, tag, expert, None, dims.pairing)?;
    Ok(output.ensemble.expert)
}

fn train_loop(
    dataset: &[Scene],
    config: &TrainConfig,
    tag: String,
    mut expert: LearnedExpertParams,
    router: Option<RouterParams>,
    pairing: PairingMode,
) -> Result<TrainOutput> {
    let spec = expert.feature_spec;
    let prepared = prepare_scenes(dataset, spec)?;

    // Separate streams keep the expert's update sequence independent of
    // router-side sampling, so expert-only runs reproduce the same expert.
    let mut data_rng = StdRng::seed_from_u64(derive_seed(config.seed, "data-order"));
    let mut buffer_rng = StdRng::seed_from_u64(derive_seed(config.seed, "buffer-sample"));

    let mut router = router;
    let mut buffer = RoutingBuffer::new();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr_predictor = config.decayed(config.lr_predictor, epoch);
        let lr_router = config.decayed(config.lr_router, epoch);

        let mut order: Vec<usize> = (0..prepared.len()).collect();
        for i in (1..order.len()).rev() {
            let j = data_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut predictor_loss_sum = 0.0;
        let mut router_loss_sum = 0.0;
        let mut router_steps = 0usize;
        let mut n_batches = 0usize;
        let mut epoch_pairs: Vec<usize> = Vec::new();

        for batch_indices in order.chunks(config.batch_size) {
            // Pre-update predictions drive the pair ranking, matching the
            // collect-then-update order of the training procedure.
            let mut fresh: Vec<RoutingPair> = Vec::new();
            for &idx in batch_indices {
                let item = &prepared[idx];
                let learned = learned_predict(&expert, &item.ego)?;
                let gt = item.ego.ground_truth()?;
                fresh.extend(pair_candidates(
                    &item.ego.id,
                    &item.features,
                    &learned,
                    &item.rule_set,
                    gt,
                    pairing,
                )?);
            }

            let batch: Vec<Scene> = batch_indices
                .iter()
                .map(|&idx| prepared[idx].ego.clone())
                .collect();
            let (next_expert, batch_loss) = predictor_update(&expert, &batch, lr_predictor)?;
            expert = next_expert;
            predictor_loss_sum += batch_loss;
            n_batches += 1;

            for pair in fresh {
                if buffer.push(pair) {
                    epoch_pairs.push(buffer.len() - 1);
                }
            }

            if let Some(current) = router.take() {
                let mut current = current;
                // The router always scores against the latest backbone.
                current.refresh_shared_encoder(&expert);
                if !buffer.is_empty() {
                    // Ranking labels are noisy; a roomy minibatch keeps the
                    // router step usable even when the predictor batch is
                    // small.
                    let sample = buffer.sample(config.batch_size.max(32), &mut buffer_rng);
                    let (next_router, batch_loss) =
                        router_update(&current, &sample, RankingLink::default(), lr_router)?;
                    router_loss_sum += batch_loss;
                    router_steps += 1;
                    router = Some(next_router);
                } else {
                    router = Some(current);
                }
            }
        }

        let pair_accuracy = match &router {
            Some(current) if !epoch_pairs.is_empty() => {
                let mut correct = 0usize;
                for &idx in &epoch_pairs {
                    let pair = &buffer.records()[idx];
                    let chosen = current.score_from_features(&pair.scene_features, &pair.chosen)?;
                    let rejected =
                        current.score_from_features(&pair.scene_features, &pair.rejected)?;
                    if chosen > rejected {
                        correct += 1;
                    }
                }
                correct as f64 / epoch_pairs.len() as f64
            }
            _ => 0.0,
        };

        epochs.push(EpochStats {
            epoch,
            predictor_loss: if n_batches > 0 {
                predictor_loss_sum / n_batches as f64
            } else {
                0.0
            },
            router_loss: if router_steps > 0 {
                router_loss_sum / router_steps as f64
            } else {
                0.0
            },
            router_pair_accuracy: pair_accuracy,
        });
    }

    let router = match router {
        Some(mut current) => {
            current.refresh_shared_encoder(&expert);
            current
        }
        None => RouterParams::init(&expert, derive_seed(config.seed, "router-init")),
    };

    let ensemble = TrainedEnsemble {
        expert,
        router,
        bootstrap: Vec::new(),
        variance_threshold: None,
        train_config: config.clone(),
        provenance: Provenance {
            dataset_tag: tag,
            seed: config.seed,
            epochs: config.epochs,
        },
    };
    ensemble.validate()?;
    Ok(TrainOutput {
        ensemble,
        buffer,
        epochs,
    })
}

/// Train `n_members - 1` extra experts differing only in init seed and attach
/// them, setting the variance threshold to the median training-set statistic.
pub fn attach_bootstrap(
    output: &mut TrainOutput,
    dataset: &[Scene],
    dims: ModelDims,
    n_members: usize,
) -> Result<()> {
    if n_members < 2 {
        return Err(Error::validation("bootstrap ensemble needs >= 2 members"));
    }
    let config = output.ensemble.train_config.clone();
    let mut members = Vec::with_capacity(n_members - 1);
    for i in 1..n_members {
        let init_seed = derive_seed(config.seed, &format!("bootstrap-init-{i}"));
        members.push(train_expert_only(dataset, &config, dims, init_seed)?);
    }

    // Threshold: median variance statistic over the training scenes.
    let prepared = prepare_scenes(dataset, output.ensemble.feature_spec())?;
    let mut stats = Vec::with_capacity(prepared.len());
    for item in &prepared {
        let mut sets = Vec::with_capacity(n_members);
        sets.push(learned_predict(&output.ensemble.expert, &item.ego)?);
        for member in &members {
            sets.push(learned_predict(member, &item.ego)?);
        }
        stats.push(variance_statistic(&sets)?);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let threshold = if stats.len() % 2 == 1 {
        stats[stats.len() / 2]
    } else {
        0.5 * (stats[stats.len() / 2 - 1] + stats[stats.len() / 2])
    };

    output.ensemble.bootstrap = members;
    output.ensemble.variance_threshold = Some(threshold.max(f64::MIN_POSITIVE));
    Ok(())
}

/// Which selector `infer` applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    /// The trained routing function (the full ensemble).
    Learned,
    /// Bootstrap-variance fallback baseline.
    Variance,
    /// Ground-truth best expert; a test-only upper bound.
    Oracle,
    /// The learned expert alone.
    LearnedOnly,
    /// The rule expert alone.
    RuleOnly,
}

impl RouterKind {
    pub const ALL: [RouterKind; 5] = [
        RouterKind::Learned,
        RouterKind::Variance,
        RouterKind::Oracle,
        RouterKind::LearnedOnly,
        RouterKind::RuleOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RouterKind::Learned => "learned",
            RouterKind::Variance => "variance",
            RouterKind::Oracle => "oracle",
            RouterKind::LearnedOnly => "learned_only",
            RouterKind::RuleOnly => "rule_only",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "learned" => Ok(RouterKind::Learned),
            "variance" => Ok(RouterKind::Variance),
            "oracle" => Ok(RouterKind::Oracle),
            "learned_only" => Ok(RouterKind::LearnedOnly),
            "rule_only" => Ok(RouterKind::RuleOnly),
            other => Err(Error::validation(format!("unknown router kind `{other}`"))),
        }
    }
}

fn set_to_world(set: PredictionSet, anchor: &crate::scene::EgoAnchor) -> PredictionSet {
    PredictionSet {
        candidates: set
            .candidates
            .into_iter()
            .map(|mut c| {
                for wp in &mut c.waypoints {
                    *wp = anchor.to_world_point(*wp);
                }
                c
            })
            .collect(),
        source: set.source,
    }
}

/// Predict one world-frame scene. The returned waypoints are expressed in the
/// input frame.
pub fn infer(ensemble: &TrainedEnsemble, scene: &Scene, kind: RouterKind) -> Result<PredictionSet> {
    let ego = to_ego_frame(scene)?;
    let anchor = match ego.frame {
        Frame::Ego(anchor) => anchor,
        Frame::World => unreachable!("to_ego_frame returns ego frames"),
    };
    let t_future = ego.horizon.t_future;
    let rule_set = const_velocity_predict(&ego.ego_history, t_future);

    let picked = match kind {
        RouterKind::RuleOnly => rule_set,
        RouterKind::LearnedOnly => learned_predict(&ensemble.expert, &ego)?,
        RouterKind::Learned => {
            let learned = learned_predict(&ensemble.expert, &ego)?;
            select_prediction(
                &ensemble.router,
                &ego,
                &[learned, rule_set],
                SelectionMode::ExpertLevel,
            )?
        }
        RouterKind::Variance => {
            let threshold = ensemble.variance_threshold.ok_or_else(|| {
                Error::validation("ensemble has no variance threshold; train with bootstrap")
            })?;
            if ensemble.bootstrap.is_empty() {
                return Err(Error::validation(
                    "ensemble has no bootstrap members; train with bootstrap",
                ));
            }
            let mut sets = Vec::with_capacity(1 + ensemble.bootstrap.len());
            sets.push(learned_predict(&ensemble.expert, &ego)?);
            for member in &ensemble.bootstrap {
                sets.push(learned_predict(member, &ego)?);
            }
            let config = VarianceRouterConfig::new(sets.len(), threshold)?;
            variance_route(&config, &sets, &rule_set)?
        }
        RouterKind::Oracle => {
            let gt = ego.ground_truth()?;
            let learned = learned_predict(&ensemble.expert, &ego)?;
            let learned_ade = min_ade(&learned.candidates, gt)?;
            let rule_ade = min_ade(&rule_set.candidates, gt)?;
            if learned_ade <= rule_ade {
                learned
            } else {
                rule_set
            }
        }
    };
    Ok(set_to_world(picked, &anchor))
}

/// Predict a whole dataset with a fixed scene order.
pub fn infer_dataset(
    ensemble: &TrainedEnsemble,
    scenes: &[Scene],
    kind: RouterKind,
) -> Result<Vec<PredictionSet>> {
    scenes.iter().map(|s| infer(ensemble, s, kind)).collect()
}

// --- run directory artifacts ----------------------------------------------

#[derive(Serialize, Deserialize)]
struct PairRecord {
    scene_id: String,
    chosen: Vec<Waypoint>,
    rejected: Vec<Waypoint>,
    ade_chosen: f64,
    ade_rejected: f64,
}

/// Persist the routing buffer as JSONL (scene id, waypoints, ADEs).
pub fn save_buffer_jsonl(path: impl AsRef<Path>, buffer: &RoutingBuffer) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    for pair in buffer.records() {
        let record = PairRecord {
            scene_id: pair.scene_id.clone(),
            chosen: pair.chosen.waypoints.clone(),
            rejected: pair.rejected.waypoints.clone(),
            ade_chosen: pair.ade_chosen,
            ade_rejected: pair.ade_rejected,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::validation(format!("serialize pair: {e}")))?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Count records in a persisted buffer, validating each line parses.
pub fn load_buffer_len(path: impl AsRef<Path>) -> Result<usize> {
    let file = File::open(path.as_ref())?;
    let mut count = 0usize;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::SceneFile {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        serde_json::from_str::<PairRecord>(&line).map_err(|e| Error::SceneFile {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        count += 1;
    }
    Ok(count)
}

/// Per-epoch loss curves as CSV.
pub fn epochs_csv(epochs: &[EpochStats]) -> String {
    let mut out = String::from("epoch,predictor_loss,router_loss,router_pair_accuracy\n");
    for stat in epochs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            stat.epoch, stat.predictor_loss, stat.router_loss, stat.router_pair_accuracy
        ));
    }
    out
}
