//! Synthetic scene generation.
//!
//! Ego trajectories are kinematic unicycle rollouts: per step the position
//! advances along the current heading by `speed * dt`, then heading and speed
//! integrate the sampled turn rate and acceleration noise. Two preset
//! families provide a distribution-shift axis (straight-heavy vs turn-heavy);
//! mixtures interpolate between them at a configurable ratio.
//!
//! Scene files are JSONL, one object per scene, with floats printed at 17
//! significant digits so a save/load round trip is bit-exact. A `.gz`
//! extension selects gzip compression.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::DEFAULT_ATTR_WIDTH;
use crate::scene::{
    wrap_angle, AgentState, ContextFeature, ContextKind, Frame, HorizonSpec, Scene, Trajectory,
    Waypoint,
};

/// Parameters of one scene-generating distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub name: String,
    /// Initial speed interval, m/s.
    pub speed_range: (f64, f64),
    /// Turn-rate magnitude interval for turning scenes, rad/s.
    pub turn_rate_range: (f64, f64),
    /// Probability that a scene contains a turning maneuver.
    pub p_turn: f64,
    /// Base probability that a turning maneuver persists through the whole
    /// window; otherwise it straightens out within a few steps of the
    /// prediction boundary. The effective probability decays with the turn
    /// rate (`base * exp(-omega / TURN_PERSIST_OMEGA)`): sharper maneuvers
    /// are briefer. History looks identical either way.
    pub p_turn_persist: f64,
    /// Std of the per-scene constant acceleration draw, m/s^2. History
    /// reveals the sampled ramp, so it is learnable but invisible to a
    /// constant-velocity extrapolation.
    pub accel_noise_std: f64,
    /// Std of the white per-step speed perturbation applied to future steps
    /// only, m/s: behavioral noise realized after the prediction boundary,
    /// an irreducible floor no predictor can beat. History stays clean.
    pub speed_jitter_std: f64,
    /// Mean number of context features per scene.
    pub context_density: f64,
    pub horizon: HorizonSpec,
}

impl DistributionSpec {
    pub fn validate(&self) -> Result<()> {
        self.horizon.validate()?;
        if self.name.is_empty() {
            return Err(Error::validation("distribution name is empty"));
        }
        let (slo, shi) = self.speed_range;
        if !(slo.is_finite() && shi.is_finite()) || slo > shi || slo < 0.0 {
            return Err(Error::validation("speed_range must satisfy 0 <= lo <= hi"));
        }
        let (tlo, thi) = self.turn_rate_range;
        if !(tlo.is_finite() && thi.is_finite()) || tlo > thi || tlo < 0.0 {
            return Err(Error::validation("turn_rate_range must satisfy 0 <= lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.p_turn) {
            return Err(Error::validation("p_turn must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.p_turn_persist) {
            return Err(Error::validation("p_turn_persist must be in [0, 1]"));
        }
        if self.accel_noise_std < 0.0 || !self.accel_noise_std.is_finite() {
            return Err(Error::validation("accel_noise_std must be >= 0"));
        }
        if self.speed_jitter_std < 0.0 || !self.speed_jitter_std.is_finite() {
            return Err(Error::validation("speed_jitter_std must be >= 0"));
        }
        if self.context_density < 0.0 || !self.context_density.is_finite() {
            return Err(Error::validation("context_density must be >= 0"));
        }
        Ok(())
    }

    /// Straight-heavy family with mild turns: the in-distribution stand-in.
    pub fn family_a(horizon: HorizonSpec) -> Self {
        Self {
            name: "family_a".into(),
            speed_range: (5.0, 15.0),
            turn_rate_range: (0.05, 0.20),
            p_turn: 0.2,
            p_turn_persist: 0.7,
            accel_noise_std: 0.8,
            speed_jitter_std: 1.5,
            context_density: 3.0,
            horizon,
        }
    }

    /// Turn-heavy family with a wider speed range and no speed ramps: the
    /// shifted stand-in.
    pub fn family_b(horizon: HorizonSpec) -> Self {
        Self {
            name: "family_b".into(),
            speed_range: (3.0, 22.0),
            turn_rate_range: (0.22, 0.45),
            p_turn: 0.7,
            p_turn_persist: 0.7,
            accel_noise_std: 0.0,
            speed_jitter_std: 1.5,
            context_density: 3.0,
            horizon,
        }
    }

    /// Noise-free straight motion; the rule expert is exact here.
    pub fn zero_turn(horizon: HorizonSpec) -> Self {
        Self {
            name: "zero_turn".into(),
            speed_range: (5.0, 15.0),
            turn_rate_range: (0.0, 0.0),
            p_turn: 0.0,
            p_turn_persist: 1.0,
            accel_noise_std: 0.0,
            speed_jitter_std: 0.0,
            context_density: 2.0,
            horizon,
        }
    }

    /// Look up a preset family by name at a given horizon.
    pub fn preset(name: &str, horizon: HorizonSpec) -> Result<Self> {
        match name {
            "family_a" => Ok(Self::family_a(horizon)),
            "family_b" => Ok(Self::family_b(horizon)),
            "zero_turn" => Ok(Self::zero_turn(horizon)),
            other => Err(Error::validation(format!(
                "unknown distribution preset `{other}` (expected family_a, family_b, or zero_turn)"
            ))),
        }
    }
}

/// An in-distribution/out-of-distribution test mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    pub in_dist: DistributionSpec,
    pub out_dist: DistributionSpec,
    /// Fraction of scenes drawn from `out_dist`.
    pub ood_ratio: f64,
    pub n_scenes: usize,
    pub seed: u64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        self.in_dist.validate()?;
        self.out_dist.validate()?;
        if !(0.0..=1.0).contains(&self.ood_ratio) {
            return Err(Error::validation("ood_ratio must be in [0, 1]"));
        }
        if self.n_scenes < 1 {
            return Err(Error::validation("n_scenes must be >= 1"));
        }
        Ok(())
    }
}

/// Turn-rate scale of the maneuver-persistence law, rad/s: the probability
/// that a turn persists is `p_turn_persist * exp(-turn_rate / this)`.
pub const TURN_PERSIST_OMEGA: f64 = 0.10;

/// Stable seed derivation for independent substreams.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in tag.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash ^ seed.wrapping_mul(0x9E3779B97F4A7C15)
}

fn sample_range(rng: &mut StdRng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Standard normal via Box-Muller, deterministic given the rng state.
fn sample_normal(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Poisson count via Knuth's method; fine for the small densities used here.
fn sample_poisson(rng: &mut StdRng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

fn sample_context(rng: &mut StdRng, spec: &DistributionSpec) -> Vec<ContextFeature> {
    let count = sample_poisson(rng, spec.context_density);
    let mut features = Vec::with_capacity(count);
    for _ in 0..count {
        if rng.gen::<f64>() < 0.5 {
            // Straight map polyline near the ego start.
            let x0 = rng.gen_range(-40.0..40.0);
            let y0 = rng.gen_range(-40.0..40.0);
            let direction = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let length = rng.gen_range(10.0..40.0);
            let n_points = rng.gen_range(2..=5);
            let points: Vec<Waypoint> = (0..n_points)
                .map(|i| {
                    let along = length * i as f64 / (n_points - 1) as f64;
                    [x0 + along * direction.cos(), y0 + along * direction.sin()]
                })
                .collect();
            features.push(ContextFeature {
                kind: ContextKind::MapPolyline,
                points,
                attributes: vec![0.0; DEFAULT_ATTR_WIDTH],
            });
        } else {
            // Short neighbor track with a velocity summary.
            let x0 = rng.gen_range(-30.0..30.0);
            let y0 = rng.gen_range(-30.0..30.0);
            let speed = sample_range(rng, spec.speed_range.0, spec.speed_range.1);
            let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let n_points = rng.gen_range(1..=3);
            let dt = spec.horizon.dt;
            let points: Vec<Waypoint> = (0..n_points)
                .map(|i| {
                    let along = speed * dt * i as f64;
                    [x0 + along * heading.cos(), y0 + along * heading.sin()]
                })
                .collect();
            let mut attributes = vec![0.0; DEFAULT_ATTR_WIDTH];
            attributes[0] = speed;
            attributes[1] = heading;
            if DEFAULT_ATTR_WIDTH > 2 {
                attributes[2] = (x0 * x0 + y0 * y0).sqrt();
            }
            features.push(ContextFeature {
                kind: ContextKind::NeighborTrack,
                points,
                attributes,
            });
        }
    }
    features
}

fn rollout_scene(rng: &mut StdRng, spec: &DistributionSpec, id: String) -> Result<Scene> {
    let horizon = spec.horizon;
    let dt = horizon.dt;
    let total = horizon.total();

    let mut x = rng.gen_range(-20.0..20.0);
    let mut y = rng.gen_range(-20.0..20.0);
    let mut heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut speed = sample_range(rng, spec.speed_range.0, spec.speed_range.1);
    let turning = rng.gen::<f64>() < spec.p_turn;
    let turn_rate = if turning {
        let magnitude = sample_range(rng, spec.turn_rate_range.0, spec.turn_rate_range.1);
        if rng.gen::<bool>() {
            magnitude
        } else {
            -magnitude
        }
    } else {
        0.0
    };
    // Turning maneuvers run through the whole history; half persist through
    // the entire future, half straighten out within a few steps of the
    // prediction boundary. History cannot reveal which branch a scene takes,
    // so the irreducible ambiguity between the two futures grows with the
    // horizon length while a straight-line continuation nails the
    // straightening branch.
    let turn_stop = if turning {
        let p_persist = spec.p_turn_persist * (-turn_rate.abs() / TURN_PERSIST_OMEGA).exp();
        if rng.gen::<f64>() < p_persist {
            total
        } else {
            let window = horizon.t_future.min(3);
            rng.gen_range(horizon.t_history..=horizon.t_history + window)
        }
    } else {
        0
    };
    let accel = if spec.accel_noise_std > 0.0 {
        sample_normal(rng) * spec.accel_noise_std
    } else {
        0.0
    };

    let mut states = Vec::with_capacity(total);
    let mut base_speed = speed;
    for step in 0..total {
        states.push(AgentState {
            x,
            y,
            vx: speed * heading.cos(),
            vy: speed * heading.sin(),
            heading: wrap_angle(heading),
        });
        // Integrate the controls first, then advance with the new velocity,
        // so each step's displacement reflects the scene's turn rate and
        // acceleration rather than a pure constant-velocity continuation.
        // The white speed perturbation does not integrate: position noise
        // stays bounded at long horizons while flooring the one-step error.
        let omega = if turning && step < turn_stop { turn_rate } else { 0.0 };
        heading = wrap_angle(heading + omega * dt);
        base_speed = (base_speed + accel * dt).max(0.0);
        speed = base_speed;
        // The step below creates state `step + 1`; jitter applies to future
        // states only so observed history stays clean.
        if spec.speed_jitter_std > 0.0 && step + 1 >= horizon.t_history {
            speed = (base_speed + sample_normal(rng) * spec.speed_jitter_std).max(0.0);
        }
        x += speed * heading.cos() * dt;
        y += speed * heading.sin() * dt;
    }

    let context = sample_context(rng, spec);
    let history = Trajectory::new(states[..horizon.t_history].to_vec(), dt)?;
    let future = Trajectory::new(states[horizon.t_history..].to_vec(), dt)?;
    Scene::new(id, horizon, history, context, Some(future), spec.name.clone())
}

/// Generate `n` scenes from one distribution, deterministically per seed.
pub fn generate(spec: &DistributionSpec, n: usize, seed: u64) -> Result<Vec<Scene>> {
    spec.validate()?;
    if n < 1 {
        return Err(Error::validation("scene count must be >= 1"));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("{}-{seed}-{i}", spec.name);
        scenes.push(rollout_scene(&mut rng, spec, id)?);
    }
    Ok(scenes)
}

/// Generate an in-D/OOD mixture: `round(ood_ratio * n_scenes)` scenes come
/// from the OOD family, the rest from the in-distribution family, shuffled
/// deterministically by the mixture seed. Dataset tags are preserved.
pub fn generate_mixture(mix: &MixSpec) -> Result<Vec<Scene>> {
    mix.validate()?;
    let n_ood = (mix.ood_ratio * mix.n_scenes as f64).round() as usize;
    let n_in = mix.n_scenes - n_ood;

    let mut scenes = Vec::with_capacity(mix.n_scenes);
    if n_in > 0 {
        scenes.extend(generate(&mix.in_dist, n_in, derive_seed(mix.seed, "mix-in"))?);
    }
    if n_ood > 0 {
        scenes.extend(generate(
            &mix.out_dist,
            n_ood,
            derive_seed(mix.seed, "mix-out"),
        )?);
    }

    // Fisher-Yates with a seed-derived stream; ordering depends only on the
    // mixture seed and count.
    let mut rng = StdRng::seed_from_u64(derive_seed(mix.seed, "mix-shuffle"));
    for i in (1..scenes.len()).rev() {
        let j = rng.gen_range(0..=i);
        scenes.swap(i, j);
    }
    Ok(scenes)
}

// --- scene file format ---------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    id: String,
    dataset_tag: String,
    horizon: HorizonSpec,
    /// States as `[x, y, vx, vy, heading]` rows.
    ego_history: Vec<[f64; 5]>,
    context: Vec<ContextRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ego_future_gt: Option<Vec<[f64; 5]>>,
}

#[derive(Serialize, Deserialize)]
struct ContextRecord {
    kind: ContextKind,
    points: Vec<Waypoint>,
    attributes: Vec<f64>,
}

fn states_to_rows(traj: &Trajectory) -> Vec<[f64; 5]> {
    traj.states
        .iter()
        .map(|s| [s.x, s.y, s.vx, s.vy, s.heading])
        .collect()
}

fn rows_to_states(rows: &[[f64; 5]], dt: f64) -> Result<Trajectory> {
    let states = rows
        .iter()
        .map(|r| AgentState {
            x: r[0],
            y: r[1],
            vx: r[2],
            vy: r[3],
            heading: r[4],
        })
        .collect();
    Trajectory::new(states, dt)
}

impl SceneRecord {
    fn from_scene(scene: &Scene) -> Result<Self> {
        if scene.frame != Frame::World {
            return Err(Error::validation(format!(
                "scene `{}` must be in the world frame to be serialized",
                scene.id
            )));
        }
        Ok(Self {
            id: scene.id.clone(),
            dataset_tag: scene.dataset_tag.clone(),
            horizon: scene.horizon,
            ego_history: states_to_rows(&scene.ego_history),
            context: scene
                .context
                .iter()
                .map(|c| ContextRecord {
                    kind: c.kind,
                    points: c.points.clone(),
                    attributes: c.attributes.clone(),
                })
                .collect(),
            ego_future_gt: scene.ego_future_gt.as_ref().map(states_to_rows),
        })
    }

    fn into_scene(self) -> Result<Scene> {
        let scene = Scene {
            id: self.id,
            horizon: self.horizon,
            ego_history: rows_to_states(&self.ego_history, self.horizon.dt)?,
            context: self
                .context
                .into_iter()
                .map(|c| ContextFeature {
                    kind: c.kind,
                    points: c.points,
                    attributes: c.attributes,
                })
                .collect(),
            ego_future_gt: self
                .ego_future_gt
                .as_ref()
                .map(|rows| rows_to_states(rows, self.horizon.dt))
                .transpose()?,
            dataset_tag: self.dataset_tag,
            frame: Frame::World,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// JSON formatter printing every float with 17 significant digits, enough to
/// reproduce any finite f64 exactly on parse.
struct FullPrecisionFormatter;

impl serde_json::ser::Formatter for FullPrecisionFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

fn scene_to_json_line(scene: &Scene) -> Result<String> {
    let record = SceneRecord::from_scene(scene)?;
    let mut buf = Vec::new();
    let mut serializer = serde_json::Serializer::with_formatter(&mut buf, FullPrecisionFormatter);
    record
        .serialize(&mut serializer)
        .map_err(|e| Error::validation(format!("serialize scene `{}`: {e}", scene.id)))?;
    String::from_utf8(buf).map_err(|e| Error::validation(format!("scene encoding: {e}")))
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|ext| ext == "gz")
}

/// Write scenes as JSONL (gzip-compressed when the path ends in `.gz`).
pub fn save_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)?;
    let mut writer: Box<dyn Write> = if is_gz(path) {
        Box::new(GzEncoder::new(file, flate2::Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    };
    for scene in scenes {
        let line = scene_to_json_line(scene)?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Read scenes back; parse failures name the offending 1-based line.
pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut scenes = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::SceneFile {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::SceneFile {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        scenes.push(record.into_scene().map_err(|e| Error::SceneFile {
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(scenes)
}
