//! Scene, trajectory, and frame-of-reference types.
//!
//! Everything downstream (experts, router, metrics) consumes scenes in the
//! ego-centric frame produced by [`to_ego_frame`]: the last history state sits
//! at the origin with heading zero and the x-axis pointing forward. The
//! transform is rigid and invertible; the anchor pose is kept on the scene so
//! [`from_ego_frame`] can restore the original coordinates.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};

/// Planar waypoint in meters, `[x, y]`.
pub type Waypoint = [f64; 2];

/// Euclidean distance between two waypoints.
pub fn displacement(a: Waypoint, b: Waypoint) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let wrapped = (angle + PI).rem_euclid(TAU) - PI;
    if wrapped == -PI {
        PI
    } else {
        wrapped
    }
}

/// Kinematic state of one agent at one timestep.
///
/// Headings are radians, counterclockwise from +x, always in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
}

impl AgentState {
    /// Build a state, wrapping the heading into `(-pi, pi]`.
    pub fn new(x: f64, y: f64, vx: f64, vy: f64, heading: f64) -> Result<Self> {
        let state = Self {
            x,
            y,
            vx,
            vy,
            heading: wrap_angle(heading),
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("x", self.x),
            ("y", self.y),
            ("vx", self.vx),
            ("vy", self.vy),
            ("heading", self.heading),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(Error::validation(format!(
                    "agent state field `{name}` is not finite"
                )));
            }
        }
        if !(self.heading > -PI && self.heading <= PI) {
            return Err(Error::validation(format!(
                "heading {} outside (-pi, pi]",
                self.heading
            )));
        }
        Ok(())
    }

    pub fn position(&self) -> Waypoint {
        [self.x, self.y]
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// Express this state in the frame anchored at `anchor`.
    fn to_ego(self, anchor: &EgoAnchor) -> AgentState {
        let (sin, cos) = anchor.heading.sin_cos();
        let dx = self.x - anchor.x;
        let dy = self.y - anchor.y;
        AgentState {
            x: cos * dx + sin * dy,
            y: -sin * dx + cos * dy,
            vx: cos * self.vx + sin * self.vy,
            vy: -sin * self.vx + cos * self.vy,
            heading: wrap_angle(self.heading - anchor.heading),
        }
    }

    /// Inverse of [`AgentState::to_ego`].
    fn to_world(self, anchor: &EgoAnchor) -> AgentState {
        let (sin, cos) = anchor.heading.sin_cos();
        AgentState {
            x: cos * self.x - sin * self.y + anchor.x,
            y: sin * self.x + cos * self.y + anchor.y,
            vx: cos * self.vx - sin * self.vy,
            vy: sin * self.vx + cos * self.vy,
            heading: wrap_angle(self.heading + anchor.heading),
        }
    }
}

/// Pose of the ego-frame origin expressed in the original frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoAnchor {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl EgoAnchor {
    pub fn to_ego_point(&self, p: Waypoint) -> Waypoint {
        let (sin, cos) = self.heading.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [cos * dx + sin * dy, -sin * dx + cos * dy]
    }

    pub fn to_world_point(&self, p: Waypoint) -> Waypoint {
        let (sin, cos) = self.heading.sin_cos();
        [
            cos * p[0] - sin * p[1] + self.x,
            sin * p[0] + cos * p[1] + self.y,
        ]
    }
}

/// Which frame a scene's coordinates live in.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Frame {
    #[default]
    World,
    /// Ego-centric frame; the anchor restores the original coordinates.
    Ego(EgoAnchor),
}

/// A fixed-rate sequence of agent states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<AgentState>,
    /// Timestep duration in seconds, identical between consecutive states.
    pub dt: f64,
}

impl Trajectory {
    pub fn new(states: Vec<AgentState>, dt: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::validation("trajectory must have at least one state"));
        }
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::validation(format!("trajectory dt {dt} must be > 0")));
        }
        for state in &states {
            state.validate()?;
        }
        Ok(Self { states, dt })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Last state; trajectories are never empty.
    pub fn last(&self) -> &AgentState {
        self.states.last().expect("trajectory is non-empty")
    }

    pub fn positions(&self) -> Vec<Waypoint> {
        self.states.iter().map(AgentState::position).collect()
    }

    fn map_states(&self, f: impl Fn(&AgentState) -> AgentState) -> Trajectory {
        Trajectory {
            states: self.states.iter().map(f).collect(),
            dt: self.dt,
        }
    }
}

/// History/future step counts and the shared timestep duration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HorizonSpec {
    pub t_history: usize,
    pub t_future: usize,
    pub dt: f64,
}

impl HorizonSpec {
    pub fn new(t_history: usize, t_future: usize, dt: f64) -> Result<Self> {
        let spec = Self {
            t_history,
            t_future,
            dt,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_history < 1 {
            return Err(Error::validation("t_history must be >= 1"));
        }
        if self.t_future < 1 {
            return Err(Error::validation("t_future must be >= 1"));
        }
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(Error::validation(format!("dt {} must be > 0", self.dt)));
        }
        Ok(())
    }

    /// Total step count, history plus future.
    pub fn total(&self) -> usize {
        self.t_history + self.t_future
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    MapPolyline,
    NeighborTrack,
}

/// One map polyline or neighboring-agent track around the ego agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeature {
    pub kind: ContextKind,
    pub points: Vec<Waypoint>,
    /// Fixed-width numeric summary (zeros for map polylines).
    pub attributes: Vec<f64>,
}

impl ContextFeature {
    pub fn new(kind: ContextKind, points: Vec<Waypoint>, attributes: Vec<f64>) -> Result<Self> {
        let feature = Self {
            kind,
            points,
            attributes,
        };
        feature.validate()?;
        Ok(feature)
    }

    pub fn validate(&self) -> Result<()> {
        let min_points = match self.kind {
            ContextKind::MapPolyline => 2,
            ContextKind::NeighborTrack => 1,
        };
        if self.points.len() < min_points {
            return Err(Error::validation(format!(
                "{:?} needs at least {min_points} points, got {}",
                self.kind,
                self.points.len()
            )));
        }
        for p in &self.points {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::validation("context point is not finite"));
            }
        }
        for a in &self.attributes {
            if !a.is_finite() {
                return Err(Error::validation("context attribute is not finite"));
            }
        }
        Ok(())
    }

    fn map_points(&self, f: impl Fn(Waypoint) -> Waypoint) -> ContextFeature {
        ContextFeature {
            kind: self.kind,
            points: self.points.iter().map(|&p| f(p)).collect(),
            attributes: self.attributes.clone(),
        }
    }
}

/// One prediction task: ego history, surrounding context, and (during
/// training/evaluation) the ground-truth future.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub horizon: HorizonSpec,
    pub ego_history: Trajectory,
    pub context: Vec<ContextFeature>,
    /// Absent at pure inference time.
    pub ego_future_gt: Option<Trajectory>,
    /// Name of the generating distribution this scene was drawn from.
    pub dataset_tag: String,
    pub frame: Frame,
}

impl Scene {
    pub fn new(
        id: impl Into<String>,
        horizon: HorizonSpec,
        ego_history: Trajectory,
        context: Vec<ContextFeature>,
        ego_future_gt: Option<Trajectory>,
        dataset_tag: impl Into<String>,
    ) -> Result<Self> {
        let scene = Self {
            id: id.into(),
            horizon,
            ego_history,
            context,
            ego_future_gt,
            dataset_tag: dataset_tag.into(),
            frame: Frame::World,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        self.horizon.validate()?;
        if self.ego_history.len() != self.horizon.t_history {
            return Err(Error::validation(format!(
                "scene `{}`: history length {} != t_history {}",
                self.id,
                self.ego_history.len(),
                self.horizon.t_history
            )));
        }
        if self.ego_history.dt != self.horizon.dt {
            return Err(Error::validation(format!(
                "scene `{}`: history dt {} != horizon dt {}",
                self.id, self.ego_history.dt, self.horizon.dt
            )));
        }
        if let Some(future) = &self.ego_future_gt {
            if future.len() != self.horizon.t_future {
                return Err(Error::validation(format!(
                    "scene `{}`: future length {} != t_future {}",
                    self.id,
                    future.len(),
                    self.horizon.t_future
                )));
            }
            if future.dt != self.horizon.dt {
                return Err(Error::validation(format!(
                    "scene `{}`: future dt {} != horizon dt {}",
                    self.id, future.dt, self.horizon.dt
                )));
            }
        }
        for feature in &self.context {
            feature.validate()?;
        }
        Ok(())
    }

    /// Ground-truth future, or an error naming the scene.
    pub fn ground_truth(&self) -> Result<&Trajectory> {
        self.ego_future_gt
            .as_ref()
            .ok_or_else(|| Error::MissingGroundTruth(self.id.clone()))
    }
}

/// Re-express a world-frame scene around its last history state: that state
/// moves to the origin with heading zero, and velocities/headings rotate
/// consistently. The anchor pose is stored on the returned scene so the
/// transform can be undone.
pub fn to_ego_frame(scene: &Scene) -> Result<Scene> {
    scene.validate()?;
    if let Frame::Ego(_) = scene.frame {
        return Err(Error::validation(format!(
            "scene `{}` is already in an ego frame",
            scene.id
        )));
    }
    let last = scene.ego_history.last();
    let anchor = EgoAnchor {
        x: last.x,
        y: last.y,
        heading: last.heading,
    };
    Ok(Scene {
        id: scene.id.clone(),
        horizon: scene.horizon,
        ego_history: scene.ego_history.map_states(|s| s.to_ego(&anchor)),
        context: scene
            .context
            .iter()
            .map(|c| c.map_points(|p| anchor.to_ego_point(p)))
            .collect(),
        ego_future_gt: scene
            .ego_future_gt
            .as_ref()
            .map(|t| t.map_states(|s| s.to_ego(&anchor))),
        dataset_tag: scene.dataset_tag.clone(),
        frame: Frame::Ego(anchor),
    })
}

/// Invert [`to_ego_frame`] using the anchor stored on the scene.
pub fn from_ego_frame(scene: &Scene) -> Result<Scene> {
    let anchor = match scene.frame {
        Frame::Ego(anchor) => anchor,
        Frame::World => {
            return Err(Error::validation(format!(
                "scene `{}` is already in the world frame",
                scene.id
            )))
        }
    };
    Ok(Scene {
        id: scene.id.clone(),
        horizon: scene.horizon,
        ego_history: scene.ego_history.map_states(|s| s.to_world(&anchor)),
        context: scene
            .context
            .iter()
            .map(|c| c.map_points(|p| anchor.to_world_point(p)))
            .collect(),
        ego_future_gt: scene
            .ego_future_gt
            .as_ref()
            .map(|t| t.map_states(|s| s.to_world(&anchor))),
        dataset_tag: scene.dataset_tag.clone(),
        frame: Frame::World,
    })
}

/// Split a full trajectory into its history and future parts. The
/// concatenation of the two halves reproduces the input exactly.
pub fn split_history_future(
    traj: &Trajectory,
    horizon: &HorizonSpec,
) -> Result<(Trajectory, Trajectory)> {
    horizon.validate()?;
    if traj.len() != horizon.total() {
        return Err(Error::validation(format!(
            "trajectory length {} != t_history + t_future = {}",
            traj.len(),
            horizon.total()
        )));
    }
    if traj.dt != horizon.dt {
        return Err(Error::validation(format!(
            "trajectory dt {} != horizon dt {}",
            traj.dt, horizon.dt
        )));
    }
    let history = Trajectory {
        states: traj.states[..horizon.t_history].to_vec(),
        dt: traj.dt,
    };
    let future = Trajectory {
        states: traj.states[horizon.t_history..].to_vec(),
        dt: traj.dt,
    };
    Ok((history, future))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(x: f64, y: f64, vx: f64, vy: f64, heading: f64) -> AgentState {
        AgentState::new(x, y, vx, vy, heading).unwrap()
    }

    fn simple_scene() -> Scene {
        let horizon = HorizonSpec::new(2, 1, 0.5).unwrap();
        let history = Trajectory::new(
            vec![state(4.0, 5.0, 1.0, 0.0, 0.2), state(5.0, 5.0, 1.0, 0.5, 0.3)],
            0.5,
        )
        .unwrap();
        let future = Trajectory::new(vec![state(5.5, 5.2, 1.0, 0.5, 0.3)], 0.5).unwrap();
        let context = vec![ContextFeature::new(
            ContextKind::MapPolyline,
            vec![[5.0, 6.0], [6.0, 6.0]],
            vec![0.0; 4],
        )
        .unwrap()];
        Scene::new("s0", horizon, history, context, Some(future), "test").unwrap()
    }

    #[test]
    fn displacement_345() {
        assert_eq!(displacement([0.0, 0.0], [3.0, 4.0]), 5.0);
        assert_eq!(displacement([2.0, -1.0], [2.0, -1.0]), 0.0);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.3) - 0.3).abs() < 1e-15);
        for k in -6..=6 {
            let a = 0.77 + k as f64 * TAU;
            assert!((wrap_angle(a) - 0.77).abs() < 1e-9);
        }
    }

    #[test]
    fn ego_frame_rotates_context_point() {
        // Ego at (5, 5) heading pi/2; the context point (5, 6) is one meter
        // ahead, so it lands at (1, 0).
        let horizon = HorizonSpec::new(1, 1, 0.1).unwrap();
        let history =
            Trajectory::new(vec![state(5.0, 5.0, 0.0, 1.0, PI / 2.0)], 0.1).unwrap();
        let context = vec![ContextFeature::new(
            ContextKind::NeighborTrack,
            vec![[5.0, 6.0]],
            vec![0.0; 4],
        )
        .unwrap()];
        let scene = Scene::new("rot", horizon, history, context, None, "test").unwrap();
        let ego = to_ego_frame(&scene).unwrap();
        let p = ego.context[0].points[0];
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12);
        let last = ego.ego_history.last();
        assert!(last.x.abs() < 1e-12 && last.y.abs() < 1e-12);
        assert!(last.heading.abs() < 1e-12);
        // Velocity (0, 1) rotates onto the forward axis.
        assert!((last.vx - 1.0).abs() < 1e-12);
        assert!(last.vy.abs() < 1e-12);
    }

    #[test]
    fn ego_frame_identity_when_already_centered() {
        let horizon = HorizonSpec::new(1, 1, 0.1).unwrap();
        let history = Trajectory::new(vec![state(0.0, 0.0, 2.0, 0.0, 0.0)], 0.1).unwrap();
        let scene = Scene::new("id", horizon, history, vec![], None, "test").unwrap();
        let ego = to_ego_frame(&scene).unwrap();
        assert_eq!(ego.ego_history, scene.ego_history);
        assert_eq!(ego.context, scene.context);
        assert_eq!(ego.id, scene.id);
    }

    #[test]
    fn ego_frame_round_trip() {
        let scene = simple_scene();
        let ego = to_ego_frame(&scene).unwrap();
        let back = from_ego_frame(&ego).unwrap();
        for (a, b) in scene.ego_history.states.iter().zip(&back.ego_history.states) {
            assert!((a.x - b.x).abs() < 1e-9);
            assert!((a.y - b.y).abs() < 1e-9);
            assert!((a.vx - b.vx).abs() < 1e-9);
            assert!((a.vy - b.vy).abs() < 1e-9);
            assert!((a.heading - b.heading).abs() < 1e-9);
        }
        let gt = scene.ego_future_gt.as_ref().unwrap();
        let gt_back = back.ego_future_gt.as_ref().unwrap();
        for (a, b) in gt.states.iter().zip(&gt_back.states) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
        for (a, b) in scene.context.iter().zip(&back.context) {
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn double_ego_transform_rejected() {
        let scene = simple_scene();
        let ego = to_ego_frame(&scene).unwrap();
        assert!(to_ego_frame(&ego).is_err());
        assert!(from_ego_frame(&scene).is_err());
    }

    #[test]
    fn split_matches_definition() {
        let horizon = HorizonSpec::new(2, 1, 1.0).unwrap();
        let traj = Trajectory::new(
            vec![
                state(0.0, 0.0, 1.0, 0.0, 0.0),
                state(1.0, 0.0, 1.0, 0.0, 0.0),
                state(2.0, 0.0, 1.0, 0.0, 0.0),
            ],
            1.0,
        )
        .unwrap();
        let (h, f) = split_history_future(&traj, &horizon).unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!(f.len(), 1);
        assert_eq!(h.states[1].x, 1.0);
        assert_eq!(f.states[0].x, 2.0);
        let mut rejoined = h.states.clone();
        rejoined.extend_from_slice(&f.states);
        assert_eq!(rejoined, traj.states);
    }

    #[test]
    fn split_rejects_length_mismatch() {
        let horizon = HorizonSpec::new(2, 2, 1.0).unwrap();
        let traj = Trajectory::new(vec![state(0.0, 0.0, 1.0, 0.0, 0.0)], 1.0).unwrap();
        assert!(split_history_future(&traj, &horizon).is_err());
    }

    #[test]
    fn horizon_rejects_zero_future() {
        assert!(HorizonSpec::new(2, 0, 1.0).is_err());
        assert!(HorizonSpec::new(0, 2, 1.0).is_err());
        assert!(HorizonSpec::new(2, 2, 0.0).is_err());
    }

    #[test]
    fn rejects_non_finite_state() {
        assert!(AgentState::new(f64::NAN, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(AgentState::new(0.0, f64::INFINITY, 0.0, 0.0, 0.0).is_err());
    }
}
