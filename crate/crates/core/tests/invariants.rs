//! Property tests for the geometric, metric, and serialization invariants.

use ape_core::{
    displacement, evaluate, from_ego_frame, generate, load_scenes, min_ade, min_fde, save_scenes,
    to_ego_frame, AgentState, ContextFeature, ContextKind, DistributionSpec, ExpertKind,
    HorizonSpec, MissTolerance, PredictionCandidate, PredictionSet, Scene, SetSource, Trajectory,
};
use proptest::prelude::*;

fn finite_coord() -> impl Strategy<Value = f64> {
    -100.0..100.0f64
}

fn arb_state() -> impl Strategy<Value = AgentState> {
    (
        finite_coord(),
        finite_coord(),
        -30.0..30.0f64,
        -30.0..30.0f64,
        -6.0..6.0f64,
    )
        .prop_map(|(x, y, vx, vy, heading)| AgentState::new(x, y, vx, vy, heading).unwrap())
}

fn arb_scene() -> impl Strategy<Value = Scene> {
    (
        proptest::collection::vec(arb_state(), 3),
        proptest::collection::vec(arb_state(), 2),
        proptest::collection::vec((finite_coord(), finite_coord()), 2..5),
    )
        .prop_map(|(history, future, points)| {
            let horizon = HorizonSpec::new(3, 2, 0.1).unwrap();
            let context = vec![ContextFeature::new(
                ContextKind::MapPolyline,
                points.into_iter().map(|(x, y)| [x, y]).collect(),
                vec![0.0; 4],
            )
            .unwrap()];
            Scene::new(
                "prop",
                horizon,
                Trajectory::new(history, 0.1).unwrap(),
                context,
                Some(Trajectory::new(future, 0.1).unwrap()),
                "prop",
            )
            .unwrap()
        })
}

fn scene_points(scene: &Scene) -> Vec<[f64; 2]> {
    let mut points: Vec<[f64; 2]> = scene
        .ego_history
        .states
        .iter()
        .map(|s| s.position())
        .collect();
    if let Some(future) = &scene.ego_future_gt {
        points.extend(future.states.iter().map(|s| s.position()));
    }
    for feature in &scene.context {
        points.extend(feature.points.iter().copied());
    }
    points
}

proptest! {
    #[test]
    fn displacement_is_symmetric_and_nonnegative(
        ax in finite_coord(), ay in finite_coord(),
        bx in finite_coord(), by in finite_coord(),
    ) {
        let d_ab = displacement([ax, ay], [bx, by]);
        let d_ba = displacement([bx, by], [ax, ay]);
        prop_assert!(d_ab >= 0.0);
        prop_assert!((d_ab - d_ba).abs() < 1e-12);
    }

    #[test]
    fn ego_transform_is_rigid_and_invertible(scene in arb_scene()) {
        let ego = to_ego_frame(&scene).unwrap();

        // Pairwise distances survive the rigid motion.
        let before = scene_points(&scene);
        let after = scene_points(&ego);
        prop_assert_eq!(before.len(), after.len());
        for i in 0..before.len() {
            for j in (i + 1)..before.len() {
                let da = displacement(before[i], before[j]);
                let db = displacement(after[i], after[j]);
                prop_assert!((da - db).abs() < 1e-9, "distance {} vs {}", da, db);
            }
        }

        // The anchor state lands on the origin with heading zero.
        let last = ego.ego_history.last();
        prop_assert!(last.x.abs() < 1e-9 && last.y.abs() < 1e-9);
        prop_assert!(last.heading.abs() < 1e-9);

        // Round trip restores the original coordinates.
        let back = from_ego_frame(&ego).unwrap();
        for (a, b) in scene_points(&scene).iter().zip(scene_points(&back).iter()) {
            prop_assert!(displacement(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn min_metrics_shrink_as_candidates_accumulate(
        offsets in proptest::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..6),
    ) {
        let gt_states: Vec<AgentState> = (0..4)
            .map(|i| AgentState::new(i as f64, 0.0, 1.0, 0.0, 0.0).unwrap())
            .collect();
        let gt = Trajectory::new(gt_states, 0.1).unwrap();
        let candidates: Vec<PredictionCandidate> = offsets
            .iter()
            .map(|&(dx, dy)| PredictionCandidate {
                waypoints: (0..4).map(|i| [i as f64 + dx, dy]).collect(),
                confidence: 1.0 / offsets.len() as f64,
                source: ExpertKind::Learned,
            })
            .collect();

        let mut prev_ade = f64::INFINITY;
        let mut prev_fde = f64::INFINITY;
        for k in 1..=candidates.len() {
            let ade = min_ade(&candidates[..k], &gt).unwrap();
            let fde = min_fde(&candidates[..k], &gt).unwrap();
            prop_assert!(ade <= prev_ade + 1e-15);
            prop_assert!(fde <= prev_fde + 1e-15);
            prev_ade = ade;
            prev_fde = fde;
        }

        // A single candidate's minFDE is exactly its final-step displacement.
        let single = min_fde(&candidates[..1], &gt).unwrap();
        let expected = displacement(candidates[0].waypoints[3], [3.0, 0.0]);
        prop_assert!((single - expected).abs() < 1e-15);
    }

    #[test]
    fn report_fields_stay_in_range(
        offsets in proptest::collection::vec((-5.0..5.0f64, 0.1..0.9f64), 2..8),
    ) {
        let gt_states: Vec<AgentState> = (0..4)
            .map(|i| AgentState::new(i as f64, 0.0, 1.0, 0.0, 0.0).unwrap())
            .collect();
        let gt = Trajectory::new(gt_states, 0.1).unwrap();
        let items: Vec<(PredictionSet, Trajectory)> = offsets
            .iter()
            .map(|&(dy, conf)| {
                (
                    PredictionSet {
                        candidates: vec![PredictionCandidate {
                            waypoints: (0..4).map(|i| [i as f64, dy]).collect(),
                            confidence: conf,
                            source: ExpertKind::Rule,
                        }],
                        source: SetSource::Learned,
                    },
                    gt.clone(),
                )
            })
            .collect();
        let refs: Vec<(&PredictionSet, &Trajectory)> = items.iter().map(|(s, g)| (s, g)).collect();
        let tol = MissTolerance::new(1.0, 2.0, 4).unwrap();
        let report = evaluate(&refs, &tol).unwrap();
        prop_assert!((0.0..=1.0).contains(&report.miss_rate));
        prop_assert!((0.0..=1.0).contains(&report.map_score));
        prop_assert!(report.min_ade >= 0.0 && report.min_fde >= 0.0);
    }
}

#[test]
fn generated_scene_files_round_trip_exactly() {
    // One deterministic end-to-end pass over the real generator output;
    // random per-field round trips are covered by the unit tests.
    let horizon = HorizonSpec::new(6, 10, 0.1).unwrap();
    let dir = std::env::temp_dir().join(format!("ape-invariants-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for (name, spec) in [
        ("a", DistributionSpec::family_a(horizon)),
        ("b", DistributionSpec::family_b(horizon)),
    ] {
        let scenes = generate(&spec, 64, 99).unwrap();
        let path = dir.join(format!("{name}.jsonl"));
        save_scenes(&path, &scenes).unwrap();
        let loaded = load_scenes(&path).unwrap();
        assert_eq!(scenes, loaded);
        // Bit-exactness, not just PartialEq.
        for (s, l) in scenes.iter().zip(&loaded) {
            for (a, b) in s.ego_history.states.iter().zip(&l.ego_history.states) {
                assert_eq!(a.x.to_bits(), b.x.to_bits());
                assert_eq!(a.vy.to_bits(), b.vy.to_bits());
                assert_eq!(a.heading.to_bits(), b.heading.to_bits());
            }
        }
    }
    std::fs::remove_dir_all(&dir).ok();
}
