//! Cross-module properties checked on randomly generated scenes and action
//! sequences.

use std::collections::BTreeSet;

use afford_core::config::ExperimentConfig;
use afford_core::labeling::{annotate_by_confidence, annotate_by_interaction, extract_dataset, ConfidenceEvidence, Thresholds};
use afford_core::mapping::{project_all, InteractionState, Label, ObjectLevelMap, Provenance};
use afford_core::policy::{run_episode, EpisodeConfig, PolicyDriver};
use afford_core::predictor::{maybe_replace, mean_pixel_f1, AffordanceModel, PredictorConfig, TrainState};
use afford_core::world::{
    generate_scene, render, spawn_agent, step, Affordance, Axis, CameraConfig, NavAction, Scene, SceneConfig, WorldAction,
    WorldParams,
};
use proptest::prelude::*;

fn small_scene(seed: u64) -> Scene {
    let cfg = SceneConfig {
        room_width: 6.0,
        room_depth: 6.0,
        min_objects: 6,
        max_objects: 10,
        ..SceneConfig::default()
    };
    generate_scene(seed, &cfg).unwrap()
}

fn camera() -> CameraConfig {
    CameraConfig {
        width: 24,
        height: 24,
        ..CameraConfig::default()
    }
}

fn action(code: u8, target: Option<i32>) -> WorldAction {
    match code % 11 {
        0 => WorldAction::Navigate(NavAction::MoveForward),
        1 => WorldAction::Navigate(NavAction::RotateLeft),
        2 => WorldAction::Navigate(NavAction::RotateRight),
        3 => WorldAction::Navigate(NavAction::LookUp),
        4 => WorldAction::Navigate(NavAction::LookDown),
        5 | 6 => WorldAction::Pickup { target },
        7 | 8 => WorldAction::Push { target },
        9 => WorldAction::Drop,
        _ => WorldAction::MoveHeld {
            axis: [Axis::Forward, Axis::Left, Axis::Up][usize::from(code) % 3],
            positive: code % 2 == 0,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulator_is_deterministic_and_truthful(seed in 0u64..10_000, codes in prop::collection::vec((any::<u8>(), 0usize..12), 1..60)) {
        let params = WorldParams::default();
        let base = small_scene(seed);
        let ids: BTreeSet<i32> = base.ids().collect();
        let run = || {
            let mut s = base.clone();
            let mut agent = spawn_agent(&s, seed, params.agent_radius).unwrap();
            let mut outs = Vec::new();
            for &(c, t) in &codes {
                let target = s.instances.get(t).map(|o| o.id);
                let out = step(&mut s, &mut agent, &action(c, target), &params).unwrap();
                outs.push((out, agent.clone(), s.clone()));
            }
            outs
        };
        let a = run();
        prop_assert_eq!(&a, &run());
        for (out, _, s) in &a {
            prop_assert_eq!(&s.ids().collect::<BTreeSet<_>>(), &ids);
            if out.success {
                if let (Some(aff), Some(t)) = (out.action.affordance(), out.action.target()) {
                    prop_assert!(s.affords(t, aff));
                }
            }
        }
    }

    #[test]
    fn pushed_object_renders_at_its_new_pose(seed in 0u64..10_000) {
        let params = WorldParams::default();
        let s0 = small_scene(seed);
        let cam = camera();
        for inst in s0.instances.iter().filter(|o| s0.affords(o.id, Affordance::Push)) {
            let Some(agent) = afford_core::eval::viewing_pose(&s0, inst.id, 1.0, &params, &cam, 10) else { continue };
            let (mut s, mut a) = (s0.clone(), agent.clone());
            let out = step(&mut s, &mut a, &WorldAction::Push { target: Some(inst.id) }, &params).unwrap();
            if !out.success {
                continue;
            }
            let f = render(&s, &a, &cam, params.camera_height, 1);
            let m = out.moved.iter().find(|m| m.id == inst.id).unwrap();
            let v = f.visible_instance(inst.id);
            prop_assume!(v.is_some());
            prop_assert_eq!(v.unwrap().center, m.new.position);
            // The projected new centre lies inside the pixel bounding box.
            if let Some((w, u, _)) = f.project(m.new.position.into()) {
                let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
                for (i, &id) in f.instance_ids.iter().enumerate() {
                    if id == inst.id {
                        let (r, c) = (i / f.width, i % f.width);
                        r0 = r0.min(r); r1 = r1.max(r); c0 = c0.min(c); c1 = c1.max(c);
                    }
                }
                prop_assert!(u >= c0 as f64 - 1.0 && u <= c1 as f64 + 2.0, "u {} not in [{}, {}]", u, c0, c1);
                prop_assert!(w >= r0 as f64 - 1.0 && w <= r1 as f64 + 2.0, "v {} not in [{}, {}]", w, r0, r1);
            }
            return Ok(());
        }
    }

    #[test]
    fn map_identity_and_projection_consistency(seed in 0u64..10_000) {
        let scene = small_scene(seed);
        let cfg = EpisodeConfig { max_steps: 40, camera: camera(), ..EpisodeConfig::default() };
        let model = AffordanceModel::new(&[8], seed);
        let out = run_episode(&scene, &model, PolicyDriver::Random, &cfg, seed, 0).unwrap();
        // Floor and walls are instances of the map too.
        prop_assert!(out.map.instance_ids().len() <= scene.instances.len() + 2);
        let known: BTreeSet<i32> = scene.ids().chain([0, -1]).collect();
        prop_assert!(out.map.instance_ids().iter().all(|id| known.contains(id)));
        let [occ, hit, miss] = project_all(&out.map, &scene.room);
        for i in 0..occ.data.len() {
            prop_assert_eq!(occ.data[i] > 0.0, hit.data[i] > 0.0 || miss.data[i] > 0.0);
        }
    }

    #[test]
    fn confidence_never_overrides_interaction(seed in 0u64..10_000, ok in any::<bool>()) {
        let scene = small_scene(seed);
        let cam = camera();
        let agent = spawn_agent(&scene, seed, 0.2).unwrap();
        let frame = render(&scene, &agent, &cam, 1.5, 0);
        let mut map = ObjectLevelMap::new(&scene.room, 0.05).unwrap();
        map.integrate_frame(&frame);
        let ids = map.instance_ids();
        let probs_hi = vec![0.99f32; frame.len() * 2];
        let probs_lo = vec![0.01f32; frame.len() * 2];
        for &id in &ids {
            annotate_by_interaction(&mut map, id, Affordance::Pickup, ok).unwrap();
        }
        let mut ev = ConfidenceEvidence::default();
        ev.add_frame(&frame, if ok { &probs_lo } else { &probs_hi });
        annotate_by_confidence(&mut map, &ev, Thresholds::default());
        for &id in &ids {
            let r = map.instance(id).unwrap();
            prop_assert_eq!(r.labels[0].provenance(), Some(Provenance::Interaction));
            prop_assert_eq!(r.labels[0].value(), Some(ok));
            prop_assert_ne!(r.interacted[0], InteractionState::None);
            prop_assert_ne!(r.labels[1], Label::Unknown);
        }
    }
}

#[test]
fn motion_keeps_voxel_ownership_on_reintegration() {
    let params = WorldParams::default();
    let cam = CameraConfig::default();
    let mut checked = 0;
    for seed in 0..20u64 {
        let s0 = small_scene(seed);
        for inst in s0.instances.iter().filter(|o| s0.affords(o.id, Affordance::Push)) {
            let Some(agent) = afford_core::eval::viewing_pose(&s0, inst.id, 1.0, &params, &cam, 10) else { continue };
            let mut map = ObjectLevelMap::new(&s0.room, 0.05).unwrap();
            map.integrate_frame(&render(&s0, &agent, &cam, params.camera_height, 0));
            let (mut s, mut a) = (s0.clone(), agent.clone());
            let out = step(&mut s, &mut a, &WorldAction::Push { target: Some(inst.id) }, &params).unwrap();
            if !out.success {
                continue;
            }
            let known: Vec<_> = out.moved.iter().filter(|m| map.instance(m.id).is_some()).copied().collect();
            map.apply_motion(&known).unwrap();
            let before: Vec<_> = map.voxels().map(|(k, v)| (*k, v.instance)).collect();
            map.integrate_frame(&render(&s, &a, &cam, params.camera_height, 1));
            let changed = before.iter().filter(|(k, id)| map.voxel(*k).is_some_and(|v| v.instance != *id)).count();
            assert!(
                changed == 0,
                "seed {seed} instance {}: {changed} of {} voxels changed owner",
                inst.id,
                before.len()
            );
            checked += 1;
            break;
        }
    }
    assert!(checked >= 5, "only {checked} pushes checked");
}

#[test]
fn adoption_strictly_improves_on_the_incumbent() {
    let scene = small_scene(3);
    let cfg = EpisodeConfig { max_steps: 120, camera: camera(), ..EpisodeConfig::default() };
    let pc = PredictorConfig { hidden: vec![12], ..PredictorConfig::default() };
    let mut best = AffordanceModel::new(&pc.hidden, 1);
    let mut current = best.clone();
    let mut ts = TrainState::new(pc.clone(), &best, 2);
    let mut adoptions = 0;
    for e in 0..6 {
        let out = run_episode(&scene, &AffordanceModel::oracle(), PolicyDriver::Random, &cfg, 5, e).unwrap();
        let masks = afford_core::labeling::propagate_to_frames(&out.map, &out.frames);
        let ds = extract_dataset(e, &out.frames, &masks, Default::default(), 16, 9).unwrap();
        ts.add_dataset(&ds);
        ts.train_epoch(&mut current).unwrap();
        let val = ts.validation_set();
        let incumbent = mean_pixel_f1(&best, &val);
        if maybe_replace(&mut best, &current, &val) {
            assert!(best.val_score > incumbent);
            assert_eq!(best.val_score, mean_pixel_f1(&best, &val));
            adoptions += 1;
        } else {
            assert!(mean_pixel_f1(&current, &val) <= incumbent);
        }
        // Predictions stay strictly inside (0, 1).
        for p in current.predict(&out.frames[0], &out.scene) {
            assert!(p > 0.0 && p < 1.0);
        }
    }
    assert!(adoptions > 0);
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut d = ExperimentConfig::load(&root.join("default.toml")).unwrap();
    d.paths = ExperimentConfig::default().paths;
    assert_eq!(d, ExperimentConfig::default());
    let toy = ExperimentConfig::load(&root.join("toy.toml")).unwrap();
    assert_eq!(toy.world.scene.min_objects, 5);
    assert_eq!(toy.world.scene.max_objects, 5);
    assert_eq!(toy.budget.total_steps, 50_000);
}
