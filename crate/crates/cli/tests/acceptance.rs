//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Criteria run sequentially so their runtimes are honest.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use afford_core::config::ExperimentConfig;
use afford_core::eval::{final_values, read_records, Metric, MetricRecord};
use afford_core::experiment::{generate_scene_set, run_ablation_suite, scene_seed, RunManifest, SceneSplit, FINAL_FRACTION};
use afford_core::geometry::Aabb;
use afford_core::labeling::{
    annotate_by_confidence, propagate_to_frames, sphere_annotation, ConfidenceEvidence, FrameMasks, Thresholds, NEGATIVE, POSITIVE,
};
use afford_core::mapping::{Label, ObjectLevelMap, Provenance, VisitGrid};
use afford_core::nn::Trace;
use afford_core::policy::{clipped_surrogate, run_episode, Arm, EpisodeConfig, EpisodeOutput, PolicyDriver, RewardConfig, RewardComponents};
use afford_core::policy::RewardTracker;
use afford_core::predictor::{accumulate_frame_grad, loss_and_grad, AffordanceModel, LossWeights, PixelSet, FEATURE_DIM};
use afford_core::rng;
use afford_core::world::{
    free_cells, generate_scene, render, step, Affordance, AgentState, CameraConfig, Frame, Scene, SceneConfig, WorldAction,
    WorldParams, FLOOR_ID, LATTICE, NUM_AFFORDANCES, WALL_ID,
};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// `ACCEPTANCE_CRITERIA=1,3` restricts a run to the listed criteria.
fn selected(n: u32) -> bool {
    std::env::var("ACCEPTANCE_CRITERIA").map_or(true, |v| v.split(',').any(|s| s.trim() == n.to_string()))
}

/// Writes straight to stderr so the lines survive the test harness's output
/// capture.
fn report(line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

fn run_criterion(n: u32, name: &str, limit: Option<Duration>, shared: Duration, f: impl FnOnce() -> Verdict) -> bool {
    if !selected(n) {
        report(&format!("criterion {n} [{name}]: SKIP"));
        return true;
    }
    let t = Instant::now();
    let v = f();
    let took = t.elapsed() + shared;
    let in_time = limit.is_none_or(|l| took < l);
    let pass = v.pass && in_time;
    let limit_s = limit.map_or_else(|| "none".to_string(), |l| format!("{}s", l.as_secs()));
    report(&format!(
        "criterion {n} [{name}]: {} | {} | runtime {:.1}s (limit {limit_s})",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        took.as_secs_f64()
    ));
    pass
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------------------
// Shared labeling episodes for criteria 1, 2 and 4.

struct LabelEpisode {
    out: EpisodeOutput,
}

fn labeling_episodes() -> Vec<LabelEpisode> {
    let cfg = EpisodeConfig {
        max_steps: 200,
        camera: CameraConfig {
            width: 32,
            height: 32,
            ..CameraConfig::default()
        },
        ..EpisodeConfig::default()
    };
    let scenes: Vec<Scene> = (0..5)
        .map(|i| generate_scene(scene_seed(7, SceneSplit::Train, i), &SceneConfig::default()).unwrap())
        .collect();
    let model = AffordanceModel::new(&[32, 16], 7);
    (0..20u64)
        .map(|e| LabelEpisode {
            out: run_episode(&scenes[(e % 5) as usize], &model, PolicyDriver::Random, &cfg, 7, e).unwrap(),
        })
        .collect()
}

fn interaction_labels(out: &EpisodeOutput) -> BTreeMap<i32, [Option<bool>; NUM_AFFORDANCES]> {
    out.map
        .instances()
        .filter(|r| r.labels.iter().any(|l| l.provenance() == Some(Provenance::Interaction)))
        .map(|r| (r.id, r.labels.map(|l| l.value())))
        .collect()
}

fn criterion_1(eps: &[LabelEpisode]) -> Verdict {
    let mut instances = 0;
    let mut frames_checked = 0;
    let mut problems = Vec::new();
    for (e, ep) in eps.iter().enumerate() {
        let out = &ep.out;
        let masks = propagate_to_frames(&out.map, &out.frames);
        let labels = interaction_labels(out);
        for (&id, lab) in &labels {
            instances += 1;
            let seen = out.map.instance(id).unwrap().frames_seen.len();
            let visible = out.frames.iter().filter(|f| f.instance_ids.contains(&id)).count();
            for a in 0..NUM_AFFORDANCES {
                let Some(v) = lab[a] else { continue };
                let want = if v { POSITIVE } else { NEGATIVE };
                let annotated = out
                    .frames
                    .iter()
                    .zip(&masks)
                    .filter(|(f, m)| f.instance_ids.iter().zip(&m[a].data).any(|(&i, &l)| i == id && l == want))
                    .count();
                if annotated != seen || seen != visible {
                    problems.push(format!("episode {e} instance {id}: annotated {annotated}, frames_seen {seen}, visible {visible}"));
                }
            }
        }
        // Positive pixels of every frame are exactly the union of the
        // segmentations of positively labeled instances.
        for (f, m) in out.frames.iter().zip(&masks) {
            frames_checked += 1;
            for a in 0..NUM_AFFORDANCES {
                for (idx, &id) in f.instance_ids.iter().enumerate() {
                    let expect_pos = labels.get(&id).is_some_and(|l| l[a] == Some(true));
                    if (m[a].data[idx] == POSITIVE) != expect_pos {
                        problems.push(format!("episode {e} frame {} pixel {idx} affordance {a}", f.step_index));
                    }
                }
            }
        }
    }
    let detail = format!("{instances} interaction-labeled instances, {frames_checked} frames, {} mismatches", problems.len());
    verdict(instances > 0 && problems.is_empty(), detail)
}

fn gt_affords(scene: &Scene, id: i32, a: usize) -> bool {
    id > 0 && scene.affords(id, Affordance::ALL[a])
}

fn correct_pixels(scene: &Scene, frames: &[Arc<Frame>], masks: &[FrameMasks]) -> usize {
    let mut n = 0;
    for (f, m) in frames.iter().zip(masks) {
        for a in 0..NUM_AFFORDANCES {
            for (idx, &id) in f.instance_ids.iter().enumerate() {
                let l = m[a].data[idx];
                if (l == POSITIVE && gt_affords(scene, id, a)) || (l == NEGATIVE && !gt_affords(scene, id, a)) {
                    n += 1;
                }
            }
        }
    }
    n
}

fn criterion_2(eps: &[LabelEpisode]) -> Verdict {
    let (mut prop_ok, mut sphere_ok, mut interactions) = (0usize, 0usize, 0usize);
    let (mut prop_pos, mut prop_fp, mut sph_pos, mut sph_fp) = (0usize, 0usize, 0usize, 0usize);
    let mut small_events = 0;
    for ep in eps {
        let out = &ep.out;
        let prop = propagate_to_frames(&out.map, &out.frames);
        let sph = sphere_annotation(&out.events, &out.frames, 0.2, 10);
        interactions += out.events.len();
        prop_ok += correct_pixels(&out.scene, &out.frames, &prop);
        sphere_ok += correct_pixels(&out.scene, &out.frames, &sph);
        // Frames near successful interactions with small instances.
        let mut near: BTreeSet<(usize, usize)> = BTreeSet::new();
        for ev in out.events.iter().filter(|e| e.success) {
            let ext = out.scene.instance(ev.instance).unwrap().extent;
            if ext.iter().copied().fold(f64::INFINITY, f64::min) >= 0.1 {
                continue;
            }
            small_events += 1;
            for (fi, f) in out.frames.iter().enumerate() {
                if f.step_index.abs_diff(ev.step) <= 10 {
                    near.insert((fi, ev.affordance.index()));
                }
            }
        }
        for (fi, a) in near {
            let f = &out.frames[fi];
            for (idx, &id) in f.instance_ids.iter().enumerate() {
                let gt = gt_affords(&out.scene, id, a);
                if prop[fi][a].data[idx] == POSITIVE {
                    prop_pos += 1;
                    prop_fp += usize::from(!gt);
                }
                if sph[fi][a].data[idx] == POSITIVE {
                    sph_pos += 1;
                    sph_fp += usize::from(!gt);
                }
            }
        }
    }
    let rate = |fp: usize, pos: usize| if pos == 0 { f64::NAN } else { fp as f64 / pos as f64 };
    let (prop_rate, sph_rate) = (rate(prop_fp, prop_pos), rate(sph_fp, sph_pos));
    let per = |n: usize| n as f64 / interactions.max(1) as f64;
    let ratio = prop_ok as f64 / sphere_ok.max(1) as f64;
    let density_ok = interactions > 0 && prop_ok as f64 >= 3.0 * sphere_ok as f64;
    let fp_ok = small_events > 0 && prop_fp == 0 && sph_rate > prop_rate.max(0.0);
    verdict(
        density_ok && fp_ok,
        format!(
            "{interactions} interactions; correct px/interaction propagation {:.1} vs sphere {:.1} (ratio {ratio:.2}, need >= 3); small-object successes {small_events}: FP rate sphere {sph_rate:.3} vs propagation {prop_rate:.3}",
            per(prop_ok),
            per(sphere_ok)
        ),
    )
}

// ---------------------------------------------------------------------------

fn synthetic_frame(template: &Frame, ids: Vec<i32>) -> Frame {
    let n = ids.len();
    Frame {
        width: n,
        height: 1,
        depth: vec![1.0; n],
        instance_ids: ids,
        appearance: vec![0.5; 3 * n],
        visible: Vec::new(),
        ..template.clone()
    }
}

/// Smallest value v with at least q% of the values <= v.
fn brute_percentile(values: &[f64], q: usize) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    for &v in &s {
        if s.iter().filter(|&&x| x <= v).count() * 100 >= q * s.len() {
            return v;
        }
    }
    unreachable!()
}

fn criterion_3() -> Verdict {
    let scene = generate_scene(1, &SceneConfig::default()).unwrap();
    let template = render(&scene, &AgentState::new([20, 20], 0, 0), &CameraConfig::default(), 1.5, 0);
    let th = Thresholds::default();
    let mut r = rng::rng_for(3, &[]);
    let mut matched = 0;
    let mut boundary_cases = 0;
    let id = 7;
    for case in 0..100 {
        let n_frames = r.random_range(1..=6);
        let mut evidence = ConfidenceEvidence::default();
        let mut per_frame: Vec<[Vec<f64>; NUM_AFFORDANCES]> = Vec::new();
        for fi in 0..n_frames {
            let n_obj = r.random_range(1..=40);
            let n_other = r.random_range(0..=10);
            let mut ids = vec![id; n_obj];
            ids.extend(std::iter::repeat_n(3, n_other));
            let mut probs = Vec::with_capacity(ids.len() * NUM_AFFORDANCES);
            let mut mine: [Vec<f64>; NUM_AFFORDANCES] = Default::default();
            // Mix of uniform, near-threshold and exact-threshold values.
            let style = r.random_range(0..4);
            for &pid in &ids {
                for (a, m) in mine.iter_mut().enumerate() {
                    let p: f32 = match style {
                        0 => r.random(),
                        1 => [0.9f32, 0.1f32][a],
                        2 => {
                            if r.random_bool(0.5) {
                                0.9 + r.random_range(-0.02f32..0.02)
                            } else {
                                0.1 + r.random_range(-0.02f32..0.02)
                            }
                        }
                        _ => r.random_range(0.05f32..0.95),
                    };
                    probs.push(p);
                    if pid == id {
                        m.push(f64::from(p));
                    }
                }
            }
            if style == 1 {
                boundary_cases += 1;
            }
            let mut frame = synthetic_frame(&template, ids);
            frame.step_index = fi;
            evidence.add_frame(&frame, &probs);
            per_frame.push(mine);
        }
        let mut map = ObjectLevelMap::new(&scene.room, 0.05).unwrap();
        map.ensure_instance(id);
        let interacted = case % 10 == 9;
        if interacted {
            afford_core::labeling::annotate_by_interaction(&mut map, id, Affordance::Pickup, false).unwrap();
        }
        let before = map.instance(id).unwrap().labels;
        annotate_by_confidence(&mut map, &evidence, th);
        let got = map.instance(id).unwrap().labels;
        let expected: [Label; NUM_AFFORDANCES] = std::array::from_fn(|a| {
            if interacted && a == 0 {
                return before[a];
            }
            let hi = per_frame.iter().map(|f| brute_percentile(&f[a], 95)).fold(f64::NEG_INFINITY, f64::max) > th.xi_t;
            let lo = per_frame.iter().map(|f| brute_percentile(&f[a], 5)).fold(f64::INFINITY, f64::min) < th.xi_f;
            match (hi, lo) {
                (true, false) => Label::Positive(Provenance::Confidence),
                (false, true) => Label::Negative(Provenance::Confidence),
                _ => Label::Unknown,
            }
        });
        // An affordance already tried by interaction keeps its label.
        if got == expected {
            matched += 1;
        }
    }
    verdict(matched == 100, format!("{matched}/100 match the sort-based oracle ({boundary_cases} exact-threshold frames)"))
}

fn criterion_4(eps: &[LabelEpisode]) -> Verdict {
    let scene = generate_scene(1, &SceneConfig::default()).unwrap();
    let mut failures = Vec::new();
    fn check(failures: &mut Vec<String>, name: &str, got: f64, want: f64) {
        if got != want {
            failures.push(format!("{name}: {got} != {want}"));
        }
    }
    let mut t = RewardTracker::new(RewardConfig::default(), VisitGrid::new(&scene.room));
    let a0 = AgentState::new([4, 4], 0, 0);
    let a30 = AgentState::new([4, 4], 30, 0);
    let b = AgentState::new([5, 4], 0, 0);
    let c = AgentState::new([6, 4], 0, 0);
    check(&mut failures, "novel position", t.reward(&a0, true, None).0, 1.0);
    check(&mut failures, "novel orientation", t.reward(&a30, true, None).0, 0.3);
    check(&mut failures, "repeat pose", t.reward(&a0, true, None).0, 0.0);
    check(&mut failures, "new success", t.reward(&a0, true, Some((5, Affordance::Pickup))).0, 1.0);
    check(&mut failures, "repeat success", t.reward(&a0, true, Some((5, Affordance::Pickup))).0, 0.0);
    check(&mut failures, "same object, other affordance", t.reward(&a0, true, Some((5, Affordance::Push))).0, 1.0);
    check(&mut failures, "failed interaction", t.reward(&a0, false, Some((6, Affordance::Pickup))).0, -1.0);
    check(&mut failures, "failed navigation", t.reward(&a0, false, None).0, -1.0);
    check(&mut failures, "position + success", t.reward(&b, true, Some((6, Affordance::Push))).0, 1.0 + 1.0);
    let pitched = AgentState::new([5, 4], 60, 15);
    check(&mut failures, "orientation + failure", t.reward(&pitched, false, Some((6, Affordance::Pickup))).0, 0.3 + -1.0);
    let alpha = [0.5, 2.0, 3.0];
    let mut w = RewardTracker::new(
        RewardConfig {
            alpha,
            ..RewardConfig::default()
        },
        VisitGrid::new(&scene.room),
    );
    let (r, comp) = w.reward(&c, true, Some((9, Affordance::Pickup)));
    check(&mut failures, "weighted position + success", r, 0.5 * 1.0 + 2.0 * 1.0 + 3.0 * 0.0);
    if comp != (RewardComponents { nav: 1.0, int: 1.0, fail: 0.0 }) {
        failures.push(format!("components {comp:?}"));
    }
    let (r, _) = w.reward(&AgentState::new([6, 4], 90, 0), false, Some((9, Affordance::Push)));
    check(&mut failures, "weighted orientation + failure", r, 0.5 * 0.3 + 2.0 * 0.0 + 3.0 * -1.0);
    // Logged rewards of real episodes decompose exactly.
    let mut rows = 0;
    for ep in eps {
        for row in &ep.out.log {
            rows += 1;
            if row.reward != row.r_nav + row.r_int + row.r_fail {
                failures.push(format!("log row {} does not decompose", row.step));
            }
        }
    }
    let n = failures.len();
    verdict(n == 0, format!("12 constructed cases and {rows} logged steps, {n} failures {failures:?}"))
}

// ---------------------------------------------------------------------------

fn dist_to_box(c: [f64; 3], b: &Aabb) -> f64 {
    (0..3).map(|a| (b.min[a] - c[a]).max(c[a] - b.max[a]).max(0.0)).fold(0.0, f64::max)
}

fn criterion_5() -> Verdict {
    let scene = generate_scene(11, &SceneConfig::default()).unwrap();
    let params = WorldParams::default();
    let camera = CameraConfig::default();
    let res = 0.05;
    let mut map = ObjectLevelMap::new(&scene.room, res).unwrap();
    let cells = free_cells(&scene, params.agent_radius);
    let mut r = rng::rng_for(5, &[]);
    for k in 0..50 {
        let cell = cells[r.random_range(0..cells.len())];
        let agent = AgentState::new(cell, 30 * r.random_range(0..12), 15 * r.random_range(-4..=4));
        map.integrate_frame(&render(&scene, &agent, &camera, params.camera_height, k));
    }
    let floor = Aabb {
        min: [0.0, 0.0, 0.0],
        max: [scene.room.width, scene.room.depth, 0.0],
    };
    let (mut near, mut total) = (0usize, 0usize);
    for (k, v) in map.voxels() {
        let c = map.voxel_center(*k);
        let d = match v.instance {
            FLOOR_ID => dist_to_box(c, &floor),
            WALL_ID => scene.walls.iter().map(|w| dist_to_box(c, w)).fold(f64::INFINITY, f64::min),
            id => dist_to_box(c, &scene.instance(id).unwrap().aabb()),
        };
        total += 1;
        near += usize::from(d <= res + 1e-9);
    }
    let frac = near as f64 / total as f64;

    // Scripted pushes from axis-aligned and oblique headings.
    let mut pushes = 0;
    let mut shifted = 0usize;
    let mut bad = 0usize;
    'objects: for inst in scene.instances.iter().filter(|o| scene.affords(o.id, Affordance::Push)) {
        for yaw in (0..360).step_by(30) {
            let t = f64::from(yaw).to_radians();
            let x = inst.position[0] - 1.0 * t.sin();
            let y = inst.position[1] - 1.0 * t.cos();
            let cell = [(x / LATTICE).round() as i32, (y / LATTICE).round() as i32];
            if !scene.disc_free(f64::from(cell[0]) * LATTICE, f64::from(cell[1]) * LATTICE, params.agent_radius) {
                continue;
            }
            let mut s = scene.clone();
            let mut agent = AgentState::new(cell, yaw, 0);
            let mut m = map.clone();
            let out = step(&mut s, &mut agent, &WorldAction::Push { target: Some(inst.id) }, &params).unwrap();
            if !out.success {
                continue;
            }
            let mut expected = Vec::new();
            for mo in &out.moved {
                let Some(rec) = m.instance(mo.id) else { continue };
                let shift: [i32; 3] =
                    std::array::from_fn(|a| ((mo.new.position[a] - mo.old.position[a]) / res + rec.residual[a]).round() as i32);
                let dims = m.dims();
                let moved: BTreeSet<[i32; 3]> = rec
                    .sorted_voxels()
                    .into_iter()
                    .map(|k| [k[0] + shift[0], k[1] + shift[1], k[2] + shift[2]])
                    .filter(|k| (0..3).all(|a| k[a] >= 0 && k[a] < dims[a]))
                    .collect();
                expected.push((mo.id, moved));
            }
            m.apply_motion(&out.moved.iter().filter(|mo| m.instance(mo.id).is_some()).copied().collect::<Vec<_>>())
                .unwrap();
            for (id, want) in expected {
                let got: BTreeSet<[i32; 3]> = m.instance(id).unwrap().sorted_voxels().into_iter().collect();
                shifted += want.len();
                if got != want {
                    bad += 1;
                }
            }
            pushes += 1;
            if pushes >= 6 {
                break 'objects;
            }
            break;
        }
    }
    verdict(
        frac >= 0.99 && pushes > 0 && bad == 0,
        format!(
            "{:.2}% of {total} voxels within one voxel of ground truth (need >= 99%); {pushes} pushes moved {shifted} voxels, {bad} instances off the exact shift",
            100.0 * frac
        ),
    )
}

// ---------------------------------------------------------------------------

fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

fn criterion_6() -> Verdict {
    let mut r = rng::rng_for(6, &[]);
    let w = LossWeights::default();
    let h = 1e-6;
    let mut worst_logit: f64 = 0.0;
    let mut worst_param: f64 = 0.0;
    let mut masks = 0;
    while masks < 50 {
        let targets: Vec<[i8; NUM_AFFORDANCES]> = (0..64).map(|_| std::array::from_fn(|_| r.random_range(-1i8..=1))).collect();
        if !targets.iter().any(|t| t.iter().any(|&v| v >= 0)) {
            continue;
        }
        masks += 1;
        let logits: Vec<[f64; NUM_AFFORDANCES]> = (0..64).map(|_| std::array::from_fn(|_| r.random_range(-4.0..4.0))).collect();
        let (_, g) = loss_and_grad(&logits, &targets, w).unwrap();
        for i in 0..64 {
            for a in 0..NUM_AFFORDANCES {
                let mut lp = logits.clone();
                let mut lm = logits.clone();
                lp[i][a] += h;
                lm[i][a] -= h;
                let fd = (loss_and_grad(&lp, &targets, w).unwrap().0 - loss_and_grad(&lm, &targets, w).unwrap().0) / (2.0 * h);
                if g[i][a] != 0.0 || fd.abs() > 1e-9 {
                    worst_logit = worst_logit.max(rel_err(g[i][a], fd));
                }
            }
        }
        // Through the network: a random model on the same 8x8 labels.
        let model = AffordanceModel::new(&[8, 6], masks as u64);
        let set = PixelSet {
            features: (0..64).map(|_| std::array::from_fn::<f64, FEATURE_DIM, _>(|_| r.random_range(-1.0..1.0))).collect(),
            targets: targets.clone(),
        };
        let mut trace = Trace::default();
        let mut grads = vec![0.0; model.params.len()];
        accumulate_frame_grad(&model, &set, w, &mut grads, &mut trace).unwrap();
        for _ in 0..8 {
            let p = r.random_range(0..model.params.len());
            let mut mp = model.clone();
            let mut mm = model.clone();
            mp.params[p] += h;
            mm.params[p] -= h;
            let mut g0 = vec![0.0; grads.len()];
            let lp = accumulate_frame_grad(&mp, &set, w, &mut g0, &mut trace).unwrap().0;
            let lm = accumulate_frame_grad(&mm, &set, w, &mut g0, &mut trace).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            if grads[p] != 0.0 || fd.abs() > 1e-9 {
                worst_param = worst_param.max(rel_err(grads[p], fd));
            }
        }
    }
    // Clipped surrogate against its closed form.
    let eps = 0.2;
    let mut ppo_bad = 0;
    let cases = [(1.1, 1.0), (1.3, 1.0), (0.7, 1.0), (0.9, -1.0), (0.7, -1.0), (1.3, -1.0), (1.0, 2.5), (1.2, 0.5), (0.8, -0.5)];
    for (ratio, adv) in cases {
        let (old, new) = (-1.3f64, -1.3 + f64::ln(ratio));
        let (loss, dlogp) = clipped_surrogate(new, old, adv, eps);
        let rr = (new - old).exp();
        let clipped = if adv >= 0.0 { rr > 1.0 + eps } else { rr < 1.0 - eps };
        let want_loss = if clipped { -rr.clamp(1.0 - eps, 1.0 + eps) * adv } else { -rr * adv };
        let want_grad = if clipped { 0.0 } else { -rr * adv };
        if (loss - want_loss).abs() > 1e-12 || (dlogp - want_grad).abs() > 1e-12 {
            ppo_bad += 1;
        }
    }
    verdict(
        worst_logit < 1e-4 && worst_param < 1e-4 && ppo_bad == 0,
        format!(
            "50 masks: max rel error {worst_logit:.2e} (logits), {worst_param:.2e} (weights); {} ratio cases, {ppo_bad} off the closed form",
            cases.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn finals_by_arm(records: &[MetricRecord], metric: Metric, affordance: &str) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((_, arm, _, m, aff), v) in final_values(records, FINAL_FRACTION) {
        if m == metric && aff == affordance {
            out.entry(arm).or_default().push(v);
        }
    }
    out
}

fn criterion_7(tmp: &Path) -> Verdict {
    let mut cfg = ExperimentConfig::load(&workspace_root().join("configs/toy.toml")).unwrap();
    cfg.paths.scenes = tmp.join("toy-scenes");
    let scenes = generate_scene_set(&cfg).unwrap();
    let seeds: Vec<u64> = (0..5).collect();
    let out = tmp.join("toy-ablation");
    let rep = match run_ablation_suite(&cfg, &seeds, &Arm::ALL, &scenes, &out, true) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("ablation failed: {e}")),
    };
    // Trained: last 10% of each full-arm run's episodes. Random: fresh
    // episodes with the same run's final predictor.
    let mut trained = Vec::new();
    let mut random = Vec::new();
    for &seed in &seeds {
        let run = out.join("runs").join(format!("full-s{seed}"));
        let m = RunManifest::load(&run).unwrap();
        let k = (m.episodes.len() as f64 * FINAL_FRACTION).ceil() as usize;
        trained.extend(m.episodes[m.episodes.len() - k..].iter().map(|e| e.total_reward));
        let model = AffordanceModel::load(&run.join(&m.final_checkpoint)).unwrap();
        let mut c = cfg.clone();
        c.seed = seed;
        let ep_cfg = c.episode_config();
        for e in 0..k as u64 {
            let scene = &scenes.train[(e % scenes.train.len() as u64) as usize];
            random.push(run_episode(scene, &model, PolicyDriver::Random, &ep_cfg, seed, 1_000_000 + e).unwrap().stats.total_reward);
        }
    }
    let (tr, rd) = (mean(&trained), mean(&random));
    let reward_ok = tr - rd >= rd.abs();
    let isr = finals_by_arm(&rep.curves, Metric::InteractionSuccessRate, "all");
    let m = |arm: Arm| isr.get(arm.name()).map_or(f64::NAN, |v| mean(v));
    let (full, seg, noseg) = (m(Arm::Full), m(Arm::NoMapSeg), m(Arm::NoMapNoSeg));
    let isr_ok = full > 0.5 * seg && full > 0.5 * noseg;
    verdict(
        reward_ok && isr_ok,
        format!(
            "episodic reward trained {tr:.2} vs random {rd:.2} (need trained - random >= |random|); final ISR full {full:.3}, no_map_seg {seg:.3}, no_map_no_seg {noseg:.3} (need full > 0.5x each)"
        ),
    )
}

fn afford(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_afford"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run afford")
}

fn criterion_8(tmp: &Path) -> Verdict {
    let dir = tmp.join("desk");
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("desk.toml");
    std::fs::write(&config, "[world.camera]\nwidth = 16\nheight = 16\n\n[paths]\nscenes = \"scenes\"\n").unwrap();
    let c = config.to_str().unwrap();
    let out = dir.join("ablation");
    let gen = afford(&["scene-gen", "--config", c]);
    let abl = afford(&["ablate", "--config", c, "--seeds", "5", "--out", out.to_str().unwrap()]);
    if !gen.status.success() || !abl.status.success() {
        return verdict(false, format!("ablate failed: {}", String::from_utf8_lossy(&abl.stderr)));
    }
    let curves = read_records(&out.join("report.csv")).unwrap();
    let test = read_records(&out.join("test.csv")).unwrap();
    let iar = finals_by_arm(&curves, Metric::InteractableAnnotationRate, "pickup");
    let mut iou: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in test.iter().filter(|r| r.metric == Metric::AffordanceIou && r.affordance == "pickup") {
        iou.entry(r.arm.clone()).or_default().push(r.value);
    }
    let get = |m: &BTreeMap<String, Vec<f64>>, arm: Arm| m.get(arm.name()).map_or(f64::NAN, |v| mean(v));
    let (iar_f, iar_n) = (get(&iar, Arm::Full), get(&iar, Arm::NoMapNoSeg));
    let (iou_f, iou_n) = (get(&iou, Arm::Full), get(&iou, Arm::NoMapNoSeg));
    let seeds_ok = iou.get("full").is_some_and(|v| v.len() == 5) && iou.get("no_map_no_seg").is_some_and(|v| v.len() == 5);
    verdict(
        seeds_ok && iar_f > iar_n && iou_f > iou_n,
        format!(
            "pick up: final interactable annotation rate full {iar_f:.4} vs no_map_no_seg {iar_n:.4}; held-out IoU full {iou_f:.4} vs no_map_no_seg {iou_n:.4} (no_map_seg {:.4} / {:.4})",
            get(&iar, Arm::NoMapSeg),
            get(&iou, Arm::NoMapSeg)
        ),
    )
}

fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|x| x.to_str()), Some("csv" | "json" | "svg")) {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9(tmp: &Path) -> Verdict {
    let dir = tmp.join("determinism");
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("tiny.toml");
    std::fs::write(
        &config,
        "seed = 4\n[world]\ntrain_scenes = 2\nval_scenes = 1\ntest_scenes = 1\n[world.scene]\nroom_width = 6.0\nroom_depth = 6.0\nmin_objects = 6\nmax_objects = 8\n[world.camera]\nwidth = 16\nheight = 16\n[policy]\nepisode_steps = 50\nworkers = 2\n[budget]\ntotal_steps = 300\n[eval]\ntour_views = 6\n[paths]\nscenes = \"scenes\"\n",
    )
    .unwrap();
    let c = config.to_str().unwrap();
    let mut problems = Vec::new();
    let mut compared = 0;
    let mut outputs: Vec<BTreeMap<PathBuf, Vec<u8>>> = Vec::new();
    for k in 0..2 {
        let root = dir.join(format!("pass{k}"));
        let p = |s: &str| root.join(s).to_str().unwrap().to_string();
        let steps: Vec<Vec<String>> = vec![
            vec!["scene-gen".into(), "--config".into(), c.into(), "--out".into(), p("scenes")],
            vec!["scene-gen".into(), "--config".into(), c.into(), "--force".into()],
            vec!["train".into(), "--config".into(), c.into(), "--out".into(), p("run")],
            vec!["eval".into(), p("run"), "--out".into(), p("eval")],
            vec!["replay".into(), p("run"), "--episode".into(), "3".into(), "--out".into(), p("replay/episode_00003.csv")],
            vec!["ablate".into(), "--config".into(), c.into(), "--seeds".into(), "2".into(), "--out".into(), p("ablate")],
            vec!["plot".into(), p("ablate/report.csv"), "--out".into(), p("plots")],
        ];
        for s in &steps {
            let args: Vec<&str> = s.iter().map(String::as_str).collect();
            let o = afford(&args);
            if !o.status.success() {
                problems.push(format!("{} failed: {}", s[0], String::from_utf8_lossy(&o.stderr)));
            }
        }
        outputs.push(csv_files(&root));
    }
    if outputs[0].keys().ne(outputs[1].keys()) {
        problems.push("different output file sets".into());
    }
    for (path, bytes) in &outputs[0] {
        compared += 1;
        if outputs[1].get(path) != Some(bytes) {
            problems.push(format!("{} differs", path.display()));
        }
    }
    let csvs = outputs[0].keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    verdict(
        problems.is_empty() && csvs >= 10,
        format!("7 commands run twice; {compared} output files compared ({csvs} CSV), problems {problems:?}"),
    )
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let eps = if [1, 2, 4].into_iter().any(selected) { labeling_episodes() } else { Vec::new() };
    let shared = t.elapsed();
    let results = [
        run_criterion(1, "label propagation exactness", Some(Duration::from_secs(60)), shared, || criterion_1(&eps)),
        run_criterion(2, "propagation density vs sphere", Some(Duration::from_secs(120)), shared, || criterion_2(&eps)),
        run_criterion(3, "percentile rule oracle", Some(Duration::from_secs(10)), Duration::ZERO, criterion_3),
        run_criterion(4, "reward unit suite", Some(Duration::from_secs(1)), Duration::ZERO, || criterion_4(&eps)),
        run_criterion(5, "map correctness", Some(Duration::from_secs(30)), Duration::ZERO, criterion_5),
        run_criterion(6, "gradient check", Some(Duration::from_secs(30)), Duration::ZERO, criterion_6),
        run_criterion(7, "PPO sanity", Some(Duration::from_secs(30 * 60)), Duration::ZERO, || criterion_7(tmp.path())),
        run_criterion(8, "directional ablation", Some(Duration::from_secs(60 * 60)), Duration::ZERO, || criterion_8(tmp.path())),
        run_criterion(9, "determinism", None, Duration::ZERO, || criterion_9(tmp.path())),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    let ran = (1..=9).filter(|&n| selected(n)).count();
    report(&format!("acceptance: {}/{ran} criteria pass", ran - failed.len()));
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
