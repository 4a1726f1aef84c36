//! Experiment runner: scene sets, the collect/label/retrain/update loop with
//! resumable checkpoints, evaluation on held-out scenes, ablation suites and
//! replay.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{
    episode_rates, evaluate_frames, objectwise_interaction_test, plot_metrics, read_records, scripted_tour,
    summary_markdown, write_records, Metric, MetricRecord, ObjectwiseResult, ObjectwiseRow,
};
use crate::labeling::{
    annotate_by_confidence, extract_dataset, propagate_to_frames, segment_window_annotation, sphere_annotation,
};
use crate::nn::Adam;
use crate::policy::{
    ppo_update, replay_actions, run_episode, ActionLogRow, Arm, EpisodeOutput, ObservationBuilder, PolicyDims,
    PolicyDriver, PolicyModel,
};
use crate::predictor::{maybe_replace, AffordanceModel, TrainState};
use crate::rng;
use crate::world::{generate_scene, render, Affordance, Frame, Scene};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
/// Fraction of a run's last recorded steps averaged into its final value.
pub const FINAL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSplit {
    Train,
    Val,
    Test,
}

impl SceneSplit {
    pub const ALL: [SceneSplit; 3] = [SceneSplit::Train, SceneSplit::Val, SceneSplit::Test];

    pub fn name(self) -> &'static str {
        match self {
            SceneSplit::Train => "train",
            SceneSplit::Val => "val",
            SceneSplit::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSet {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl SceneSet {
    pub fn get(&self, s: SceneSplit) -> &[Scene] {
        match s {
            SceneSplit::Train => &self.train,
            SceneSplit::Val => &self.val,
            SceneSplit::Test => &self.test,
        }
    }
}

pub fn scene_seed(seed: u64, split: SceneSplit, index: usize) -> u64 {
    rng::derive(seed, &[rng::tag::SCENE, split as u64, index as u64])
}

pub fn generate_scene_set(cfg: &ExperimentConfig) -> Result<SceneSet> {
    let make = |split: SceneSplit, n: usize| -> Result<Vec<Scene>> {
        (0..n).map(|i| generate_scene(scene_seed(cfg.seed, split, i), &cfg.world.scene)).collect()
    };
    Ok(SceneSet {
        train: make(SceneSplit::Train, cfg.world.train_scenes)?,
        val: make(SceneSplit::Val, cfg.world.val_scenes)?,
        test: make(SceneSplit::Test, cfg.world.test_scenes)?,
    })
}

/// Create `dir`, refusing an existing non-empty directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = !dir.is_dir() || fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Exists(dir.to_path_buf()));
            }
            if dir.is_dir() {
                fs::remove_dir_all(dir)?;
            } else {
                fs::remove_file(dir)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn scene_file(dir: &Path, split: SceneSplit, i: usize) -> PathBuf {
    dir.join(split.name()).join(format!("scene_{i:03}.json"))
}

/// Write the seeded train/val/test scene partition under `dir`.
pub fn write_scene_set(cfg: &ExperimentConfig, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let set = generate_scene_set(cfg)?;
    prepare_out_dir(dir, force)?;
    let mut written = Vec::new();
    for split in SceneSplit::ALL {
        fs::create_dir_all(dir.join(split.name()))?;
        for (i, s) in set.get(split).iter().enumerate() {
            let p = scene_file(dir, split, i);
            s.save(&p)?;
            written.push(p);
        }
    }
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(written)
}

pub fn load_scene_set(dir: &Path) -> Result<SceneSet> {
    if !dir.is_dir() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    let load = |split: SceneSplit| -> Result<Vec<Scene>> {
        let mut out = Vec::new();
        loop {
            let p = scene_file(dir, split, out.len());
            if !p.exists() {
                break;
            }
            out.push(Scene::load(&p)?);
        }
        Ok(out)
    };
    let set = SceneSet {
        train: load(SceneSplit::Train)?,
        val: load(SceneSplit::Val)?,
        test: load(SceneSplit::Test)?,
    };
    if set.train.is_empty() {
        return Err(Error::Missing(scene_file(dir, SceneSplit::Train, 0)));
    }
    let train: BTreeSet<u64> = set.train.iter().map(|s| s.seed).collect();
    if set.val.iter().chain(&set.test).any(|s| train.contains(&s.seed)) {
        return Err(Error::malformed(dir, "a training scene also appears in a held-out split"));
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeArtifact {
    pub episode: u64,
    pub scene_index: usize,
    pub scene_seed: u64,
    pub action_log: PathBuf,
    pub steps: usize,
    pub total_reward: f64,
    pub attempts: usize,
    pub successes: usize,
    pub predictor_version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub code_version: String,
    pub arm: Arm,
    pub seed: u64,
    pub env_steps: u64,
    pub config: PathBuf,
    pub episodes: Vec<EpisodeArtifact>,
    pub final_checkpoint: PathBuf,
    pub policy_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join("manifest.json");
        let text = fs::read_to_string(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(p.clone()),
            _ => Error::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(&p, e.to_string()))
    }

    /// Every referenced file relative to `run_dir`.
    pub fn files(&self) -> Vec<PathBuf> {
        let mut v = vec![self.config.clone(), self.final_checkpoint.clone(), self.policy_checkpoint.clone(), self.metrics_csv.clone()];
        v.extend(self.episodes.iter().map(|e| e.action_log.clone()));
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    schema_version: u32,
    config_hash: String,
    next_episode: u64,
    updates: u64,
    env_steps: u64,
    policy: PolicyModel,
    policy_opt: Adam,
    best: AffordanceModel,
    current: AffordanceModel,
    predictor: TrainState,
    records: Vec<MetricRecord>,
    episodes: Vec<EpisodeArtifact>,
}

pub fn policy_dims(cfg: &ExperimentConfig) -> PolicyDims {
    let b = ObservationBuilder::new(cfg.policy.observation, cfg.arm, cfg.policy.action_mode);
    PolicyDims {
        channels: b.channels(),
        side: cfg.policy.observation.side,
        flat: b.flat_dim(),
        actions: cfg.policy.action_mode.num_actions(),
    }
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-s{}", cfg.arm, cfg.seed)
}

fn fresh_state(cfg: &ExperimentConfig, hash: String) -> TrainerState {
    let policy = PolicyModel::new(policy_dims(cfg), rng::derive(cfg.seed, &[rng::tag::INIT, 10]));
    let policy_opt = cfg.policy.ppo.optimizer(policy.n_params());
    let best = AffordanceModel::new(&cfg.predictor.hidden, rng::derive(cfg.seed, &[rng::tag::INIT, 11]));
    let predictor = TrainState::new(cfg.predictor.clone(), &best, rng::derive(cfg.seed, &[rng::tag::TRAIN]));
    TrainerState {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config_hash: hash,
        next_episode: 0,
        updates: 0,
        env_steps: 0,
        policy,
        policy_opt,
        current: best.clone(),
        best,
        predictor,
        records: Vec::new(),
        episodes: Vec::new(),
    }
}

fn write_state(path: &Path, st: &TrainerState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    ciborium::into_writer(st, &mut f).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_state(path: &Path) -> Result<TrainerState> {
    let f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let st: TrainerState = ciborium::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::malformed(path, e.to_string()))?;
    if st.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::malformed(path, "unsupported checkpoint version"));
    }
    Ok(st)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_action_log(path: &Path) -> Result<Vec<ActionLogRow>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(|e| Error::malformed(path, e.to_string()))).collect()
}

fn record(cfg: &ExperimentConfig, step: u64, metric: Metric, affordance: &str, value: f64) -> MetricRecord {
    MetricRecord {
        run_id: run_id(cfg),
        arm: cfg.arm.name().to_string(),
        seed: cfg.seed,
        step,
        metric,
        affordance: affordance.to_string(),
        value,
    }
}

/// Label an episode according to the arm, update the predictor, and emit
/// the episode's training metrics.
fn absorb_episode(cfg: &ExperimentConfig, st: &mut TrainerState, out: &mut EpisodeOutput, episode: u64, scene_seeds: &BTreeSet<u64>) -> Result<()> {
    if !scene_seeds.contains(&out.initial_scene.seed) {
        return Err(Error::contract(format!("episode {episode} ran on a scene outside the training partition")));
    }
    let lab = &cfg.labeling;
    let masks = match cfg.arm {
        Arm::Full => {
            if st.env_steps >= lab.confidence_start_steps {
                annotate_by_confidence(&mut out.map, &out.evidence, lab.thresholds);
            }
            propagate_to_frames(&out.map, &out.frames)
        }
        Arm::NoMapSeg => segment_window_annotation(&out.events, &out.frames, lab.window),
        Arm::NoMapNoSeg => sphere_annotation(&out.events, &out.frames, lab.sphere_radius, lab.window),
    };
    st.env_steps += out.stats.steps as u64;
    let rates = episode_rates(&out.events, &out.scene, &masks, &out.frames);
    let step = st.env_steps;
    st.records.push(record(cfg, step, Metric::InteractionSuccessRate, "all", rates.interaction_success_rate));
    if let Some(v) = rates.interacted_object_rate {
        st.records.push(record(cfg, step, Metric::InteractedObjectRate, "all", v));
    }
    for a in Affordance::ALL {
        let i = a.index();
        st.records.push(record(cfg, step, Metric::InteractableAnnotationRate, a.name(), rates.interactable_annotation_rate[i]));
        st.records.push(record(cfg, step, Metric::NonInteractableAnnotationRate, a.name(), rates.non_interactable_annotation_rate[i]));
    }

    let ds = extract_dataset(
        episode,
        &out.frames,
        &masks,
        lab.splits,
        cfg.predictor.max_frames_per_episode,
        rng::derive(cfg.seed, &[rng::tag::SPLIT]),
    )?;
    st.predictor.add_dataset(&ds);
    for _ in 0..cfg.predictor.epochs_per_episode {
        st.predictor.train_epoch(&mut st.current)?;
    }
    let val = st.predictor.validation_set();
    if maybe_replace(&mut st.best, &st.current, &val) {
        info!("episode {episode}: predictor replaced, version {} val F1 {:.4}", st.best.version, st.best.val_score);
    }
    Ok(())
}

/// Frame-wise and object-wise metrics of `model` on `scenes`.
pub fn evaluate_scenes(cfg: &ExperimentConfig, model: &AffordanceModel, scenes: &[Scene], step: u64) -> Result<(Vec<MetricRecord>, ObjectwiseResult)> {
    let mut rows = Vec::new();
    let mut iou = [0.0; 2];
    let mut acc = [(0.0, 0usize); 2];
    let mut frames_total = 0usize;
    for scene in scenes {
        let frames: Vec<Frame> = scripted_tour(scene, cfg.eval.tour_views, cfg.world.params.agent_radius)
            .iter()
            .enumerate()
            .map(|(k, a)| render(scene, a, &cfg.world.camera, cfg.world.params.camera_height, k))
            .collect();
        let e = evaluate_frames(model, scene, &frames, &cfg.eval)?;
        for a in 0..2 {
            iou[a] += e.iou[a] * e.frames as f64;
            if let Some(v) = e.object_accuracy[a] {
                acc[a].0 += v;
                acc[a].1 += 1;
            }
        }
        frames_total += e.frames;
    }
    let ow = objectwise_interaction_test(scenes, model, &cfg.world.params, &cfg.world.camera, &cfg.eval)?;
    for a in Affordance::ALL {
        let i = a.index();
        if frames_total > 0 {
            rows.push(record(cfg, step, Metric::AffordanceIou, a.name(), iou[i] / frames_total as f64));
        }
        if acc[i].1 > 0 {
            rows.push(record(cfg, step, Metric::ObjectAccuracy, a.name(), acc[i].0 / acc[i].1 as f64));
        }
        let c = &ow.confusion[i];
        if c.total() > 0 {
            rows.push(record(cfg, step, Metric::Precision, a.name(), c.precision()));
            rows.push(record(cfg, step, Metric::Recall, a.name(), c.recall()));
            rows.push(record(cfg, step, Metric::F1, a.name(), c.f1()));
        }
    }
    Ok((rows, ow))
}

fn artifact_paths(run_dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        run_dir.join("checkpoint.cbor"),
        run_dir.join("metrics.csv"),
        run_dir.join("predictor.ckpt"),
        run_dir.join("policy.cbor"),
    )
}

/// Train one run into `run_dir`. With `resume`, continue from the last
/// checkpoint there; a run resumed from any checkpoint produces the same
/// outputs as an uninterrupted one.
pub fn train(cfg: &ExperimentConfig, scenes: &SceneSet, run_dir: &Path, force: bool, resume: bool) -> Result<RunManifest> {
    let hash = cfg.hash()?;
    let (ckpt, metrics_csv, predictor_ckpt, policy_ckpt) = artifact_paths(run_dir);
    let mut st = if resume && ckpt.exists() {
        let st = read_state(&ckpt)?;
        if st.config_hash != hash {
            return Err(Error::Config(format!("checkpoint in {} was written by a different config", run_dir.display())));
        }
        info!("resuming at episode {}", st.next_episode);
        st
    } else {
        if !resume {
            prepare_out_dir(run_dir, force)?;
        }
        fs::create_dir_all(run_dir)?;
        fresh_state(cfg, hash.clone())
    };
    fs::create_dir_all(run_dir.join("episodes"))?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml()?)?;

    let ep_cfg = cfg.episode_config();
    let total = cfg.episodes();
    let train_seeds: BTreeSet<u64> = scenes.train.iter().map(|s| s.seed).collect();
    let held_out: BTreeSet<u64> = scenes.val.iter().chain(&scenes.test).map(|s| s.seed).collect();
    if !train_seeds.is_disjoint(&held_out) {
        return Err(Error::contract("training and held-out scenes overlap"));
    }
    while st.next_episode < total {
        let first = st.next_episode;
        let ids: Vec<u64> = (first..total.min(first + cfg.policy.workers as u64)).collect();
        let policy = st.policy.clone();
        let predictor = st.best.clone();
        let mut outputs: Vec<EpisodeOutput> = ids
            .par_iter()
            .map(|&e| {
                let scene = &scenes.train[(e % scenes.train.len() as u64) as usize];
                run_episode(scene, &predictor, PolicyDriver::Sample(&policy), &ep_cfg, cfg.seed, e)
            })
            .collect::<Result<_>>()?;
        for (out, &e) in outputs.iter_mut().zip(&ids) {
            let log_rel = PathBuf::from("episodes").join(format!("episode_{e:05}.csv"));
            write_csv(&run_dir.join(&log_rel), &out.log)?;
            absorb_episode(cfg, &mut st, out, e, &train_seeds)?;
            st.episodes.push(EpisodeArtifact {
                episode: e,
                scene_index: (e % scenes.train.len() as u64) as usize,
                scene_seed: out.initial_scene.seed,
                action_log: log_rel,
                steps: out.stats.steps,
                total_reward: out.stats.total_reward,
                attempts: out.stats.attempts,
                successes: out.stats.successes,
                predictor_version: predictor.version,
            });
        }
        let rollouts: Vec<_> = outputs.into_iter().map(|o| o.rollout).collect();
        let mut prng = rng::rng_for(cfg.seed, &[rng::tag::PPO, st.updates]);
        let stats = ppo_update(&mut st.policy, &mut st.policy_opt, &rollouts, &cfg.policy.ppo, &mut prng)?;
        st.updates += 1;
        st.next_episode = *ids.last().expect("non-empty batch") + 1;
        let mean_reward = rollouts.iter().map(|r| r.total_reward()).sum::<f64>() / rollouts.len() as f64;
        info!(
            "update {} (episodes {}..={}): mean reward {mean_reward:.2}, entropy {:.3}, steps {}",
            st.updates,
            first,
            st.next_episode - 1,
            stats.entropy,
            st.env_steps
        );
        let last = st.next_episode >= total;
        if (st.updates % cfg.budget.eval_every as u64 == 0 || last) && !scenes.val.is_empty() {
            let (rows, _) = evaluate_scenes(cfg, &st.best, &scenes.val, st.env_steps)?;
            st.records.extend(rows);
        }
        if st.updates % cfg.budget.checkpoint_every as u64 == 0 || last {
            write_records(&metrics_csv, &st.records)?;
            write_state(&ckpt, &st)?;
        }
    }

    st.best.save(&predictor_ckpt)?;
    let mut f = fs::File::create(&policy_ckpt)?;
    ciborium::into_writer(&st.policy, &mut f).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_records(&metrics_csv, &st.records)?;
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_hash: hash,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        arm: cfg.arm,
        seed: cfg.seed,
        env_steps: st.env_steps,
        config: PathBuf::from("config.toml"),
        episodes: st.episodes.clone(),
        final_checkpoint: PathBuf::from("predictor.ckpt"),
        policy_checkpoint: PathBuf::from("policy.cbor"),
        metrics_csv: PathBuf::from("metrics.csv"),
    };
    fs::write(run_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_policy(path: &Path) -> Result<PolicyModel> {
    let f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    ciborium::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::malformed(path, e.to_string()))
}

/// Evaluation outputs of one run on the test scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub test: Vec<MetricRecord>,
    pub objectwise: Vec<ObjectwiseRow>,
}

/// Evaluate a run's final predictor on the test scenes and write
/// `test.csv`, `objectwise.csv` and `objectwise_trials.csv` into `out_dir`.
pub fn evaluate_run(run_dir: &Path, scenes: &SceneSet, out_dir: &Path) -> Result<EvalReport> {
    let manifest = RunManifest::load(run_dir)?;
    let cfg = ExperimentConfig::load(&run_dir.join(&manifest.config))?;
    let model = AffordanceModel::load(&run_dir.join(&manifest.final_checkpoint))?;
    evaluate_model(&cfg, &model, manifest.env_steps, scenes, out_dir)
}

pub fn evaluate_model(cfg: &ExperimentConfig, model: &AffordanceModel, step: u64, scenes: &SceneSet, out_dir: &Path) -> Result<EvalReport> {
    if scenes.test.is_empty() {
        return Err(Error::Missing(PathBuf::from("test scenes")));
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    let (test, ow) = evaluate_scenes(cfg, model, &scenes.test, step)?;
    let objectwise: Vec<ObjectwiseRow> = Affordance::ALL
        .iter()
        .map(|a| {
            let c = ow.confusion[a.index()];
            ObjectwiseRow {
                run_id: run_id(cfg),
                arm: cfg.arm.name().to_string(),
                seed: cfg.seed,
                affordance: a.name().to_string(),
                tp: c.tp,
                fp: c.fp,
                tn: c.tn,
                fn_: c.fn_,
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                accuracy: c.accuracy(),
                skipped: ow.skipped.len(),
            }
        })
        .collect();
    write_records(&out_dir.join("test.csv"), &test)?;
    write_csv(&out_dir.join("objectwise.csv"), &objectwise)?;
    #[derive(Serialize)]
    struct TrialRow<'a> {
        scene_seed: u64,
        instance: i32,
        category: &'a str,
        p_pickup: f64,
        p_push: f64,
        pickup: bool,
        push: bool,
    }
    let trials: Vec<TrialRow> = ow
        .trials
        .iter()
        .map(|t| TrialRow {
            scene_seed: t.scene_seed,
            instance: t.instance,
            category: &t.category,
            p_pickup: t.mean_prob[0],
            p_push: t.mean_prob[1],
            pickup: t.outcome[0],
            push: t.outcome[1],
        })
        .collect();
    write_csv(&out_dir.join("objectwise_trials.csv"), &trials)?;
    Ok(EvalReport { test, objectwise })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub curves: Vec<MetricRecord>,
    pub test: Vec<MetricRecord>,
    pub objectwise: Vec<ObjectwiseRow>,
    pub summary: String,
}

/// Train and evaluate every arm for every seed with otherwise identical
/// settings, then merge reports into `out_dir`.
pub fn run_ablation_suite(base: &ExperimentConfig, seeds: &[u64], arms: &[Arm], scenes: &SceneSet, out_dir: &Path, force: bool) -> Result<AblationReport> {
    if seeds.len() < 2 {
        return Err(Error::Config("an ablation suite needs at least two seeds".into()));
    }
    let mut configs = Vec::new();
    for &arm in arms {
        for &seed in seeds {
            let mut c = base.clone();
            c.arm = arm;
            c.seed = seed;
            configs.push(c);
        }
    }
    check_comparable(&configs)?;
    prepare_out_dir(out_dir, force)?;
    fs::write(out_dir.join("config.toml"), base.to_toml()?)?;
    let reports: Vec<(Vec<MetricRecord>, EvalReport)> = configs
        .par_iter()
        .map(|c| {
            let dir = out_dir.join("runs").join(run_id(c));
            info!("ablation run {}", run_id(c));
            train(c, scenes, &dir, false, false)?;
            let rep = evaluate_run(&dir, scenes, &dir.join("eval"))?;
            Ok((read_records(&dir.join("metrics.csv"))?, rep))
        })
        .collect::<Result<_>>()?;
    let mut curves = Vec::new();
    let mut test = Vec::new();
    let mut objectwise = Vec::new();
    for (c, rep) in reports {
        curves.extend(c);
        test.extend(rep.test);
        objectwise.extend(rep.objectwise);
    }
    write_records(&out_dir.join("report.csv"), &curves)?;
    write_records(&out_dir.join("test.csv"), &test)?;
    write_csv(&out_dir.join("objectwise.csv"), &objectwise)?;
    let summary = summary_markdown(&curves, &test, FINAL_FRACTION);
    fs::write(out_dir.join("summary.md"), &summary)?;
    plot_metrics(&curves, &out_dir.join("plots"))?;
    Ok(AblationReport {
        curves,
        test,
        objectwise,
        summary,
    })
}

/// Refuse runs whose settings differ in anything but arm and seed.
pub fn check_comparable(configs: &[ExperimentConfig]) -> Result<()> {
    let Some(first) = configs.first() else {
        return Ok(());
    };
    let want = first.shared_part()?;
    for c in &configs[1..] {
        if c.shared_part()? != want {
            return Err(Error::Config(format!("run {} differs from {} beyond arm and seed", run_id(c), run_id(first))));
        }
    }
    Ok(())
}

/// Replay a logged episode and write the recomputed log to `out`. Returns
/// the number of rows that differ from the original.
pub fn replay_episode(run_dir: &Path, scenes: &SceneSet, episode: u64, out: &Path) -> Result<usize> {
    let manifest = RunManifest::load(run_dir)?;
    let cfg = ExperimentConfig::load(&run_dir.join(&manifest.config))?;
    let art = manifest
        .episodes
        .iter()
        .find(|e| e.episode == episode)
        .ok_or_else(|| Error::Missing(run_dir.join(format!("episodes/episode_{episode:05}.csv"))))?;
    let rows = read_action_log(&run_dir.join(&art.action_log))?;
    let scene = scenes
        .train
        .get(art.scene_index)
        .filter(|s| s.seed == art.scene_seed)
        .ok_or_else(|| Error::Config(format!("scene {} of episode {episode} not found in the scene set", art.scene_seed)))?;
    let replayed = replay_actions(scene, &cfg.episode_config(), cfg.seed, episode, &rows)?;
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    write_csv(out, &replayed)?;
    Ok(rows.iter().zip(&replayed).filter(|(a, b)| a != b).count() + rows.len().abs_diff(replayed.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.world.train_scenes = 2;
        c.world.val_scenes = 1;
        c.world.test_scenes = 1;
        c.world.scene.min_objects = 6;
        c.world.scene.max_objects = 8;
        c.world.scene.room_width = 6.0;
        c.world.scene.room_depth = 6.0;
        c.world.camera.width = 16;
        c.world.camera.height = 16;
        c.policy.episode_steps = 30;
        c.policy.workers = 2;
        c.budget.total_steps = 120;
        c.eval.tour_views = 4;
        c.predictor.epochs_per_episode = 1;
        c
    }

    #[test]
    fn scene_set_partition_and_refusal() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let p = dir.path().join("scenes");
        let files = write_scene_set(&c, &p, false).unwrap();
        assert_eq!(files.len(), 4);
        assert!(matches!(write_scene_set(&c, &p, false), Err(Error::Exists(_))));
        let set = load_scene_set(&p).unwrap();
        assert_eq!((set.train.len(), set.val.len(), set.test.len()), (2, 1, 1));
        assert_eq!(set, generate_scene_set(&c).unwrap());
        assert!(matches!(load_scene_set(&dir.path().join("nope")), Err(Error::Missing(_))));
    }

    #[test]
    fn train_is_deterministic_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let set = generate_scene_set(&c).unwrap();
        let a = dir.path().join("a");
        let m = train(&c, &set, &a, false, false).unwrap();
        assert_eq!(m.episodes.len(), 4);
        assert_eq!(m.env_steps, 120);
        for f in m.files() {
            assert!(a.join(f).exists());
        }
        let b = dir.path().join("b");
        train(&c, &set, &b, false, false).unwrap();
        for f in ["metrics.csv", "episodes/episode_00003.csv", "manifest.json", "predictor.ckpt"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        // Interrupt after the first update, then resume.
        let mut short = c.clone();
        short.budget.total_steps = 60;
        let r = dir.path().join("r");
        train(&short, &set, &r, false, false).unwrap();
        let mut st = read_state(&r.join("checkpoint.cbor")).unwrap();
        st.config_hash = c.hash().unwrap();
        write_state(&r.join("checkpoint.cbor"), &st).unwrap();
        train(&c, &set, &r, false, true).unwrap();
        for f in ["metrics.csv", "episodes/episode_00003.csv", "predictor.ckpt"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(r.join(f)).unwrap(), "{f}");
        }
        assert!(matches!(train(&c, &set, &a, false, false), Err(Error::Exists(_))));
        let n = replay_episode(&a, &set, 2, &dir.path().join("replay.csv")).unwrap();
        assert_eq!(n, 0);
        assert_eq!(fs::read(a.join("episodes/episode_00002.csv")).unwrap(), fs::read(dir.path().join("replay.csv")).unwrap());
    }

    #[test]
    fn comparable_configs_only() {
        let c = tiny();
        let mut d = c.clone();
        d.arm = Arm::NoMapSeg;
        d.seed = 3;
        check_comparable(&[c.clone(), d.clone()]).unwrap();
        d.budget.total_steps = 7;
        assert!(matches!(check_comparable(&[c, d]), Err(Error::Config(_))));
    }
}
