use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{annotate_by_interaction, ConfidenceEvidence, InteractionEvent};
use crate::mapping::ObjectLevelMap;
use crate::predictor::AffordanceModel;
use crate::rng::{self, Rng};
use crate::world::{
    randomize_layout, render, spawn_agent, step, Affordance, AgentState, CameraConfig, Frame, Scene, WorldAction, WorldParams,
};

use super::model::{masked_log_softmax, PolicyModel};
use super::observation::{ObservationBuilder, ObservationConfig};
use super::ppo::{Rollout, Transition};
use super::{
    action_mask, action_name, decode_action, object_stats, targets_per_cell, to_world_action, ActionMode, Arm,
    PolicyAction, RewardConfig, RewardTracker,
};
use crate::mapping::VisitGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    pub arm: Arm,
    pub action_mode: ActionMode,
    pub camera: CameraConfig,
    pub world: WorldParams,
    pub observation: ObservationConfig,
    pub reward: RewardConfig,
    /// Minimum mean predicted probability for an object to be targetable.
    pub confidence_floor: f64,
    pub map_resolution: f64,
    pub layout_attempts: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 600,
            arm: Arm::Full,
            action_mode: ActionMode::Explicit,
            camera: CameraConfig::default(),
            world: WorldParams::default(),
            observation: ObservationConfig::default(),
            reward: RewardConfig::default(),
            confidence_floor: 0.05,
            map_resolution: 0.05,
            layout_attempts: 200,
        }
    }
}

/// Who chooses actions.
#[derive(Clone, Copy, Debug)]
pub enum PolicyDriver<'a> {
    /// Uniform over enabled actions.
    Random,
    /// Sample from the network's masked distribution.
    Sample(&'a PolicyModel),
    /// Most probable enabled action.
    Greedy(&'a PolicyModel),
    /// Replay a fixed action sequence.
    Scripted(&'a [usize]),
}

/// One row of the per-episode action log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionLogRow {
    pub step: usize,
    pub action: usize,
    pub name: String,
    pub target: Option<i32>,
    pub affordance: Option<Affordance>,
    pub success: bool,
    pub r_nav: f64,
    pub r_int: f64,
    pub r_fail: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: usize,
    pub total_reward: f64,
    pub attempts: usize,
    pub successes: usize,
    /// Distinct instances with at least one attempted interaction.
    pub interacted: BTreeSet<i32>,
}

impl EpisodeStats {
    /// Successes over attempts, 0 with no attempts.
    pub fn success_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.successes as f64 / self.attempts as f64
        }
    }
}

pub struct EpisodeOutput {
    /// Scene as it stood after the last step.
    pub scene: Scene,
    /// Scene right after layout randomization.
    pub initial_scene: Scene,
    pub initial_agent: AgentState,
    pub rollout: Rollout,
    pub frames: Vec<Arc<Frame>>,
    pub events: Vec<InteractionEvent>,
    pub map: ObjectLevelMap,
    pub evidence: ConfidenceEvidence,
    pub stats: EpisodeStats,
    pub log: Vec<ActionLogRow>,
}

fn choose(driver: &PolicyDriver<'_>, logits: Option<&[f64]>, mask: &[bool], step: usize, rng: &mut Rng) -> (usize, f64) {
    let enabled: Vec<usize> = (0..mask.len()).filter(|i| mask[*i]).collect();
    match (driver, logits) {
        (PolicyDriver::Sample(_), Some(l)) => {
            let lp = masked_log_softmax(l, mask);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = *enabled.last().expect("navigation is always enabled");
            for &i in &enabled {
                acc += lp[i].exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            (pick, lp[pick])
        }
        (PolicyDriver::Greedy(_), Some(l)) => {
            let lp = masked_log_softmax(l, mask);
            let pick = enabled.iter().copied().fold(enabled[0], |b, i| if lp[i] > lp[b] { i } else { b });
            (pick, lp[pick])
        }
        (PolicyDriver::Scripted(seq), _) => {
            let a = seq.get(step).copied().unwrap_or(0);
            let a = if mask.get(a).copied().unwrap_or(false) { a } else { 0 };
            (a, -(enabled.len() as f64).ln())
        }
        _ => {
            let pick = enabled[rng.random_range(0..enabled.len())];
            (pick, -(enabled.len() as f64).ln())
        }
    }
}

/// Layout and spawn of an episode; both depend only on the seeds.
pub fn episode_start(base: &Scene, config: &EpisodeConfig, seed: u64, episode: u64) -> Result<(Scene, AgentState)> {
    let s = rng::derive(seed, &[rng::tag::EPISODE, episode]);
    let scene = randomize_layout(base, s, config.layout_attempts)?;
    let agent = spawn_agent(&scene, s, config.world.agent_radius)?;
    Ok((scene, agent))
}

/// Re-execute a logged episode's world actions from the same start and
/// recompute outcomes and rewards.
pub fn replay_actions(base: &Scene, config: &EpisodeConfig, seed: u64, episode: u64, rows: &[ActionLogRow]) -> Result<Vec<ActionLogRow>> {
    let (mut scene, mut agent) = episode_start(base, config, seed, episode)?;
    let mut tracker = RewardTracker::new(config.reward, VisitGrid::new(&scene.room));
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let decoded = decode_action(row.action, config.action_mode)?;
        let world_action = match (decoded, row.affordance) {
            (PolicyAction::Nav(n), _) => WorldAction::Navigate(n),
            (PolicyAction::Drop, _) => WorldAction::Drop,
            (PolicyAction::MoveHeld { axis, positive }, _) => WorldAction::MoveHeld { axis, positive },
            (_, Some(Affordance::Pickup)) => WorldAction::Pickup { target: row.target },
            (_, Some(Affordance::Push)) => WorldAction::Push { target: row.target },
            (_, None) => return Err(Error::contract(format!("step {}: interaction without affordance", row.step))),
        };
        let outcome = step(&mut scene, &mut agent, &world_action, &config.world)?;
        let interaction = world_action.target().zip(world_action.affordance());
        let (reward, comp) = tracker.reward(&agent, outcome.success, interaction);
        out.push(ActionLogRow {
            step: row.step,
            action: row.action,
            name: action_name(decoded),
            target: world_action.target(),
            affordance: world_action.affordance(),
            success: outcome.success,
            r_nav: comp.nav,
            r_int: comp.int,
            r_fail: comp.fail,
            reward,
        });
    }
    Ok(out)
}

/// Collect one episode: randomize the layout, spawn the agent, then loop
/// render, predict, map, mask, act, label and reward.
pub fn run_episode(
    base: &Scene,
    predictor: &AffordanceModel,
    driver: PolicyDriver<'_>,
    config: &EpisodeConfig,
    seed: u64,
    episode: u64,
) -> Result<EpisodeOutput> {
    let (mut scene, mut agent) = episode_start(base, config, seed, episode)?;
    let initial_scene = scene.clone();
    let initial_agent = agent.clone();
    let camera = CameraConfig {
        noise_seed: rng::derive(seed, &[rng::tag::RENDER, episode]),
        ..config.camera.clone()
    };
    let mut rng = rng::rng_for(seed, &[rng::tag::POLICY, episode]);
    let mut map = ObjectLevelMap::new(&scene.room, config.map_resolution)?;
    let mut tracker = RewardTracker::new(config.reward, VisitGrid::new(&scene.room));
    let mut builder = ObservationBuilder::new(config.observation, config.arm, config.action_mode);
    let model = match driver {
        PolicyDriver::Sample(m) | PolicyDriver::Greedy(m) => Some(m),
        _ => None,
    };
    let mut out_frames = Vec::with_capacity(config.max_steps);
    let mut events = Vec::new();
    let mut evidence = ConfidenceEvidence::default();
    let mut stats = EpisodeStats::default();
    let mut log = Vec::with_capacity(config.max_steps);
    let mut rollout = Rollout::default();

    for t in 0..config.max_steps {
        let frame = Arc::new(render(&scene, &agent, &camera, config.world.camera_height, t));
        let probs = predictor.predict(&frame, &scene);
        map.integrate_frame(&frame);
        evidence.add_frame(&frame, &probs);
        let targets = targets_per_cell(&object_stats(&frame, &probs), frame.height, frame.width, config.confidence_floor);
        let mask = action_mask(&agent, &targets, config.action_mode);

        let (obs, fwd) = match model {
            Some(m) => {
                let map_view = config.arm.uses_map().then_some(&map);
                let obs = builder.build(
                    &frame,
                    &probs,
                    &agent,
                    config.world.arm_base(&agent),
                    map_view,
                    &tracker.visits,
                    &scene.room,
                );
                let fwd = m.forward(&obs);
                (Some(obs), Some(fwd))
            }
            None => (None, None),
        };
        let (action, logp) = choose(&driver, fwd.as_ref().map(|f| f.logits.as_slice()), &mask, t, &mut rng);
        let world_action = to_world_action(decode_action(action, config.action_mode)?, &targets);
        let target = world_action.target();
        let point = target.and_then(|id| scene.instance(id)).map(|o| o.position);

        let outcome = step(&mut scene, &mut agent, &world_action, &config.world)?;
        let known: Vec<_> = outcome.moved.iter().filter(|m| map.instance(m.id).is_some()).copied().collect();
        map.apply_motion(&known)?;

        let interaction = match (target, world_action.affordance()) {
            (Some(id), Some(a)) => Some((id, a)),
            _ => None,
        };
        if let Some((id, a)) = interaction {
            map.ensure_instance(id);
            annotate_by_interaction(&mut map, id, a, outcome.success)?;
            events.push(InteractionEvent {
                step: t,
                instance: id,
                affordance: a,
                success: outcome.success,
                point: point.expect("targets are scene instances"),
            });
            stats.attempts += 1;
            stats.successes += usize::from(outcome.success);
            stats.interacted.insert(id);
        }
        let (reward, comp) = tracker.reward(&agent, outcome.success, interaction);
        stats.total_reward += reward;
        stats.steps += 1;
        log.push(ActionLogRow {
            step: t,
            action,
            name: action_name(decode_action(action, config.action_mode)?),
            target,
            affordance: world_action.affordance(),
            success: outcome.success,
            r_nav: comp.nav,
            r_int: comp.int,
            r_fail: comp.fail,
            reward,
        });
        if let (Some(obs), Some(fwd)) = (obs, fwd) {
            builder.record(&obs, action, outcome.success, reward);
            rollout.transitions.push(Transition {
                obs,
                action,
                mask,
                logp,
                value: fwd.value,
                reward,
                done: t + 1 == config.max_steps,
            });
        }
        out_frames.push(frame);
    }

    Ok(EpisodeOutput {
        scene,
        initial_scene,
        initial_agent,
        rollout,
        frames: out_frames,
        events,
        map,
        evidence,
        stats,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::model::PolicyDims;
    use crate::world::{generate_scene, SceneConfig};

    fn small() -> EpisodeConfig {
        EpisodeConfig {
            max_steps: 40,
            camera: CameraConfig {
                width: 24,
                height: 24,
                ..CameraConfig::default()
            },
            ..EpisodeConfig::default()
        }
    }

    #[test]
    fn random_episode_is_reproducible() {
        let scene = generate_scene(1, &SceneConfig::default()).unwrap();
        let oracle = AffordanceModel::oracle();
        let a = run_episode(&scene, &oracle, PolicyDriver::Random, &small(), 9, 0).unwrap();
        let b = run_episode(&scene, &oracle, PolicyDriver::Random, &small(), 9, 0).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.stats.total_reward, b.stats.total_reward);
        assert_eq!(a.frames.len(), 40);
        let total: f64 = a.log.iter().map(|r| r.reward).sum();
        assert_eq!(total, a.stats.total_reward);
        for r in &a.log {
            assert_eq!(r.reward, r.r_nav + r.r_int + r.r_fail);
        }
        let c = run_episode(&scene, &oracle, PolicyDriver::Random, &small(), 9, 1).unwrap();
        assert_ne!(a.log, c.log);
        assert_eq!(replay_actions(&scene, &small(), 9, 0, &a.log).unwrap(), a.log);
    }

    #[test]
    fn model_episode_fills_rollout() {
        let scene = generate_scene(2, &SceneConfig::default()).unwrap();
        let cfg = small();
        let b = ObservationBuilder::new(cfg.observation, cfg.arm, cfg.action_mode);
        let dims = PolicyDims {
            channels: b.channels(),
            side: cfg.observation.side,
            flat: b.flat_dim(),
            actions: cfg.action_mode.num_actions(),
        };
        let m = PolicyModel::new(dims, 0);
        let out = run_episode(&scene, &AffordanceModel::oracle(), PolicyDriver::Sample(&m), &cfg, 3, 0).unwrap();
        assert_eq!(out.rollout.len(), 40);
        assert!(out.rollout.transitions.last().unwrap().done);
        assert!(out.rollout.transitions.iter().all(|t| t.mask[t.action]));
        // R_int total equals distinct first successes.
        let int: f64 = out.log.iter().map(|r| r.r_int).sum();
        let firsts: BTreeSet<_> = out.events.iter().filter(|e| e.success).map(|e| (e.instance, e.affordance)).collect();
        assert_eq!(int, firsts.len() as f64);
    }
}
