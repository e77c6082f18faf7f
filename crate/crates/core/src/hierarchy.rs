//! Two-level execution and transition fabrication.
//!
//! A high-level decision proposes a positional subgoal for the gripper; the
//! low level then gets at most `k` primitive steps to come within
//! `threshold` of it. From each such segment we fabricate:
//!
//! * low-level primitive transitions rewarded 0/−1 on the subgoal,
//! * a high-level hindsight action transition whose action is the gripper
//!   position actually reached,
//! * optionally a subgoal-test penalty transition when an exploration-free
//!   low level missed the proposal,
//! * hindsight goal copies of either level's episode.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{dist, EnvState, PlanarEnv, TaskSpec, Vec2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    /// Maximum primitive steps per subgoal.
    pub k: usize,
    /// Achievement threshold in workspace units.
    pub threshold: f64,
    pub subgoal_test_rate: f64,
    pub subgoal_penalty: f64,
    /// Clip Bellman targets at both levels to `[subgoal_penalty, 0]`, so a
    /// missed subgoal test is the worst outcome a level can value.
    pub clip_values: bool,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            k: 10,
            threshold: 0.05,
            subgoal_test_rate: 0.3,
            subgoal_penalty: -10.0,
            clip_values: true,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("hierarchy.k", "must be >= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("hierarchy.threshold", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.subgoal_test_rate) {
            return Err(Error::config("hierarchy.subgoal_test_rate", "must lie in [0, 1]"));
        }
        if !self.subgoal_penalty.is_finite() {
            return Err(Error::config("hierarchy.subgoal_penalty", "must be finite"));
        }
        if self.clip_values && self.subgoal_penalty >= 0.0 {
            return Err(Error::config("hierarchy.subgoal_penalty", "must be negative when clip_values is on"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    /// Executed primitive step (low level or flat agent).
    Primitive,
    HindsightAction,
    SubgoalTest,
    HindsightGoal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Primitive action at the low level, subgoal at the high level.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    /// Desired subgoal at the low level, terminal task goal at the high level.
    pub goal: Vec2,
    pub bootstrap_mask: f64,
    pub kind: TransitionKind,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .state
            .iter()
            .chain(&self.action)
            .chain(&self.next_state)
            .chain(&self.goal)
            .all(|v| v.is_finite());
        if !finite || !self.reward.is_finite() {
            return Err(Error::invalid("transition holds non-finite values"));
        }
        if self.state.len() != self.next_state.len() {
            return Err(Error::invalid("state and next_state widths differ"));
        }
        if self.bootstrap_mask != 0.0 && self.bootstrap_mask != 1.0 {
            return Err(Error::invalid("bootstrap mask must be 0 or 1"));
        }
        Ok(())
    }
}

/// Which part of an observation a goal is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalSpace {
    /// Gripper position: the subgoal space of the low level.
    Gripper,
    /// Family-specific achieved goal: the object slot of the observation,
    /// which for reach mirrors the gripper.
    Task,
}

impl GoalSpace {
    pub fn achieved(self, obs: &[f64]) -> Vec2 {
        match self {
            GoalSpace::Gripper => [obs[0], obs[1]],
            GoalSpace::Task => [obs[2], obs[3]],
        }
    }
}

pub fn subgoal_achieved(achieved: &Vec2, subgoal: &Vec2, threshold: f64) -> bool {
    dist(achieved, subgoal) < threshold
}

/// 0 when the subgoal is met, −1 otherwise. Task success plays no part.
pub fn low_level_reward(achieved: &Vec2, subgoal: &Vec2, threshold: f64) -> f64 {
    if subgoal_achieved(achieved, subgoal, threshold) {
        0.0
    } else {
        -1.0
    }
}

/// Goal-conditioned acting interface used for the low level.
pub trait GoalPolicy {
    fn act(&mut self, obs: &[f64], goal: &Vec2, explore: bool) -> Result<Vec2>;
}

impl<F> GoalPolicy for F
where
    F: FnMut(&[f64], &Vec2, bool) -> Result<Vec2>,
{
    fn act(&mut self, obs: &[f64], goal: &Vec2, explore: bool) -> Result<Vec2> {
        self(obs, goal, explore)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub proposed_subgoal: Vec2,
    pub low_transitions: Vec<Transition>,
    pub start_state: EnvState,
    pub end_state: EnvState,
    pub achieved: bool,
    /// Run without low-level exploration so a miss can be penalised.
    pub tested: bool,
    /// The terminal task goal was reached inside this segment.
    pub task_success: bool,
    /// The environment episode ended (success or time limit).
    pub episode_done: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.low_transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low_transitions.is_empty()
    }
}

/// Runs at most `cfg.k` primitive steps toward `subgoal`, stopping early on
/// achievement or when the environment episode ends. Always takes at least
/// one step.
pub fn run_segment(
    env: &PlanarEnv,
    policy: &mut dyn GoalPolicy,
    start: &EnvState,
    task: &TaskSpec,
    subgoal: Vec2,
    cfg: &HierarchyConfig,
    tested: bool,
) -> Result<Segment> {
    let mut state = start.clone();
    let mut low = Vec::with_capacity(cfg.k);
    let mut achieved = false;
    let mut task_success = false;
    let mut episode_done = false;
    for _ in 0..cfg.k {
        let obs = state.observation();
        let action = policy.act(&obs, &subgoal, !tested)?;
        let step = env.step(&state, action, task)?;
        let next_obs = step.next_state.observation();
        let reached = GoalSpace::Gripper.achieved(&next_obs);
        achieved = subgoal_achieved(&reached, &subgoal, cfg.threshold);
        low.push(Transition {
            state: obs.to_vec(),
            action: action.to_vec(),
            reward: if achieved { 0.0 } else { -1.0 },
            next_state: next_obs.to_vec(),
            done: achieved,
            goal: subgoal,
            bootstrap_mask: if achieved { 0.0 } else { 1.0 },
            kind: TransitionKind::Primitive,
        });
        task_success = step.success;
        episode_done = step.done;
        state = step.next_state;
        if achieved || episode_done {
            break;
        }
    }
    Ok(Segment {
        proposed_subgoal: subgoal,
        low_transitions: low,
        start_state: start.clone(),
        end_state: state,
        achieved,
        tested,
        task_success,
        episode_done,
    })
}

fn high_level_outcome(next_obs: &[f64], task_goal: &Vec2, threshold: f64) -> (f64, bool) {
    let hit = subgoal_achieved(&GoalSpace::Task.achieved(next_obs), task_goal, threshold);
    (if hit { 0.0 } else { -1.0 }, hit)
}

/// High-level transition with the proposed subgoal replaced by the gripper
/// position actually reached at the end of the segment.
pub fn hindsight_action_transition(segment: &Segment, task_goal: &Vec2, threshold: f64) -> Transition {
    let next_obs = segment.end_state.observation();
    let (reward, done) = high_level_outcome(&next_obs, task_goal, threshold);
    Transition {
        state: segment.start_state.observation().to_vec(),
        action: GoalSpace::Gripper.achieved(&next_obs).to_vec(),
        reward,
        next_state: next_obs.to_vec(),
        done,
        goal: *task_goal,
        bootstrap_mask: if done { 0.0 } else { 1.0 },
        kind: TransitionKind::HindsightAction,
    }
}

/// Penalty transition for a tested segment whose subgoal was missed.
pub fn subgoal_test_transition(
    segment: &Segment,
    task_goal: &Vec2,
    cfg: &HierarchyConfig,
) -> Option<Transition> {
    if !segment.tested || segment.achieved {
        return None;
    }
    let next_obs = segment.end_state.observation();
    let (_, done) = high_level_outcome(&next_obs, task_goal, cfg.threshold);
    Some(Transition {
        state: segment.start_state.observation().to_vec(),
        action: segment.proposed_subgoal.to_vec(),
        reward: cfg.subgoal_penalty,
        next_state: next_obs.to_vec(),
        done,
        goal: *task_goal,
        bootstrap_mask: 0.0,
        kind: TransitionKind::SubgoalTest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relabel {
    None,
    /// Relabel every transition with the episode's last achieved goal.
    Final,
    /// `k` goals drawn uniformly from the same or later steps.
    Future(usize),
}

fn relabeled(t: &Transition, goal: Vec2, space: GoalSpace, threshold: f64) -> Transition {
    let hit = subgoal_achieved(&space.achieved(&t.next_state), &goal, threshold);
    Transition {
        goal,
        reward: if hit { 0.0 } else { -1.0 },
        done: hit,
        bootstrap_mask: if hit { 0.0 } else { 1.0 },
        kind: TransitionKind::HindsightGoal,
        ..t.clone()
    }
}

/// Fabricates hindsight goal copies of `episode`; the source is untouched.
pub fn hindsight_goal_relabel<R: Rng + ?Sized>(
    episode: &[Transition],
    strategy: Relabel,
    space: GoalSpace,
    threshold: f64,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    if episode.is_empty() {
        return Err(Error::invalid("cannot relabel an empty episode"));
    }
    let n = episode.len();
    Ok(match strategy {
        Relabel::None => Vec::new(),
        Relabel::Final => {
            let goal = space.achieved(&episode[n - 1].next_state);
            episode.iter().map(|t| relabeled(t, goal, space, threshold)).collect()
        }
        Relabel::Future(k) => {
            let mut out = Vec::with_capacity(n * k);
            for (i, t) in episode.iter().enumerate() {
                for _ in 0..k {
                    let j = rng.random_range(i..n);
                    let goal = space.achieved(&episode[j].next_state);
                    out.push(relabeled(t, goal, space, threshold));
                }
            }
            out
        }
    })
}

/// Writes transitions as line-delimited JSON.
pub fn write_trace<W: Write>(mut w: W, transitions: &[Transition]) -> Result<()> {
    for t in transitions {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Family;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reach_task(goal: Vec2) -> TaskSpec {
        TaskSpec {
            task_id: 0,
            family: Family::Reach,
            terminal_goal: goal,
            gripper_init: [0.0, 0.0],
            object_init: [0.0, 0.0],
        }
    }

    /// Moves straight at the goal, capped at the action bound.
    fn proportional(obs: &[f64], goal: &Vec2, _: bool) -> Result<Vec2> {
        let d = [goal[0] - obs[0], goal[1] - obs[1]];
        let n = d[0].hypot(d[1]);
        let s = if n > 0.1 { 0.1 / n } else { 1.0 };
        Ok([d[0] * s, d[1] * s])
    }

    fn zero(_: &[f64], _: &Vec2, _: bool) -> Result<Vec2> {
        Ok([0.0, 0.0])
    }

    #[test]
    fn achievement_is_strict() {
        assert!(subgoal_achieved(&[0.2, 0.2], &[0.2, 0.2], 0.05));
        assert!(!subgoal_achieved(&[0.03, 0.04], &[0.0, 0.0], 0.05));
        assert!(subgoal_achieved(&[0.03, 0.04], &[0.0, 0.0], 0.051));
        assert!(!subgoal_achieved(&[0.05, 0.0], &[0.0, 0.0], 0.05));
    }

    #[test]
    fn low_reward_ignores_task_success() {
        assert_eq!(low_level_reward(&[0.1, 0.1], &[0.1, 0.1], 0.05), 0.0);
        assert_eq!(low_level_reward(&[0.1, 0.0], &[0.0, 0.0], 0.05), -1.0);
        // gripper sits on the task goal but the subgoal is elsewhere
        let env = PlanarEnv::default();
        let task = reach_task([0.1, 0.0]);
        let seg = run_segment(&env, &mut proportional, &env.reset(&task), &task, [0.6, 0.0], &HierarchyConfig::default(), false).unwrap();
        assert!(seg.task_success);
        assert_eq!(seg.low_transitions[0].reward, -1.0);
    }

    #[test]
    fn proportional_segment_reaches_in_three_steps() {
        let env = PlanarEnv::default();
        let task = reach_task([-0.7, -0.7]);
        let seg = run_segment(&env, &mut proportional, &env.reset(&task), &task, [0.255, 0.0], &HierarchyConfig::default(), false).unwrap();
        assert_eq!(seg.len(), 3);
        assert!(seg.achieved);
        assert!((seg.end_state.gripper_pos[0] - 0.255).abs() < 1e-12);
        let rewards: Vec<f64> = seg.low_transitions.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![-1.0, -1.0, 0.0]);
        assert!(seg.low_transitions.iter().all(|t| t.goal == [0.255, 0.0]));
    }

    #[test]
    fn threshold_boundary_follows_float_rounding() {
        // 0.25 - (0.1 + 0.1) rounds to just under 0.05, so a subgoal 0.25 away
        // is already achieved after two full steps
        assert!(0.25 - (0.1 + 0.1) < 0.05);
        let env = PlanarEnv::default();
        let task = reach_task([-0.7, -0.7]);
        let seg = run_segment(&env, &mut proportional, &env.reset(&task), &task, [0.25, 0.0], &HierarchyConfig::default(), false).unwrap();
        assert_eq!(seg.len(), 2);
        assert!(seg.achieved);
    }

    #[test]
    fn zero_policy_exhausts_horizon() {
        let env = PlanarEnv::default();
        let task = reach_task([-0.7, -0.7]);
        let cfg = HierarchyConfig::default();
        let seg = run_segment(&env, &mut zero, &env.reset(&task), &task, [0.5, 0.5], &cfg, false).unwrap();
        assert_eq!(seg.len(), cfg.k);
        assert!(!seg.achieved);
        assert!(seg.low_transitions.iter().all(|t| t.reward == -1.0 && t.bootstrap_mask == 1.0));
    }

    #[test]
    fn subgoal_within_reach_at_start() {
        let env = PlanarEnv::default();
        let task = reach_task([-0.7, -0.7]);
        let seg = run_segment(&env, &mut zero, &env.reset(&task), &task, [0.01, 0.02], &HierarchyConfig::default(), false).unwrap();
        assert_eq!(seg.len(), 1);
        assert!(seg.achieved);
    }

    #[test]
    fn hindsight_action_uses_reached_position() {
        let env = PlanarEnv::default();
        let task = reach_task([0.8, 0.8]);
        let cfg = HierarchyConfig { k: 3, ..Default::default() };
        let mut policy = |_: &[f64], _: &Vec2, _: bool| Ok([0.1, 0.1 * 2.0 / 3.0]);
        let seg = run_segment(&env, &mut policy, &env.reset(&task), &task, [0.5, 0.5], &cfg, false).unwrap();
        let t = hindsight_action_transition(&seg, &task.terminal_goal, cfg.threshold);
        assert_eq!(t.action, seg.end_state.gripper_pos.to_vec());
        assert!((t.action[0] - 0.3).abs() < 1e-12 && (t.action[1] - 0.2).abs() < 1e-12);
        assert_eq!(t.reward, -1.0);
        assert!(!t.done);

        let task = reach_task([0.3, 0.0]);
        let seg = run_segment(&env, &mut proportional, &env.reset(&task), &task, [0.3, 0.0], &cfg, false).unwrap();
        let t = hindsight_action_transition(&seg, &task.terminal_goal, cfg.threshold);
        assert_eq!(t.reward, 0.0);
        assert!(t.done);
        assert_eq!(t.bootstrap_mask, 0.0);
        assert!(dist(&[t.action[0], t.action[1]], &seg.proposed_subgoal) < cfg.threshold);
    }

    #[test]
    fn subgoal_test_penalty_cases() {
        let env = PlanarEnv::default();
        let task = reach_task([-0.7, 0.7]);
        let cfg = HierarchyConfig::default();
        let missed = run_segment(&env, &mut zero, &env.reset(&task), &task, [0.9, 0.9], &cfg, true).unwrap();
        let p = subgoal_test_transition(&missed, &task.terminal_goal, &cfg).unwrap();
        assert_eq!(p.reward, -10.0);
        assert_eq!(p.bootstrap_mask, 0.0);
        assert_eq!(p.action, vec![0.9, 0.9]);

        let hit = run_segment(&env, &mut proportional, &env.reset(&task), &task, [0.1, 0.0], &cfg, true).unwrap();
        assert!(subgoal_test_transition(&hit, &task.terminal_goal, &cfg).is_none());
        let untested = run_segment(&env, &mut zero, &env.reset(&task), &task, [0.9, 0.9], &cfg, false).unwrap();
        assert!(subgoal_test_transition(&untested, &task.terminal_goal, &cfg).is_none());
    }

    #[test]
    fn relabel_final_and_future_counts() {
        let env = PlanarEnv::default();
        let task = reach_task([-0.7, 0.7]);
        let mut drift = |_: &[f64], _: &Vec2, _: bool| Ok([0.03, 0.01]);
        let cfg = HierarchyConfig { k: 10, ..Default::default() };
        let seg = run_segment(&env, &mut drift, &env.reset(&task), &task, [0.9, -0.9], &cfg, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let five = &seg.low_transitions[..5];
        let fin = hindsight_goal_relabel(five, Relabel::Final, GoalSpace::Gripper, cfg.threshold, &mut rng).unwrap();
        assert_eq!(fin.len(), 5);
        assert_eq!(fin[4].reward, 0.0);
        assert!(fin[4].done);
        let fut = hindsight_goal_relabel(&seg.low_transitions, Relabel::Future(4), GoalSpace::Gripper, cfg.threshold, &mut rng).unwrap();
        assert_eq!(fut.len(), 40);
        assert!(hindsight_goal_relabel(&[], Relabel::Final, GoalSpace::Gripper, 0.05, &mut rng).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let env = PlanarEnv::default();
        let task = reach_task([-0.7, 0.7]);
        let seg = run_segment(&env, &mut proportional, &env.reset(&task), &task, [0.33, -0.21], &HierarchyConfig::default(), false).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &seg.low_transitions).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), seg.len());
        assert_eq!(read_trace(&buf[..]).unwrap(), seg.low_transitions);
    }
}
