//! Meta-training loop: per-task collection with hindsight fabrication, one
//! joint high-level step per gradient round, per-task low-level steps, and the
//! meta-test adaptation protocol shared by every variant.

use log::warn;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::actor_critic::{AcBundle, AcGrads, AcHyper};
use crate::config::{AgentConfig, RunConfig, Variant};
use crate::context::{
    aggregate_posterior, encode_factors, prior_latent, sample_latent, ContextBatch, InferencePass, LatentPosterior,
    CONTEXT_ENTRY_DIM,
};
use crate::env::{sample_tasks, PlanarEnv, Split, TaskSpec, Vec2, WORKSPACE};
use crate::error::{Error, Result};
use crate::hierarchy::{
    hindsight_action_transition, hindsight_goal_relabel, run_segment, subgoal_test_transition, GoalSpace,
    HierarchyConfig, Transition, TransitionKind,
};
use crate::nets::{MlpParams, OptState};
use crate::replay::TaskBuffer;

pub const STREAM_INIT: u64 = 3;
pub const STREAM_COLLECT: u64 = 4;
pub const STREAM_TRAIN: u64 = 5;
pub const STREAM_EVAL: u64 = 6;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub params: MlpParams,
    pub opt: OptState,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], latent_dim: usize, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![CONTEXT_ENTRY_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * latent_dim);
        let params = MlpParams::init(sizes, 3e-3, rng)?;
        let opt = OptState::new(params.len());
        Ok(Self { params, opt })
    }

    pub fn latent_dim(&self) -> usize {
        self.params.output_dim() / 2
    }

    pub fn posterior(&self, ctx: &ContextBatch) -> Result<LatentPosterior> {
        aggregate_posterior(&encode_factors(&self.params, ctx)?)
    }
}

/// All trainable state of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub variant: Variant,
    /// Subgoal generator for hierarchical variants, the whole agent otherwise.
    pub high: AcBundle,
    pub low: Option<AcBundle>,
    pub encoder: Option<Encoder>,
}

fn hyper(a: &AgentConfig, action_scale: f64, value_floor: Option<f64>) -> AcHyper {
    AcHyper {
        entropy_coef: a.entropy_coef,
        discount: a.discount,
        polyak: a.polyak,
        action_scale,
        value_floor,
    }
}

impl Learner {
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let v = cfg.variant;
        let latent_dim = if v.uses_latent() { cfg.latent.dim } else { 0 };
        let high_scale = if v.hierarchical() { WORKSPACE } else { cfg.env.action_max };
        let floor = (v.hierarchical() && cfg.hierarchy.clip_values).then_some(cfg.hierarchy.subgoal_penalty);
        let high = AcBundle::new(&cfg.agent.hidden, latent_dim, hyper(&cfg.agent, high_scale, floor), rng)?;
        let low = if v.hierarchical() {
            let a = cfg.low_agent();
            Some(AcBundle::new(&a.hidden, 0, hyper(a, cfg.env.action_max, floor), rng)?)
        } else {
            None
        };
        let encoder = if v.uses_latent() {
            Some(Encoder::new(&cfg.latent.encoder_hidden, latent_dim, rng)?)
        } else {
            None
        };
        Ok(Self {
            variant: v,
            high,
            low,
            encoder,
        })
    }

    /// Every parameter and optimizer moment in a fixed order.
    pub fn flat_state(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut push_bundle = |b: &AcBundle| {
            for net in [&b.actor, &b.critic_1, &b.critic_2, &b.target_1, &b.target_2] {
                out.extend_from_slice(net.as_slice());
            }
            for o in [&b.actor_opt, &b.critic_1_opt, &b.critic_2_opt] {
                out.extend_from_slice(&o.first_moment);
                out.extend_from_slice(&o.second_moment);
            }
        };
        push_bundle(&self.high);
        if let Some(low) = &self.low {
            push_bundle(low);
        }
        if let Some(e) = &self.encoder {
            out.extend_from_slice(e.params.as_slice());
            out.extend_from_slice(&e.opt.first_moment);
            out.extend_from_slice(&e.opt.second_moment);
        }
        out
    }

    /// Order-sensitive checksum over the bit patterns of [`Self::flat_state`].
    pub fn checksum(&self) -> u64 {
        self.flat_state()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, x| (h ^ x.to_bits()).wrapping_mul(0x0100_0000_01b3))
    }
}

/// What the evaluation protocol needs from an agent. [`Learner`] is the real
/// implementation; tests can plug in scripted policies.
pub trait MetaPolicy {
    fn hierarchical(&self) -> bool;
    fn dense_reward(&self) -> bool {
        false
    }
    /// `None` when the agent takes no latent input.
    fn latent_dim(&self) -> Option<usize>;
    fn posterior(&self, ctx: &ContextBatch) -> Result<LatentPosterior>;
    fn high_act(&self, obs: &[f64], goal: &Vec2, z: Option<&[f64]>, explore: bool, rng: &mut dyn RngCore)
        -> Result<Vec2>;
    fn low_act(&self, obs: &[f64], subgoal: &Vec2, explore: bool, rng: &mut dyn RngCore) -> Result<Vec2>;
}

impl MetaPolicy for Learner {
    fn hierarchical(&self) -> bool {
        self.variant.hierarchical()
    }

    fn dense_reward(&self) -> bool {
        self.variant.dense_reward()
    }

    fn latent_dim(&self) -> Option<usize> {
        self.encoder.as_ref().map(Encoder::latent_dim)
    }

    fn posterior(&self, ctx: &ContextBatch) -> Result<LatentPosterior> {
        match &self.encoder {
            Some(e) => e.posterior(ctx),
            None => Err(Error::invalid("variant has no encoder")),
        }
    }

    fn high_act(
        &self,
        obs: &[f64],
        goal: &Vec2,
        z: Option<&[f64]>,
        explore: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Vec2> {
        self.high.act(obs, goal, z, explore, rng)
    }

    fn low_act(&self, obs: &[f64], subgoal: &Vec2, explore: bool, rng: &mut dyn RngCore) -> Result<Vec2> {
        match &self.low {
            Some(low) => low.act(obs, subgoal, None, explore, rng),
            None => Err(Error::invalid("flat variant has no low level")),
        }
    }
}

/// Output of one collection round on one task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collected {
    /// High-level (or flat) transitions inserted, hindsight copies included.
    pub high: Vec<Transition>,
    /// Low-level transitions inserted, hindsight copies included.
    pub low: Vec<Transition>,
    pub env_steps: u64,
    pub episodes: u32,
    pub successes: u32,
    /// High-level decisions taken (segments, or latent draws for flat agents).
    pub decisions: u32,
    /// Per decision, whether `z` came from the prior.
    pub prior_draws: Vec<bool>,
}

fn flat_transition(obs: &[f64], action: Vec2, step: &crate::env::StepResult, goal: Vec2, dense: bool) -> Transition {
    let reward = if dense { step.dense_reward } else { step.sparse_reward };
    Transition {
        state: obs.to_vec(),
        action: action.to_vec(),
        reward,
        next_state: step.next_state.observation().to_vec(),
        done: step.success,
        goal,
        bootstrap_mask: if step.success { 0.0 } else { 1.0 },
        kind: TransitionKind::Primitive,
    }
}

/// One latent draw for collection: prior when the round has no context yet,
/// otherwise a posterior sample over a context batch from the task buffer.
fn collection_latent<R: Rng + ?Sized>(
    learner: &Learner,
    buffer: &TaskBuffer,
    round_started: bool,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<Option<(Vec<f64>, bool)>> {
    let Some(enc) = &learner.encoder else {
        return Ok(None);
    };
    let dim = enc.latent_dim();
    if !round_started || buffer.is_empty() {
        let noise = normal_vec(dim, rng);
        return Ok(Some((prior_latent(dim, &noise)?.z, true)));
    }
    let ctx = buffer.sample_context(cfg.latent.context_size, cfg.latent.window, rng)?;
    let post = enc.posterior(&ctx)?;
    let noise = normal_vec(dim, rng);
    Ok(Some((sample_latent(&post, &noise)?.z, false)))
}

/// Runs one collection round on `task`: `m` high-level decisions, `m · k`
/// primitive steps in total. Transitions and their hindsight copies go
/// straight into the buffers.
pub fn collect_task_data<R: Rng + ?Sized>(
    env: &PlanarEnv,
    task: &TaskSpec,
    learner: &Learner,
    high_buffer: &mut TaskBuffer,
    mut low_buffer: Option<&mut TaskBuffer>,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<Collected> {
    let hcfg = &cfg.hierarchy;
    let goal = task.terminal_goal;
    let budget = cfg.train.m * hcfg.k;
    let hierarchical = learner.variant.hierarchical();
    if hierarchical && (learner.low.is_none() || low_buffer.is_none()) {
        return Err(Error::invalid("hierarchical collection needs a low level and its buffer"));
    }
    let dense = learner.variant.dense_reward();
    let high_relabel = if dense { crate::hierarchy::Relabel::None } else { cfg.replay.high_relabel };

    high_buffer.begin_round();
    if let Some(b) = low_buffer.as_deref_mut() {
        b.begin_round();
    }
    let mut out = Collected::default();
    let mut state = env.reset(task);
    let mut episode: Vec<Transition> = Vec::new();
    let mut used = 0;
    let mut round_has_context = false;

    let finish_episode = |episode: &mut Vec<Transition>,
                              out: &mut Collected,
                              high_buffer: &mut TaskBuffer,
                              rng: &mut R|
     -> Result<()> {
        if episode.is_empty() {
            return Ok(());
        }
        let copies = hindsight_goal_relabel(episode, high_relabel, GoalSpace::Task, hcfg.threshold, rng)?;
        high_buffer.insert(copies.iter().cloned())?;
        out.high.extend(copies);
        episode.clear();
        Ok(())
    };

    while used < budget {
        let horizon = (budget - used).min(hcfg.k);
        let latent = collection_latent(learner, high_buffer, round_has_context, cfg, rng)?;
        out.prior_draws.push(latent.as_ref().is_some_and(|(_, p)| *p));
        let z = latent.as_ref().map(|(z, _)| z.as_slice());
        out.decisions += 1;
        let episode_over;
        if hierarchical {
            let low = learner.low.as_ref().expect("checked above");
            let obs = state.observation();
            let subgoal = learner.high.act(&obs, &goal, z, true, rng)?;
            let tested = horizon == hcfg.k && rng.random::<f64>() < hcfg.subgoal_test_rate;
            let seg_cfg = HierarchyConfig { k: horizon, ..*hcfg };
            let seg = {
                let mut policy = |o: &[f64], g: &Vec2, explore: bool| low.act(o, g, None, explore, &mut *rng);
                run_segment(env, &mut policy, &state, task, subgoal, &seg_cfg, tested)?
            };
            used += seg.len();
            out.env_steps += seg.len() as u64;

            let low_buf = low_buffer.as_deref_mut().expect("checked above");
            let copies =
                hindsight_goal_relabel(&seg.low_transitions, cfg.replay.low_relabel, GoalSpace::Gripper, hcfg.threshold, rng)?;
            low_buf.insert(seg.low_transitions.iter().cloned().chain(copies.iter().cloned()))?;
            out.low.extend(seg.low_transitions.iter().cloned());
            out.low.extend(copies);

            let hat = hindsight_action_transition(&seg, &goal, hcfg.threshold);
            let mut fresh = vec![hat.clone()];
            fresh.extend(subgoal_test_transition(&seg, &goal, hcfg));
            high_buffer.insert(fresh.iter().cloned())?;
            out.high.extend(fresh);
            episode.push(hat);

            if seg.episode_done {
                out.successes += seg.task_success as u32;
                episode_over = true;
            } else {
                episode_over = false;
            }
            state = seg.end_state;
        } else {
            let mut fresh = Vec::with_capacity(horizon);
            let mut done = false;
            for _ in 0..horizon {
                let obs = state.observation();
                let action = learner.high.act(&obs, &goal, z, true, rng)?;
                let step = env.step(&state, action, task)?;
                fresh.push(flat_transition(&obs, action, &step, goal, dense));
                used += 1;
                out.env_steps += 1;
                state = step.next_state;
                if step.done {
                    out.successes += step.success as u32;
                    done = true;
                    break;
                }
            }
            high_buffer.insert(fresh.iter().cloned())?;
            episode.extend(fresh.iter().cloned());
            out.high.extend(fresh);
            episode_over = done;
        }
        round_has_context = true;
        if episode_over {
            out.episodes += 1;
            finish_episode(&mut episode, &mut out, high_buffer, rng)?;
            state = env.reset(task);
        }
    }
    if !episode.is_empty() {
        out.episodes += 1;
        finish_episode(&mut episode, &mut out, high_buffer, rng)?;
    }
    Ok(out)
}

/// Loss totals of one gradient round. High-level terms are summed over the
/// tasks that contributed; low-level terms are means over those tasks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLosses {
    pub critic_high: f64,
    pub actor_high: f64,
    pub kl: f64,
    pub critic_low: f64,
    pub actor_low: f64,
    pub tasks_used: usize,
    pub tasks_skipped: usize,
}

/// One gradient round: per task, high-level losses are accumulated and the
/// low level takes one step; then the high level and the encoder take one
/// optimizer step on the summed gradients.
pub fn train_round<R: Rng + ?Sized>(
    learner: &mut Learner,
    high_buffers: &[TaskBuffer],
    low_buffer: Option<&TaskBuffer>,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<RoundLosses> {
    let mut acc = AcGrads::zeros_like(&learner.high);
    let mut enc_acc = learner.encoder.as_ref().map(|e| vec![0.0; e.params.len()]);
    let mut losses = RoundLosses::default();
    let low_cfg = cfg.low_agent();
    let mut low_steps = 0usize;

    for buf in high_buffers {
        let batch = match buf.sample_rl_batch(cfg.agent.batch_size, rng) {
            Ok(b) => b,
            Err(Error::Unavailable(msg)) => {
                warn!("skipping task {:?} this round: {msg}", buf.task_id);
                losses.tasks_skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let pass = match &learner.encoder {
            Some(enc) => {
                let ctx = buf.sample_context(cfg.latent.context_size, cfg.latent.window, rng)?;
                let noise = normal_vec(enc.latent_dim(), rng);
                Some(InferencePass::run(&enc.params, &ctx, &noise)?)
            }
            None => None,
        };
        let z = pass.as_ref().map(|p| p.z.as_slice());
        let (grads, critic, actor_loss) = learner.high.gradients(&batch, z, rng)?;
        acc.add(&grads);
        losses.critic_high += critic.loss;
        losses.actor_high += actor_loss;
        if let (Some(pass), Some(enc), Some(total)) = (&pass, &learner.encoder, enc_acc.as_mut()) {
            let d_z = critic.grad_z.as_ref().ok_or_else(|| Error::numerical("missing latent gradient"))?;
            let g = pass.backward(&enc.params, d_z, cfg.latent.kl_weight)?;
            for (t, x) in total.iter_mut().zip(&g) {
                *t += x;
            }
            losses.kl += pass.kl();
        }
        losses.tasks_used += 1;

        if let (Some(low), Some(lb)) = (learner.low.as_mut(), low_buffer) {
            match lb.sample_rl_batch(low_cfg.batch_size, rng) {
                Ok(lbatch) => {
                    let (c, a) = low.update(
                        &lbatch,
                        None,
                        &low_cfg.adam(low_cfg.actor_lr),
                        &low_cfg.adam(low_cfg.critic_lr),
                        rng,
                    )?;
                    losses.critic_low += c;
                    losses.actor_low += a;
                    low_steps += 1;
                }
                Err(Error::Unavailable(msg)) => warn!("skipping low-level step: {msg}"),
                Err(e) => return Err(e),
            }
        }
    }
    if low_steps > 0 {
        losses.critic_low /= low_steps as f64;
        losses.actor_low /= low_steps as f64;
    }
    if losses.tasks_used > 0 {
        let a = &cfg.agent;
        learner.high.apply(&acc, &a.adam(a.actor_lr), &a.adam(a.critic_lr))?;
        if let (Some(enc), Some(g)) = (learner.encoder.as_mut(), enc_acc) {
            let adam = a.adam(cfg.latent.encoder_lr);
            enc.opt.step(enc.params.as_mut_slice(), &g, &adam)?;
        }
    }
    Ok(losses)
}

/// One episode under fixed latent input. Returns task success, the
/// high-level (or flat) transitions for context, and primitive steps taken.
pub fn run_episode(
    env: &PlanarEnv,
    task: &TaskSpec,
    policy: &dyn MetaPolicy,
    z: Option<&[f64]>,
    explore: bool,
    hcfg: &HierarchyConfig,
    rng: &mut dyn RngCore,
) -> Result<(bool, Vec<Transition>, u64)> {
    let goal = task.terminal_goal;
    let mut state = env.reset(task);
    let mut context = Vec::new();
    let mut steps = 0u64;
    if policy.hierarchical() {
        loop {
            let obs = state.observation();
            let subgoal = policy.high_act(&obs, &goal, z, explore, rng)?;
            let seg = {
                let mut low = |o: &[f64], g: &Vec2, _explore: bool| policy.low_act(o, g, explore, &mut *rng);
                run_segment(env, &mut low, &state, task, subgoal, hcfg, false)?
            };
            steps += seg.len() as u64;
            context.push(hindsight_action_transition(&seg, &goal, hcfg.threshold));
            state = seg.end_state.clone();
            if seg.episode_done {
                return Ok((seg.task_success, context, steps));
            }
        }
    } else {
        loop {
            let obs = state.observation();
            let action = policy.high_act(&obs, &goal, z, explore, rng)?;
            let step = env.step(&state, action, task)?;
            steps += 1;
            context.push(flat_transition(&obs, action, &step, goal, policy.dense_reward()));
            state = step.next_state;
            if step.done {
                return Ok((step.success, context, steps));
            }
        }
    }
}

/// Adaptation then evaluation on one task; parameters are never touched.
/// `adapt_episodes` exploring episodes build context (the first under a prior
/// draw, later ones under posterior samples), then `eval_episodes` greedy
/// episodes run with `z` at the posterior mean. Returns the success fraction.
pub fn meta_test_adapt(
    env: &PlanarEnv,
    task: &TaskSpec,
    policy: &dyn MetaPolicy,
    hcfg: &HierarchyConfig,
    adapt_episodes: usize,
    eval_episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if eval_episodes == 0 {
        return Err(Error::invalid("need at least one evaluation episode"));
    }
    let dim = policy.latent_dim();
    let mut context: Vec<Transition> = Vec::new();
    for _ in 0..adapt_episodes {
        let z = match dim {
            None => None,
            Some(d) => {
                let noise = normal_vec(d, rng);
                Some(if context.is_empty() {
                    prior_latent(d, &noise)?.z
                } else {
                    let post = policy.posterior(&ContextBatch::from_transitions(&context)?)?;
                    sample_latent(&post, &noise)?.z
                })
            }
        };
        let (_, ctx, _) = run_episode(env, task, policy, z.as_deref(), true, hcfg, rng)?;
        context.extend(ctx);
    }
    let z = match dim {
        None => None,
        Some(d) if context.is_empty() => Some(vec![0.0; d]),
        Some(_) => Some(policy.posterior(&ContextBatch::from_transitions(&context)?)?.mean),
    };
    let mut hits = 0usize;
    for _ in 0..eval_episodes {
        let (ok, _, _) = run_episode(env, task, policy, z.as_deref(), false, hcfg, rng)?;
        hits += ok as usize;
    }
    Ok(hits as f64 / eval_episodes as f64)
}

/// Meta-test success per task, using a fresh evaluation stream so repeated
/// calls on unchanged parameters agree exactly.
pub fn evaluate_tasks(
    env: &PlanarEnv,
    tasks: &[TaskSpec],
    policy: &dyn MetaPolicy,
    cfg: &RunConfig,
    eval_episodes: usize,
) -> Result<Vec<f64>> {
    if tasks.is_empty() {
        return Err(Error::invalid("empty task set"));
    }
    let mut rng = stream_rng(cfg.seed, STREAM_EVAL);
    tasks
        .iter()
        .map(|t| meta_test_adapt(env, t, policy, &cfg.hierarchy, cfg.train.adapt_episodes, eval_episodes, &mut rng))
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub env_steps: u64,
    pub train_success: f64,
    pub test_success: Option<f64>,
    /// Loss means over the gradient rounds of this iteration.
    pub losses: RoundLosses,
}

pub const METRICS_HEADER: &str = "iteration,env_steps,train_success,test_success,critic_high,actor_high,kl,critic_low,actor_low";

impl IterationRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.env_steps,
            self.train_success,
            self.test_success.map(|x| x.to_string()).unwrap_or_default(),
            l.critic_high,
            l.actor_high,
            l.kl,
            l.critic_low,
            l.actor_low
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<IterationRecord>,
    pub env_steps: u64,
    pub per_task_test_success: Vec<f64>,
    pub final_test_success: f64,
}

/// Full training state. Everything that influences the future trajectory
/// lives here so a checkpoint can restore it.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub env: PlanarEnv,
    pub train_tasks: Vec<TaskSpec>,
    pub test_tasks: Vec<TaskSpec>,
    pub learner: Learner,
    pub high_buffers: Vec<TaskBuffer>,
    pub low_buffer: Option<TaskBuffer>,
    pub collect_rng: ChaCha8Rng,
    pub train_rng: ChaCha8Rng,
    pub env_steps: u64,
    pub iteration: u64,
    pub last_test_success: Option<Vec<f64>>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let train = sample_tasks(&cfg.family_mix, cfg.num_train_tasks, cfg.seed, Split::Train, 0)?;
        let test = sample_tasks(&cfg.family_mix, cfg.num_test_tasks, cfg.seed, Split::Test, cfg.num_train_tasks as u32)?;
        Self::with_tasks(cfg, train, test)
    }

    pub fn with_tasks(cfg: RunConfig, train_tasks: Vec<TaskSpec>, test_tasks: Vec<TaskSpec>) -> Result<Self> {
        cfg.validate()?;
        if train_tasks.is_empty() || test_tasks.is_empty() {
            return Err(Error::invalid("train and test task sets must be non-empty"));
        }
        for t in train_tasks.iter().chain(&test_tasks) {
            t.validate()?;
        }
        let mut init = stream_rng(cfg.seed, STREAM_INIT);
        let learner = Learner::new(&cfg, &mut init)?;
        let high_buffers = train_tasks
            .iter()
            .map(|t| TaskBuffer::new(Some(t.task_id), cfg.replay.high_capacity))
            .collect();
        let low_buffer = cfg
            .variant
            .hierarchical()
            .then(|| TaskBuffer::new(None, cfg.replay.low_capacity));
        Ok(Self {
            env: PlanarEnv::new(cfg.env),
            collect_rng: stream_rng(cfg.seed, STREAM_COLLECT),
            train_rng: stream_rng(cfg.seed, STREAM_TRAIN),
            cfg,
            train_tasks,
            test_tasks,
            learner,
            high_buffers,
            low_buffer,
            env_steps: 0,
            iteration: 0,
            last_test_success: None,
        })
    }

    pub fn total_iterations(&self) -> u64 {
        self.cfg.iterations()
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.total_iterations()
    }

    /// Collection over every train task, then `steps_per_round` gradient
    /// rounds, then evaluation when due.
    pub fn step_iteration(&mut self) -> Result<IterationRecord> {
        let mut episodes = 0u32;
        let mut successes = 0u32;
        for (task, buf) in self.train_tasks.iter().zip(self.high_buffers.iter_mut()) {
            let got = collect_task_data(
                &self.env,
                task,
                &self.learner,
                buf,
                self.low_buffer.as_mut(),
                &self.cfg,
                &mut self.collect_rng,
            )
            .map_err(|e| {
                warn!("collection failed on task {}: {e}", task.task_id);
                e
            })?;
            self.env_steps += got.env_steps;
            episodes += got.episodes;
            successes += got.successes;
        }
        let rounds = self.cfg.train.steps_per_round;
        let mut sum = RoundLosses::default();
        for _ in 0..rounds {
            let l = train_round(
                &mut self.learner,
                &self.high_buffers,
                self.low_buffer.as_ref(),
                &self.cfg,
                &mut self.train_rng,
            )?;
            sum.critic_high += l.critic_high;
            sum.actor_high += l.actor_high;
            sum.kl += l.kl;
            sum.critic_low += l.critic_low;
            sum.actor_low += l.actor_low;
            sum.tasks_used += l.tasks_used;
            sum.tasks_skipped += l.tasks_skipped;
        }
        if rounds > 0 {
            let r = rounds as f64;
            sum.critic_high /= r;
            sum.actor_high /= r;
            sum.kl /= r;
            sum.critic_low /= r;
            sum.actor_low /= r;
        }
        self.iteration += 1;
        let due = self.iteration % self.cfg.train.eval_every == 0 || self.finished();
        let test_success = if due {
            let per_task = self.evaluate(&self.test_tasks, self.cfg.train.eval_episodes)?;
            let m = mean(&per_task);
            self.last_test_success = Some(per_task);
            Some(m)
        } else {
            None
        };
        Ok(IterationRecord {
            iteration: self.iteration,
            env_steps: self.env_steps,
            train_success: if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 },
            test_success,
            losses: sum,
        })
    }

    pub fn evaluate(&self, tasks: &[TaskSpec], eval_episodes: usize) -> Result<Vec<f64>> {
        evaluate_tasks(&self.env, tasks, &self.learner, &self.cfg, eval_episodes)
    }

    /// Trains to the end of the budget, calling `on_iteration` after each
    /// iteration.
    pub fn run<F>(&mut self, mut on_iteration: F) -> Result<Vec<IterationRecord>>
    where
        F: FnMut(&Trainer, &IterationRecord) -> Result<()>,
    {
        let mut records = Vec::new();
        while !self.finished() {
            let rec = self.step_iteration()?;
            on_iteration(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }

    pub fn metrics(&self, records: Vec<IterationRecord>) -> RunMetrics {
        let per_task = self.last_test_success.clone().unwrap_or_default();
        RunMetrics {
            env_steps: self.env_steps,
            final_test_success: mean(&per_task),
            per_task_test_success: per_task,
            records,
        }
    }
}

/// Trains `variant` on the given task sets under `cfg` and returns its
/// metrics. MGHRL itself runs through the same path.
pub fn run_baseline(
    variant: Variant,
    train_tasks: Vec<TaskSpec>,
    test_tasks: Vec<TaskSpec>,
    cfg: &RunConfig,
) -> Result<RunMetrics> {
    let cfg = RunConfig {
        variant,
        ..cfg.clone()
    };
    let mut trainer = Trainer::with_tasks(cfg, train_tasks, test_tasks)?;
    let records = trainer.run(|_, _| Ok(()))?;
    Ok(trainer.metrics(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Family, FamilyMix};
    use crate::hierarchy::Relabel;

    fn tiny(variant: Variant) -> RunConfig {
        let mut cfg = RunConfig {
            variant,
            seed: 7,
            family_mix: FamilyMix::single(Family::Reach),
            num_train_tasks: 2,
            num_test_tasks: 2,
            ..RunConfig::default()
        };
        cfg.agent.hidden = vec![8];
        cfg.agent.batch_size = 8;
        cfg.latent.encoder_hidden = vec![8];
        cfg.latent.context_size = 8;
        cfg.train.m = 2;
        cfg.train.steps_per_round = 2;
        cfg.train.total_env_steps = 80;
        cfg.train.eval_every = 1;
        cfg.train.eval_episodes = 2;
        cfg
    }

    /// Collection with a low level that never moves, so no subgoal is reached
    /// early.
    fn still_collect(relabel: Relabel) -> Collected {
        let mut cfg = tiny(Variant::Mghrl);
        cfg.replay.low_relabel = relabel;
        cfg.hierarchy.subgoal_test_rate = 0.0;
        let mut rng = stream_rng(1, 0);
        let mut learner = Learner::new(&cfg, &mut rng).unwrap();
        // zero actor output: squashed mean 0 and tiny exploration noise
        let low = learner.low.as_mut().unwrap();
        low.actor.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        let n = low.actor.len();
        let out = low.actor.output_dim();
        for b in &mut low.actor.as_mut_slice()[n - out + 2..] {
            *b = -20.0;
        }
        let env = PlanarEnv::new(cfg.env);
        let task = TaskSpec {
            task_id: 0,
            family: Family::Reach,
            terminal_goal: [0.6, 0.6],
            gripper_init: [0.0, 0.0],
            object_init: [0.0, 0.0],
        };
        let mut hb = TaskBuffer::new(Some(0), 1000);
        let mut lb = TaskBuffer::new(None, 1000);
        // subgoal far from the start: move the high-level bias so the mean
        // subgoal sits at the corner
        let high = &mut learner.high;
        high.actor.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        let n = high.actor.len();
        let out = high.actor.output_dim();
        let tail = &mut high.actor.as_mut_slice()[n - out..];
        tail.copy_from_slice(&[3.0, 3.0, -20.0, -20.0]);
        collect_task_data(&env, &task, &learner, &mut hb, Some(&mut lb), &cfg, &mut rng).unwrap()
    }

    #[test]
    fn two_decisions_twenty_primitive_steps() {
        let got = still_collect(Relabel::None);
        assert_eq!(got.env_steps, 20);
        assert_eq!(got.low.len(), 20);
        let ordinary = got.high.iter().filter(|t| t.kind == TransitionKind::HindsightAction).count();
        assert_eq!(ordinary, 2);
    }

    #[test]
    fn final_relabel_doubles_low_level() {
        let plain = still_collect(Relabel::None);
        let doubled = still_collect(Relabel::Final);
        assert_eq!(doubled.low.len(), 2 * plain.low.len());
    }

    #[test]
    fn first_decision_uses_prior() {
        let got = still_collect(Relabel::None);
        assert_eq!(got.prior_draws, vec![true, false]);
    }

    #[test]
    fn accuracy_arithmetic() {
        let hits = [1, 1, 0, 1, 1, 0, 1, 1, 0, 1];
        let rate = hits.iter().sum::<i32>() as f64 / hits.len() as f64;
        assert_eq!(rate, 0.7);
    }

    #[test]
    fn env_steps_match_budget_for_every_variant() {
        for v in Variant::ALL {
            let mut t = Trainer::new(tiny(v)).unwrap();
            let recs = t.run(|_, _| Ok(())).unwrap();
            assert_eq!(t.env_steps, 80, "{v}");
            assert!(recs.windows(2).all(|w| w[0].env_steps < w[1].env_steps));
        }
    }

    #[test]
    fn shared_hac_has_no_latent() {
        let t = Trainer::new(tiny(Variant::SharedHac)).unwrap();
        assert!(t.learner.encoder.is_none());
        assert_eq!(t.learner.high.latent_dim, 0);
        assert_eq!(t.learner.high.actor.input_dim(), crate::env::OBS_DIM + 2);
    }

    #[test]
    fn evaluation_is_pure_and_repeatable() {
        let mut t = Trainer::new(tiny(Variant::Mghrl)).unwrap();
        t.step_iteration().unwrap();
        let before = t.learner.checksum();
        let lens: Vec<usize> = t.high_buffers.iter().map(TaskBuffer::len).collect();
        let a = t.evaluate(&t.test_tasks, 3).unwrap();
        let b = t.evaluate(&t.test_tasks, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, t.learner.checksum());
        assert_eq!(lens, t.high_buffers.iter().map(TaskBuffer::len).collect::<Vec<_>>());
    }
}
