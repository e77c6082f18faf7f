//! End-to-end behaviour of collection, updates and evaluation on small runs.

use mghrl_core::actor_critic::{AcBundle, AcHyper};
use mghrl_core::config::RunConfig;
use mghrl_core::context::{ContextBatch, LatentPosterior};
use mghrl_core::env::{sample_tasks, Family, FamilyMix, PlanarEnv, Split, Vec2};
use mghrl_core::error::Result;
use mghrl_core::hierarchy::{HierarchyConfig, Transition, TransitionKind};
use mghrl_core::meta_train::{evaluate_tasks, meta_test_adapt, train_round, Learner, MetaPolicy, Trainer};
use mghrl_core::nets::AdamConfig;
use mghrl_core::replay::TaskBuffer;
use mghrl_core::Variant;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant, family: Family) -> RunConfig {
    let mut cfg = RunConfig {
        variant,
        seed: 4,
        family_mix: FamilyMix::single(family),
        num_train_tasks: 3,
        num_test_tasks: 2,
        ..RunConfig::default()
    };
    cfg.agent.hidden = vec![16];
    cfg.agent.batch_size = 16;
    cfg.latent.encoder_hidden = vec![16];
    cfg.latent.context_size = 8;
    cfg.train.steps_per_round = 3;
    cfg.train.total_env_steps = 3 * 50 * 3;
    cfg.train.eval_every = 1;
    cfg.train.eval_episodes = 2;
    cfg
}

/// Walks straight at the goal; the high level proposes the goal itself.
struct ReachOracle;

fn toward(from: &[f64], to: &Vec2) -> Vec2 {
    let d = [to[0] - from[0], to[1] - from[1]];
    let n = d[0].hypot(d[1]);
    let s = if n > 0.1 { 0.1 / n } else { 1.0 };
    [d[0] * s, d[1] * s]
}

impl MetaPolicy for ReachOracle {
    fn hierarchical(&self) -> bool {
        true
    }
    fn latent_dim(&self) -> Option<usize> {
        None
    }
    fn posterior(&self, _: &ContextBatch) -> Result<LatentPosterior> {
        unreachable!("no latent")
    }
    fn high_act(&self, _: &[f64], goal: &Vec2, _: Option<&[f64]>, _: bool, _: &mut dyn RngCore) -> Result<Vec2> {
        Ok(*goal)
    }
    fn low_act(&self, obs: &[f64], subgoal: &Vec2, _: bool, _: &mut dyn RngCore) -> Result<Vec2> {
        Ok(toward(obs, subgoal))
    }
}

#[test]
fn scripted_reach_policy_always_succeeds() {
    let tasks = sample_tasks(&FamilyMix::single(Family::Reach), 30, 2, Split::Test, 0).unwrap();
    let env = PlanarEnv::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in &tasks {
        let s = meta_test_adapt(&env, t, &ReachOracle, &HierarchyConfig::default(), 2, 3, &mut rng).unwrap();
        assert_eq!(s, 1.0, "task {}", t.task_id);
    }
}

fn frozen(cfg: &mut RunConfig) {
    cfg.agent.actor_lr = 0.0;
    cfg.agent.critic_lr = 0.0;
    cfg.latent.encoder_lr = 0.0;
}

#[test]
fn zero_learning_rate_leaves_online_nets_unchanged() {
    for v in Variant::ALL {
        let mut cfg = small(v, Family::Push);
        frozen(&mut cfg);
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.learner.clone();
        t.step_iteration().unwrap();
        let after = &t.learner;
        assert_eq!(after.high.actor, before.high.actor, "{v}");
        assert_eq!(after.high.critic_1, before.high.critic_1, "{v}");
        assert_eq!(after.high.critic_2, before.high.critic_2, "{v}");
        if let (Some(a), Some(b)) = (&after.low, &before.low) {
            assert_eq!(a.actor, b.actor, "{v}");
            assert_eq!(a.critic_1, b.critic_1, "{v}");
        }
        if let (Some(a), Some(b)) = (&after.encoder, &before.encoder) {
            assert_eq!(a.params, b.params, "{v}");
        }
    }
}

#[test]
fn frozen_learner_has_constant_meta_test_success() {
    let mut cfg = small(Variant::Mghrl, Family::Reach);
    frozen(&mut cfg);
    cfg.train.total_env_steps = 3 * 50 * 4;
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let mut seen = Vec::new();
    while !t.finished() {
        let r = t.step_iteration().unwrap();
        seen.push(r.test_success.expect("evaluated every iteration"));
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]), "{seen:?}");
    let direct = evaluate_tasks(&t.env, &t.test_tasks, &t.learner, &cfg, cfg.train.eval_episodes).unwrap();
    let mean = direct.iter().sum::<f64>() / direct.len() as f64;
    assert_eq!(mean, seen[0]);
}

/// One-step bandit: every transition is terminal with reward −0.5, so both
/// critics must settle at −0.5 whatever the action.
#[test]
fn critic_settles_at_terminal_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let hyper = AcHyper {
        entropy_coef: 0.2,
        discount: 0.98,
        polyak: 0.995,
        action_scale: 0.1,
        value_floor: None,
    };
    let mut b = AcBundle::new(&[16], 0, hyper, &mut rng).unwrap();
    let batch: Vec<Transition> = (0..32)
        .map(|i| {
            let x = i as f64 / 32.0 - 0.5;
            Transition {
                state: vec![x, -x, 0.1, 0.2, 0.0, 0.0],
                action: [0.05 * x, -0.05 * x].to_vec(),
                reward: -0.5,
                next_state: vec![x, -x, 0.1, 0.2, 0.0, 0.0],
                done: true,
                goal: [0.3, 0.3],
                bootstrap_mask: 0.0,
                kind: TransitionKind::Primitive,
            }
        })
        .collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let adam = AdamConfig {
        lr: 3e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    for _ in 0..3000 {
        b.update(&refs, None, &adam, &adam, &mut rng).unwrap();
    }
    for t in &batch {
        let mut input = t.state.clone();
        input.extend_from_slice(&t.goal);
        input.extend_from_slice(&t.action);
        for c in [&b.critic_1, &b.critic_2] {
            let q = c.forward(&input).unwrap()[0];
            assert!((q + 0.5).abs() < 1e-3, "q = {q}");
        }
    }
}

#[test]
fn identical_tasks_double_the_summed_loss() {
    // a terminal transition has a noise-free target, so every draw from a
    // one-entry buffer has the same critic loss and copies add up exactly
    let cfg = small(Variant::SharedHac, Family::Reach);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let learner = Learner::new(&cfg, &mut rng).unwrap();
    let t = Transition {
        state: vec![0.1, 0.2, 0.1, 0.2, 0.0, 0.0],
        action: vec![0.3, -0.4],
        reward: 0.0,
        next_state: vec![0.3, -0.2, 0.3, -0.2, 0.0, 0.0],
        done: true,
        goal: [0.3, -0.2],
        bootstrap_mask: 0.0,
        kind: TransitionKind::HindsightAction,
    };
    let mut single = TaskBuffer::new(Some(0), 10);
    single.insert([t]).unwrap();
    let loss = |copies: usize| {
        let mut l = learner.clone();
        let buffers: Vec<TaskBuffer> = (0..copies).map(|_| single.clone()).collect();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        train_round(&mut l, &buffers, None, &cfg, &mut r).unwrap()
    };
    let one = loss(1);
    let two = loss(2);
    assert_eq!(two.tasks_used, 2);
    assert!(one.critic_high > 0.0);
    assert_eq!(two.critic_high, 2.0 * one.critic_high);
}
