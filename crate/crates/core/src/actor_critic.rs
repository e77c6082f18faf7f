//! Soft actor-critic losses with twin critics and Polyak-averaged targets.
//!
//! The same bundle type serves every level: inputs are
//! `[observation, goal, z?]` for the actor and `[observation, goal, z?, action]`
//! for the critics, where `z` is present only for latent-conditioned policies.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{Vec2, OBS_DIM};
use crate::error::{Error, Result};
use crate::hierarchy::Transition;
use crate::nets::{AdamConfig, Matrix, MlpParams, OptState, SquashedSample};

pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcBundle {
    pub actor: MlpParams,
    pub critic_1: MlpParams,
    pub critic_2: MlpParams,
    pub target_1: MlpParams,
    pub target_2: MlpParams,
    pub actor_opt: OptState,
    pub critic_1_opt: OptState,
    pub critic_2_opt: OptState,
    pub entropy_coef: f64,
    pub discount: f64,
    pub polyak: f64,
    /// Actions are `action_scale · tanh(u)`.
    pub action_scale: f64,
    /// When set, Bellman targets are clipped to `[floor, 0]`.
    pub value_floor: Option<f64>,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcHyper {
    pub entropy_coef: f64,
    pub discount: f64,
    pub polyak: f64,
    pub action_scale: f64,
    pub value_floor: Option<f64>,
}

/// Gradients of every trainable net in a bundle, same layout as the params.
#[derive(Debug, Clone, PartialEq)]
pub struct AcGrads {
    pub actor: Vec<f64>,
    pub critic_1: Vec<f64>,
    pub critic_2: Vec<f64>,
}

impl AcGrads {
    pub fn zeros_like(b: &AcBundle) -> Self {
        Self {
            actor: vec![0.0; b.actor.len()],
            critic_1: vec![0.0; b.critic_1.len()],
            critic_2: vec![0.0; b.critic_2.len()],
        }
    }

    pub fn add(&mut self, other: &AcGrads) {
        for (a, b) in [
            (&mut self.actor, &other.actor),
            (&mut self.critic_1, &other.critic_1),
            (&mut self.critic_2, &other.critic_2),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Debug, Clone)]
pub struct CriticOutput {
    pub loss: f64,
    pub grad_1: Vec<f64>,
    pub grad_2: Vec<f64>,
    /// ∂loss/∂z summed over the batch (only when a latent was supplied).
    pub grad_z: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ActorOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn noise_matrix<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * ACTION_DIM).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, ACTION_DIM, data).expect("shape matches")
}

impl AcBundle {
    pub fn actor_input_dim(latent_dim: usize) -> usize {
        OBS_DIM + 2 + latent_dim
    }

    pub fn new<R: Rng + ?Sized>(hidden: &[usize], latent_dim: usize, hyper: AcHyper, rng: &mut R) -> Result<Self> {
        let input = Self::actor_input_dim(latent_dim);
        let sizes = |inp: usize, out: usize| {
            let mut s = vec![inp];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let actor = MlpParams::init(sizes(input, 2 * ACTION_DIM), 3e-3, rng)?;
        let critic_1 = MlpParams::init(sizes(input + ACTION_DIM, 1), 3e-3, rng)?;
        let critic_2 = MlpParams::init(sizes(input + ACTION_DIM, 1), 3e-3, rng)?;
        Self::from_parts(actor, critic_1, critic_2, latent_dim, hyper)
    }

    /// Targets start as copies of the online critics.
    pub fn from_parts(
        actor: MlpParams,
        critic_1: MlpParams,
        critic_2: MlpParams,
        latent_dim: usize,
        hyper: AcHyper,
    ) -> Result<Self> {
        let input = Self::actor_input_dim(latent_dim);
        if actor.input_dim() != input || actor.output_dim() != 2 * ACTION_DIM {
            return Err(Error::invalid("actor shape does not match observation/goal/latent layout"));
        }
        for c in [&critic_1, &critic_2] {
            if c.input_dim() != input + ACTION_DIM || c.output_dim() != 1 {
                return Err(Error::invalid("critic shape does not match layout"));
            }
        }
        if critic_1.layer_sizes() != critic_2.layer_sizes() {
            return Err(Error::invalid("twin critics must share a shape"));
        }
        if !(hyper.discount > 0.0 && hyper.discount < 1.0) {
            return Err(Error::invalid("discount must lie in (0, 1)"));
        }
        if hyper.value_floor.is_some_and(|f| !(f.is_finite() && f < 0.0)) {
            return Err(Error::invalid("value floor must be finite and negative"));
        }
        if !(0.0..=1.0).contains(&hyper.polyak) || hyper.entropy_coef < 0.0 {
            return Err(Error::invalid("polyak must lie in [0, 1] and entropy_coef be >= 0"));
        }
        Ok(Self {
            actor_opt: OptState::new(actor.len()),
            critic_1_opt: OptState::new(critic_1.len()),
            critic_2_opt: OptState::new(critic_2.len()),
            target_1: critic_1.clone(),
            target_2: critic_2.clone(),
            actor,
            critic_1,
            critic_2,
            entropy_coef: hyper.entropy_coef,
            discount: hyper.discount,
            polyak: hyper.polyak,
            action_scale: hyper.action_scale,
            value_floor: hyper.value_floor,
            latent_dim,
        })
    }

    fn check_latent(&self, z: Option<&[f64]>) -> Result<()> {
        match (z, self.latent_dim) {
            (None, 0) => Ok(()),
            (Some(z), d) if z.len() == d && d > 0 => Ok(()),
            _ => Err(Error::invalid(format!(
                "bundle expects a latent of dim {}, got {:?}",
                self.latent_dim,
                z.map(|z| z.len())
            ))),
        }
    }

    fn policy_input(&self, obs: &[f64], goal: &Vec2, z: Option<&[f64]>) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::actor_input_dim(self.latent_dim));
        v.extend_from_slice(obs);
        v.extend_from_slice(goal);
        if let Some(z) = z {
            v.extend_from_slice(z);
        }
        v
    }

    fn batch_inputs(&self, batch: &[&Transition], z: Option<&[f64]>, next: bool) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = batch
            .iter()
            .map(|t| self.policy_input(if next { &t.next_state } else { &t.state }, &t.goal, z))
            .collect();
        Matrix::from_rows(&rows)
    }

    fn with_actions(inputs: &Matrix, actions: &[Vec<f64>]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = (0..inputs.rows())
            .map(|r| {
                let mut v = inputs.row(r).to_vec();
                v.extend_from_slice(&actions[r]);
                v
            })
            .collect();
        Matrix::from_rows(&rows)
    }

    /// Squashed samples for every row of `inputs` using the given noise.
    fn policy_samples(&self, inputs: &Matrix, noise: &Matrix) -> Result<(crate::nets::ForwardCache, Vec<SquashedSample>)> {
        let cache = self.actor.forward_batch(inputs)?;
        let out = cache.output();
        let samples = (0..out.rows())
            .map(|r| {
                let (mean, log_std) = out.row(r).split_at(ACTION_DIM);
                SquashedSample::draw(mean, log_std, noise.row(r), self.action_scale)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((cache, samples))
    }

    /// Single action. With `explore` the action is sampled, otherwise it is
    /// the squashed mean.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], goal: &Vec2, z: Option<&[f64]>, explore: bool, rng: &mut R) -> Result<Vec2> {
        self.check_latent(z)?;
        let out = self.actor.forward(&self.policy_input(obs, goal, z))?;
        let (mean, log_std) = out.split_at(ACTION_DIM);
        if explore {
            let noise: Vec<f64> = (0..ACTION_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let s = SquashedSample::draw(mean, log_std, &noise, self.action_scale)?;
            Ok([s.action[0], s.action[1]])
        } else {
            Ok([self.action_scale * mean[0].tanh(), self.action_scale * mean[1].tanh()])
        }
    }

    pub fn critic_loss<R: Rng + ?Sized>(&self, batch: &[&Transition], z: Option<&[f64]>, rng: &mut R) -> Result<CriticOutput> {
        let noise = noise_matrix(batch.len(), rng);
        self.critic_loss_with_noise(batch, z, &noise)
    }

    /// Mean over the two critics of the mean squared Bellman residual against
    /// `y = r + mask·γ·(min target Q(s', a') − α·log π(a'|s'))`, clipped to
    /// `[value_floor, 0]` when a floor is set.
    pub fn critic_loss_with_noise(&self, batch: &[&Transition], z: Option<&[f64]>, noise: &Matrix) -> Result<CriticOutput> {
        if batch.is_empty() {
            return Err(Error::invalid("critic loss needs a non-empty batch"));
        }
        self.check_latent(z)?;
        let n = batch.len();
        let next_inputs = self.batch_inputs(batch, z, true)?;
        let (_, next_samples) = self.policy_samples(&next_inputs, noise)?;
        let next_actions: Vec<Vec<f64>> = next_samples.iter().map(|s| s.action.clone()).collect();
        let next_q_in = Self::with_actions(&next_inputs, &next_actions)?;
        let tq1 = self.target_1.forward_batch(&next_q_in)?;
        let tq2 = self.target_2.forward_batch(&next_q_in)?;
        let targets: Vec<f64> = (0..n)
            .map(|r| {
                let t = batch[r];
                let min_q = tq1.output().row(r)[0].min(tq2.output().row(r)[0]);
                let y = t.reward + t.bootstrap_mask * self.discount * (min_q - self.entropy_coef * next_samples[r].log_prob);
                match self.value_floor {
                    Some(floor) => y.clamp(floor, 0.0),
                    None => y,
                }
            })
            .collect();

        let inputs = self.batch_inputs(batch, z, false)?;
        let actions: Vec<Vec<f64>> = batch.iter().map(|t| t.action.clone()).collect();
        let q_in = Self::with_actions(&inputs, &actions)?;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(2);
        let mut grad_z = z.map(|z| vec![0.0; z.len()]);
        let z_offset = OBS_DIM + 2;
        for critic in [&self.critic_1, &self.critic_2] {
            let cache = critic.forward_batch(&q_in)?;
            let mut d_out = Matrix::zeros(n, 1);
            for r in 0..n {
                let diff = cache.output().row(r)[0] - targets[r];
                loss += 0.5 * diff * diff / n as f64;
                d_out.row_mut(r)[0] = diff / n as f64;
            }
            let g = critic.backward(&cache, &d_out)?;
            if let Some(gz) = grad_z.as_mut() {
                for r in 0..n {
                    let row = g.input.row(r);
                    for (k, v) in gz.iter_mut().enumerate() {
                        *v += row[z_offset + k];
                    }
                }
            }
            grads.push(g.params);
        }
        if !loss.is_finite() {
            return Err(Error::numerical("critic loss"));
        }
        let grad_2 = grads.pop().unwrap();
        let grad_1 = grads.pop().unwrap();
        Ok(CriticOutput {
            loss,
            grad_1,
            grad_2,
            grad_z,
        })
    }

    pub fn actor_loss<R: Rng + ?Sized>(&self, batch: &[&Transition], z: Option<&[f64]>, rng: &mut R) -> Result<ActorOutput> {
        let noise = noise_matrix(batch.len(), rng);
        self.actor_loss_with_noise(batch, z, &noise)
    }

    /// Mean of `α·log π(a'|s) − min Q(s, a')` with `a'` reparameterised from
    /// the current actor. The latent is treated as a constant.
    pub fn actor_loss_with_noise(&self, batch: &[&Transition], z: Option<&[f64]>, noise: &Matrix) -> Result<ActorOutput> {
        if batch.is_empty() {
            return Err(Error::invalid("actor loss needs a non-empty batch"));
        }
        self.check_latent(z)?;
        let n = batch.len();
        let inputs = self.batch_inputs(batch, z, false)?;
        let (actor_cache, samples) = self.policy_samples(&inputs, noise)?;
        let actions: Vec<Vec<f64>> = samples.iter().map(|s| s.action.clone()).collect();
        let q_in = Self::with_actions(&inputs, &actions)?;
        let c1 = self.critic_1.forward_batch(&q_in)?;
        let c2 = self.critic_2.forward_batch(&q_in)?;
        let mut d1 = Matrix::zeros(n, 1);
        let mut d2 = Matrix::zeros(n, 1);
        let mut loss = 0.0;
        for r in 0..n {
            let (q1, q2) = (c1.output().row(r)[0], c2.output().row(r)[0]);
            loss += (self.entropy_coef * samples[r].log_prob - q1.min(q2)) / n as f64;
            if q1 <= q2 {
                d1.row_mut(r)[0] = -1.0 / n as f64;
            } else {
                d2.row_mut(r)[0] = -1.0 / n as f64;
            }
        }
        let g1 = self.critic_1.backward(&c1, &d1)?;
        let g2 = self.critic_2.backward(&c2, &d2)?;
        let a_off = q_in.cols() - ACTION_DIM;
        let mut d_head = Matrix::zeros(n, 2 * ACTION_DIM);
        for r in 0..n {
            let d_action: Vec<f64> = (0..ACTION_DIM)
                .map(|k| g1.input.row(r)[a_off + k] + g2.input.row(r)[a_off + k])
                .collect();
            let (dm, ds) = samples[r].backward(&d_action, self.entropy_coef / n as f64);
            let row = d_head.row_mut(r);
            row[..ACTION_DIM].copy_from_slice(&dm);
            row[ACTION_DIM..].copy_from_slice(&ds);
        }
        let grad = self.actor.backward(&actor_cache, &d_head)?.params;
        if !loss.is_finite() {
            return Err(Error::numerical("actor loss"));
        }
        Ok(ActorOutput { loss, grad })
    }

    /// Applies one Adam step per net, then moves the targets toward the
    /// online critics.
    pub fn apply(&mut self, grads: &AcGrads, actor_cfg: &AdamConfig, critic_cfg: &AdamConfig) -> Result<()> {
        self.critic_1_opt.step(self.critic_1.as_mut_slice(), &grads.critic_1, critic_cfg)?;
        self.critic_2_opt.step(self.critic_2.as_mut_slice(), &grads.critic_2, critic_cfg)?;
        self.actor_opt.step(self.actor.as_mut_slice(), &grads.actor, actor_cfg)?;
        polyak_update(&mut self.target_1, &self.critic_1, self.polyak)?;
        polyak_update(&mut self.target_2, &self.critic_2, self.polyak)?;
        Ok(())
    }

    /// Loss gradients for one batch, all taken at the current parameters.
    pub fn gradients<R: Rng + ?Sized>(
        &self,
        batch: &[&Transition],
        z: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<(AcGrads, CriticOutput, f64)> {
        let critic = self.critic_loss(batch, z, rng)?;
        let actor = self.actor_loss(batch, z, rng)?;
        let grads = AcGrads {
            actor: actor.grad,
            critic_1: critic.grad_1.clone(),
            critic_2: critic.grad_2.clone(),
        };
        Ok((grads, critic, actor.loss))
    }

    /// One full update on a batch; returns (critic loss, actor loss).
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &[&Transition],
        z: Option<&[f64]>,
        actor_cfg: &AdamConfig,
        critic_cfg: &AdamConfig,
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        let (grads, critic, actor_loss) = self.gradients(batch, z, rng)?;
        self.apply(&grads, actor_cfg, critic_cfg)?;
        Ok((critic.loss, actor_loss))
    }
}

/// `target ← polyak·target + (1 − polyak)·online`.
pub fn polyak_update(target: &mut MlpParams, online: &MlpParams, polyak: f64) -> Result<()> {
    if target.layer_sizes() != online.layer_sizes() {
        return Err(Error::invalid("polyak update between differently shaped nets"));
    }
    for (t, o) in target.as_mut_slice().iter_mut().zip(online.as_slice()) {
        *t = polyak * *t + (1.0 - polyak) * o;
    }
    Ok(())
}
