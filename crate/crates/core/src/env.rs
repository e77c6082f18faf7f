//! Planar goal-conditioned manipulation tasks: reach, push and slide.
//!
//! The workspace is the square [−1, 1]². A point gripper moves by bounded
//! displacements; push and slide add a round object. All environments are
//! pure state machines so rollouts never share mutable state.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

/// Length of the flat observation vector: gripper, object, object velocity.
pub const OBS_DIM: usize = 6;
pub const WORKSPACE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Reach,
    Push,
    Slide,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Reach, Family::Push, Family::Slide];

    pub fn name(self) -> &'static str {
        match self {
            Family::Reach => "reach",
            Family::Push => "push",
            Family::Slide => "slide",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Weighted set of task families. Weights must be non-negative and sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FamilyMix(BTreeMap<Family, f64>);

impl FamilyMix {
    pub fn new(weights: impl IntoIterator<Item = (Family, f64)>) -> Result<Self> {
        let mix = Self(weights.into_iter().collect());
        mix.validate()?;
        Ok(mix)
    }

    pub fn single(family: Family) -> Self {
        Self([(family, 1.0)].into_iter().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::invalid("family mix is empty"));
        }
        if self.0.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("family weights must be finite and >= 0"));
        }
        let total: f64 = self.0.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("family weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (Family, f64)> + '_ {
        self.0.iter().map(|(f, w)| (*f, *w))
    }

    /// Scenario label such as `push+slide`, families in canonical order.
    pub fn label(&self) -> String {
        self.iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(f, _)| f.name())
            .collect::<Vec<_>>()
            .join("+")
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Family {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = None;
        for (family, w) in self.iter() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            last = Some(family);
            if u < acc {
                return family;
            }
        }
        last.expect("validated mix has a positive weight")
    }
}

/// Which seed stream a task draw comes from; the two never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: u32,
    pub family: Family,
    pub terminal_goal: Vec2,
    pub gripper_init: Vec2,
    /// Equals `gripper_init` for reach.
    pub object_init: Vec2,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let inside = |p: &Vec2| p.iter().all(|v| v.is_finite() && v.abs() <= WORKSPACE);
        if !inside(&self.terminal_goal) || !inside(&self.gripper_init) || !inside(&self.object_init) {
            return Err(Error::invalid(format!("task {} leaves the workspace", self.task_id)));
        }
        if self.family == Family::Slide && !(0.5..=1.0).contains(&self.terminal_goal[0]) {
            return Err(Error::invalid(format!(
                "slide task {} has goal x outside the slide zone",
                self.task_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSet {
    pub tasks: Vec<TaskSpec>,
}

impl TaskSet {
    pub fn load(path: &Path) -> Result<Self> {
        let set: TaskSet = serde_json::from_slice(&std::fs::read(path)?)?;
        if set.tasks.is_empty() {
            return Err(Error::invalid("task set is empty"));
        }
        for t in &set.tasks {
            t.validate()?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn uniform2<R: Rng>(rng: &mut R, x: (f64, f64), y: (f64, f64)) -> Vec2 {
    [rng.random_range(x.0..=x.1), rng.random_range(y.0..=y.1)]
}

pub fn dist(a: &Vec2, b: &Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn sample_one<R: Rng>(family: Family, task_id: u32, rng: &mut R) -> TaskSpec {
    match family {
        Family::Reach => {
            let gripper = uniform2(rng, (-0.2, 0.2), (-0.2, 0.2));
            let goal = loop {
                let g = uniform2(rng, (-0.8, 0.8), (-0.8, 0.8));
                if dist(&g, &gripper) > 0.1 {
                    break g;
                }
            };
            TaskSpec {
                task_id,
                family,
                terminal_goal: goal,
                gripper_init: gripper,
                object_init: gripper,
            }
        }
        Family::Push => {
            let gripper = uniform2(rng, (-0.1, 0.1), (-0.1, 0.1));
            let object = loop {
                let o = uniform2(rng, (-0.35, 0.35), (-0.35, 0.35));
                if dist(&o, &gripper) > 0.15 {
                    break o;
                }
            };
            let goal = loop {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let radius = rng.random_range(0.15..=0.45);
                let g = [object[0] + radius * angle.cos(), object[1] + radius * angle.sin()];
                if g.iter().all(|v| v.abs() <= 0.8) {
                    break g;
                }
            };
            TaskSpec {
                task_id,
                family,
                terminal_goal: goal,
                gripper_init: gripper,
                object_init: object,
            }
        }
        Family::Slide => TaskSpec {
            task_id,
            family,
            terminal_goal: uniform2(rng, (0.5, 1.0), (-0.5, 0.5)),
            gripper_init: uniform2(rng, (-0.4, -0.25), (-0.25, 0.25)),
            object_init: uniform2(rng, (-0.1, 0.1), (-0.2, 0.2)),
        },
    }
}

/// Draws `n` tasks from the mix. Train and test draws with the same seed use
/// disjoint ChaCha streams. Task ids start at `first_id`.
pub fn sample_tasks(mix: &FamilyMix, n: usize, seed: u64, split: Split, first_id: u32) -> Result<Vec<TaskSpec>> {
    mix.validate()?;
    if n == 0 {
        return Err(Error::invalid("need at least one task"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    Ok((0..n)
        .map(|i| {
            let family = mix.draw(&mut rng);
            sample_one(family, first_id + i as u32, &mut rng)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvParams {
    pub t_max: u32,
    pub action_max: f64,
    pub contact_radius: f64,
    pub slide_gain: f64,
    pub friction: f64,
    pub slide_gripper_x_max: f64,
    /// Distance under which the terminal goal counts as achieved.
    pub goal_threshold: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            t_max: 50,
            action_max: 0.1,
            contact_radius: 0.08,
            slide_gain: 3.0,
            friction: 0.02,
            slide_gripper_x_max: 0.4,
            goal_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub gripper_pos: Vec2,
    pub object_pos: Vec2,
    pub object_vel: Vec2,
    pub t: u32,
}

impl EnvState {
    pub fn observation(&self) -> [f64; OBS_DIM] {
        [
            self.gripper_pos[0],
            self.gripper_pos[1],
            self.object_pos[0],
            self.object_pos[1],
            self.object_vel[0],
            self.object_vel[1],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    /// 0 when the terminal goal is achieved, −1 otherwise.
    pub sparse_reward: f64,
    /// Negative distance between achieved and terminal goal.
    pub dense_reward: f64,
    pub success: bool,
    pub done: bool,
}

fn clamp2(p: Vec2) -> Vec2 {
    [p[0].clamp(-WORKSPACE, WORKSPACE), p[1].clamp(-WORKSPACE, WORKSPACE)]
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlanarEnv {
    pub params: EnvParams,
}

impl PlanarEnv {
    pub fn new(params: EnvParams) -> Self {
        Self { params }
    }

    pub fn reset(&self, task: &TaskSpec) -> EnvState {
        let object_pos = match task.family {
            Family::Reach => task.gripper_init,
            Family::Push | Family::Slide => task.object_init,
        };
        EnvState {
            gripper_pos: task.gripper_init,
            object_pos,
            object_vel: [0.0, 0.0],
            t: 0,
        }
    }

    /// Position that the terminal goal is compared against.
    pub fn achieved_goal(state: &EnvState, family: Family) -> Vec2 {
        match family {
            Family::Reach => state.gripper_pos,
            Family::Push | Family::Slide => state.object_pos,
        }
    }

    pub fn step(&self, state: &EnvState, action: Vec2, task: &TaskSpec) -> Result<StepResult> {
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("environment action"));
        }
        let p = &self.params;
        let a = [
            action[0].clamp(-p.action_max, p.action_max),
            action[1].clamp(-p.action_max, p.action_max),
        ];
        let mut next = state.clone();
        next.t = (state.t + 1).min(p.t_max);
        let mut gripper = clamp2([state.gripper_pos[0] + a[0], state.gripper_pos[1] + a[1]]);
        match task.family {
            Family::Reach => {
                next.gripper_pos = gripper;
                next.object_pos = gripper;
            }
            Family::Push => {
                next.gripper_pos = gripper;
                next.object_pos = self.resolve_push(state.object_pos, gripper, a);
            }
            Family::Slide => {
                gripper[0] = gripper[0].min(p.slide_gripper_x_max);
                next.gripper_pos = gripper;
                let moved = a[0] != 0.0 || a[1] != 0.0;
                let mut vel = state.object_vel;
                if moved && dist(&gripper, &state.object_pos) < p.contact_radius {
                    vel = [p.slide_gain * a[0], p.slide_gain * a[1]];
                }
                let raw = [state.object_pos[0] + vel[0], state.object_pos[1] + vel[1]];
                let obj = clamp2(raw);
                for k in 0..2 {
                    if obj[k] != raw[k] {
                        vel[k] = 0.0;
                    }
                }
                let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
                vel = if speed > p.friction {
                    let f = (speed - p.friction) / speed;
                    [vel[0] * f, vel[1] * f]
                } else {
                    [0.0, 0.0]
                };
                next.object_pos = obj;
                next.object_vel = vel;
            }
        }
        let achieved = Self::achieved_goal(&next, task.family);
        let d = dist(&achieved, &task.terminal_goal);
        let success = d < p.goal_threshold;
        if !d.is_finite() {
            return Err(Error::numerical("environment state"));
        }
        Ok(StepResult {
            done: success || next.t >= p.t_max,
            sparse_reward: if success { 0.0 } else { -1.0 },
            dense_reward: -d,
            success,
            next_state: next,
        })
    }

    /// Moves the object along the gripper's motion direction just far enough
    /// to restore the contact distance.
    fn resolve_push(&self, object: Vec2, gripper: Vec2, a: Vec2) -> Vec2 {
        let r = self.params.contact_radius;
        let d = [object[0] - gripper[0], object[1] - gripper[1]];
        let dd = d[0] * d[0] + d[1] * d[1];
        let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
        if dd >= r * r || norm == 0.0 {
            return object;
        }
        let dir = [a[0] / norm, a[1] / norm];
        let proj = d[0] * dir[0] + d[1] * dir[1];
        let s = -proj + (proj * proj - dd + r * r).sqrt();
        clamp2([object[0] + s * dir[0], object[1] + s * dir[1]])
    }
}
