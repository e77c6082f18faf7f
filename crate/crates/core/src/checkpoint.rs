//! Binary checkpoints of the full training state.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "MGHRLCKP"
//! schema       u32
//! config       u64 length + UTF-8 JSON
//! train tasks  u64 length + UTF-8 JSON task set
//! test tasks   u64 length + UTF-8 JSON task set
//! iteration    u64
//! env_steps    u64
//! last eval    u8 flag, then u64 count + f64 each when set
//! rng × 2      collect then train: 32-byte seed, u64 stream, u128 word position
//! high bundle  see below
//! low bundle   u8 flag, bundle when set
//! encoder      u8 flag, net + optimizer when set
//! buffers      u64 count, then per buffer:
//!              u8 flag + u32 task id, u64 capacity, u64 total inserted,
//!              u64 window start, u64 length, transitions
//! low buffer   u8 flag, buffer when set
//!
//! vec          u64 length + f64 each
//! net          u64 layer count, u64 per size, vec of parameters
//! optimizer    u64 step count, vec first moment, vec second moment
//! bundle       nets actor, critic 1, critic 2, target 1, target 2;
//!              optimizers actor, critic 1, critic 2;
//!              f64 entropy coef, discount, polyak, action scale;
//!              u8 flag + f64 value floor when set; u64 latent dim
//! transition   vec state, vec action, f64 reward, vec next state, u8 done,
//!              f64 × 2 goal, f64 bootstrap mask, u8 kind
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::actor_critic::AcBundle;
use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::env::{PlanarEnv, TaskSet};
use crate::error::{Error, Result};
use crate::hierarchy::{Transition, TransitionKind};
use crate::meta_train::{Encoder, Learner, Trainer};
use crate::nets::{MlpParams, OptState};
use crate::replay::TaskBuffer;

pub const MAGIC: &[u8; 8] = b"MGHRLCKP";

struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn vec(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }
    fn net(&mut self, n: &MlpParams) {
        self.u64(n.layer_sizes().len() as u64);
        for s in n.layer_sizes() {
            self.u64(*s as u64);
        }
        self.vec(n.as_slice());
    }
    fn opt(&mut self, o: &OptState) {
        self.u64(o.step_count);
        self.vec(&o.first_moment);
        self.vec(&o.second_moment);
    }
    fn bundle(&mut self, b: &AcBundle) {
        for n in [&b.actor, &b.critic_1, &b.critic_2, &b.target_1, &b.target_2] {
            self.net(n);
        }
        for o in [&b.actor_opt, &b.critic_1_opt, &b.critic_2_opt] {
            self.opt(o);
        }
        self.f64(b.entropy_coef);
        self.f64(b.discount);
        self.f64(b.polyak);
        self.f64(b.action_scale);
        match b.value_floor {
            Some(f) => {
                self.u8(1);
                self.f64(f);
            }
            None => self.u8(0),
        }
        self.u64(b.latent_dim as u64);
    }
    fn rng(&mut self, r: &ChaCha8Rng) {
        self.0.extend_from_slice(&r.get_seed());
        self.u64(r.get_stream());
        self.u128(r.get_word_pos());
    }
    fn transition(&mut self, t: &Transition) {
        self.vec(&t.state);
        self.vec(&t.action);
        self.f64(t.reward);
        self.vec(&t.next_state);
        self.u8(t.done as u8);
        self.f64(t.goal[0]);
        self.f64(t.goal[1]);
        self.f64(t.bootstrap_mask);
        self.u8(match t.kind {
            TransitionKind::Primitive => 0,
            TransitionKind::HindsightAction => 1,
            TransitionKind::SubgoalTest => 2,
            TransitionKind::HindsightGoal => 3,
        });
    }
    fn buffer(&mut self, b: &TaskBuffer) {
        match b.task_id {
            Some(id) => {
                self.u8(1);
                self.u32(id);
            }
            None => {
                self.u8(0);
                self.u32(0);
            }
        }
        self.u64(b.capacity() as u64);
        self.u64(b.total_inserted());
        self.u64(b.window_start());
        self.u64(b.len() as u64);
        for t in b.iter() {
            self.transition(t);
        }
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt data while reading {what}"))
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(corrupt(what)),
        }
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        // every element takes at least one byte
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(corrupt(what));
        }
        Ok(n as usize)
    }
    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.len(what)?;
        self.take(n, what)
    }
    fn str(&mut self, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.bytes(what)?).map_err(|_| corrupt(what))
    }
    fn vec(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.len(what)?;
        (0..n).map(|_| self.f64(what)).collect()
    }
    fn net(&mut self) -> Result<MlpParams> {
        let n = self.len("layer sizes")?;
        let sizes = (0..n).map(|_| self.u64("layer sizes").map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        let data = self.vec("parameters")?;
        MlpParams::new(sizes, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn opt(&mut self) -> Result<OptState> {
        Ok(OptState {
            step_count: self.u64("optimizer")?,
            first_moment: self.vec("optimizer")?,
            second_moment: self.vec("optimizer")?,
        })
    }
    fn bundle(&mut self) -> Result<AcBundle> {
        let actor = self.net()?;
        let critic_1 = self.net()?;
        let critic_2 = self.net()?;
        let target_1 = self.net()?;
        let target_2 = self.net()?;
        let actor_opt = self.opt()?;
        let critic_1_opt = self.opt()?;
        let critic_2_opt = self.opt()?;
        let b = AcBundle {
            entropy_coef: self.f64("bundle")?,
            discount: self.f64("bundle")?,
            polyak: self.f64("bundle")?,
            action_scale: self.f64("bundle")?,
            value_floor: if self.flag("bundle")? { Some(self.f64("bundle")?) } else { None },
            latent_dim: self.u64("bundle")? as usize,
            actor,
            critic_1,
            critic_2,
            target_1,
            target_2,
            actor_opt,
            critic_1_opt,
            critic_2_opt,
        };
        let opts_ok = [(&b.actor, &b.actor_opt), (&b.critic_1, &b.critic_1_opt), (&b.critic_2, &b.critic_2_opt)]
            .iter()
            .all(|(n, o)| o.first_moment.len() == n.len() && o.second_moment.len() == n.len());
        if !opts_ok || b.target_1.layer_sizes() != b.critic_1.layer_sizes() || b.target_2.layer_sizes() != b.critic_2.layer_sizes() {
            return Err(Error::Checkpoint("bundle shapes are inconsistent".into()));
        }
        Ok(b)
    }
    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.take(32, "rng")?.try_into().expect("32 bytes");
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(self.u64("rng")?);
        r.set_word_pos(self.u128("rng")?);
        Ok(r)
    }
    fn transition(&mut self) -> Result<Transition> {
        let state = self.vec("transition")?;
        let action = self.vec("transition")?;
        let reward = self.f64("transition")?;
        let next_state = self.vec("transition")?;
        let done = self.flag("transition")?;
        let goal = [self.f64("transition")?, self.f64("transition")?];
        let bootstrap_mask = self.f64("transition")?;
        let kind = match self.u8("transition")? {
            0 => TransitionKind::Primitive,
            1 => TransitionKind::HindsightAction,
            2 => TransitionKind::SubgoalTest,
            3 => TransitionKind::HindsightGoal,
            _ => return Err(corrupt("transition kind")),
        };
        Ok(Transition {
            state,
            action,
            reward,
            next_state,
            done,
            goal,
            bootstrap_mask,
            kind,
        })
    }
    fn buffer(&mut self) -> Result<TaskBuffer> {
        let has_id = self.flag("buffer")?;
        let id = self.u32("buffer")?;
        let capacity = self.u64("buffer")? as usize;
        let total = self.u64("buffer")?;
        let window = self.u64("buffer")?;
        let n = self.len("buffer")?;
        let storage = (0..n).map(|_| self.transition()).collect::<Result<Vec<_>>>()?;
        TaskBuffer::from_parts(has_id.then_some(id), capacity, total, window, storage)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Serializes the whole trainer.
pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let mut o = Out(Vec::new());
    o.0.extend_from_slice(MAGIC);
    o.u32(SCHEMA_VERSION);
    o.bytes(serde_json::to_string(&t.cfg).expect("config serializes").as_bytes());
    for tasks in [&t.train_tasks, &t.test_tasks] {
        let set = TaskSet { tasks: tasks.clone() };
        o.bytes(serde_json::to_string(&set).expect("tasks serialize").as_bytes());
    }
    o.u64(t.iteration);
    o.u64(t.env_steps);
    match &t.last_test_success {
        Some(v) => {
            o.u8(1);
            o.vec(v);
        }
        None => o.u8(0),
    }
    o.rng(&t.collect_rng);
    o.rng(&t.train_rng);
    o.bundle(&t.learner.high);
    match &t.learner.low {
        Some(b) => {
            o.u8(1);
            o.bundle(b);
        }
        None => o.u8(0),
    }
    match &t.learner.encoder {
        Some(e) => {
            o.u8(1);
            o.net(&e.params);
            o.opt(&e.opt);
        }
        None => o.u8(0),
    }
    o.u64(t.high_buffers.len() as u64);
    for b in &t.high_buffers {
        o.buffer(b);
    }
    match &t.low_buffer {
        Some(b) => {
            o.u8(1);
            o.buffer(b);
        }
        None => o.u8(0),
    }
    o.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = In { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let schema = r.u32("schema")?;
    if schema != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema_version {schema} is not supported (expected {SCHEMA_VERSION})"
        )));
    }
    let cfg = RunConfig::from_json(r.str("config")?)?;
    let train: TaskSet = serde_json::from_str(r.str("train tasks")?)?;
    let test: TaskSet = serde_json::from_str(r.str("test tasks")?)?;
    let iteration = r.u64("iteration")?;
    let env_steps = r.u64("env steps")?;
    let last_test_success = if r.flag("last eval")? { Some(r.vec("last eval")?) } else { None };
    let collect_rng = r.rng()?;
    let train_rng = r.rng()?;
    let high = r.bundle()?;
    let low = if r.flag("low bundle")? { Some(r.bundle()?) } else { None };
    let encoder = if r.flag("encoder")? {
        let params = r.net()?;
        let opt = r.opt()?;
        if opt.first_moment.len() != params.len() || opt.second_moment.len() != params.len() {
            return Err(Error::Checkpoint("encoder optimizer shape mismatch".into()));
        }
        Some(Encoder { params, opt })
    } else {
        None
    };
    let n = r.len("buffers")?;
    let high_buffers = (0..n).map(|_| r.buffer()).collect::<Result<Vec<_>>>()?;
    let low_buffer = if r.flag("low buffer")? { Some(r.buffer()?) } else { None };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    let v = cfg.variant;
    if low.is_some() != v.hierarchical() || encoder.is_some() != v.uses_latent() || low_buffer.is_some() != v.hierarchical() {
        return Err(Error::Checkpoint(format!("stored components do not match variant {v}")));
    }
    if high_buffers.len() != train.tasks.len() {
        return Err(Error::Checkpoint("buffer count differs from train task count".into()));
    }
    Ok(Trainer {
        env: PlanarEnv::new(cfg.env),
        cfg,
        train_tasks: train.tasks,
        test_tasks: test.tasks,
        learner: Learner {
            variant: v,
            high,
            low,
            encoder,
        },
        high_buffers,
        low_buffer,
        collect_rng,
        train_rng,
        env_steps,
        iteration,
        last_test_success,
    })
}

/// Writes atomically: a temporary sibling is renamed over `path`, so an
/// interrupted save never destroys the previous checkpoint.
pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(t))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::Checkpoint(format!("{} does not exist", path.display())),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}
