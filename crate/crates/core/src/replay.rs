//! Bounded FIFO replay with round bookkeeping for recent-context sampling.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::ContextBatch;
use crate::error::{Error, Result};
use crate::hierarchy::Transition;

/// Which part of a buffer context batches are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextWindow {
    /// Only the most recent collection round.
    Recent,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBuffer {
    /// `None` for the low-level buffer shared by all tasks.
    pub task_id: Option<u32>,
    storage: VecDeque<Transition>,
    capacity: usize,
    total_inserted: u64,
    /// Absolute insertion index where the current round began.
    window_start: u64,
}

impl TaskBuffer {
    pub fn new(task_id: Option<u32>, capacity: usize) -> Self {
        Self {
            task_id,
            storage: VecDeque::with_capacity(capacity.min(4096)),
            capacity: capacity.max(1),
            total_inserted: 0,
            window_start: 0,
        }
    }

    /// Rebuilds a buffer from its serialized pieces.
    pub fn from_parts(
        task_id: Option<u32>,
        capacity: usize,
        total_inserted: u64,
        window_start: u64,
        storage: Vec<Transition>,
    ) -> Result<Self> {
        if storage.len() > capacity || (storage.len() as u64) > total_inserted || window_start > total_inserted {
            return Err(Error::invalid("inconsistent buffer bookkeeping"));
        }
        Ok(Self {
            task_id,
            storage: storage.into(),
            capacity,
            total_inserted,
            window_start,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_inserted(&self) -> u64 {
        self.total_inserted
    }

    pub fn window_start(&self) -> u64 {
        self.window_start
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    /// Marks everything inserted from now on as the recent window.
    pub fn begin_round(&mut self) {
        self.window_start = self.total_inserted;
    }

    /// Appends in order, evicting the oldest entries past capacity. Nothing is
    /// inserted if any transition is malformed.
    pub fn insert<I>(&mut self, transitions: I) -> Result<()>
    where
        I: IntoIterator<Item = Transition>,
        I::IntoIter: Clone,
    {
        let iter = transitions.into_iter();
        for t in iter.clone() {
            t.validate()?;
        }
        for t in iter {
            if self.storage.len() == self.capacity {
                self.storage.pop_front();
            }
            self.storage.push_back(t);
            self.total_inserted += 1;
        }
        Ok(())
    }

    /// Number of stored entries that belong to the recent window.
    pub fn recent_len(&self) -> usize {
        let evicted = self.total_inserted - self.storage.len() as u64;
        (self.total_inserted - self.window_start.max(evicted)) as usize
    }

    fn window(&self, window: ContextWindow) -> std::ops::Range<usize> {
        match window {
            ContextWindow::All => 0..self.storage.len(),
            ContextWindow::Recent => self.storage.len() - self.recent_len()..self.storage.len(),
        }
    }

    /// `n` uniform draws with replacement over the whole buffer.
    pub fn sample_rl_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        self.sample_range(0..self.storage.len(), n, rng)
    }

    pub fn sample_context_transitions<R: Rng + ?Sized>(
        &self,
        n: usize,
        window: ContextWindow,
        rng: &mut R,
    ) -> Result<Vec<&Transition>> {
        self.sample_range(self.window(window), n, rng)
    }

    /// `n` uniform draws with replacement from the context window.
    pub fn sample_context<R: Rng + ?Sized>(&self, n: usize, window: ContextWindow, rng: &mut R) -> Result<ContextBatch> {
        ContextBatch::from_transitions(self.sample_context_transitions(n, window, rng)?)
    }

    fn sample_range<R: Rng + ?Sized>(&self, range: std::ops::Range<usize>, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if range.is_empty() {
            return Err(Error::Unavailable(format!(
                "buffer {:?} has nothing to sample",
                self.task_id
            )));
        }
        Ok((0..n).map(|_| &self.storage[rng.random_range(range.clone())]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::TransitionKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tagged(i: usize) -> Transition {
        Transition {
            state: vec![i as f64; 6],
            action: vec![0.0, 0.0],
            reward: -1.0,
            next_state: vec![0.0; 6],
            done: false,
            goal: [0.0, 0.0],
            bootstrap_mask: 1.0,
            kind: TransitionKind::Primitive,
        }
    }

    fn tag(t: &Transition) -> usize {
        t.state[0] as usize
    }

    #[test]
    fn insert_preserves_order() {
        let mut b = TaskBuffer::new(Some(0), 10);
        b.insert((0..3).map(tagged)).unwrap();
        assert_eq!(b.iter().map(tag).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn fifo_eviction() {
        let mut b = TaskBuffer::new(Some(0), 5);
        b.insert((0..7).map(tagged)).unwrap();
        assert_eq!(b.iter().map(tag).collect::<Vec<_>>(), vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn malformed_insert_leaves_buffer_untouched() {
        let mut b = TaskBuffer::new(Some(0), 5);
        let mut bad = tagged(1);
        bad.reward = f64::NAN;
        assert!(b.insert(vec![tagged(0), bad]).is_err());
        assert!(b.is_empty());
    }

    #[test]
    fn recent_window_tracks_last_round() {
        let mut b = TaskBuffer::new(Some(0), 100);
        b.begin_round();
        b.insert((0..4).map(tagged)).unwrap();
        b.begin_round();
        b.insert((100..103).map(tagged)).unwrap();
        assert_eq!(b.recent_len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let ctx = b.sample_context_transitions(4, ContextWindow::Recent, &mut rng).unwrap();
            assert!(ctx.iter().all(|t| tag(t) >= 100));
        }
        // eviction eating into the window
        let mut small = TaskBuffer::new(Some(0), 4);
        small.begin_round();
        small.insert((0..3).map(tagged)).unwrap();
        small.begin_round();
        small.insert((10..16).map(tagged)).unwrap();
        assert_eq!(small.recent_len(), 4);
    }

    #[test]
    fn empty_buffer_unavailable() {
        let b = TaskBuffer::new(Some(0), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(b.sample_rl_batch(2, &mut rng), Err(Error::Unavailable(_))));
        assert!(matches!(b.sample_context(2, ContextWindow::All, &mut rng), Err(Error::Unavailable(_))));
    }

    #[test]
    fn single_entry_repeats() {
        let mut b = TaskBuffer::new(Some(0), 4);
        b.insert([tagged(7)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = b.sample_rl_batch(4, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        assert!(batch.iter().all(|t| tag(t) == 7));
        // N larger than the window still yields N entries
        assert_eq!(b.sample_context(9, ContextWindow::Recent, &mut rng).unwrap().len(), 9);
    }

    #[test]
    fn seeded_sampling_repeats() {
        let mut b = TaskBuffer::new(Some(0), 50);
        b.insert((0..50).map(tagged)).unwrap();
        let a: Vec<usize> = b.sample_rl_batch(32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap().into_iter().map(tag).collect();
        let c: Vec<usize> = b.sample_rl_batch(32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap().into_iter().map(tag).collect();
        assert_eq!(a, c);
    }

    #[test]
    fn uniform_within_chi_square_bound() {
        let mut b = TaskBuffer::new(Some(0), 10);
        b.insert((0..10).map(tagged)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 10];
        for t in b.sample_rl_batch(n, &mut rng).unwrap() {
            counts[tag(t)] += 1;
        }
        let e = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 99th percentile of χ² with 9 degrees of freedom
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }
}
