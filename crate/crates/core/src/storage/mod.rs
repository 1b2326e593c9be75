//! Replay buffers and the equal-parts minibatch sampler.

mod format;

pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, Dataset, DATASET_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::rng::{self, Rng};

/// One environment interaction `(s, a, r, s', done)`.
///
/// `done` marks true termination only; horizon truncation is not stored, so
/// bootstrapped targets stay valid across time-outs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// FIFO ring buffer of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
    state_dim: usize,
    action_dim: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            cursor: 0,
            state_dim,
            action_dim,
        }
    }

    /// Builds a buffer holding exactly `items` (capacity = max(len, 1)).
    pub fn from_transitions(items: Vec<Transition>, state_dim: usize, action_dim: usize) -> Result<Self> {
        let mut b = Self::new(items.len().max(1), state_dim, action_dim);
        for t in items {
            b.append(t)?;
        }
        Ok(b)
    }

    pub fn append(&mut self, t: Transition) -> Result<()> {
        if t.s.len() != self.state_dim || t.s_next.len() != self.state_dim || t.a.len() != self.action_dim {
            return Err(Error::Shape(format!(
                "transition dims (s {}, a {}, s' {}) do not match buffer ({}, {})",
                t.s.len(),
                t.a.len(),
                t.s_next.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        if !t.r.is_finite() {
            return Err(Error::Shape(format!("non-finite reward {}", t.r)));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.cursor = 0;
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Stored transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn sample_one(&self, rng: &mut Rng) -> &Transition {
        &self.items[rng::index(rng, self.items.len())]
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::Sampling("cannot sample from an empty buffer".into()));
        }
        let picked: Vec<&Transition> = (0..n).map(|_| self.sample_one(rng)).collect();
        Batch::from_refs(&picked, self.state_dim, self.action_dim)
    }
}

/// A minibatch laid out as matrices, one transition per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub s: Matrix,
    pub a: Matrix,
    pub r: Vec<f64>,
    pub s_next: Matrix,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn from_refs(items: &[&Transition], state_dim: usize, action_dim: usize) -> Result<Self> {
        let n = items.len();
        let mut s = Matrix::zeros(n, state_dim);
        let mut a = Matrix::zeros(n, action_dim);
        let mut s_next = Matrix::zeros(n, state_dim);
        let mut r = Vec::with_capacity(n);
        let mut done = Vec::with_capacity(n);
        for (i, t) in items.iter().enumerate() {
            if t.s.len() != state_dim || t.a.len() != action_dim {
                return Err(Error::Shape("batch transition dims mismatch".into()));
            }
            s.row_mut(i).copy_from_slice(&t.s);
            a.row_mut(i).copy_from_slice(&t.a);
            s_next.row_mut(i).copy_from_slice(&t.s_next);
            r.push(t.r);
            done.push(t.done);
        }
        Ok(Self { s, a, r, s_next, done })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            s: self.s.row(i).to_vec(),
            a: self.a.row(i).to_vec(),
            r: self.r[i],
            s_next: self.s_next.row(i).to_vec(),
            done: self.done[i],
        }
    }
}

/// How many of `batch_size` draws go to each of the three sources.
///
/// Equal thirds when all are nonempty; an empty source's share is split
/// evenly among the nonempty ones, remainder to the earliest.
pub fn equal_parts_counts(nonempty: [bool; 3], batch_size: usize) -> Result<[usize; 3]> {
    if batch_size % 3 != 0 {
        return Err(Error::Config(format!("equal-parts batch size {batch_size} is not divisible by 3")));
    }
    let live = nonempty.iter().filter(|&&b| b).count();
    if live == 0 {
        return Err(Error::Sampling("all three sources are empty".into()));
    }
    let base = batch_size / live;
    let mut rem = batch_size % live;
    let mut counts = [0; 3];
    for i in 0..3 {
        if nonempty[i] {
            counts[i] = base + usize::from(rem > 0);
            rem = rem.saturating_sub(1);
        }
    }
    Ok(counts)
}

/// Samples `batch_size` transitions uniformly with replacement, a third from
/// each of offline, online and synthetic data.
pub fn sample_equal_parts(
    offline: &ReplayBuffer,
    online: &ReplayBuffer,
    synthetic: &ReplayBuffer,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    let sources = [offline, online, synthetic];
    let counts = equal_parts_counts(sources.map(|b| !b.is_empty()), batch_size)?;
    let mut picked: Vec<&Transition> = Vec::with_capacity(batch_size);
    for (src, &n) in sources.iter().zip(&counts) {
        for _ in 0..n {
            picked.push(src.sample_one(rng));
        }
    }
    Batch::from_refs(&picked, offline.state_dim, offline.action_dim)
}
