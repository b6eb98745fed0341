use rand::Rng;

use crate::autodiff::Tensor;
use crate::critic::TransitionBatch;
use crate::error::{IdacError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring; the oldest transition is overwritten first.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(IdacError::InvalidInput("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index)
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.reward.is_finite() {
            return Err(IdacError::InvalidInput(format!("non-finite reward {}", t.reward)));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Uniform indices into the filled region, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<usize> {
        (0..m).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<TransitionBatch> {
        if self.items.len() < m || m == 0 {
            return Err(IdacError::InvalidInput(format!(
                "cannot draw {m} transitions from a buffer holding {}",
                self.items.len()
            )));
        }
        let idx = self.sample_indices(m, rng);
        let stack = |f: &dyn Fn(&Transition) -> &[f64]| {
            Tensor::from_rows(&idx.iter().map(|&i| f(&self.items[i])).collect::<Vec<_>>())
        };
        Ok(TransitionBatch {
            states: stack(&|t| &t.state)?,
            actions: stack(&|t| &t.action)?,
            rewards: idx.iter().map(|&i| self.items[i].reward).collect(),
            next_states: stack(&|t| &t.next_state)?,
            dones: idx.iter().map(|&i| self.items[i].done).collect(),
        })
    }
}
