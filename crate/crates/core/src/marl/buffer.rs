use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One joint step of every agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub joint_obs: Vec<f64>,
    pub joint_actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub joint_next_obs: Vec<f64>,
    pub done: bool,
}

/// FIFO ring of transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay buffer capacity must be >= 1"));
        }
        Ok(Self {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    /// Overwrites the oldest entry once full and returns it.
    pub fn push(&mut self, t: Transition) -> Option<Transition> {
        let evicted = if self.storage.len() < self.capacity {
            self.storage.push(t);
            None
        } else {
            Some(std::mem::replace(&mut self.storage[self.cursor], t))
        };
        self.cursor = (self.cursor + 1) % self.capacity;
        evicted
    }

    /// Reverts the latest `push`, given what it returned.
    pub fn undo_push(&mut self, evicted: Option<Transition>) {
        self.cursor = (self.cursor + self.capacity - 1) % self.capacity;
        match evicted {
            Some(t) => self.storage[self.cursor] = t,
            None => {
                self.storage.pop();
            }
        }
    }

    /// Oldest-first iteration.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.storage.len() < self.capacity {
            0
        } else {
            self.cursor
        };
        self.storage[split..]
            .iter()
            .chain(self.storage[..split].iter())
    }

    /// Uniform indices with replacement into the storage slots.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if n == 0 || self.storage.len() < n {
            return Err(Error::invalid(format!(
                "cannot sample {n} transitions from a buffer holding {}",
                self.storage.len()
            )));
        }
        Ok((0..n)
            .map(|_| rng.random_range(0..self.storage.len()))
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(n, rng)?
            .into_iter()
            .map(|i| &self.storage[i])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(tag: f64) -> Transition {
        Transition {
            joint_obs: vec![tag],
            joint_actions: vec![],
            rewards: vec![tag],
            joint_next_obs: vec![tag],
            done: false,
        }
    }

    #[test]
    fn undo_push_restores_previous_state() {
        let mk = |i: usize| Transition {
            joint_obs: vec![i as f64],
            joint_actions: vec![],
            rewards: vec![],
            joint_next_obs: vec![],
            done: true,
        };
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            let before = b.clone();
            let ev = b.push(mk(i));
            let mut undone = b.clone();
            undone.undo_push(ev);
            assert_eq!(undone, before);
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = ReplayBuffer::new(2).unwrap();
        for x in [1.0, 2.0, 3.0] {
            buf.push(t(x));
        }
        let held: Vec<f64> = buf.iter().map(|x| x.rewards[0]).collect();
        assert_eq!(held, vec![2.0, 3.0]);
        buf.push(t(4.0));
        let held: Vec<f64> = buf.iter().map(|x| x.rewards[0]).collect();
        assert_eq!(held, vec![3.0, 4.0]);
    }

    #[test]
    fn sampling_is_reproducible() {
        let mut buf = ReplayBuffer::new(16).unwrap();
        for i in 0..10 {
            buf.push(t(i as f64));
        }
        let a = buf
            .sample_indices(10, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let b = buf
            .sample_indices(10, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
        assert!(buf.sample(11, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        for i in 0..10 {
            buf.push(t(i as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws / 10 {
            for i in buf.sample_indices(10, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((0.09..=0.11).contains(&f), "{f}");
        }
    }
}
