use std::sync::Arc;

use rand::Rng;

/// One observed step. States are shared so consecutive transitions do not
/// duplicate them.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Arc<[f32]>,
    pub action: usize,
    pub reward: f64,
    pub next: Arc<[f32]>,
    /// Episode ended on this step (not a timeout).
    pub terminal: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            next: 0,
        }
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

    /// Overwrites the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }

    /// Like [`sample`](Self::sample) but returns positions, for callers that cache per entry.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.items[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(action: usize) -> Transition {
        let s: Arc<[f32]> = Arc::from(vec![0.0f32]);
        Transition {
            state: s.clone(),
            action,
            reward: 0.0,
            next: s,
            terminal: false,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3);
        for a in 0..5 {
            b.push(t(a));
        }
        assert_eq!(b.len(), 3);
        let mut actions: Vec<usize> = b.iter().map(|x| x.action).collect();
        actions.sort();
        assert_eq!(actions, vec![2, 3, 4]);
    }

    #[test]
    fn sampling_covers_the_buffer() {
        let mut b = ReplayBuffer::new(4);
        for a in 0..4 {
            b.push(t(a));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = [0usize; 4];
        for x in b.sample(4000, &mut rng) {
            seen[x.action] += 1;
        }
        assert!(seen.iter().all(|&c| (850..1150).contains(&c)), "{seen:?}");
        assert!(ReplayBuffer::new(2).sample(3, &mut rng).is_empty());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn never_exceeds_capacity_and_keeps_newest(capacity in 1usize..20, extra in 0usize..40) {
            let mut b = ReplayBuffer::new(capacity);
            let s: Arc<[f32]> = Arc::from(vec![0.0f32]);
            let n = capacity + extra;
            for a in 0..n {
                b.push(Transition { state: s.clone(), action: a, reward: 0.0, next: s.clone(), terminal: false });
                prop_assert!(b.len() <= capacity);
            }
            let mut kept: Vec<usize> = b.iter().map(|t| t.action).collect();
            kept.sort();
            prop_assert_eq!(kept, (n - capacity..n).collect::<Vec<_>>());
        }
    }
}
