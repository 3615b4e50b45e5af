//! Bounded FIFO replay buffer.

use std::collections::VecDeque;

/// Keeps the most recent `capacity` items in insertion order.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
    pushed: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
            pushed: 0,
        }
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

    /// Total number of items ever pushed.
    pub fn pushed(&self) -> usize {
        self.pushed
    }

    /// Appends an item, evicting the oldest one when full. Returns the
    /// evicted item, if any.
    pub fn push(&mut self, item: T) -> Option<T> {
        self.pushed += 1;
        if self.capacity == 0 {
            return Some(item);
        }
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(item);
        evicted
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = T>) -> usize {
        items.into_iter().filter_map(|x| self.push(x)).count()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_buffer_drops_the_oldest_batch() {
        let mut b = ReplayBuffer::new(4000);
        b.extend(0..4000);
        assert_eq!(b.extend(4000..6000), 2000);
        assert_eq!(b.len(), 4000);
        assert_eq!(b.iter().next(), Some(&2000));
        assert_eq!(b.iter().last(), Some(&5999));
        assert_eq!(b.pushed(), 6000);
    }

    proptest! {
        #[test]
        fn contents_are_the_last_capacity_pushes(
            capacity in 0usize..20,
            batches in prop::collection::vec(prop::collection::vec(any::<i32>(), 0..15), 0..10),
        ) {
            let mut b = ReplayBuffer::new(capacity);
            let mut all = Vec::new();
            for batch in &batches {
                b.extend(batch.iter().copied());
                all.extend(batch.iter().copied());
                prop_assert!(b.len() <= capacity);
            }
            let start = all.len().saturating_sub(capacity);
            let got: Vec<i32> = b.iter().copied().collect();
            prop_assert_eq!(got, all[start..].to_vec());
        }
    }
}
