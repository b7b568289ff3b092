//! Growable Fenwick tree over integer weights, addressed by dense slots.

/// Prefix-sum index supporting `O(log n)` updates and weighted lookup.
///
/// Slots are dense (`0..len`); removal swaps the last slot into the hole so
/// callers can keep a parallel `Vec` of payloads in sync with `swap_remove`.
#[derive(Debug, Clone, Default)]
pub struct FenwickIndex {
    tree: Vec<u64>,
    weights: Vec<u64>,
    total: u64,
}

impl FenwickIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn weight(&self, slot: usize) -> u64 {
        self.weights[slot]
    }

    fn capacity(&self) -> usize {
        self.tree.len().saturating_sub(1)
    }

    fn rebuild(&mut self, capacity: usize) {
        self.tree = vec![0; capacity + 1];
        for (i, w) in self.weights.iter().enumerate() {
            self.tree[i + 1] = *w;
        }
        for j in 1..=capacity {
            let parent = j + (j & j.wrapping_neg());
            if parent <= capacity {
                self.tree[parent] += self.tree[j];
            }
        }
    }

    fn add(&mut self, slot: usize, delta: i64) {
        let cap = self.capacity();
        let mut j = slot + 1;
        while j <= cap {
            self.tree[j] = self.tree[j].wrapping_add_signed(delta);
            j += j & j.wrapping_neg();
        }
    }

    pub fn push(&mut self, weight: u64) {
        if self.weights.len() == self.capacity() {
            self.weights.push(weight);
            let cap = (self.weights.len() * 2).max(8);
            self.rebuild(cap);
        } else {
            self.weights.push(weight);
            self.add(self.weights.len() - 1, weight as i64);
        }
        self.total += weight;
    }

    pub fn set(&mut self, slot: usize, weight: u64) {
        let old = self.weights[slot];
        if old != weight {
            self.weights[slot] = weight;
            self.add(slot, weight as i64 - old as i64);
            self.total = self.total - old + weight;
        }
    }

    /// Moves the last slot into `slot` and shrinks by one.
    pub fn swap_remove(&mut self, slot: usize) {
        let last = self.weights.len() - 1;
        if slot != last {
            let moved = self.weights[last];
            self.set(slot, moved);
        }
        self.set(last, 0);
        self.weights.pop();
    }

    /// Smallest slot whose inclusive prefix sum exceeds `target`; `target < total`.
    pub fn find(&self, target: u64) -> usize {
        debug_assert!(target < self.total);
        let cap = self.capacity();
        let mut pos = 0usize;
        let mut rem = target;
        let mut step = if cap == 0 { 0 } else { 1usize << (usize::BITS - 1 - cap.leading_zeros()) };
        while step > 0 {
            let next = pos + step;
            if next <= cap && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(self.weights.len() - 1)
    }
}
