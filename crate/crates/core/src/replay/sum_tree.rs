//! Binary sum-tree over leaf priorities for proportional sampling.

/// Heap-ordered partial sums: node 1 is the root, node `i` has children
/// `2i` and `2i + 1`, leaves occupy `capacity..2 * capacity`.
#[derive(Clone, Debug)]
pub struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    /// `capacity` must be a power of two.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity.is_power_of_two(), "sum-tree capacity must be a power of two");
        Self {
            capacity,
            nodes: vec![0.0; 2 * capacity],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.capacity + leaf]
    }

    pub fn leaves(&self) -> &[f64] {
        &self.nodes[self.capacity..]
    }

    /// Sets a leaf and repairs every ancestor from its children. Returns the
    /// number of node values written (leaf plus `log2(capacity)` ancestors).
    pub fn set(&mut self, leaf: usize, value: f64) -> usize {
        assert!(leaf < self.capacity, "leaf {leaf} out of range");
        let mut i = self.capacity + leaf;
        self.nodes[i] = value;
        let mut written = 1;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
            written += 1;
        }
        written
    }

    /// Leaf whose prefix-sum interval `[prefix, prefix + p)` contains `mass`.
    /// Never returns a zero-mass leaf while the total is positive.
    pub fn find(&self, mass: f64) -> usize {
        let mut mass = mass.clamp(0.0, self.total());
        let mut i = 1;
        while i < self.capacity {
            let (left, right) = (self.nodes[2 * i], self.nodes[2 * i + 1]);
            if mass < left || right <= 0.0 {
                i *= 2;
            } else {
                mass -= left;
                i = 2 * i + 1;
            }
        }
        let leaf = i - self.capacity;
        debug_assert!(self.total() <= 0.0 || self.nodes[i] > 0.0);
        leaf
    }

    /// Maximum relative gap between any internal node and the sum of its
    /// children.
    pub fn max_inconsistency(&self) -> f64 {
        (1..self.capacity)
            .map(|i| {
                let sum = self.nodes[2 * i] + self.nodes[2 * i + 1];
                (self.nodes[i] - sum).abs() / sum.abs().max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prefix_sum_descent() {
        let mut t = SumTree::new(4);
        for (i, p) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            t.set(i, p);
        }
        assert_eq!(t.total(), 6.0);
        // prefix sums 1, 3, 6: 2.5 lands on the second leaf
        assert_eq!(t.find(2.5), 1);
        assert_eq!(t.find(0.0), 0);
        assert_eq!(t.find(0.999), 0);
        assert_eq!(t.find(1.0), 1);
        assert_eq!(t.find(5.999), 2);
        // the empty fourth leaf is never selected, even at the boundary
        assert_eq!(t.find(6.0), 2);
    }

    #[test]
    fn update_touches_one_root_path() {
        let mut t = SumTree::new(1 << 10);
        assert_eq!(t.set(17, 2.0), 11);
    }

    proptest! {
        #[test]
        fn parents_equal_child_sums(ops in proptest::collection::vec((0usize..64, 0.0f64..10.0), 1..300)) {
            let mut t = SumTree::new(64);
            for (leaf, p) in ops {
                t.set(leaf, p);
            }
            prop_assert!(t.max_inconsistency() <= 1e-12);
            let brute: f64 = t.leaves().iter().sum();
            prop_assert!((t.total() - brute).abs() <= 1e-9 * brute.max(1.0));
        }
    }
}
