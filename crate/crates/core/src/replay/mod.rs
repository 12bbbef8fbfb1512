//! n-step transition composition and proportional prioritized replay.
//!
//! Frames are stored once each in a ring; transitions hold the ids of the
//! four frames of their state and next state, and stacks are rebuilt on
//! sampling. A transition whose frames would be overwritten is evicted first.

mod sum_tree;

use std::collections::VecDeque;

use rand::Rng;
use thiserror::Error;

pub use sum_tree::SumTree;

/// Frames per state stack.
pub const STACK: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("cannot sample {requested} transitions from a memory holding {stored}")]
    Insufficient { requested: usize, stored: usize },
    #[error("append called before start_episode")]
    NoEpisode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayConfig {
    /// Transition slots; a power of two.
    pub capacity: usize,
    pub n_step: usize,
    pub gamma: f64,
    /// Priority exponent applied before storing in the tree.
    pub omega: f64,
    /// Added to raw priorities so no leaf is ever zero.
    pub eps_p: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 1 << 17,
            n_step: 3,
            gamma: 0.99,
            omega: 0.5,
            eps_p: 1e-6,
        }
    }
}

/// An n-step transition. `gamma_n` is `gamma^k` for the `k` rewards actually
/// summed into `n_step_return` (fewer than `n` when the episode ended).
#[derive(Clone, Debug, PartialEq)]
pub struct Transition<S> {
    pub state: S,
    pub action: usize,
    pub n_step_return: f64,
    pub next_state: S,
    pub done: bool,
    pub gamma_n: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrioritizedTransition<S> {
    pub transition: Transition<S>,
    /// Leaf value, i.e. the priority after the `omega` exponent.
    pub priority: f64,
}

/// Folds single-step experience into n-step transitions.
#[derive(Clone, Debug)]
pub struct NStepComposer<S> {
    n: usize,
    gamma: f64,
    pending: VecDeque<(S, usize, f64)>,
}

impl<S: Clone> NStepComposer<S> {
    pub fn new(n: usize, gamma: f64) -> Self {
        assert!(n >= 1, "n-step horizon must be positive");
        assert!(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0, 1]");
        Self {
            n,
            gamma,
            pending: VecDeque::with_capacity(n),
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn clear(&mut self) {
        self.pending.clear();
    }

    fn compose(&self, from: usize, next_state: &S, done: bool) -> Transition<S> {
        let (state, action, _) = &self.pending[from];
        let mut ret = 0.0;
        let mut discount = 1.0;
        for (_, _, r) in self.pending.iter().skip(from) {
            ret += discount * r;
            discount *= self.gamma;
        }
        Transition {
            state: state.clone(),
            action: *action,
            n_step_return: ret,
            next_state: next_state.clone(),
            done,
            gamma_n: discount,
        }
    }

    /// Records `(state, action, reward)` reaching `next_state`. Emits the
    /// oldest pending transition once `n` rewards are queued, or every pending
    /// transition (with shortened horizons) when the episode ends.
    pub fn push(&mut self, state: S, action: usize, reward: f64, next_state: S, done: bool) -> Vec<Transition<S>> {
        self.pending.push_back((state, action, reward));
        if done {
            let out = (0..self.pending.len()).map(|i| self.compose(i, &next_state, true)).collect();
            self.pending.clear();
            out
        } else if self.pending.len() == self.n {
            let t = self.compose(0, &next_state, false);
            self.pending.pop_front();
            vec![t]
        } else {
            Vec::new()
        }
    }
}

type StackIds = [u64; STACK];

#[derive(Clone, Debug)]
struct Slot {
    transition: Transition<StackIds>,
    generation: u64,
}

/// Handle to a sampled slot; stale once the slot is overwritten.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleId {
    pub leaf: usize,
    generation: u64,
}

/// A sampled minibatch with states decoded to `[0, 1]` floats, laid out
/// `(batch, STACK, frame_len)`.
#[derive(Clone, Debug)]
pub struct SampledBatch {
    pub ids: Vec<SampleId>,
    pub states: Vec<f32>,
    pub next_states: Vec<f32>,
    pub actions: Vec<usize>,
    pub returns: Vec<f64>,
    pub gamma_n: Vec<f64>,
    pub dones: Vec<bool>,
    /// Sampling probability `P(i)` of each drawn slot.
    pub probs: Vec<f64>,
    /// Importance weights `(M P(i))^-beta`, divided by the batch maximum.
    pub weights: Vec<f64>,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub struct ReplayMemory {
    cfg: ReplayConfig,
    frame_len: usize,
    frame_cap: usize,
    frames: Vec<u8>,
    frame_ids: Vec<u64>,
    next_frame: u64,
    current: Option<StackIds>,
    composer: NStepComposer<StackIds>,
    slots: Vec<Option<Slot>>,
    tree: SumTree,
    cursor: usize,
    len: usize,
    writes: u64,
    max_leaf: f64,
    stale_updates: usize,
    evictions: usize,
}

impl ReplayMemory {
    pub fn new(cfg: ReplayConfig, frame_len: usize) -> Self {
        assert!(cfg.capacity.is_power_of_two(), "replay capacity must be a power of two");
        assert!(cfg.omega > 0.0 && cfg.eps_p > 0.0);
        let frame_cap = cfg.capacity + cfg.capacity / 4 + 4 * (cfg.n_step + STACK);
        Self {
            frame_len,
            frame_cap,
            frames: vec![0; frame_cap * frame_len],
            frame_ids: vec![u64::MAX; frame_cap],
            next_frame: 0,
            current: None,
            composer: NStepComposer::new(cfg.n_step, cfg.gamma),
            slots: vec![None; cfg.capacity],
            tree: SumTree::new(cfg.capacity),
            cursor: 0,
            len: 0,
            writes: 0,
            max_leaf: 1.0,
            stale_updates: 0,
            evictions: 0,
            cfg,
        }
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn stale_updates(&self) -> usize {
        self.stale_updates
    }

    pub fn evictions(&self) -> usize {
        self.evictions
    }

    /// Leaf value given to new transitions: the largest leaf seen so far.
    pub fn max_priority(&self) -> f64 {
        self.max_leaf
    }

    fn store_frame(&mut self, frame: &[u8]) -> u64 {
        assert_eq!(frame.len(), self.frame_len, "frame length");
        let id = self.next_frame;
        self.next_frame += 1;
        if let Some(dropped) = id.checked_sub(self.frame_cap as u64) {
            self.evict_through(dropped);
        }
        let pos = (id % self.frame_cap as u64) as usize;
        self.frames[pos * self.frame_len..(pos + 1) * self.frame_len].copy_from_slice(frame);
        self.frame_ids[pos] = id;
        id
    }

    /// Evicts the oldest transitions while they reference frame `dropped`
    /// or older.
    fn evict_through(&mut self, dropped: u64) {
        while self.len > 0 {
            let oldest = (self.cursor + self.cfg.capacity - self.len) % self.cfg.capacity;
            let keep = match &self.slots[oldest] {
                Some(slot) => slot.transition.state[0] > dropped,
                None => false,
            };
            if keep {
                break;
            }
            self.slots[oldest] = None;
            self.tree.set(oldest, 0.0);
            self.len -= 1;
            self.evictions += 1;
        }
    }

    /// Begins an episode whose first observation is `frame` repeated.
    pub fn start_episode(&mut self, frame: &[u8]) {
        self.composer.clear();
        let id = self.store_frame(frame);
        self.current = Some([id; STACK]);
    }

    /// Records taking `action` with (clipped) `reward`, observing `next_frame`.
    /// Returns how many transitions were emitted into memory.
    pub fn append(&mut self, action: usize, reward: f64, next_frame: &[u8], done: bool) -> Result<usize, ReplayError> {
        let state = self.current.ok_or(ReplayError::NoEpisode)?;
        let id = self.store_frame(next_frame);
        let mut next = [0; STACK];
        next[..STACK - 1].copy_from_slice(&state[1..]);
        next[STACK - 1] = id;
        let emitted = self.composer.push(state, action, reward, next, done);
        let count = emitted.len();
        for t in emitted {
            self.insert(t);
        }
        self.current = if done { None } else { Some(next) };
        Ok(count)
    }

    fn insert(&mut self, transition: Transition<StackIds>) {
        let leaf = self.cursor;
        if self.slots[leaf].is_none() {
            self.len += 1;
        }
        self.writes += 1;
        self.slots[leaf] = Some(Slot {
            transition,
            generation: self.writes,
        });
        self.tree.set(leaf, self.max_leaf);
        self.cursor = (self.cursor + 1) % self.cfg.capacity;
    }

    fn leaf_value(&self, raw: f64) -> f64 {
        (raw.max(0.0) + self.cfg.eps_p).powf(self.cfg.omega)
    }

    fn decode_stack(&self, ids: &StackIds, out: &mut [f32]) {
        for (k, &id) in ids.iter().enumerate() {
            let pos = (id % self.frame_cap as u64) as usize;
            debug_assert_eq!(self.frame_ids[pos], id, "frame {id} was overwritten");
            let src = &self.frames[pos * self.frame_len..(pos + 1) * self.frame_len];
            for (d, &s) in out[k * self.frame_len..(k + 1) * self.frame_len].iter_mut().zip(src) {
                *d = f32::from(s) / 255.0;
            }
        }
    }

    fn stack_bytes(&self, ids: &StackIds) -> Vec<u8> {
        ids.iter()
            .flat_map(|&id| {
                let pos = (id % self.frame_cap as u64) as usize;
                assert_eq!(self.frame_ids[pos], id, "frame {id} was overwritten");
                self.frames[pos * self.frame_len..(pos + 1) * self.frame_len].iter().copied()
            })
            .collect()
    }

    /// Handle to the transition currently in `leaf`.
    pub fn sample_id(&self, leaf: usize) -> Option<SampleId> {
        let slot = self.slots.get(leaf)?.as_ref()?;
        Some(SampleId {
            leaf,
            generation: slot.generation,
        })
    }

    /// The transition in `leaf`, with stacks materialized as raw bytes.
    pub fn transition(&self, leaf: usize) -> Option<PrioritizedTransition<Vec<u8>>> {
        let slot = self.slots.get(leaf)?.as_ref()?;
        let t = &slot.transition;
        Some(PrioritizedTransition {
            transition: Transition {
                state: self.stack_bytes(&t.state),
                action: t.action,
                n_step_return: t.n_step_return,
                next_state: self.stack_bytes(&t.next_state),
                done: t.done,
                gamma_n: t.gamma_n,
            },
            priority: self.tree.get(leaf),
        })
    }

    /// Stratified proportional sampling: the total mass is split into
    /// `batch` equal segments with one uniform draw per segment.
    pub fn sample(&self, batch: usize, beta: f64, rng: &mut impl Rng) -> Result<SampledBatch, ReplayError> {
        if batch == 0 || self.len < batch {
            return Err(ReplayError::Insufficient {
                requested: batch,
                stored: self.len,
            });
        }
        let total = self.tree.total();
        let segment = total / batch as f64;
        let stack_len = STACK * self.frame_len;
        let mut out = SampledBatch {
            ids: Vec::with_capacity(batch),
            states: vec![0.0; batch * stack_len],
            next_states: vec![0.0; batch * stack_len],
            actions: Vec::with_capacity(batch),
            returns: Vec::with_capacity(batch),
            gamma_n: Vec::with_capacity(batch),
            dones: Vec::with_capacity(batch),
            probs: Vec::with_capacity(batch),
            weights: Vec::with_capacity(batch),
        };
        for i in 0..batch {
            let mass = segment * (i as f64 + rng.random::<f64>());
            let leaf = self.tree.find(mass);
            let slot = self.slots[leaf].as_ref().expect("positive leaves hold transitions");
            let t = &slot.transition;
            self.decode_stack(&t.state, &mut out.states[i * stack_len..(i + 1) * stack_len]);
            self.decode_stack(&t.next_state, &mut out.next_states[i * stack_len..(i + 1) * stack_len]);
            out.ids.push(SampleId {
                leaf,
                generation: slot.generation,
            });
            out.actions.push(t.action);
            out.returns.push(t.n_step_return);
            out.gamma_n.push(t.gamma_n);
            out.dones.push(t.done);
            let p = self.tree.get(leaf) / total;
            out.probs.push(p);
            out.weights.push((self.len as f64 * p).powf(-beta));
        }
        let max_w = out.weights.iter().copied().fold(0.0, f64::max);
        out.weights.iter_mut().for_each(|w| *w /= max_w);
        Ok(out)
    }

    /// Overwrites sampled leaves with `(p + eps_p)^omega`. Handles whose slot
    /// has since been rewritten are skipped and counted.
    pub fn update_priorities(&mut self, ids: &[SampleId], priorities: &[f64]) {
        assert_eq!(ids.len(), priorities.len());
        for (id, &p) in ids.iter().zip(priorities) {
            let live = matches!(&self.slots[id.leaf], Some(s) if s.generation == id.generation);
            if !live {
                self.stale_updates += 1;
                continue;
            }
            let v = self.leaf_value(p);
            self.tree.set(id.leaf, v);
            self.max_leaf = self.max_leaf.max(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(capacity: usize, n: usize) -> ReplayMemory {
        ReplayMemory::new(
            ReplayConfig {
                capacity,
                n_step: n,
                gamma: 0.99,
                omega: 0.5,
                eps_p: 1e-6,
            },
            2,
        )
    }

    #[test]
    fn three_step_return() {
        let mut c = NStepComposer::new(3, 0.99);
        assert!(c.push(0, 1, 1.0, 1, false).is_empty());
        assert!(c.push(1, 1, 0.0, 2, false).is_empty());
        let out = c.push(2, 1, 1.0, 3, false);
        assert_eq!(out.len(), 1);
        assert!((out[0].n_step_return - 1.9801).abs() < 1e-12);
        assert!((out[0].gamma_n - 0.99f64.powi(3)).abs() < 1e-15);
        assert_eq!((out[0].state, out[0].next_state, out[0].done), (0, 3, false));
    }

    #[test]
    fn early_termination_truncates_horizon() {
        let mut c = NStepComposer::new(3, 0.99);
        let out = c.push(0, 2, -1.0, 1, true);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].n_step_return, -1.0);
        assert!(out[0].done);
        assert_eq!(out[0].gamma_n, 0.99);
        assert_eq!(c.pending(), 0);
    }

    #[test]
    fn first_transition_gets_unit_priority() {
        let mut m = small(8, 1);
        m.start_episode(&[0, 0]);
        assert_eq!(m.append(0, 1.0, &[1, 1], false).unwrap(), 1);
        assert_eq!(m.transition(0).unwrap().priority, 1.0);
    }

    #[test]
    fn append_requires_episode() {
        let mut m = small(8, 1);
        assert_eq!(m.append(0, 0.0, &[0, 0], false), Err(ReplayError::NoEpisode));
    }

    #[test]
    fn zero_priorities_hit_the_floor() {
        let mut m = small(8, 1);
        m.start_episode(&[0, 0]);
        for i in 0..8u8 {
            m.append(0, 0.0, &[i, i], false).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = m.sample(8, 0.4, &mut rng).unwrap();
        let ids = b.ids.clone();
        m.update_priorities(&ids, &[0.0; 8]);
        // stratified draws can repeat a leaf; overwrite every slot directly
        let all: Vec<SampleId> = (0..8)
            .map(|leaf| SampleId {
                leaf,
                generation: m.slots[leaf].as_ref().unwrap().generation,
            })
            .collect();
        m.update_priorities(&all, &[0.0; 8]);
        let floor = 1e-6f64.powf(0.5);
        assert!(m.tree().leaves().iter().all(|&l| (l - floor).abs() < 1e-18));
        assert!((m.tree().total() - 8.0 * floor).abs() < 1e-15);
    }

    #[test]
    fn uniform_priorities_give_unit_weights() {
        let mut m = small(16, 1);
        m.start_episode(&[0, 0]);
        for i in 0..16u8 {
            m.append(i as usize % 5, 0.0, &[i, i], false).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for beta in [0.0, 0.4, 1.0] {
            let b = m.sample(4, beta, &mut rng).unwrap();
            assert!(b.weights.iter().all(|&w| (w - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn stale_ids_are_ignored_and_counted() {
        let mut m = small(2, 1);
        m.start_episode(&[0, 0]);
        m.append(0, 0.0, &[1, 1], false).unwrap();
        m.append(0, 0.0, &[2, 2], false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = m.sample(2, 0.5, &mut rng).unwrap();
        m.append(0, 0.0, &[3, 3], false).unwrap();
        m.append(0, 0.0, &[4, 4], false).unwrap();
        m.update_priorities(&b.ids, &[5.0, 5.0]);
        assert_eq!(m.stale_updates(), 2);
        assert!(m.tree().leaves().iter().all(|&l| l == 1.0));
    }

    #[test]
    fn empty_memory_cannot_sample() {
        let m = small(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(m.sample(1, 0.4, &mut rng), Err(ReplayError::Insufficient { .. })));
    }

    #[test]
    fn ring_never_exceeds_capacity() {
        let mut m = small(4, 2);
        m.start_episode(&[0, 0]);
        for i in 0..50u8 {
            m.append(0, 1.0, &[i, i], i % 7 == 6).unwrap();
            if i % 7 == 6 {
                m.start_episode(&[i, 0]);
            }
            assert!(m.len() <= 4);
        }
    }
}
