//! PelletWorld: a deterministic 12×12 pixel game with per-class object masks,
//! wrapped in the usual frame-stack / action-repeat / reward-clip pipeline.
//!
//! The player collects pellets (+1) while avoiding hazards that patrol fixed
//! square loops (−5 and a life). A status strip along the top changes tint
//! for the last third of every 24-step cycle ("dusk"); standing on the unmarked
//! home cell at dusk pays +1, once per cycle, provided a pellet was eaten since
//! the previous bonus.

mod oracle;
pub mod preprocess;
mod trajectory;

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pgm;
use crate::tensor::{Real, Tensor};

pub use oracle::{scripted_action, ORACLE_FIXTURE_RETURNS, ORACLE_FIXTURE_SEED};
pub use trajectory::{read_trajectory, write_trajectory, TrajectoryRecord};

pub const GRID: usize = 12;
pub const CELL: usize = 7;
pub const SIDE: usize = GRID * CELL;
pub const FRAME_LEN: usize = SIDE * SIDE;
pub const STACK: usize = 4;
pub const N_ACTIONS: usize = 5;
pub const ACTION_REPEAT: usize = 4;
/// Frames per episode, no-op starts included.
pub const FRAME_CAP: u64 = 108_000;
pub const MAX_AGENT_STEPS: u64 = FRAME_CAP / ACTION_REPEAT as u64;
pub const NOOP_MAX: usize = 30;
pub const LIVES: u32 = 3;
pub const PHASE_PERIOD: u64 = 24;
pub const DUSK_START: u64 = 16;
pub const PATROL_PERIOD: usize = 8;
pub const HAZARDS: usize = 3;
pub const STRIP_ROWS: usize = 6;
pub const HOME: Cell = Cell { row: 11, col: 6 };

pub const PELLET_REWARD: f64 = 1.0;
pub const HAZARD_PENALTY: f64 = -5.0;
pub const DUSK_BONUS: f64 = 1.0;

pub const PLAYER_LEVEL: f32 = 1.0;
pub const PELLET_LEVEL: f32 = 0.6;
pub const HAZARD_LEVEL: f32 = 0.35;
pub const DAY_LEVEL: f32 = 0.8;
pub const DUSK_LEVEL: f32 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("action {0} out of range")]
    BadAction(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Moves per action `0..5` = no-op, up, down, left, right. Row 0 holds the
    /// status strip and is not walkable; edges block.
    pub fn shifted(self, action: usize) -> Cell {
        let Cell { row, col } = self;
        match action {
            1 if row > 1 => Cell::new(row - 1, col),
            2 if row + 1 < GRID => Cell::new(row + 1, col),
            3 if col > 0 => Cell::new(row, col - 1),
            4 if col + 1 < GRID => Cell::new(row, col + 1),
            _ => self,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hazard {
    pub route: [Cell; PATROL_PERIOD],
    pub offset: usize,
}

impl Hazard {
    /// Clockwise perimeter of the 3×3 block with top-left corner `(r, c)`.
    pub fn square(r: usize, c: usize, offset: usize) -> Self {
        let route = [
            Cell::new(r, c),
            Cell::new(r, c + 1),
            Cell::new(r, c + 2),
            Cell::new(r + 1, c + 2),
            Cell::new(r + 2, c + 2),
            Cell::new(r + 2, c + 1),
            Cell::new(r + 2, c),
            Cell::new(r + 1, c),
        ];
        Self { route, offset }
    }

    /// Position after `moves` movement ticks.
    pub fn at(&self, moves: u64) -> Cell {
        self.route[(self.offset + (moves % PATROL_PERIOD as u64) as usize) % PATROL_PERIOD]
    }
}

/// Whether stepping from `from` to `to` during movement tick `moves` hits a
/// hazard, either by landing on it or by swapping places with it.
pub fn collides(hazards: &[Hazard], moves: u64, from: Cell, to: Cell) -> bool {
    hazards.iter().any(|h| {
        let (before, after) = (h.at(moves), h.at(moves + 1));
        after == to || (after == from && before == to)
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TickEvents {
    pub pellets: u32,
    pub collisions: u32,
    pub bonuses: u32,
}

impl TickEvents {
    pub fn reward(&self) -> f64 {
        f64::from(self.pellets) * PELLET_REWARD
            + f64::from(self.collisions) * HAZARD_PENALTY
            + f64::from(self.bonuses) * DUSK_BONUS
    }

    fn add(&mut self, other: &TickEvents) {
        self.pellets += other.pellets;
        self.collisions += other.collisions;
        self.bonuses += other.bonuses;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub player: Cell,
    pub pellets: BTreeSet<Cell>,
    pub hazards: Vec<Hazard>,
    /// World ticks (frames) since the episode began.
    pub ticks: u64,
    pub lives: u32,
    /// Set by eating a pellet, cleared by collecting the dusk bonus.
    pub bonus_armed: bool,
    pub last_bonus_cycle: Option<u64>,
}

impl WorldState {
    pub fn generate(rng: &mut impl Rng) -> Self {
        let mut corners: Vec<(usize, usize)> = Vec::new();
        while corners.len() < HAZARDS {
            let (r, c) = (rng.random_range(1..=GRID - 3), rng.random_range(0..=GRID - 3));
            let covers_home = (r..r + 3).contains(&HOME.row) && (c..c + 3).contains(&HOME.col);
            let overlaps = corners.iter().any(|&(r2, c2)| r.abs_diff(r2) < 3 && c.abs_diff(c2) < 3);
            if !covers_home && !overlaps {
                corners.push((r, c));
            }
        }
        let hazards: Vec<Hazard> = corners
            .into_iter()
            .map(|(r, c)| Hazard::square(r, c, rng.random_range(0..PATROL_PERIOD)))
            .collect();
        let mut free: Vec<Cell> = (1..GRID)
            .flat_map(|r| (0..GRID).map(move |c| Cell::new(r, c)))
            .filter(|&cell| cell != HOME && hazards.iter().all(|h| !h.route.contains(&cell)))
            .collect();
        free.shuffle(rng);
        let count = rng.random_range(12..=20);
        Self {
            player: HOME,
            pellets: free.into_iter().take(count).collect(),
            hazards,
            ticks: 0,
            lives: LIVES,
            bonus_armed: false,
            last_bonus_cycle: None,
        }
    }

    /// Movement ticks executed so far; movement happens on the first tick of
    /// every group of `ACTION_REPEAT`.
    pub fn moves(&self) -> u64 {
        self.ticks.div_ceil(ACTION_REPEAT as u64)
    }

    pub fn phase(&self) -> u64 {
        self.moves() % PHASE_PERIOD
    }

    pub fn is_dusk(&self) -> bool {
        self.phase() >= DUSK_START
    }

    /// Out of lives or out of pellets; the frame cap is enforced by
    /// [`PelletWorld`].
    pub fn is_terminal(&self) -> bool {
        self.lives == 0 || self.pellets.is_empty()
    }

    pub fn tick(&mut self, action: usize) -> TickEvents {
        let mut ev = TickEvents::default();
        if !self.ticks.is_multiple_of(ACTION_REPEAT as u64) {
            self.ticks += 1;
            return ev;
        }
        let moves = self.moves();
        let from = self.player;
        let to = from.shifted(action);
        self.ticks += 1;
        if collides(&self.hazards, moves, from, to) {
            ev.collisions = 1;
            self.lives -= 1;
            self.player = HOME;
            return ev;
        }
        self.player = to;
        if self.pellets.remove(&to) {
            ev.pellets = 1;
            self.bonus_armed = true;
        }
        let cycle = self.moves() / PHASE_PERIOD;
        if self.is_dusk() && to == HOME && self.bonus_armed && self.last_bonus_cycle != Some(cycle) {
            ev.bonuses = 1;
            self.bonus_armed = false;
            self.last_bonus_cycle = Some(cycle);
        }
        ev
    }

    pub fn hazard_cells(&self) -> Vec<Cell> {
        let m = self.moves();
        self.hazards.iter().map(|h| h.at(m)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectClass {
    Player,
    Pellet,
    Hazard,
    Strip,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [
        ObjectClass::Player,
        ObjectClass::Pellet,
        ObjectClass::Hazard,
        ObjectClass::Strip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Player => "player",
            ObjectClass::Pellet => "pellet",
            ObjectClass::Hazard => "hazard",
            ObjectClass::Strip => "strip",
        }
    }
}

/// Per-class pixel masks, each `SIDE * SIDE`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMasks {
    masks: [Vec<bool>; 4],
}

impl ObjectMasks {
    pub fn get(&self, class: ObjectClass) -> &[bool] {
        &self.masks[class as usize]
    }

    pub fn count(&self, class: ObjectClass) -> usize {
        self.get(class).iter().filter(|&&m| m).count()
    }

    /// Masks recovered from an 8-bit frame by intensity level. Only visible
    /// pixels are labelled, so an object hidden under another one (a pellet
    /// under a hazard, say) is missed.
    pub fn from_frame(frame: &[u8]) -> Self {
        let q = pgm::quantize;
        let levels = [
            vec![q(PLAYER_LEVEL)],
            vec![q(PELLET_LEVEL)],
            vec![q(HAZARD_LEVEL)],
            vec![q(DAY_LEVEL), q(DUSK_LEVEL)],
        ];
        let masks = levels.map(|l| frame.iter().map(|v| l.contains(v)).collect());
        Self { masks }
    }

    /// The class owning `pixel`, if any.
    pub fn class_at(&self, pixel: usize) -> Option<ObjectClass> {
        ObjectClass::ALL.into_iter().find(|&c| self.get(c)[pixel])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    pub pixels: Vec<f32>,
    pub masks: ObjectMasks,
}

fn paint(pixels: &mut [f32], mask: &mut [bool], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, level: f32) {
    for y in rows {
        for x in cols.clone() {
            pixels[y * SIDE + x] = level;
            mask[y * SIDE + x] = true;
        }
    }
}

pub fn render(world: &WorldState) -> RawFrame {
    let mut pixels = vec![0.0; FRAME_LEN];
    let mut masks: [Vec<bool>; 4] = std::array::from_fn(|_| vec![false; FRAME_LEN]);
    let strip = if world.is_dusk() { DUSK_LEVEL } else { DAY_LEVEL };
    paint(
        &mut pixels,
        &mut masks[ObjectClass::Strip as usize],
        0..STRIP_ROWS,
        0..SIDE,
        strip,
    );
    let span = |cell: usize| cell * CELL..(cell + 1) * CELL;
    for p in &world.pellets {
        let (y, x) = (p.row * CELL + CELL / 2, p.col * CELL + CELL / 2);
        paint(
            &mut pixels,
            &mut masks[ObjectClass::Pellet as usize],
            y - 1..y + 2,
            x - 1..x + 2,
            PELLET_LEVEL,
        );
    }
    for h in world.hazard_cells() {
        paint(
            &mut pixels,
            &mut masks[ObjectClass::Hazard as usize],
            span(h.row),
            span(h.col),
            HAZARD_LEVEL,
        );
    }
    let p = world.player;
    paint(
        &mut pixels,
        &mut masks[ObjectClass::Player as usize],
        span(p.row),
        span(p.col),
        PLAYER_LEVEL,
    );
    RawFrame {
        pixels,
        masks: ObjectMasks { masks },
    }
}

/// Four most recent 8-bit frames, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct StateStack {
    frames: VecDeque<Vec<u8>>,
}

impl StateStack {
    pub fn repeated(frame: Vec<u8>) -> Self {
        assert_eq!(frame.len(), FRAME_LEN);
        Self {
            frames: std::iter::repeat_n(frame, STACK).collect(),
        }
    }

    pub fn push(&mut self, frame: Vec<u8>) {
        assert_eq!(frame.len(), FRAME_LEN);
        self.frames.pop_front();
        self.frames.push_back(frame);
    }

    pub fn frame(&self, k: usize) -> &[u8] {
        &self.frames[k]
    }

    pub fn latest(&self) -> &[u8] {
        &self.frames[STACK - 1]
    }

    /// Decodes into `out` (length `STACK * FRAME_LEN`) as values in `[0, 1]`.
    pub fn write_into<T: Real>(&self, out: &mut [T]) {
        let scale = T::lit(1.0 / 255.0);
        for (dst, frame) in out.chunks_exact_mut(FRAME_LEN).zip(&self.frames) {
            for (d, &s) in dst.iter_mut().zip(frame) {
                *d = T::lit(f64::from(s)) * scale;
            }
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(&[STACK, SIDE, SIDE]);
        self.write_into(t.data_mut());
        t
    }
}

pub fn quantize_frame(pixels: &[f32]) -> Vec<u8> {
    pixels.iter().map(|&v| pgm::quantize(v)).collect()
}

/// Per-episode bookkeeping; `raw_return` always equals the event tally.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub agent_steps: u64,
    pub noops: u64,
    pub raw_return: f64,
    pub events: TickEvents,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Summed over the repeated ticks, then clipped to `[-1, 1]`.
    pub reward: f64,
    pub raw_reward: f64,
    pub done: bool,
    /// True when the frame cap ended the episode.
    pub truncated: bool,
    pub ticks: usize,
    pub events: TickEvents,
}

/// Episode start and length rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub noop_max: usize,
    /// Frames per episode, no-op starts included.
    pub frame_cap: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            noop_max: NOOP_MAX,
            frame_cap: FRAME_CAP,
        }
    }
}

/// Seed of episode `index` in a run seeded with `base`.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

#[derive(Clone, Debug)]
pub struct PelletWorld {
    protocol: Protocol,
    world: WorldState,
    frame: RawFrame,
    stack: StateStack,
    done: bool,
    stats: EpisodeStats,
}

impl PelletWorld {
    pub fn new(seed: u64, noop_max: usize) -> Self {
        Self::with_protocol(
            seed,
            Protocol {
                noop_max,
                ..Protocol::default()
            },
        )
    }

    pub fn with_protocol(seed: u64, protocol: Protocol) -> Self {
        let world = WorldState::generate(&mut ChaCha8Rng::seed_from_u64(seed));
        let frame = render(&world);
        let stack = StateStack::repeated(quantize_frame(&frame.pixels));
        let mut env = Self {
            protocol,
            world,
            frame,
            stack,
            done: false,
            stats: EpisodeStats::default(),
        };
        env.reset(seed, protocol.noop_max);
        env
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    /// Regenerates the world from `seed`, then runs `k ~ U{0..=noop_max}`
    /// no-op steps. The observation after them seeds all four stack slots.
    pub fn reset(&mut self, seed: u64, noop_max: usize) -> &StateStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.world = WorldState::generate(&mut rng);
        let k = rng.random_range(0..=noop_max as u64);
        self.stats = EpisodeStats::default();
        for _ in 0..k {
            for _ in 0..ACTION_REPEAT {
                let ev = self.world.tick(0);
                debug_assert_eq!(ev, TickEvents::default(), "home is unreachable for hazards");
            }
            self.stats.noops += 1;
        }
        self.frame = render(&self.world);
        self.stack = StateStack::repeated(quantize_frame(&self.frame.pixels));
        self.done = false;
        &self.stack
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if action >= N_ACTIONS {
            return Err(EnvError::BadAction(action));
        }
        let mut events = TickEvents::default();
        let mut ticks = 0;
        while ticks < ACTION_REPEAT && !self.world.is_terminal() && self.world.ticks < self.protocol.frame_cap {
            events.add(&self.world.tick(action));
            ticks += 1;
        }
        let raw_reward = events.reward();
        self.stats.agent_steps += 1;
        self.stats.raw_return += raw_reward;
        self.stats.events.add(&events);
        self.frame = render(&self.world);
        self.stack.push(quantize_frame(&self.frame.pixels));
        let truncated = !self.world.is_terminal() && self.world.ticks >= self.protocol.frame_cap;
        self.done = self.world.is_terminal() || truncated;
        Ok(StepOutcome {
            reward: raw_reward.clamp(-1.0, 1.0),
            raw_reward,
            done: self.done,
            truncated,
            ticks,
            events,
        })
    }

    pub fn state(&self) -> &StateStack {
        &self.stack
    }

    pub fn frame(&self) -> &RawFrame {
        &self.frame
    }

    /// Masks of the most recently rendered frame.
    pub fn masks(&self) -> &ObjectMasks {
        &self.frame.masks
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rollout(seed: u64, actions: &[usize]) -> Vec<(Vec<u8>, f64)> {
        let mut env = PelletWorld::new(seed, NOOP_MAX);
        let mut out = vec![(env.state().latest().to_vec(), 0.0)];
        for &a in actions {
            if env.is_done() {
                break;
            }
            let o = env.step(a).unwrap();
            out.push((env.state().latest().to_vec(), o.raw_reward));
        }
        out
    }

    #[test]
    fn trajectories_are_deterministic() {
        let actions: Vec<usize> = (0..300).map(|i| (i * 7 + i / 3) % N_ACTIONS).collect();
        assert_eq!(rollout(11, &actions), rollout(11, &actions));
        assert_ne!(rollout(11, &actions), rollout(12, &actions));
    }

    #[test]
    fn zero_noops_is_fixed() {
        let a = PelletWorld::new(5, 0);
        let b = PelletWorld::new(5, 0);
        assert_eq!(a.state(), b.state());
        assert_eq!(a.stats().noops, 0);
        assert_eq!(a.world().ticks, 0);
    }

    #[test]
    fn initial_stack_repeats_first_frame() {
        let env = PelletWorld::new(3, NOOP_MAX);
        let s = env.state();
        assert!((1..STACK).all(|k| s.frame(k) == s.frame(0)));
        assert!(env.stats().noops <= NOOP_MAX as u64);
    }

    #[test]
    fn masks_partition_foreground() {
        let mut env = PelletWorld::new(21, 0);
        for i in 0..60 {
            if env.is_done() {
                break;
            }
            let f = env.frame();
            assert_eq!(f.masks.count(ObjectClass::Player), CELL * CELL);
            for px in 0..FRAME_LEN {
                let owners = ObjectClass::ALL.iter().filter(|&&c| f.masks.get(c)[px]).count();
                assert!(owners <= 1, "masks overlap at {px}");
                assert_eq!(owners == 1, f.pixels[px] != 0.0, "mask/pixel mismatch at {px}");
            }
            assert_eq!(&ObjectMasks::from_frame(env.state().latest()), &f.masks);
            env.step(i % N_ACTIONS).unwrap();
        }
    }

    #[test]
    fn collision_clips_to_minus_one() {
        // walk straight into a hazard route
        let mut world = WorldState::generate(&mut ChaCha8Rng::seed_from_u64(0));
        world.hazards = vec![Hazard::square(8, 5, 0)];
        world.pellets = [Cell::new(1, 0)].into();
        let hazard_next = world.hazards[0].at(1);
        world.player = Cell::new(hazard_next.row + 1, hazard_next.col);
        let mut env = PelletWorld::new(0, 0);
        env.world = world;
        let o = env.step(1).unwrap();
        assert_eq!(o.raw_reward, HAZARD_PENALTY);
        assert_eq!(o.reward, -1.0);
        assert_eq!(env.world().lives, LIVES - 1);
        assert_eq!(env.world().player, HOME);
    }

    #[test]
    fn pellet_reward_and_dusk_bonus() {
        let mut env = PelletWorld::new(0, 0);
        let mut world = env.world.clone();
        world.hazards.clear();
        world.pellets = [Cell::new(10, 6), Cell::new(1, 1)].into();
        world.player = Cell::new(9, 6);
        // 14 moves done: phase 14, the bonus becomes available two moves on
        world.ticks = 14 * ACTION_REPEAT as u64;
        env.world = world;
        let o = env.step(2).unwrap();
        assert_eq!((o.raw_reward, o.reward), (1.0, 1.0));
        let o = env.step(2).unwrap();
        assert_eq!(env.world().player, HOME);
        assert_eq!(o.raw_reward, DUSK_BONUS);
        // no second bonus in the same dusk
        let o = env.step(0).unwrap();
        assert_eq!(o.raw_reward, 0.0);
        assert!(!env.world().bonus_armed);
    }

    #[test]
    fn action_repeat_and_frame_cap() {
        let mut env = PelletWorld::new(8, 0);
        let o = env.step(0).unwrap();
        assert_eq!(o.ticks, ACTION_REPEAT);
        assert_eq!(env.world().ticks, ACTION_REPEAT as u64);
        env.world.hazards.clear();
        env.world.ticks = FRAME_CAP - ACTION_REPEAT as u64;
        let o = env.step(0).unwrap();
        assert!(o.done && o.truncated);
        assert_eq!(env.world().ticks, FRAME_CAP);
        assert_eq!(env.step(0), Err(EnvError::EpisodeDone));
        assert_eq!(MAX_AGENT_STEPS, 27_000);
    }

    #[test]
    fn reward_accounting_per_episode() {
        for seed in 0..5 {
            let mut env = PelletWorld::new(seed, NOOP_MAX);
            let mut i = seed as usize;
            while !env.is_done() && env.stats().agent_steps < 2_000 {
                i = (i * 31 + 7) % 1009;
                env.step(i % N_ACTIONS).unwrap();
            }
            let s = env.stats();
            let tally = f64::from(s.events.pellets) - 5.0 * f64::from(s.events.collisions) + f64::from(s.events.bonuses);
            assert_eq!(s.raw_return, tally);
        }
    }

    #[test]
    fn episode_seeds_differ() {
        assert_ne!(episode_seed(0, 0), episode_seed(0, 1));
        assert_ne!(episode_seed(0, 0), episode_seed(1, 0));
        assert_eq!(episode_seed(4, 2), episode_seed(4, 2));
    }
}
