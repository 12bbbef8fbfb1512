//! Scripted reference policy: time-aware breadth-first search to the nearest
//! pellet through the known hazard schedule, detouring home for the dusk bonus
//! when it can be reached in time.

use std::collections::HashSet;

use super::{collides, Cell, WorldState, DUSK_START, HOME, N_ACTIONS, PATROL_PERIOD, PHASE_PERIOD};

const HORIZON: u64 = 96;

/// Regression fixture: scripted-policy returns for episodes `0..8` of base
/// seed `ORACLE_FIXTURE_SEED` (episode seeds via `episode_seed`), with no-op
/// starts of up to 30.
pub const ORACLE_FIXTURE_SEED: u64 = 2024;
pub const ORACLE_FIXTURE_RETURNS: [f64; 8] = [22.0, 20.0, 28.0, 30.0, 23.0, 23.0, 30.0, 23.0];

/// First action and arrival time of the shortest collision-free path to any
/// cell satisfying `goal`.
fn search(world: &WorldState, goal: impl Fn(Cell) -> bool) -> Option<(usize, u64)> {
    let m0 = world.moves();
    let mut seen = HashSet::new();
    let mut frontier = vec![(world.player, None::<usize>)];
    for k in 0..HORIZON {
        let mut next = Vec::new();
        for &(cell, first) in &frontier {
            for a in 0..N_ACTIONS {
                let to = cell.shifted(a);
                if collides(&world.hazards, m0 + k, cell, to) {
                    continue;
                }
                let first = first.unwrap_or(a);
                if goal(to) {
                    return Some((first, k + 1));
                }
                let key = (to, (m0 + k + 1) % PATROL_PERIOD as u64);
                if seen.insert(key) {
                    next.push((to, Some(first)));
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    None
}

pub fn scripted_action(world: &WorldState) -> usize {
    let m0 = world.moves();
    let phase = m0 % PHASE_PERIOD;
    let bonus_open = world.bonus_armed && world.last_bonus_cycle != Some(m0 / PHASE_PERIOD);
    if bonus_open {
        if let Some((a, d)) = search(world, |c| c == HOME) {
            let arrival = phase + d;
            // leave early enough to arrive inside this cycle's dusk, waiting
            // at home for at most two steps
            if (DUSK_START - 2..PHASE_PERIOD).contains(&arrival) {
                return a;
            }
        }
    }
    if let Some((a, _)) = search(world, |c| world.pellets.contains(&c)) {
        return a;
    }
    (0..N_ACTIONS)
        .find(|&a| !collides(&world.hazards, m0, world.player, world.player.shifted(a)))
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::super::{episode_seed, PelletWorld, NOOP_MAX};
    use super::*;

    #[test]
    fn fixture_returns() {
        for (i, &expected) in ORACLE_FIXTURE_RETURNS.iter().enumerate() {
            let mut env = PelletWorld::new(episode_seed(ORACLE_FIXTURE_SEED, i as u64), NOOP_MAX);
            while !env.is_done() {
                env.step(scripted_action(env.world())).unwrap();
            }
            assert_eq!(env.stats().raw_return, expected, "episode {i}");
        }
    }

    #[test]
    fn oracle_never_collides_and_clears_the_board() {
        for seed in 0..6 {
            let mut env = PelletWorld::new(seed, NOOP_MAX);
            while !env.is_done() {
                env.step(scripted_action(env.world())).unwrap();
            }
            let s = env.stats();
            assert_eq!(s.events.collisions, 0, "seed {seed}");
            assert!(env.world().pellets.is_empty(), "seed {seed}");
            assert!(s.events.bonuses >= 1, "seed {seed}");
        }
    }
}
