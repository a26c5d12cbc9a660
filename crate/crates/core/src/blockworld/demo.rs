use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sim::{sample_board, step, CONTACT_RADIUS, USEFUL_DISPLACEMENT};
use super::{
    Action, BlockSet, BoardState, CaptionFactors, Direction, Trajectory, Vec2, A_MAX, JITTER,
    N_BLOCKS, T_MAX, T_MIN,
};
use crate::error::{ClaspError, Result};

pub const DEMO_ATTEMPTS: usize = 10;
/// Distance kept between effector disc and block when lining up a push.
pub const PRE_CONTACT_GAP: f32 = 0.02;

const MIN_ROOM: f32 = 0.1;
const EDGE_GOAL_ROOM: f32 = 0.12;
const CENTER_GOAL_ROOM: f32 = 0.05;
const GOAL_MARGIN: f32 = 0.06;
const ARRIVAL_TOLERANCE: f32 = 0.012;
const DETOUR_CLEARANCE: f32 = 0.05;
const MAX_HOLD_STEPS: usize = 3;

const DATASET_EDGE_ROOM: f32 = 0.2;
const DATASET_CENTER_ROOM: f32 = 0.13;
const DATASET_BOARD_TRIES: usize = 10_000;

/// Room left in the push direction at which the scripted push stops.
///
/// Pushes end at a fixed band near the edge (or around the center) so the
/// stopping point is a function of the current state alone.
fn goal_room(direction: Direction, room0: f32) -> f32 {
    let standard = match direction {
        Direction::TowardCenter => CENTER_GOAL_ROOM,
        _ => EDGE_GOAL_ROOM,
    };
    standard.min(room0 - GOAL_MARGIN)
}

/// Whether the dataset generator accepts `direction` for a block at `pos`.
/// Stricter than the demo precondition so every recorded push ends in the
/// standard goal band.
pub fn direction_is_dataset_valid(direction: Direction, pos: Vec2) -> bool {
    let need = match direction {
        Direction::TowardCenter => DATASET_CENTER_ROOM,
        _ => DATASET_EDGE_ROOM,
    };
    direction.room(pos) >= need
}

fn jitter<R: Rng>(rng: &mut R) -> Vec2 {
    Vec2::new(
        rng.random_range(-JITTER..=JITTER),
        rng.random_range(-JITTER..=JITTER),
    )
}

/// Distance from `p` to the segment `a..b`.
fn segment_distance(a: Vec2, b: Vec2, p: Vec2) -> f32 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    (a + ab * t - p).norm()
}

struct Recorder {
    states: Vec<BoardState>,
    actions: Vec<Action>,
}

impl Recorder {
    fn current(&self) -> &BoardState {
        self.states.last().expect("recorder starts with a state")
    }

    fn apply(&mut self, action: Action) -> BoardState {
        let next = step(self.current(), &action);
        self.actions.push(action);
        self.states.push(next);
        next
    }
}

/// Scripted push of block `target` in `direction`.
///
/// The effector lines up behind the block (detouring around it when it
/// starts on the wrong side), pushes until the block reaches the goal band
/// for the direction, then holds for a random number of jitter-only steps.
/// Per-step jitter is drawn from `rng_seed`, so identical factors give
/// distinct trajectories.
pub fn scripted_demo(
    board: &BoardState,
    blocks: &BlockSet,
    target: usize,
    direction: Direction,
    rng_seed: u64,
) -> Result<(Trajectory, CaptionFactors)> {
    if target >= N_BLOCKS {
        return Err(ClaspError::InvalidInput(format!("no block slot {target}")));
    }
    let c0 = board.blocks[target];
    let room0 = direction.room(c0);
    if room0 < MIN_ROOM {
        return Err(ClaspError::DemoRejected(format!(
            "block {target} has only {room0:.3} room toward {direction:?}"
        )));
    }
    let u = direction
        .unit(c0)
        .ok_or_else(|| ClaspError::DemoRejected("block sits on the center".into()))?;
    let goal = goal_room(direction, room0);

    let mut last = String::new();
    for attempt in 0..DEMO_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(attempt as u64);
        match attempt_demo(board, target, direction, u, goal, &mut rng) {
            Ok(traj) => return Ok((traj, blocks.factors(target, direction))),
            Err(e) => last = e,
        }
    }
    Err(ClaspError::DemoRejected(format!(
        "{DEMO_ATTEMPTS} attempts failed, last: {last}"
    )))
}

fn attempt_demo<R: Rng>(
    board: &BoardState,
    target: usize,
    direction: Direction,
    u: Vec2,
    goal: f32,
    rng: &mut R,
) -> std::result::Result<Trajectory, String> {
    let mut rec = Recorder {
        states: vec![*board],
        actions: Vec::new(),
    };
    let c = board.blocks[target];
    let pre = c - u * (CONTACT_RADIUS + PRE_CONTACT_GAP);
    let mut waypoints = Vec::with_capacity(2);
    let e = board.effector;
    if segment_distance(e, pre, c) < CONTACT_RADIUS + 0.015 {
        let n = u.perp();
        let side = if (e - c).dot(n) >= 0.0 { 1.0 } else { -1.0 };
        waypoints.push(c + n * (side * (CONTACT_RADIUS + DETOUR_CLEARANCE)));
    }
    waypoints.push(pre);

    for wp in waypoints {
        while (rec.current().effector - wp).norm() > ARRIVAL_TOLERANCE {
            if rec.actions.len() >= T_MAX {
                return Err("approach exceeds the horizon".into());
            }
            let mut d = wp - rec.current().effector;
            let m = d.x.abs().max(d.y.abs());
            if m > A_MAX {
                d = d * (A_MAX / m);
            }
            let before = rec.current().blocks;
            let next = rec.apply(Action::clipped(d + jitter(rng)));
            if next.blocks != before {
                return Err("approach path is blocked".into());
            }
        }
    }

    let max_advance = A_MAX / u.x.abs().max(u.y.abs());
    while direction.room(rec.current().blocks[target]) > goal {
        if rec.actions.len() >= T_MAX {
            return Err("push exceeds the horizon".into());
        }
        let cur = *rec.current();
        let rel = cur.blocks[target] - cur.effector;
        let perp = rel.dot(u.perp());
        let clearance = (CONTACT_RADIUS * CONTACT_RADIUS - perp * perp)
            .max(0.0)
            .sqrt();
        let gap = rel.dot(u) - clearance;
        let remaining = direction.room(cur.blocks[target]) - goal;
        let advance = (gap + remaining + 0.004).clamp(0.0, max_advance);
        let next = rec.apply(Action::clipped(u * advance + jitter(rng)));
        let others_moved = (0..N_BLOCKS).any(|i| i != target && next.blocks[i] != cur.blocks[i]);
        if others_moved {
            return Err("push disturbed another block".into());
        }
    }

    let hold = rng.random_range(1..=MAX_HOLD_STEPS);
    let total = (rec.actions.len() + hold).clamp(T_MIN, T_MAX);
    while rec.actions.len() < total {
        rec.apply(Action::clipped(jitter(rng)));
    }

    let traj = Trajectory {
        states: rec.states,
        actions: rec.actions,
    };
    let moved = traj.block_displacement(target).dot(u);
    if moved < USEFUL_DISPLACEMENT {
        return Err(format!("target moved only {moved:.3}"));
    }
    if !traj.end().blocks.iter().all(|b| b.in_unit_square()) {
        return Err("a block left the board".into());
    }
    traj.validate()?;
    Ok(traj)
}

/// Draws one demonstration for dataset generation: a uniformly chosen
/// `(block, direction)` combination on a fresh board that admits it.
pub fn generate_pair<R: Rng>(
    blocks: &BlockSet,
    rng: &mut R,
) -> Result<(Trajectory, CaptionFactors)> {
    let slot = rng.random_range(0..N_BLOCKS);
    let direction = Direction::ALL[rng.random_range(0..Direction::ALL.len())];
    for _ in 0..DATASET_BOARD_TRIES {
        let board = sample_board(rng);
        if !direction_is_dataset_valid(direction, board.blocks[slot]) {
            continue;
        }
        let seed = rng.random();
        match scripted_demo(&board, blocks, slot, direction, seed) {
            Ok(pair) => return Ok(pair),
            Err(ClaspError::DemoRejected(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(ClaspError::DemoRejected(format!(
        "no admissible board for block {slot} {direction:?}"
    )))
}
