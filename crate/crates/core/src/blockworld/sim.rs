use rand::Rng;

use super::{Action, BoardState, Trajectory, Vec2, N_BLOCKS};

pub const CONTACT_RADIUS: f32 = 0.04;
/// Minimum net block displacement for a trajectory to count as useful.
pub const USEFUL_DISPLACEMENT: f32 = 0.05;

const EFFECTOR_RANGE: (f32, f32) = (0.3, 0.7);
const BLOCK_RANGE: (f32, f32) = (0.15, 0.85);
const MIN_SEPARATION: f32 = 0.1;

/// One simulator transition.
///
/// The effector moves by `delta` and is clipped to the unit square. Any
/// block whose center lies ahead of the effector and within the contact
/// radius of its line of motion is pushed along that line until it no
/// longer overlaps the effector disc. Blocks are never clipped and do not
/// collide with each other.
pub fn step(state: &BoardState, action: &Action) -> BoardState {
    let mut next = *state;
    next.effector = (state.effector + action.delta).clamp_unit_square();
    let motion = next.effector - state.effector;
    let len = motion.norm();
    if len == 0.0 {
        return next;
    }
    let u = motion * (1.0 / len);
    let r2 = CONTACT_RADIUS * CONTACT_RADIUS;
    for block in next.blocks.iter_mut() {
        let rel = *block - state.effector;
        let along = rel.dot(u);
        if along <= 0.0 {
            continue;
        }
        let perp = rel.dot(u.perp());
        if perp.abs() >= CONTACT_RADIUS {
            continue;
        }
        let clearance = (r2 - perp * perp).sqrt();
        let push = clearance - (along - len);
        if push > 0.0 {
            *block = *block + u * push;
        }
    }
    next
}

/// True iff some block moved at least [`USEFUL_DISPLACEMENT`] and every
/// block ends on the board.
pub fn is_useful(traj: &Trajectory) -> bool {
    let start = traj.start();
    let end = traj.end();
    let moved =
        (0..N_BLOCKS).any(|i| (end.blocks[i] - start.blocks[i]).norm() >= USEFUL_DISPLACEMENT);
    moved && end.blocks.iter().all(|b| b.in_unit_square())
}

/// Fresh board: effector near the middle, blocks spread over the interior
/// with a minimum spacing between all bodies.
pub fn sample_board<R: Rng>(rng: &mut R) -> BoardState {
    let effector = Vec2::new(
        rng.random_range(EFFECTOR_RANGE.0..EFFECTOR_RANGE.1),
        rng.random_range(EFFECTOR_RANGE.0..EFFECTOR_RANGE.1),
    );
    let mut blocks = [Vec2::default(); N_BLOCKS];
    let mut placed = 0;
    while placed < N_BLOCKS {
        let c = Vec2::new(
            rng.random_range(BLOCK_RANGE.0..BLOCK_RANGE.1),
            rng.random_range(BLOCK_RANGE.0..BLOCK_RANGE.1),
        );
        let clear = (c - effector).norm() >= MIN_SEPARATION
            && blocks[..placed]
                .iter()
                .all(|b| (*b - c).norm() >= MIN_SEPARATION);
        if clear {
            blocks[placed] = c;
            placed += 1;
        }
    }
    BoardState { effector, blocks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn board_with(effector: Vec2, block0: Vec2) -> BoardState {
        let mut blocks = [Vec2::new(0.05, 0.05); N_BLOCKS];
        for (i, b) in blocks.iter_mut().enumerate() {
            *b = Vec2::new(0.05 + 0.1 * i as f32, 0.95);
        }
        blocks[0] = block0;
        BoardState { effector, blocks }
    }

    #[test]
    fn free_motion_moves_only_the_effector() {
        let s = board_with(Vec2::new(0.5, 0.5), Vec2::new(0.1, 0.1));
        let n = step(
            &s,
            &Action {
                delta: Vec2::new(0.05, 0.0),
            },
        );
        assert!((n.effector.x - 0.55).abs() < 1e-6);
        assert_eq!(n.effector.y, 0.5);
        assert_eq!(n.blocks, s.blocks);
    }

    #[test]
    fn zero_action_is_identity() {
        let s = sample_board(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(step(&s, &Action::zero()), s);
    }

    #[test]
    fn contact_pushes_block_forward_by_at_most_the_motion() {
        let s = board_with(Vec2::new(0.46, 0.5), Vec2::new(0.5, 0.5));
        let n = step(
            &s,
            &Action {
                delta: Vec2::new(0.05, 0.0),
            },
        );
        let dx = n.blocks[0].x - s.blocks[0].x;
        assert!(dx > 0.0 && dx <= 0.05 + 1e-6, "dx = {dx}");
        assert_eq!(n.blocks[0].y, 0.5);
        assert!((n.blocks[0] - n.effector).norm() >= CONTACT_RADIUS - 1e-6);
    }

    #[test]
    fn effector_cannot_tunnel_through_a_block() {
        // Block sits mid-path, slightly off-axis.
        let s = board_with(Vec2::new(0.40, 0.5), Vec2::new(0.43, 0.51));
        let n = step(
            &s,
            &Action {
                delta: Vec2::new(0.05, 0.0),
            },
        );
        assert!(n.blocks[0].x > n.effector.x);
    }

    #[test]
    fn blocks_behind_the_motion_stay_put() {
        let s = board_with(Vec2::new(0.5, 0.5), Vec2::new(0.46, 0.5));
        let n = step(
            &s,
            &Action {
                delta: Vec2::new(0.05, 0.0),
            },
        );
        assert_eq!(n.blocks[0], s.blocks[0]);
    }

    #[test]
    fn effector_is_clipped_but_blocks_are_not() {
        let s = board_with(Vec2::new(0.97, 0.5), Vec2::new(0.99, 0.5));
        let n = step(
            &s,
            &Action {
                delta: Vec2::new(0.05, 0.0),
            },
        );
        assert_eq!(n.effector.x, 1.0);
        assert!(n.blocks[0].x > 1.0);
    }

    #[test]
    fn step_is_deterministic() {
        let s = sample_board(&mut ChaCha8Rng::seed_from_u64(9));
        let a = Action {
            delta: Vec2::new(0.03, -0.02),
        };
        assert_eq!(step(&s, &a), step(&s, &a));
    }

    fn rollout(start: BoardState, actions: &[Action]) -> Trajectory {
        let mut states = vec![start];
        for a in actions {
            let next = step(states.last().unwrap(), a);
            states.push(next);
        }
        Trajectory {
            states,
            actions: actions.to_vec(),
        }
    }

    #[test]
    fn all_zero_actions_are_not_useful() {
        let s = sample_board(&mut ChaCha8Rng::seed_from_u64(2));
        assert!(!is_useful(&rollout(s, &[Action::zero(); 10])));
    }

    #[test]
    fn pushing_a_block_off_the_board_is_not_useful() {
        let s = board_with(Vec2::new(0.83, 0.5), Vec2::new(0.88, 0.5));
        let t = rollout(
            s,
            &[Action {
                delta: Vec2::new(0.05, 0.0),
            }; 8],
        );
        assert!(t.end().blocks[0].x > 1.0);
        assert!(!is_useful(&t));
    }

    #[test]
    fn useful_push_within_the_board() {
        let s = board_with(Vec2::new(0.40, 0.5), Vec2::new(0.45, 0.5));
        let t = rollout(
            s,
            &[Action {
                delta: Vec2::new(0.05, 0.0),
            }; 3],
        );
        assert!(is_useful(&t));
    }

    #[test]
    fn sampled_boards_respect_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let b = sample_board(&mut rng);
            assert!(b.all_in_unit_square());
            for i in 0..N_BLOCKS {
                assert!((b.blocks[i] - b.effector).norm() >= MIN_SEPARATION);
                for j in 0..i {
                    assert!((b.blocks[i] - b.blocks[j]).norm() >= MIN_SEPARATION);
                }
            }
        }
    }
}
