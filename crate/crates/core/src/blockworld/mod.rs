//! Deterministic 2D block-pushing world, scripted demonstrations and the
//! caption templater that pairs each demonstration with a command.

mod demo;
mod language;
mod sim;

use std::ops::{Add, Mul, Sub};

use rand::seq::SliceRandom;
use rand::Rng;

pub use demo::{
    direction_is_dataset_valid, generate_pair, scripted_demo, DEMO_ATTEMPTS, PRE_CONTACT_GAP,
};
pub use language::{
    parse_caption, render_caption, tokenize, Vocab, BOS, CAPTION_LEN, EOS, PAD, UNK,
};
pub use sim::{is_useful, sample_board, step, CONTACT_RADIUS, USEFUL_DISPLACEMENT};

pub const N_BLOCKS: usize = 8;
pub const N_COLORS: usize = 4;
pub const N_SHAPES: usize = 6;
pub const N_DIRECTIONS: usize = 5;
/// Effector + 8 blocks, two coordinates each.
pub const STATE_DIM: usize = 2 + 2 * N_BLOCKS;
pub const ACTION_DIM: usize = 2;
pub const A_MAX: f32 = 0.05;
pub const T_MIN: usize = 8;
pub const T_MAX: usize = 24;
pub const JITTER: f32 = 0.005;

pub const COLOR_NAMES: [&str; N_COLORS] = ["red", "blue", "green", "yellow"];
pub const SHAPE_NAMES: [&str; N_SHAPES] = ["cube", "star", "moon", "pentagon", "heart", "circle"];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2 {
    pub x: f32,
    pub y: f32,
}

impl Vec2 {
    pub const fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f32 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f32 {
        self.dot(self).sqrt()
    }

    pub fn clamp_unit_square(self) -> Vec2 {
        Vec2::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }

    pub fn in_unit_square(self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f32> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f32) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

pub const BOARD_CENTER: Vec2 = Vec2::new(0.5, 0.5);

/// Positions of the effector and the eight blocks. Block attributes live in
/// the dataset-wide [`BlockSet`], indexed by slot.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoardState {
    pub effector: Vec2,
    pub blocks: [Vec2; N_BLOCKS],
}

impl BoardState {
    /// Flat state vector: effector then blocks, `(x, y)` each.
    pub fn to_vector(&self) -> [f32; STATE_DIM] {
        let mut v = [0.0; STATE_DIM];
        v[0] = self.effector.x;
        v[1] = self.effector.y;
        for (i, b) in self.blocks.iter().enumerate() {
            v[2 + 2 * i] = b.x;
            v[3 + 2 * i] = b.y;
        }
        v
    }

    pub fn from_vector(v: &[f32]) -> Self {
        assert_eq!(v.len(), STATE_DIM, "state vector length");
        let mut blocks = [Vec2::default(); N_BLOCKS];
        for (i, b) in blocks.iter_mut().enumerate() {
            *b = Vec2::new(v[2 + 2 * i], v[3 + 2 * i]);
        }
        Self {
            effector: Vec2::new(v[0], v[1]),
            blocks,
        }
    }

    pub fn all_in_unit_square(&self) -> bool {
        self.effector.in_unit_square() && self.blocks.iter().all(|b| b.in_unit_square())
    }
}

/// 2D delta setpoint for the effector.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Action {
    pub delta: Vec2,
}

impl Action {
    /// Componentwise clip to `[-A_MAX, A_MAX]`.
    pub fn clipped(delta: Vec2) -> Self {
        Self {
            delta: Vec2::new(delta.x.clamp(-A_MAX, A_MAX), delta.y.clamp(-A_MAX, A_MAX)),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_valid(&self) -> bool {
        self.delta.x.abs() <= A_MAX && self.delta.y.abs() <= A_MAX
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<BoardState>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn start(&self) -> &BoardState {
        &self.states[0]
    }

    pub fn end(&self) -> &BoardState {
        self.states
            .last()
            .expect("trajectory has at least one state")
    }

    /// Checks length bounds, action bounds and that every transition is the
    /// simulator's.
    pub fn validate(&self) -> Result<(), String> {
        let t = self.actions.len();
        if !(T_MIN..=T_MAX).contains(&t) {
            return Err(format!("length {t} outside [{T_MIN}, {T_MAX}]"));
        }
        if self.states.len() != t + 1 {
            return Err(format!("{} states for {t} actions", self.states.len()));
        }
        for (i, a) in self.actions.iter().enumerate() {
            if !a.is_valid() {
                return Err(format!("action {i} exceeds a_max: {a:?}"));
            }
            if step(&self.states[i], a) != self.states[i + 1] {
                return Err(format!("transition {i} is not the simulator's"));
            }
        }
        Ok(())
    }

    /// Net displacement of block `slot` between first and last state.
    pub fn block_displacement(&self, slot: usize) -> Vec2 {
        self.end().blocks[slot] - self.start().blocks[slot]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
    TowardCenter,
}

impl Direction {
    pub const ALL: [Direction; N_DIRECTIONS] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
        Direction::TowardCenter,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    /// Unit push direction for a block at `pos` (`y` grows upward).
    pub fn unit(self, pos: Vec2) -> Option<Vec2> {
        match self {
            Direction::Left => Some(Vec2::new(-1.0, 0.0)),
            Direction::Right => Some(Vec2::new(1.0, 0.0)),
            Direction::Up => Some(Vec2::new(0.0, 1.0)),
            Direction::Down => Some(Vec2::new(0.0, -1.0)),
            Direction::TowardCenter => {
                let d = BOARD_CENTER - pos;
                let n = d.norm();
                (n > 0.0).then(|| d * (1.0 / n))
            }
        }
    }

    /// Remaining room in the push direction: distance to the edge being
    /// pushed toward, or to the board center.
    pub fn room(self, pos: Vec2) -> f32 {
        match self {
            Direction::Left => pos.x,
            Direction::Right => 1.0 - pos.x,
            Direction::Up => 1.0 - pos.y,
            Direction::Down => pos.y,
            Direction::TowardCenter => (pos - BOARD_CENTER).norm(),
        }
    }
}

/// Synonym class of the command verb. Every surface verb the templater
/// produces belongs to the single pushing class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VerbClass {
    Push,
}

impl VerbClass {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        (id == 0).then_some(VerbClass::Push)
    }
}

/// Ground-truth slots of a caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CaptionFactors {
    pub verb: VerbClass,
    pub color: u8,
    pub shape: u8,
    pub direction: Direction,
}

impl CaptionFactors {
    pub fn new(color: u8, shape: u8, direction: Direction) -> Self {
        assert!((color as usize) < N_COLORS, "color id {color} out of range");
        assert!((shape as usize) < N_SHAPES, "shape id {shape} out of range");
        Self {
            verb: VerbClass::Push,
            color,
            shape,
            direction,
        }
    }

    /// `(color, shape, direction)` combination used for held-out splits.
    pub fn triple(&self) -> (u8, u8, Direction) {
        (self.color, self.shape, self.direction)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockAttr {
    pub color: u8,
    pub shape: u8,
}

/// The eight distinct `(color, shape)` blocks used throughout one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSet {
    pub attrs: [BlockAttr; N_BLOCKS],
}

impl BlockSet {
    pub fn new(attrs: [BlockAttr; N_BLOCKS]) -> Result<Self, String> {
        for (i, a) in attrs.iter().enumerate() {
            if a.color as usize >= N_COLORS || a.shape as usize >= N_SHAPES {
                return Err(format!("block {i} has out-of-range attributes {a:?}"));
            }
            if attrs[..i].contains(a) {
                return Err(format!("duplicate block attributes {a:?}"));
            }
        }
        Ok(Self { attrs })
    }

    /// Draws eight of the 24 combinations without replacement.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut all: Vec<BlockAttr> = (0..N_COLORS as u8)
            .flat_map(|c| (0..N_SHAPES as u8).map(move |s| BlockAttr { color: c, shape: s }))
            .collect();
        all.shuffle(rng);
        let mut attrs = [BlockAttr { color: 0, shape: 0 }; N_BLOCKS];
        attrs.copy_from_slice(&all[..N_BLOCKS]);
        Self { attrs }
    }

    pub fn slot_of(&self, color: u8, shape: u8) -> Option<usize> {
        self.attrs
            .iter()
            .position(|a| a.color == color && a.shape == shape)
    }

    pub fn factors(&self, slot: usize, direction: Direction) -> CaptionFactors {
        let a = self.attrs[slot];
        CaptionFactors::new(a.color, a.shape, direction)
    }

    /// Every `(slot, direction)` combination this block set can be commanded with.
    pub fn combinations(&self) -> Vec<(usize, Direction)> {
        (0..N_BLOCKS)
            .flat_map(|s| Direction::ALL.into_iter().map(move |d| (s, d)))
            .collect()
    }
}
