//! Single-room gridworld with GoToObj and PutNextLocal missions.
//!
//! The room is a square of `grid_size` cells whose border is wall; objects and
//! the agent live in the interior. The agent sees a 7x7 egocentric window with
//! itself in the middle of the bottom row, facing "up".

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::{self, Stream};

pub const DEFAULT_GRID_SIZE: i32 = 8;
pub const DEFAULT_MAX_STEPS: u32 = 64;
pub const VIEW_SIZE: usize = 7;
/// Number of objects placed in a PutNextLocal room.
pub const PUT_NEXT_OBJECTS: usize = 4;

/// Object-kind channel ids in the observation.
pub const KIND_EMPTY: u8 = 0;
pub const KIND_WALL: u8 = 1;
/// Number of distinct values per observation channel.
pub const CHANNEL_CARDINALITY: [usize; 3] = [5, 7, 2];
/// State channel value marking the object held by the agent (drawn on its own cell).
pub const STATE_CARRIED: u8 = 1;

/// Closed vocabulary of the instruction templates, sorted; token id = index.
pub const VOCAB: [&str; 14] = [
    "ball", "blue", "box", "go", "green", "grey", "key", "next", "purple", "put", "red", "the",
    "to", "yellow",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("step called on a finished episode (step_count={0})")]
    EpisodeDone(u32),
    #[error("unknown action id {0}")]
    BadAction(i64),
    #[error("unknown level {0:?}")]
    BadLevel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Level {
    #[serde(rename = "GoToObj", alias = "gotoobj")]
    GoToObj,
    #[serde(rename = "PutNextLocal", alias = "putnextlocal")]
    PutNextLocal,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::GoToObj => "GoToObj",
            Level::PutNextLocal => "PutNextLocal",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Level {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gotoobj" => Ok(Level::GoToObj),
            "putnextlocal" => Ok(Level::PutNextLocal),
            _ => Err(EnvError::BadLevel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjKind {
    Ball,
    Box,
    Key,
}

impl ObjKind {
    pub const ALL: [ObjKind; 3] = [ObjKind::Ball, ObjKind::Box, ObjKind::Key];

    pub fn word(self) -> &'static str {
        match self {
            ObjKind::Ball => "ball",
            ObjKind::Box => "box",
            ObjKind::Key => "key",
        }
    }

    pub fn view_id(self) -> u8 {
        match self {
            ObjKind::Ball => 2,
            ObjKind::Box => 3,
            ObjKind::Key => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Purple,
    Yellow,
    Grey,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Purple,
        Color::Yellow,
        Color::Grey,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Purple => "purple",
            Color::Yellow => "yellow",
            Color::Grey => "grey",
        }
    }

    pub fn view_id(self) -> u8 {
        self as u8 + 1
    }
}

/// Grid coordinate; `row` grows southwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub struct Pos {
    pub col: i32,
    pub row: i32,
}

impl Pos {
    pub const fn new(col: i32, row: i32) -> Self {
        Pos { col, row }
    }

    pub fn step(self, dir: Direction) -> Pos {
        self.offset(dir, 1)
    }

    pub fn offset(self, dir: Direction, n: i32) -> Pos {
        let (dc, dr) = dir.delta();
        Pos::new(self.col + dc * n, self.row + dr * n)
    }

    pub fn manhattan(self, other: Pos) -> i32 {
        (self.col - other.col).abs() + (self.row - other.row).abs()
    }

    pub fn neighbors(self) -> [Pos; 4] {
        Direction::ALL.map(|d| self.step(d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::North,
        Direction::East,
        Direction::South,
        Direction::West,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Direction {
        Self::ALL[i % 4]
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::North => (0, -1),
            Direction::East => (1, 0),
            Direction::South => (0, 1),
            Direction::West => (-1, 0),
        }
    }

    pub fn right(self) -> Direction {
        Self::from_index(self.index() + 1)
    }

    pub fn left(self) -> Direction {
        Self::from_index(self.index() + 3)
    }
}

/// The seven actions. Ids follow the convention 0 = turn right, 1 = turn left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    TurnRight = 0,
    TurnLeft = 1,
    Forward = 2,
    Pickup = 3,
    Drop = 4,
    Toggle = 5,
    Done = 6,
}

pub const NUM_ACTIONS: usize = 7;

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::TurnRight,
        Action::TurnLeft,
        Action::Forward,
        Action::Pickup,
        Action::Drop,
        Action::Toggle,
        Action::Done,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Action> {
        Self::ALL.get(id).copied()
    }
}

impl TryFrom<i64> for Action {
    type Error = EnvError;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        usize::try_from(v)
            .ok()
            .and_then(Action::from_id)
            .ok_or(EnvError::BadAction(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldObject {
    pub kind: ObjKind,
    pub color: Color,
    pub pos: Pos,
}

impl WorldObject {
    /// Number of features (color, kind) shared with `other`.
    pub fn shared_features(&self, other: &WorldObject) -> u8 {
        u8::from(self.kind == other.kind) + u8::from(self.color == other.color)
    }
}

/// Goal references are indices into [`MissionSpec::objects`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Goal {
    GoTo { target: usize },
    PutNext { mover: usize, anchor: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissionSpec {
    pub level: Level,
    pub grid_size: i32,
    pub objects: Vec<WorldObject>,
    pub goal: Goal,
    pub instruction: Vec<String>,
    pub seed: u64,
}

impl MissionSpec {
    pub fn in_interior(&self, p: Pos) -> bool {
        p.col >= 1 && p.row >= 1 && p.col < self.grid_size - 1 && p.row < self.grid_size - 1
    }

    /// Interior cells without an object, in row-major order.
    pub fn free_cells(&self) -> Vec<Pos> {
        let mut cells = Vec::new();
        for row in 1..self.grid_size - 1 {
            for col in 1..self.grid_size - 1 {
                let p = Pos::new(col, row);
                if !self.objects.iter().any(|o| o.pos == p) {
                    cells.push(p);
                }
            }
        }
        cells
    }

    pub fn instruction_tokens(&self) -> Vec<usize> {
        self.instruction
            .iter()
            .map(|w| token_id(w).expect("instruction words come from the template vocabulary"))
            .collect()
    }
}

pub fn token_id(word: &str) -> Option<usize> {
    VOCAB.binary_search(&word).ok()
}

fn render_instruction(level: Level, objects: &[WorldObject], goal: Goal) -> Vec<String> {
    let describe = |o: &WorldObject| [o.color.word(), o.kind.word()];
    let words: Vec<&str> = match (level, goal) {
        (Level::GoToObj, Goal::GoTo { target }) => {
            let mut w = vec!["go", "to", "the"];
            w.extend(describe(&objects[target]));
            w
        }
        (_, Goal::PutNext { mover, anchor }) => {
            let mut w = vec!["put", "the"];
            w.extend(describe(&objects[mover]));
            w.extend(["next", "to", "the"]);
            w.extend(describe(&objects[anchor]));
            w
        }
        (Level::PutNextLocal, Goal::GoTo { .. }) => unreachable!("PutNextLocal goals are PutNext"),
    };
    words.into_iter().map(str::to_string).collect()
}

/// Deterministic mission generator.
///
/// Placements are rejection-sampled until the free interior is 4-connected
/// and the goal is achievable.
pub fn generate_mission(level: Level, seed: u64) -> MissionSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid_size = DEFAULT_GRID_SIZE;
    let interior: Vec<Pos> = (1..grid_size - 1)
        .flat_map(|row| (1..grid_size - 1).map(move |col| Pos::new(col, row)))
        .collect();
    loop {
        let n_objects = match level {
            Level::GoToObj => 1,
            Level::PutNextLocal => PUT_NEXT_OBJECTS,
        };
        let mut identities = Vec::with_capacity(n_objects);
        while identities.len() < n_objects {
            let id = (
                ObjKind::ALL[rng.gen_range(0..3)],
                Color::ALL[rng.gen_range(0..6)],
            );
            if !identities.contains(&id) {
                identities.push(id);
            }
        }
        let cells: Vec<Pos> = interior.choose_multiple(&mut rng, n_objects).copied().collect();
        let objects: Vec<WorldObject> = identities
            .iter()
            .zip(&cells)
            .map(|(&(kind, color), &pos)| WorldObject { kind, color, pos })
            .collect();
        let goal = match level {
            Level::GoToObj => Goal::GoTo { target: 0 },
            Level::PutNextLocal => Goal::PutNext { mover: 0, anchor: 1 },
        };
        let spec = MissionSpec {
            level,
            grid_size,
            instruction: render_instruction(level, &objects, goal),
            objects,
            goal,
            seed,
        };
        if layout_is_valid(&spec) {
            return spec;
        }
    }
}

fn layout_is_valid(spec: &MissionSpec) -> bool {
    let free = spec.free_cells();
    if free.is_empty() || !is_connected(&free) {
        return false;
    }
    match spec.goal {
        Goal::GoTo { .. } => true,
        Goal::PutNext { mover, anchor } => {
            let m = spec.objects[mover].pos;
            let a = spec.objects[anchor].pos;
            if m.manhattan(a) == 1 || !m.neighbors().iter().any(|n| free.contains(n)) {
                return false;
            }
            // After pickup the mover's cell is free; some free cell next to the
            // anchor must be faceable from another free cell.
            let free_after = |p: Pos| p == m || free.contains(&p);
            a.neighbors().into_iter().any(|y| {
                free_after(y) && y.neighbors().into_iter().any(|x| x != a && free_after(x))
            })
        }
    }
}

fn is_connected(cells: &[Pos]) -> bool {
    let mut seen = vec![false; cells.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for n in cells[i].neighbors() {
            if let Some(j) = cells.iter().position(|&c| c == n) {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
    }
    count == cells.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Empty,
    Object(usize),
}

/// Full simulator state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub spec: Arc<MissionSpec>,
    /// Current object placements; the carried object's `pos` is stale.
    pub objects: Vec<WorldObject>,
    pub agent_pos: Pos,
    pub agent_dir: Direction,
    pub carrying: Option<usize>,
    pub step_count: u32,
    pub max_steps: u32,
    pub done: bool,
    pub success: bool,
}

/// Place the agent on a uniformly random free cell with a random heading,
/// seeded from `spec.seed`.
pub fn reset(spec: &MissionSpec) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, Stream::AgentReset, 0));
    reset_with_rng(spec, &mut rng)
}

pub fn reset_with_rng<R: Rng + ?Sized>(spec: &MissionSpec, rng: &mut R) -> EnvState {
    let free = spec.free_cells();
    let pos = free[rng.gen_range(0..free.len())];
    let dir = Direction::from_index(rng.gen_range(0..4));
    reset_at(spec, pos, dir)
}

pub fn reset_at(spec: &MissionSpec, pos: Pos, dir: Direction) -> EnvState {
    EnvState {
        spec: Arc::new(spec.clone()),
        objects: spec.objects.clone(),
        agent_pos: pos,
        agent_dir: dir,
        carrying: None,
        step_count: 0,
        max_steps: DEFAULT_MAX_STEPS,
        done: false,
        success: false,
    }
}

impl EnvState {
    pub fn cell(&self, p: Pos) -> Cell {
        if !self.spec.in_interior(p) {
            return Cell::Wall;
        }
        self.objects
            .iter()
            .enumerate()
            .find(|&(i, o)| o.pos == p && self.carrying != Some(i))
            .map_or(Cell::Empty, |(i, _)| Cell::Object(i))
    }

    pub fn front_pos(&self) -> Pos {
        self.agent_pos.step(self.agent_dir)
    }

    pub fn is_success(&self) -> bool {
        match self.spec.goal {
            Goal::GoTo { target } => self.cell(self.front_pos()) == Cell::Object(target),
            Goal::PutNext { mover, anchor } => {
                self.carrying != Some(mover)
                    && self.carrying != Some(anchor)
                    && self.objects[mover].pos.manhattan(self.objects[anchor].pos) == 1
            }
        }
    }

    pub fn step(&mut self, action: Action) -> Result<(), EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone(self.step_count));
        }
        let front = self.front_pos();
        match action {
            Action::TurnRight => self.agent_dir = self.agent_dir.right(),
            Action::TurnLeft => self.agent_dir = self.agent_dir.left(),
            Action::Forward => {
                if self.cell(front) == Cell::Empty {
                    self.agent_pos = front;
                }
            }
            Action::Pickup => {
                if let (None, Cell::Object(i)) = (self.carrying, self.cell(front)) {
                    self.carrying = Some(i);
                }
            }
            Action::Drop => {
                if let (Some(i), Cell::Empty) = (self.carrying, self.cell(front)) {
                    self.objects[i].pos = front;
                    self.carrying = None;
                }
            }
            Action::Toggle | Action::Done => {}
        }
        self.step_count += 1;
        self.success = self.is_success();
        self.done = self.success || self.step_count >= self.max_steps;
        Ok(())
    }

    /// World cell shown at view coordinate (`view_col`, `view_row`).
    pub fn view_to_world(&self, view_col: usize, view_row: usize) -> Pos {
        let forward = (VIEW_SIZE - 1 - view_row) as i32;
        let lateral = view_col as i32 - (VIEW_SIZE / 2) as i32;
        self.agent_pos
            .offset(self.agent_dir, forward)
            .offset(self.agent_dir.right(), lateral)
    }

    pub fn observe(&self) -> Observation {
        let mut grid = [[[0u8; 3]; VIEW_SIZE]; VIEW_SIZE];
        for (view_row, row) in grid.iter_mut().enumerate() {
            for (view_col, cell) in row.iter_mut().enumerate() {
                let p = self.view_to_world(view_col, view_row);
                *cell = match self.cell(p) {
                    Cell::Wall => [KIND_WALL, 0, 0],
                    Cell::Object(i) => {
                        let o = &self.objects[i];
                        [o.kind.view_id(), o.color.view_id(), 0]
                    }
                    Cell::Empty if p == self.agent_pos => match self.carrying {
                        Some(i) => {
                            let o = &self.objects[i];
                            [o.kind.view_id(), o.color.view_id(), STATE_CARRIED]
                        }
                        None => [KIND_EMPTY, 0, 0],
                    },
                    Cell::Empty => [KIND_EMPTY, 0, 0],
                };
            }
        }
        Observation {
            grid,
            instruction: self.spec.instruction_tokens(),
        }
    }

    /// Object whose features define the observation type: the GoTo target,
    /// or for PutNext the anchor while the mover is held and the mover otherwise.
    pub fn typing_goal(&self) -> WorldObject {
        match self.spec.goal {
            Goal::GoTo { target } => self.objects[target],
            Goal::PutNext { mover, anchor } => {
                if self.carrying == Some(mover) {
                    self.objects[anchor]
                } else {
                    self.objects[mover]
                }
            }
        }
    }
}

/// Egocentric 7x7x3 view plus tokenized instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    /// Indexed `[view_row][view_col][channel]`; the agent sits at row 6, col 3.
    pub grid: [[[u8; 3]; VIEW_SIZE]; VIEW_SIZE],
    pub instruction: Vec<usize>,
}

impl Observation {
    pub fn at(&self, view_col: usize, view_row: usize) -> [u8; 3] {
        self.grid[view_row][view_col]
    }
}

/// One replayable episode: observations are regenerated, never stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub level: Level,
    pub seed: u64,
    pub actions: Vec<u8>,
}

/// Replay `actions` from the reset state of the mission generated by `(level, seed)`.
pub fn replay(level: Level, seed: u64, actions: &[u8]) -> Result<Vec<EnvState>, EnvError> {
    let spec = generate_mission(level, seed);
    let mut state = reset(&spec);
    let mut states = vec![state.clone()];
    for &a in actions {
        let action = Action::try_from(i64::from(a))?;
        state.step(action)?;
        states.push(state.clone());
    }
    Ok(states)
}
