//! Deterministic gridworld mazes with sparse goal-reaching reward.
//!
//! A [`MazeWorld`] owns its wall layout, an ordering of the free cells
//! (row-major, so [`CellId`] order is lexicographic `(row, col)` order), and
//! an all-pairs BFS distance matrix that serves as the ground-truth oracle
//! for every learned quantity in the crate.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel stored in the distance matrix for unreachable pairs.
pub const UNREACHABLE: u32 = u32::MAX;

/// A grid coordinate. Derived ordering is lexicographic `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPos {
    pub row: u16,
    pub col: u16,
}

impl GridPos {
    pub const fn new(row: u16, col: u16) -> Self {
        Self { row, col }
    }

    /// Chebyshev (L-infinity) distance between coordinates, ignoring walls.
    pub fn chebyshev(self, other: GridPos) -> u32 {
        let dr = (self.row as i32 - other.row as i32).unsigned_abs();
        let dc = (self.col as i32 - other.col as i32).unsigned_abs();
        dr.max(dc)
    }
}

impl fmt::Display for GridPos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Index of a free cell inside its [`MazeWorld`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId(pub u32);

impl CellId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Primitive actions. Declaration order is the tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Action> {
        Self::ALL.get(id as usize).copied()
    }

    fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }

    pub fn reverse(self) -> Action {
        match self {
            Action::Up => Action::Down,
            Action::Down => Action::Up,
            Action::Left => Action::Right,
            Action::Right => Action::Left,
            Action::Stay => Action::Stay,
        }
    }
}

/// Sparse goal-reaching reward: 0 when `s_next` is the goal, -1 otherwise.
#[inline]
pub fn reward(s_next: GridPos, g: GridPos) -> f64 {
    if s_next == g {
        0.0
    } else {
        -1.0
    }
}

/// A rectangular maze with 4-connected moves plus `stay`.
#[derive(Clone, Debug)]
pub struct MazeWorld {
    id: String,
    width: usize,
    height: usize,
    walls: Vec<bool>,
    cells: Vec<GridPos>,
    cell_of: Vec<u32>,
    neighbors: Vec<[u32; 5]>,
    dist: Vec<u32>,
    diameter: u32,
}

impl MazeWorld {
    /// Builds a world from a wall mask (`true` = wall), row-major.
    pub fn from_walls(id: impl Into<String>, width: usize, height: usize, walls: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || walls.len() != width * height {
            return Err(Error::InvalidWorld(format!(
                "wall mask of length {} does not match {width}x{height}",
                walls.len()
            )));
        }
        if width > u16::MAX as usize || height > u16::MAX as usize {
            return Err(Error::InvalidWorld("grid too large".into()));
        }
        let mut cells = Vec::new();
        let mut cell_of = vec![u32::MAX; width * height];
        for r in 0..height {
            for c in 0..width {
                if !walls[r * width + c] {
                    cell_of[r * width + c] = cells.len() as u32;
                    cells.push(GridPos::new(r as u16, c as u16));
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::InvalidWorld("maze has no free cells".into()));
        }
        let mut world = Self {
            id: id.into(),
            width,
            height,
            walls,
            cells,
            cell_of,
            neighbors: Vec::new(),
            dist: Vec::new(),
            diameter: 0,
        };
        world.neighbors = (0..world.cells.len())
            .map(|i| {
                let mut next = [0u32; 5];
                for a in Action::ALL {
                    next[a as usize] = world.cell_id(world.step(world.cells[i], a)).unwrap().0;
                }
                next
            })
            .collect();
        world.compute_distances();
        Ok(world)
    }

    /// Parses an ASCII layout: `#` is a wall, anything else is free.
    pub fn from_ascii(id: impl Into<String>, layout: &str) -> Result<Self> {
        let rows: Vec<&str> = layout.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut walls = vec![true; width * height];
        for (r, line) in rows.iter().enumerate() {
            for (c, ch) in line.chars().enumerate() {
                walls[r * width + c] = ch == '#';
            }
        }
        Self::from_walls(id, width, height, walls)
    }

    /// Builds one of the named layouts: `small`, `medium`, `giant`,
    /// `corridor<N>` (1xN open row) or `open<N>` (NxN open room).
    pub fn named(id: &str) -> Result<Self> {
        match id {
            "small" => Self::recursive_division(id, 11, 11, 0x5EED_0011),
            "medium" => Self::recursive_division(id, 21, 21, 0x5EED_0021),
            "giant" => Self::recursive_division(id, 39, 39, 0x5EED_0039),
            _ => {
                if let Some(n) = id.strip_prefix("corridor").and_then(|n| n.parse::<usize>().ok()) {
                    if n > 0 {
                        return Self::from_walls(id, n, 1, vec![false; n]);
                    }
                }
                if let Some(n) = id.strip_prefix("open").and_then(|n| n.parse::<usize>().ok()) {
                    if n > 0 {
                        return Self::from_walls(id, n, n, vec![false; n * n]);
                    }
                }
                Err(Error::UnknownMaze(id.to_string()))
            }
        }
    }

    /// Seeded recursive-division maze on an odd-sized grid with a solid
    /// border. Rooms sit at odd coordinates; every dividing wall gets exactly
    /// one gap, so the result is a perfect (tree-structured) maze.
    pub fn recursive_division(id: &str, width: usize, height: usize, seed: u64) -> Result<Self> {
        if width < 3 || height < 3 || width.is_multiple_of(2) || height.is_multiple_of(2) {
            return Err(Error::InvalidWorld(format!("recursive division needs odd sizes >= 3, got {width}x{height}")));
        }
        let mut walls = vec![true; width * height];
        for r in 1..height - 1 {
            for c in 1..width - 1 {
                walls[r * width + c] = false;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // chambers as inclusive room-coordinate bounds (all odd)
        let mut stack = vec![(1usize, height - 2, 1usize, width - 2)];
        while let Some((r0, r1, c0, c1)) = stack.pop() {
            let rooms_h = (r1 - r0) / 2 + 1;
            let rooms_w = (c1 - c0) / 2 + 1;
            if rooms_h < 2 && rooms_w < 2 {
                continue;
            }
            let horizontal = if rooms_h == rooms_w { rng.random_bool(0.5) } else { rooms_h > rooms_w };
            if horizontal && rooms_h >= 2 {
                let wr = r0 + 1 + 2 * rng.random_range(0..rooms_h - 1);
                let gap = c0 + 2 * rng.random_range(0..rooms_w);
                for c in c0..=c1 {
                    if c != gap {
                        walls[wr * width + c] = true;
                    }
                }
                stack.push((r0, wr - 1, c0, c1));
                stack.push((wr + 1, r1, c0, c1));
            } else {
                let wc = c0 + 1 + 2 * rng.random_range(0..rooms_w - 1);
                let gap = r0 + 2 * rng.random_range(0..rooms_h);
                for r in r0..=r1 {
                    if r != gap {
                        walls[r * width + wc] = true;
                    }
                }
                stack.push((r0, r1, c0, wc - 1));
                stack.push((r0, r1, wc + 1, c1));
            }
        }
        Self::from_walls(id, width, height, walls)
    }

    fn compute_distances(&mut self) {
        let n = self.cells.len();
        let mut dist = vec![UNREACHABLE; n * n];
        let mut queue = VecDeque::new();
        for src in 0..n {
            let row = &mut dist[src * n..(src + 1) * n];
            row[src] = 0;
            queue.clear();
            queue.push_back(src);
            while let Some(u) = queue.pop_front() {
                let du = row[u];
                for &v in &self.neighbors[u][..4] {
                    let v = v as usize;
                    if row[v] == UNREACHABLE {
                        row[v] = du + 1;
                        queue.push_back(v);
                    }
                }
            }
        }
        self.diameter = dist.iter().copied().filter(|&d| d != UNREACHABLE).max().unwrap_or(0);
        self.dist = dist;
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_wall(&self, pos: GridPos) -> bool {
        let (r, c) = (pos.row as usize, pos.col as usize);
        r >= self.height || c >= self.width || self.walls[r * self.width + c]
    }

    pub fn is_free(&self, pos: GridPos) -> bool {
        !self.is_wall(pos)
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Free cells in lexicographic order; position `i` has `CellId(i)`.
    pub fn cells(&self) -> &[GridPos] {
        &self.cells
    }

    #[inline]
    pub fn pos(&self, id: CellId) -> GridPos {
        self.cells[id.index()]
    }

    pub fn cell_id(&self, pos: GridPos) -> Option<CellId> {
        if self.is_wall(pos) {
            return None;
        }
        Some(CellId(self.cell_of[pos.row as usize * self.width + pos.col as usize]))
    }

    pub fn cell_id_or_err(&self, pos: GridPos) -> Result<CellId> {
        self.cell_id(pos).ok_or(Error::NotFree(pos))
    }

    /// Deterministic transition. Moves into walls or off the grid are no-ops.
    pub fn step(&self, s: GridPos, a: Action) -> GridPos {
        let (dr, dc) = a.delta();
        let r = s.row as i32 + dr;
        let c = s.col as i32 + dc;
        if r < 0 || c < 0 {
            return s;
        }
        let next = GridPos::new(r as u16, c as u16);
        if self.is_wall(next) {
            s
        } else {
            next
        }
    }

    /// Transition on cell ids (table lookup).
    #[inline]
    pub fn step_id(&self, s: CellId, a: Action) -> CellId {
        CellId(self.neighbors[s.index()][a as usize])
    }

    /// Moves that actually change the state from `s`.
    pub fn open_moves(&self, s: CellId) -> impl Iterator<Item = Action> + '_ {
        Action::MOVES.into_iter().filter(move |&a| self.step_id(s, a) != s)
    }

    /// Shortest-path step count, or `None` when unreachable.
    pub fn true_distance(&self, s: GridPos, g: GridPos) -> Option<u32> {
        let (s, g) = (self.cell_id(s)?, self.cell_id(g)?);
        self.distance(s, g)
    }

    #[inline]
    pub fn distance(&self, s: CellId, g: CellId) -> Option<u32> {
        let d = self.dist[s.index() * self.cells.len() + g.index()];
        (d != UNREACHABLE).then_some(d)
    }

    /// Raw distance with [`UNREACHABLE`] sentinel; used in hot loops.
    #[inline]
    pub fn distance_raw(&self, s: CellId, g: CellId) -> u32 {
        self.dist[s.index() * self.cells.len() + g.index()]
    }

    /// Longest finite shortest path in the maze.
    pub fn diameter(&self) -> u32 {
        self.diameter
    }

    /// Evaluation horizon: four times the diameter.
    pub fn max_episode_steps(&self) -> usize {
        (4 * self.diameter as usize).max(1)
    }

    pub fn cell_ids(&self) -> impl Iterator<Item = CellId> {
        (0..self.cells.len() as u32).map(CellId)
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(if self.walls[r * self.width + c] { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

/// Data regime label carried by datasets and configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Navigate,
    Stitch,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Navigate => "navigate",
            Regime::Stitch => "stitch",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "navigate" => Ok(Regime::Navigate),
            "stitch" => Ok(Regime::Stitch),
            other => Err(Error::Parse(format!("unknown regime `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unobstructed_move() {
        let w = MazeWorld::named("open5").unwrap();
        assert_eq!(w.step(GridPos::new(2, 2), Action::Up), GridPos::new(1, 2));
        assert_eq!(w.step(GridPos::new(2, 2), Action::Right), GridPos::new(2, 3));
    }

    #[test]
    fn blocked_move_and_stay_are_noops() {
        let w = MazeWorld::from_ascii("t", "...\n.#.\n...").unwrap();
        let s = GridPos::new(0, 1);
        assert_eq!(w.step(s, Action::Down), s);
        assert_eq!(w.step(s, Action::Up), s);
        assert_eq!(w.step(s, Action::Stay), s);
        assert_eq!(w.step(GridPos::new(2, 2), Action::Right), GridPos::new(2, 2));
    }

    #[test]
    fn reward_is_sparse() {
        assert_eq!(reward(GridPos::new(3, 3), GridPos::new(3, 3)), 0.0);
        assert_eq!(reward(GridPos::new(3, 3), GridPos::new(3, 4)), -1.0);
    }

    #[test]
    fn corridor_distance() {
        let w = MazeWorld::named("corridor5").unwrap();
        assert_eq!(w.true_distance(GridPos::new(0, 0), GridPos::new(0, 4)), Some(4));
        assert_eq!(w.true_distance(GridPos::new(0, 2), GridPos::new(0, 2)), Some(0));
    }

    #[test]
    fn detour_distance_matches_hand_count() {
        let w = MazeWorld::from_ascii("detour", ".#.\n.#.\n...").unwrap();
        // (0,0) down twice, right twice, up twice
        assert_eq!(w.true_distance(GridPos::new(0, 0), GridPos::new(0, 2)), Some(6));
    }

    #[test]
    fn unreachable_pair_is_none() {
        let w = MazeWorld::from_ascii("split", ".#.").unwrap();
        assert_eq!(w.true_distance(GridPos::new(0, 0), GridPos::new(0, 2)), None);
    }

    #[test]
    fn no_free_cells_rejected() {
        assert!(MazeWorld::from_ascii("walls", "###\n###").is_err());
    }

    #[test]
    fn suite_mazes_are_connected_perfect_mazes() {
        for (id, size) in [("small", 11), ("medium", 21), ("giant", 39)] {
            let w = MazeWorld::named(id).unwrap();
            assert_eq!((w.width(), w.height()), (size, size));
            let rooms = ((size - 1) / 2) * ((size - 1) / 2);
            // a spanning tree over the rooms: one passage cell per edge
            assert_eq!(w.n_cells(), 2 * rooms - 1, "{id}");
            for a in w.cell_ids() {
                for b in w.cell_ids() {
                    assert!(w.distance(a, b).is_some());
                }
            }
        }
    }

    #[test]
    fn named_layouts_are_reproducible() {
        let a = MazeWorld::named("medium").unwrap();
        let b = MazeWorld::named("medium").unwrap();
        assert_eq!(a.render(), b.render());
    }

    #[test]
    fn cell_ids_follow_lexicographic_order() {
        let w = MazeWorld::named("small").unwrap();
        assert!(w.cells().windows(2).all(|p| p[0] < p[1]));
    }
}
