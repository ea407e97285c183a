//! Sparse weighted categoricals indexed by `(state, target)` anchor pairs.
//!
//! This is the tabular stand-in for every conditional actor in the system:
//! accumulating weight `w` on outcome `o` at anchor `(s, g)` is the exact
//! minimizer of the weighted log-loss `-sum w log pi(o | s, g)`.
//!
//! Queries at anchors never seen in training back off to the nearest seen
//! anchor under the key
//! `(max(ds, dg), ds, dg, s', g')`, where `ds = cheb(s, s')` and
//! `dg = cheb(g, g')` are Chebyshev distances on grid coordinates and the
//! last two components break ties by lexicographic `(row, col)` order.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use crate::env::{CellId, GridPos, MazeWorld};
use crate::error::{Error, Result};

const EMPTY: u32 = u32::MAX;

/// Accumulated outcome weights for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub s: CellId,
    pub g: CellId,
    /// `(outcome, weight)` sorted by outcome once the table is frozen.
    pub outcomes: Vec<(u32, f64)>,
}

impl Anchor {
    pub fn total(&self) -> f64 {
        self.outcomes.iter().map(|&(_, w)| w).sum()
    }

    /// Normalized distribution in outcome order.
    pub fn distribution(&self) -> Vec<(u32, f64)> {
        let z = self.total();
        self.outcomes.iter().map(|&(o, w)| (o, w / z)).collect()
    }

    pub fn probability(&self, outcome: u32) -> f64 {
        let w = self.outcomes.iter().find(|&&(o, _)| o == outcome).map_or(0.0, |&(_, w)| w);
        w / self.total()
    }

    /// Highest-weight outcome; ties go to the smallest outcome id.
    pub fn argmax(&self) -> u32 {
        let mut best = self.outcomes[0];
        for &(o, w) in &self.outcomes[1..] {
            if w > best.1 || (w == best.1 && o < best.0) {
                best = (o, w);
            }
        }
        best.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let mut u = rng.random::<f64>() * self.total();
        for &(o, w) in &self.outcomes {
            if u < w {
                return o;
            }
            u -= w;
        }
        self.outcomes.iter().rev().find(|&&(_, w)| w > 0.0).map_or(self.outcomes[0].0, |&(o, _)| o)
    }
}

/// Per-state Chebyshev distance transform over the goals seen with it.
#[derive(Debug)]
struct BackoffIndex {
    width: usize,
    height: usize,
    /// `cell_at[row * width + col]` is the free cell there or `EMPTY`.
    cell_at: Vec<u32>,
    pos: Vec<GridPos>,
    /// Offset into `nearest` for each state with anchors, else `EMPTY`.
    offset: Vec<u32>,
    /// `(chebyshev distance, goal cell)` to the nearest seen goal, per goal cell.
    nearest: Vec<(u16, u32)>,
    /// Memoized resolution: anchor slot + 1, or 0 when not yet computed.
    memo: Vec<AtomicU32>,
}

/// Table of anchors over an `n_cells x n_cells` pair space.
#[derive(Debug)]
pub struct AnchorTable {
    n: usize,
    slots: Vec<u32>,
    anchors: Vec<Anchor>,
    index: Option<BackoffIndex>,
}

impl Clone for BackoffIndex {
    fn clone(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            cell_at: self.cell_at.clone(),
            pos: self.pos.clone(),
            offset: self.offset.clone(),
            nearest: self.nearest.clone(),
            memo: self.memo.iter().map(|m| AtomicU32::new(m.load(Ordering::Relaxed))).collect(),
        }
    }
}

impl Clone for AnchorTable {
    fn clone(&self) -> Self {
        Self { n: self.n, slots: self.slots.clone(), anchors: self.anchors.clone(), index: self.index.clone() }
    }
}

impl PartialEq for AnchorTable {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.anchors == other.anchors
    }
}

impl AnchorTable {
    pub fn new(n_cells: usize) -> Self {
        Self { n: n_cells, slots: vec![EMPTY; n_cells * n_cells], anchors: Vec::new(), index: None }
    }

    pub fn n_cells(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    /// Adds weight `w` to `outcome` at anchor `(s, g)`.
    pub fn add(&mut self, s: CellId, g: CellId, outcome: u32, w: f64) {
        self.index = None;
        let key = s.index() * self.n + g.index();
        let slot = match self.slots[key] {
            EMPTY => {
                self.slots[key] = self.anchors.len() as u32;
                self.anchors.push(Anchor { s, g, outcomes: Vec::new() });
                self.anchors.len() - 1
            }
            i => i as usize,
        };
        let list = &mut self.anchors[slot].outcomes;
        match list.iter_mut().find(|(o, _)| *o == outcome) {
            Some(entry) => entry.1 += w,
            None => list.push((outcome, w)),
        }
    }

    /// Exact lookup, no backoff.
    pub fn get(&self, s: CellId, g: CellId) -> Option<&Anchor> {
        match self.slots[s.index() * self.n + g.index()] {
            EMPTY => None,
            i => Some(&self.anchors[i as usize]),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.index.is_some()
    }

    /// Sorts outcome lists, drops zero-mass anchors and builds the backoff
    /// index. Must be called before [`AnchorTable::resolve`].
    pub fn freeze(&mut self, world: &MazeWorld) -> Result<()> {
        if world.n_cells() != self.n {
            return Err(Error::Precondition(format!(
                "anchor table over {} cells used with a world of {}",
                self.n,
                world.n_cells()
            )));
        }
        let before = self.anchors.len();
        self.anchors.retain(|a| a.total() > 0.0);
        if self.anchors.len() != before {
            self.slots.fill(EMPTY);
            for (i, a) in self.anchors.iter().enumerate() {
                self.slots[a.s.index() * self.n + a.g.index()] = i as u32;
            }
        }
        for a in &mut self.anchors {
            a.outcomes.sort_by_key(|&(o, _)| o);
        }
        self.index = Some(self.build_index(world));
        Ok(())
    }

    fn build_index(&self, world: &MazeWorld) -> BackoffIndex {
        let (width, height) = (world.width(), world.height());
        let mut cell_at = vec![EMPTY; width * height];
        for (i, p) in world.cells().iter().enumerate() {
            cell_at[p.row as usize * width + p.col as usize] = i as u32;
        }
        let mut goals_of: Vec<Vec<u32>> = vec![Vec::new(); self.n];
        for a in &self.anchors {
            goals_of[a.s.index()].push(a.g.0);
        }
        let mut offset = vec![EMPTY; self.n];
        let mut nearest = Vec::new();
        let mut grid = vec![(u16::MAX, EMPTY); width * height];
        let mut queue = VecDeque::new();
        for (s, goals) in goals_of.iter_mut().enumerate() {
            if goals.is_empty() {
                continue;
            }
            goals.sort_unstable();
            chebyshev_transform(world.cells(), width, height, goals, &mut grid, &mut queue);
            offset[s] = nearest.len() as u32;
            nearest.extend(world.cells().iter().map(|p| grid[p.row as usize * width + p.col as usize]));
        }
        let memo = (0..self.n * self.n).map(|_| AtomicU32::new(0)).collect();
        BackoffIndex { width, height, cell_at, pos: world.cells().to_vec(), offset, nearest, memo }
    }

    /// The anchor itself if seen, else the nearest seen anchor. `None` only
    /// for an empty table.
    pub fn resolve(&self, s: CellId, g: CellId) -> Option<&Anchor> {
        if let Some(a) = self.get(s, g) {
            return Some(a);
        }
        if self.anchors.is_empty() {
            return None;
        }
        let index = self.index.as_ref().expect("anchor table must be frozen before backoff queries");
        let key = s.index() * self.n + g.index();
        let memo = index.memo[key].load(Ordering::Relaxed);
        if memo != 0 {
            return Some(&self.anchors[memo as usize - 1]);
        }
        let slot = self.backoff(index, s, g);
        index.memo[key].store(slot as u32 + 1, Ordering::Relaxed);
        Some(&self.anchors[slot])
    }

    fn backoff(&self, index: &BackoffIndex, s: CellId, g: CellId) -> usize {
        let sp = index.pos[s.index()];
        let (r0, c0) = (sp.row as i64, sp.col as i64);
        // (max, ds, dg, s', g')
        let mut best = (u32::MAX, u32::MAX, u32::MAX, u32::MAX, u32::MAX);
        let max_ring = index.width.max(index.height) as i64;
        for ring in 0..=max_ring {
            if ring as u32 > best.0 {
                break;
            }
            for (r, c) in ring_coords(r0, c0, ring) {
                if r < 0 || c < 0 || r >= index.height as i64 || c >= index.width as i64 {
                    continue;
                }
                let sc = index.cell_at[r as usize * index.width + c as usize];
                if sc == EMPTY || index.offset[sc as usize] == EMPTY {
                    continue;
                }
                let (dg, gc) = index.nearest[index.offset[sc as usize] as usize + g.index()];
                let ds = ring as u32;
                let cand = (ds.max(dg as u32), ds, dg as u32, sc, gc);
                if cand < best {
                    best = cand;
                }
            }
        }
        self.slots[best.3 as usize * self.n + best.4 as usize] as usize
    }

    /// Text dump: one `A <s> <g> <k> <o>:<w> ...` line per anchor.
    pub fn write_text(&self, out: &mut String) {
        let _ = writeln!(out, "anchors {}", self.anchors.len());
        for a in &self.anchors {
            let _ = write!(out, "A {} {} {}", a.s.0, a.g.0, a.outcomes.len());
            for &(o, w) in &a.outcomes {
                let _ = write!(out, " {o}:{w}");
            }
            out.push('\n');
        }
    }

    /// Parses the block written by [`AnchorTable::write_text`]; returns the
    /// table and the number of lines consumed.
    pub fn read_text(n_cells: usize, lines: &[&str], first_line: usize) -> Result<(Self, usize)> {
        let bad = |i: usize, m: &str| Error::format(first_line + i, m.to_string());
        let header = lines.first().ok_or_else(|| bad(0, "missing anchors header"))?;
        let count: usize = header
            .strip_prefix("anchors ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad(0, "expected `anchors <count>`"))?;
        let mut table = AnchorTable::new(n_cells);
        for i in 1..=count {
            let line = lines.get(i).ok_or_else(|| bad(i, "truncated anchor list"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some("A") {
                return Err(bad(i, "expected anchor line"));
            }
            let mut field = |what: &str| -> Result<u32> {
                parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad(i, &format!("bad {what}")))
            };
            let (s, g, k) = (field("state")?, field("target")?, field("count")? as usize);
            if s as usize >= n_cells || g as usize >= n_cells {
                return Err(bad(i, "cell index out of range"));
            }
            let rest: Vec<&str> = parts.collect();
            if rest.len() != k {
                return Err(bad(i, "outcome count mismatch"));
            }
            for item in rest {
                let (o, w) = item.split_once(':').ok_or_else(|| bad(i, "expected `outcome:weight`"))?;
                let o: u32 = o.parse().map_err(|_| bad(i, "bad outcome"))?;
                let w: f64 = w.parse().map_err(|_| bad(i, "bad weight"))?;
                table.add(CellId(s), CellId(g), o, w);
            }
        }
        Ok((table, count + 1))
    }
}

/// Multi-source Chebyshev distance transform over the full grid (walls
/// included), labelling each position with the smallest source id among its
/// nearest sources. Layered 8-neighbour BFS with min-label propagation is
/// exact here: every nearest source of a position at layer `L + 1` is also
/// a nearest source of some neighbour at layer `L`.
fn chebyshev_transform(
    cells: &[GridPos],
    width: usize,
    height: usize,
    sources: &[u32],
    grid: &mut [(u16, u32)],
    queue: &mut VecDeque<usize>,
) {
    grid.fill((u16::MAX, EMPTY));
    queue.clear();
    for &src in sources {
        let p = cells[src as usize];
        let i = p.row as usize * width + p.col as usize;
        if grid[i].1 > src {
            grid[i] = (0, src);
        }
        queue.push_back(i);
    }
    // FIFO order finishes layer L before any pop from layer L + 1, so a
    // label is final by the time its position is expanded.
    while let Some(i) = queue.pop_front() {
        let (d, label) = grid[i];
        let (r, c) = ((i / width) as i64, (i % width) as i64);
        for dr in -1..=1i64 {
            for dc in -1..=1i64 {
                let (nr, nc) = (r + dr, c + dc);
                if (dr == 0 && dc == 0) || nr < 0 || nc < 0 || nr >= height as i64 || nc >= width as i64 {
                    continue;
                }
                let j = nr as usize * width + nc as usize;
                let cur = grid[j];
                if cur.0 == u16::MAX {
                    grid[j] = (d + 1, label);
                    queue.push_back(j);
                } else if cur.0 == d + 1 && label < cur.1 {
                    grid[j].1 = label;
                }
            }
        }
    }
}

/// Grid coordinates at Chebyshev distance exactly `ring` from `(r0, c0)`.
fn ring_coords(r0: i64, c0: i64, ring: i64) -> impl Iterator<Item = (i64, i64)> {
    let side: Box<dyn Iterator<Item = (i64, i64)>> = if ring == 0 {
        Box::new(std::iter::once((r0, c0)))
    } else {
        let top = (c0 - ring..=c0 + ring).map(move |c| (r0 - ring, c));
        let bottom = (c0 - ring..=c0 + ring).map(move |c| (r0 + ring, c));
        let left = (r0 - ring + 1..r0 + ring).map(move |r| (r, c0 - ring));
        let right = (r0 - ring + 1..r0 + ring).map(move |r| (r, c0 + ring));
        Box::new(top.chain(bottom).chain(left).chain(right))
    };
    side
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn open(n: usize) -> MazeWorld {
        MazeWorld::named(&format!("open{n}")).unwrap()
    }

    fn brute_backoff(world: &MazeWorld, table: &AnchorTable, s: CellId, g: CellId) -> (CellId, CellId) {
        let (sp, gp) = (world.pos(s), world.pos(g));
        let a = table
            .anchors()
            .iter()
            .min_by_key(|a| {
                let ds = sp.chebyshev(world.pos(a.s));
                let dg = gp.chebyshev(world.pos(a.g));
                (ds.max(dg), ds, dg, a.s, a.g)
            })
            .unwrap();
        (a.s, a.g)
    }

    #[test]
    fn single_observation_normalizes() {
        let w = open(3);
        let mut t = AnchorTable::new(w.n_cells());
        t.add(CellId(0), CellId(8), 4, 0.9);
        t.add(CellId(0), CellId(8), 2, 0.1);
        t.freeze(&w).unwrap();
        let a = t.resolve(CellId(0), CellId(8)).unwrap();
        assert_eq!(a.distribution(), vec![(2, 0.1), (4, 0.9)]);
        assert_eq!(a.argmax(), 4);
    }

    #[test]
    fn repeated_observation_leaves_distribution_unchanged() {
        let w = open(3);
        let mut once = AnchorTable::new(w.n_cells());
        let mut twice = AnchorTable::new(w.n_cells());
        for table in [&mut once, &mut twice] {
            table.add(CellId(1), CellId(2), 0, 0.25);
            table.add(CellId(1), CellId(2), 3, 0.75);
        }
        twice.add(CellId(1), CellId(2), 0, 0.25);
        twice.add(CellId(1), CellId(2), 3, 0.75);
        let d1 = once.get(CellId(1), CellId(2)).unwrap().distribution();
        let d2 = twice.get(CellId(1), CellId(2)).unwrap().distribution();
        for ((o1, p1), (o2, p2)) in d1.iter().zip(&d2) {
            assert_eq!(o1, o2);
            assert!((p1 - p2).abs() < 1e-15);
        }
    }

    #[test]
    fn clones_stay_frozen() {
        let w = open(3);
        let mut t = AnchorTable::new(w.n_cells());
        t.add(CellId(0), CellId(8), 1, 1.0);
        t.freeze(&w).unwrap();
        let _ = t.resolve(CellId(1), CellId(7));
        let c = t.clone();
        assert!(c.is_frozen());
        for s in w.cell_ids() {
            for g in w.cell_ids() {
                assert_eq!(c.resolve(s, g).map(|a| (a.s, a.g)), t.resolve(s, g).map(|a| (a.s, a.g)));
            }
        }
    }

    #[test]
    fn argmax_ties_pick_smallest_outcome() {
        let a = Anchor { s: CellId(0), g: CellId(0), outcomes: vec![(7, 0.5), (3, 0.5), (9, 0.1)] };
        assert_eq!(a.argmax(), 3);
    }

    #[test]
    fn one_hot_sampling_is_deterministic() {
        let a = Anchor { s: CellId(0), g: CellId(0), outcomes: vec![(5, 2.0)] };
        let mut rng = crate::rng::stream(0, "t");
        for _ in 0..50 {
            assert_eq!(a.sample(&mut rng), 5);
        }
    }

    #[test]
    fn sampling_follows_weights() {
        let a = Anchor { s: CellId(0), g: CellId(0), outcomes: vec![(0, 1.0), (1, 3.0)] };
        let mut rng = crate::rng::stream(1, "t");
        let ones = (0..20_000).filter(|_| a.sample(&mut rng) == 1).count();
        assert!((ones as f64 / 20_000.0 - 0.75).abs() < 0.015);
    }

    #[test]
    fn unseen_query_backs_off_to_adjacent_anchor() {
        let w = open(7);
        let id = |r, c| w.cell_id(GridPos::new(r, c)).unwrap();
        let mut t = AnchorTable::new(w.n_cells());
        t.add(id(3, 3), id(0, 0), 1, 1.0);
        t.add(id(6, 6), id(6, 0), 2, 1.0);
        t.freeze(&w).unwrap();
        let a = t.resolve(id(3, 4), id(0, 0)).unwrap();
        assert_eq!((a.s, a.g), (id(3, 3), id(0, 0)));
        let a = t.resolve(id(5, 6), id(6, 1)).unwrap();
        assert_eq!((a.s, a.g), (id(6, 6), id(6, 0)));
    }

    #[test]
    fn backoff_prefers_same_state_on_equal_joint_distance() {
        let w = open(5);
        let id = |r, c| w.cell_id(GridPos::new(r, c)).unwrap();
        let mut t = AnchorTable::new(w.n_cells());
        // Both at joint distance 1 from the query ((2,2), (0,0)).
        t.add(id(2, 3), id(0, 0), 0, 1.0);
        t.add(id(2, 2), id(0, 1), 0, 1.0);
        t.freeze(&w).unwrap();
        let a = t.resolve(id(2, 2), id(0, 0)).unwrap();
        assert_eq!((a.s, a.g), (id(2, 2), id(0, 1)));
    }

    #[test]
    fn backoff_breaks_full_ties_lexicographically() {
        let w = open(5);
        let id = |r, c| w.cell_id(GridPos::new(r, c)).unwrap();
        let mut t = AnchorTable::new(w.n_cells());
        t.add(id(2, 2), id(4, 3), 0, 1.0);
        t.add(id(2, 2), id(4, 1), 0, 1.0);
        t.freeze(&w).unwrap();
        let a = t.resolve(id(2, 2), id(4, 2)).unwrap();
        assert_eq!(a.g, id(4, 1));
    }

    #[test]
    fn zero_mass_anchors_are_dropped() {
        let w = open(3);
        let mut t = AnchorTable::new(w.n_cells());
        t.add(CellId(0), CellId(1), 0, 0.0);
        t.add(CellId(2), CellId(1), 0, 1.0);
        t.freeze(&w).unwrap();
        assert_eq!(t.n_anchors(), 1);
        assert_eq!(t.resolve(CellId(0), CellId(1)).unwrap().s, CellId(2));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let w = open(4);
        let mut t = AnchorTable::new(w.n_cells());
        t.add(CellId(3), CellId(9), 2, 0.1 + 0.2);
        t.add(CellId(3), CellId(9), 0, 1.0 / 3.0);
        t.add(CellId(15), CellId(0), 4, 7.5e-12);
        let mut text = String::new();
        t.write_text(&mut text);
        let lines: Vec<&str> = text.lines().collect();
        let (back, used) = AnchorTable::read_text(w.n_cells(), &lines, 1).unwrap();
        assert_eq!(used, lines.len());
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn backoff_matches_brute_force(
            anchors in proptest::collection::vec((0u32..49, 0u32..49), 1..12),
            queries in proptest::collection::vec((0u32..49, 0u32..49), 1..20),
        ) {
            let w = open(7);
            let mut t = AnchorTable::new(w.n_cells());
            for &(s, g) in &anchors {
                t.add(CellId(s), CellId(g), 0, 1.0);
            }
            t.freeze(&w).unwrap();
            for &(s, g) in &queries {
                let a = t.resolve(CellId(s), CellId(g)).unwrap();
                prop_assert_eq!((a.s, a.g), brute_backoff(&w, &t, CellId(s), CellId(g)));
            }
        }

        #[test]
        fn distributions_normalize(ws in proptest::collection::vec((0u32..6, 0.001f64..10.0), 1..20)) {
            let w = open(2);
            let mut t = AnchorTable::new(w.n_cells());
            for &(o, x) in &ws {
                t.add(CellId(0), CellId(3), o, x);
            }
            let total: f64 = t.get(CellId(0), CellId(3)).unwrap().distribution().iter().map(|p| p.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
