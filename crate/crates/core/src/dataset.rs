//! Offline trajectory datasets: generation for the navigate and stitch
//! regimes, the versioned text file format, and a flat cell-id index used by
//! all learners.
//!
//! File format (`CFHRL-DS v1`):
//!
//! ```text
//! CFHRL-DS v1 <maze_id> <regime> <seed> <n_traj>
//! T <len>
//! <row> <col> <action>      (len lines; action id 0..4, final line -1)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::env::{Action, CellId, GridPos, MazeWorld, Regime};
use crate::error::{Error, Result};
use crate::rng;

const HEADER_MAGIC: &str = "CFHRL-DS";
const HEADER_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<GridPos>,
    /// `actions[t]` moves `states[t]` to `states[t + 1]`.
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_transitions(&self) -> usize {
        self.actions.len()
    }

    /// Checks free-space membership and consistency with the dynamics.
    pub fn validate(&self, world: &MazeWorld) -> Result<()> {
        if self.states.is_empty() || self.actions.len() + 1 != self.states.len() {
            return Err(Error::Precondition("trajectory needs len(actions) == len(states) - 1".into()));
        }
        for &s in &self.states {
            world.cell_id_or_err(s)?;
        }
        for (t, &a) in self.actions.iter().enumerate() {
            let next = world.step(self.states[t], a);
            if next != self.states[t + 1] {
                return Err(Error::Precondition(format!(
                    "step {t}: {:?} from {} gives {}, trajectory has {}",
                    a,
                    self.states[t],
                    next,
                    self.states[t + 1]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OfflineDataset {
    pub maze_id: String,
    pub regime: Regime,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

/// Parameters of the data-collection behaviour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    pub regime: Regime,
    pub n_trajectories: usize,
    pub stitch_segment_len: usize,
    /// Per-step probability of a uniformly random action (navigate).
    pub noise: f64,
}

impl GenConfig {
    pub fn new(regime: Regime, n_trajectories: usize) -> Self {
        Self { regime, n_trajectories, stitch_segment_len: 20, noise: 0.2 }
    }
}

/// Generates a dataset reproducible from `(maze, regime, seed, n)`.
///
/// Navigate: epsilon-noisy shortest paths between random start/goal pairs,
/// ending when the goal is reached (or after four diameters of steps).
/// Stitch: non-backtracking random walks of exactly `stitch_segment_len`
/// transitions from random starts; reversal only happens at dead ends.
pub fn generate_dataset(world: &MazeWorld, cfg: &GenConfig, seed: u64) -> Result<OfflineDataset> {
    if cfg.n_trajectories == 0 {
        return Err(Error::Precondition("n_trajectories must be >= 1".into()));
    }
    if world.n_cells() < 2 {
        return Err(Error::Precondition("dataset generation needs at least two free cells".into()));
    }
    let mut rng = rng::stream(seed, &format!("dataset/{}/{}", world.id(), cfg.regime));
    let mut trajectories = Vec::with_capacity(cfg.n_trajectories);
    for _ in 0..cfg.n_trajectories {
        let traj = match cfg.regime {
            Regime::Navigate => navigate_trajectory(world, cfg.noise, &mut rng),
            Regime::Stitch => stitch_trajectory(world, cfg.stitch_segment_len, &mut rng),
        };
        trajectories.push(traj);
    }
    Ok(OfflineDataset { maze_id: world.id().to_string(), regime: cfg.regime, seed, trajectories })
}

fn navigate_trajectory<R: Rng>(world: &MazeWorld, noise: f64, rng: &mut R) -> Trajectory {
    let n = world.n_cells() as u32;
    let (start, goal) = loop {
        let a = CellId(rng.random_range(0..n));
        let b = CellId(rng.random_range(0..n));
        if a != b && world.distance(a, b).is_some() {
            break (a, b);
        }
    };
    let cap = world.max_episode_steps();
    let mut states = vec![world.pos(start)];
    let mut actions = Vec::new();
    let mut s = start;
    let mut best = Vec::with_capacity(4);
    while s != goal && actions.len() < cap {
        let a = if rng.random_bool(noise) {
            Action::ALL[rng.random_range(0..Action::ALL.len())]
        } else {
            let d = world.distance_raw(s, goal);
            best.clear();
            best.extend(Action::MOVES.into_iter().filter(|&a| world.distance_raw(world.step_id(s, a), goal) < d));
            *best.choose(rng).expect("reachable goal has an improving move")
        };
        s = world.step_id(s, a);
        actions.push(a);
        states.push(world.pos(s));
    }
    Trajectory { states, actions }
}

fn stitch_trajectory<R: Rng>(world: &MazeWorld, len: usize, rng: &mut R) -> Trajectory {
    let mut s = CellId(rng.random_range(0..world.n_cells() as u32));
    let mut states = vec![world.pos(s)];
    let mut actions = Vec::with_capacity(len);
    let mut prev: Option<Action> = None;
    let mut options = Vec::with_capacity(4);
    for _ in 0..len {
        options.clear();
        options.extend(world.open_moves(s).filter(|&a| Some(a.reverse()) != prev));
        if options.is_empty() {
            options.extend(world.open_moves(s));
        }
        let Some(&a) = options.choose(rng) else { break };
        s = world.step_id(s, a);
        prev = Some(a);
        actions.push(a);
        states.push(world.pos(s));
    }
    Trajectory { states, actions }
}

impl OfflineDataset {
    pub fn n_states(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::n_transitions).sum()
    }

    pub fn validate(&self, world: &MazeWorld) -> Result<()> {
        if world.id() != self.maze_id {
            return Err(Error::Precondition(format!(
                "dataset is for maze `{}`, world is `{}`",
                self.maze_id,
                world.id()
            )));
        }
        self.trajectories.iter().try_for_each(|t| t.validate(world))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(16 * self.n_states() + 64);
        writeln!(
            out,
            "{HEADER_MAGIC} {HEADER_VERSION} {} {} {} {}",
            self.maze_id,
            self.regime,
            self.seed,
            self.trajectories.len()
        )
        .unwrap();
        for traj in &self.trajectories {
            writeln!(out, "T {}", traj.len()).unwrap();
            for (t, s) in traj.states.iter().enumerate() {
                match traj.actions.get(t) {
                    Some(a) => writeln!(out, "{} {} {}", s.row, s.col, a.id()).unwrap(),
                    None => writeln!(out, "{} {} -1", s.row, s.col).unwrap(),
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (ln, header) = lines.next().ok_or_else(|| Error::format(1, "empty dataset file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != HEADER_MAGIC {
            return Err(Error::format(ln, "expected `CFHRL-DS v1 <maze_id> <regime> <seed> <n_traj>`"));
        }
        if fields[1] != HEADER_VERSION {
            return Err(Error::format(ln, format!("unsupported dataset version `{}`", fields[1])));
        }
        let maze_id = fields[2].to_string();
        let regime: Regime = fields[3].parse().map_err(|e: Error| Error::format(ln, e.to_string()))?;
        let seed: u64 = parse_num(fields[4], ln)?;
        let n_traj: usize = parse_num(fields[5], ln)?;
        let mut trajectories = Vec::with_capacity(n_traj);
        for _ in 0..n_traj {
            let (ln, line) = lines.next().ok_or_else(|| Error::format(0, "truncated dataset: missing trajectory"))?;
            let len: usize = match line.split_whitespace().collect::<Vec<_>>()[..] {
                ["T", len] => parse_num(len, ln)?,
                _ => return Err(Error::format(ln, "expected `T <len>`")),
            };
            if len == 0 {
                return Err(Error::format(ln, "trajectory length must be >= 1"));
            }
            let mut states = Vec::with_capacity(len);
            let mut actions = Vec::with_capacity(len - 1);
            for t in 0..len {
                let (ln, line) = lines.next().ok_or_else(|| Error::format(0, "truncated trajectory"))?;
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(Error::format(ln, "expected `<row> <col> <action>`"));
                }
                states.push(GridPos::new(parse_num(f[0], ln)?, parse_num(f[1], ln)?));
                let a: i32 = parse_num(f[2], ln)?;
                if t + 1 == len {
                    if a != -1 {
                        return Err(Error::format(ln, "final state must carry action -1"));
                    }
                } else {
                    let a = u8::try_from(a).ok().and_then(Action::from_id);
                    actions.push(a.ok_or_else(|| Error::format(ln, "action id must be in 0..=4"))?);
                }
            }
            trajectories.push(Trajectory { states, actions });
        }
        if let Some((ln, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::format(ln, format!("trailing content `{extra}`")));
        }
        Ok(Self { maze_id, regime, seed, trajectories })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::format(line, format!("bad number `{s}`")))
}

/// A dataset flattened into cell ids for fast sampling.
#[derive(Clone, Debug)]
pub struct IndexedDataset {
    /// All state occurrences, trajectories laid end to end.
    pub cells: Vec<CellId>,
    /// `actions[i]` leaves `cells[i]`; undefined (Stay) at trajectory ends.
    pub actions: Vec<Action>,
    /// Trajectory of each occurrence.
    pub traj_of: Vec<u32>,
    /// Inclusive `(first, last)` flat bounds of each trajectory.
    pub bounds: Vec<(u32, u32)>,
    /// Flat indices that have a successor.
    pub transitions: Vec<u32>,
    /// Sorted distinct cells present in the data.
    pub codebook: Vec<CellId>,
}

impl IndexedDataset {
    pub fn new(world: &MazeWorld, data: &OfflineDataset) -> Result<Self> {
        data.validate(world)?;
        Self::from_trajectories(world, data.trajectories.iter())
    }

    pub fn from_trajectories<'a>(world: &MazeWorld, trajs: impl Iterator<Item = &'a Trajectory>) -> Result<Self> {
        let mut idx = IndexedDataset {
            cells: Vec::new(),
            actions: Vec::new(),
            traj_of: Vec::new(),
            bounds: Vec::new(),
            transitions: Vec::new(),
            codebook: Vec::new(),
        };
        for traj in trajs {
            if traj.is_empty() {
                continue;
            }
            let first = idx.cells.len() as u32;
            let tid = idx.bounds.len() as u32;
            for (t, &s) in traj.states.iter().enumerate() {
                let flat = idx.cells.len() as u32;
                idx.cells.push(world.cell_id_or_err(s)?);
                idx.traj_of.push(tid);
                match traj.actions.get(t) {
                    Some(&a) => {
                        idx.actions.push(a);
                        idx.transitions.push(flat);
                    }
                    None => idx.actions.push(Action::Stay),
                }
            }
            idx.bounds.push((first, idx.cells.len() as u32 - 1));
        }
        if idx.cells.is_empty() {
            return Err(Error::Precondition("dataset has no states".into()));
        }
        let mut seen = vec![false; world.n_cells()];
        for &c in &idx.cells {
            seen[c.index()] = true;
        }
        idx.codebook = world.cell_ids().filter(|c| seen[c.index()]).collect();
        Ok(idx)
    }

    /// Last flat index of the trajectory containing `flat`.
    #[inline]
    pub fn traj_last(&self, flat: u32) -> u32 {
        self.bounds[self.traj_of[flat as usize] as usize].1
    }

    #[inline]
    pub fn cell(&self, flat: u32) -> CellId {
        self.cells[flat as usize]
    }

    pub fn n_occurrences(&self) -> usize {
        self.cells.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stitch_segments_are_bounded() {
        let w = MazeWorld::named("medium").unwrap();
        let ds = generate_dataset(&w, &GenConfig::new(Regime::Stitch, 200), 3).unwrap();
        assert!(ds.trajectories.iter().all(|t| t.n_transitions() <= 20));
        ds.validate(&w).unwrap();
    }

    #[test]
    fn navigate_is_deterministic_given_seed() {
        let w = MazeWorld::named("small").unwrap();
        let cfg = GenConfig::new(Regime::Navigate, 50);
        let a = generate_dataset(&w, &cfg, 11).unwrap().to_text();
        let b = generate_dataset(&w, &cfg, 11).unwrap().to_text();
        let c = generate_dataset(&w, &cfg, 12).unwrap().to_text();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn navigate_trajectories_end_at_their_goal() {
        let w = MazeWorld::named("small").unwrap();
        let ds = generate_dataset(&w, &GenConfig::new(Regime::Navigate, 30), 0).unwrap();
        ds.validate(&w).unwrap();
        assert!(ds.trajectories.iter().all(|t| t.len() >= 2));
    }

    #[test]
    fn rejects_zero_trajectories_and_single_cell_worlds() {
        let w = MazeWorld::named("small").unwrap();
        assert!(generate_dataset(&w, &GenConfig::new(Regime::Navigate, 0), 0).is_err());
        let one = MazeWorld::from_ascii("one", "#.#").unwrap();
        assert!(generate_dataset(&one, &GenConfig::new(Regime::Stitch, 1), 0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let w = MazeWorld::named("small").unwrap();
        let ds = generate_dataset(&w, &GenConfig::new(Regime::Stitch, 7), 5).unwrap();
        let text = ds.to_text();
        assert!(text.starts_with("CFHRL-DS v1 small stitch 5 7\nT "));
        let back = OfflineDataset::from_text(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(OfflineDataset::from_text("").is_err());
        assert!(OfflineDataset::from_text("CFHRL-DS v2 small stitch 0 0").is_err());
        assert!(OfflineDataset::from_text("CFHRL-DS v1 small stitch 0 1\nT 2\n1 1 3\n1 2 3\n").is_err());
        assert!(OfflineDataset::from_text("CFHRL-DS v1 small stitch 0 1\nT 2\n1 1 3\n").is_err());
        assert!(OfflineDataset::from_text("CFHRL-DS v1 small stitch 0 0\nextra\n").is_err());
    }

    #[test]
    fn index_tracks_trajectory_bounds() {
        let w = MazeWorld::named("corridor6").unwrap();
        let t = |cols: &[u16], acts: &[Action]| Trajectory {
            states: cols.iter().map(|&c| GridPos::new(0, c)).collect(),
            actions: acts.to_vec(),
        };
        let a = t(&[0, 1, 2], &[Action::Right, Action::Right]);
        let b = t(&[5, 4], &[Action::Left]);
        let idx = IndexedDataset::from_trajectories(&w, [&a, &b].into_iter()).unwrap();
        assert_eq!(idx.bounds, vec![(0, 2), (3, 4)]);
        assert_eq!(idx.transitions, vec![0, 1, 3]);
        assert_eq!(idx.traj_last(1), 2);
        assert_eq!(idx.traj_last(3), 4);
        assert_eq!(idx.codebook, vec![CellId(0), CellId(1), CellId(2), CellId(4), CellId(5)]);
    }
}
