//! Goal-conditioned expectile value learning over hindsight-relabeled
//! transitions, and the reachability cost derived from it.
//!
//! Values are exact per-(state, goal) tables. The TD target follows the
//! goal-reaching convention `r_g(s) + gamma * V_target(s', g)` with
//! `r_g(s) = 0` iff `s == g` (absorbing) and the bootstrap dropped when
//! `s' == g`, so a goal `d` steps away has fixed point
//! `-(1 - gamma^d) / (1 - gamma)` under optimal data.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{IndexedDataset, Trajectory};
use crate::env::{CellId, GridPos, MazeWorld};
use crate::error::{Error, Result};
use crate::rng;

/// Asymmetric squared loss `|tau - 1{u<0}| * u^2`.
#[inline]
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

/// Derivative of [`expectile_loss`] with respect to the residual `u`.
#[inline]
pub fn expectile_grad(u: f64, tau: f64) -> f64 {
    2.0 * expectile_weight(u, tau) * u
}

#[inline]
fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// Relabeling mixture over (current, future, random) goals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalMix {
    pub current: f64,
    pub future: f64,
    pub random: f64,
}

impl GoalMix {
    pub fn new(current: f64, future: f64, random: f64) -> Result<Self> {
        let mix = Self { current, future, random };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.current, self.future, self.random];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("goal mixture {parts:?} must be probabilities summing to 1")));
        }
        Ok(())
    }
}

impl Default for GoalMix {
    fn default() -> Self {
        Self { current: 0.2, future: 0.5, random: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GoalSource {
    Current,
    Future,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueConfig {
    pub tau: f64,
    pub gamma: f64,
    pub lr: f64,
    pub polyak: f64,
    pub mix: GoalMix,
    /// Number of batches.
    pub n_updates: usize,
    pub batch_size: usize,
    pub ensemble_size: usize,
    /// Initial entry for every off-diagonal pair.
    pub init_value: f64,
    /// Fraction of trajectories each ensemble member trains on (size 2 only).
    pub bootstrap_frac: f64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            gamma: 0.995,
            lr: 0.5,
            polyak: 0.005,
            mix: GoalMix::default(),
            n_updates: 200_000,
            batch_size: 256,
            ensemble_size: 2,
            init_value: 0.0,
            bootstrap_frac: 0.8,
        }
    }
}

impl ValueConfig {
    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.polyak) {
            return bad("lr must be > 0 and polyak in [0, 1]");
        }
        if !(1..=2).contains(&self.ensemble_size) {
            return bad("ensemble_size must be 1 or 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.bootstrap_frac > 0.0 && self.bootstrap_frac <= 1.0) {
            return bad("bootstrap_frac must lie in (0, 1]");
        }
        Ok(())
    }

    /// Discounted cost of reaching a goal `d` steps away along a shortest path.
    pub fn discounted_cost(&self, d: u32) -> f64 {
        discounted_cost(self.gamma, d)
    }
}

/// `(1 - gamma^d) / (1 - gamma)`.
pub fn discounted_cost(gamma: f64, d: u32) -> f64 {
    if gamma == 0.0 {
        return if d == 0 { 0.0 } else { 1.0 };
    }
    (1.0 - gamma.powi(d as i32)) / (1.0 - gamma)
}

enum Relabel {
    Current,
    Future(usize),
    Random,
}

/// Future offsets are `1 + Geometric(1 - gamma)`, clipped to the last index.
/// `ln_gamma` is `gamma.ln()` (or `-inf` for `gamma == 0`).
#[inline]
fn relabel<R: Rng>(t: usize, last: usize, mix: &GoalMix, ln_gamma: f64, rng: &mut R) -> Relabel {
    let u: f64 = rng.random();
    if u < mix.current {
        Relabel::Current
    } else if u < mix.current + mix.future {
        let x: f64 = 1.0 - rng.random::<f64>();
        let extra = (x.ln() / ln_gamma).floor();
        let offset = 1 + if extra.is_finite() { extra.min(last as f64) as usize } else { 0 };
        Relabel::Future((t + offset).min(last))
    } else {
        Relabel::Random
    }
}

/// Draws a relabeled goal for transition `t` of `traj`.
pub fn sample_relabeled_goal<R: Rng>(
    world: &MazeWorld,
    traj: &Trajectory,
    t: usize,
    mix: &GoalMix,
    gamma: f64,
    rng: &mut R,
) -> Result<(GridPos, GoalSource)> {
    if t + 1 >= traj.len() {
        return Err(Error::Precondition(format!("t = {t} has no successor in a trajectory of {} states", traj.len())));
    }
    Ok(match relabel(t, traj.len() - 1, mix, gamma.ln(), rng) {
        Relabel::Current => (traj.states[t], GoalSource::Current),
        Relabel::Future(i) => (traj.states[i], GoalSource::Future),
        Relabel::Random => (world.cells()[rng.random_range(0..world.n_cells())], GoalSource::Random),
    })
}

/// One relabeled TD sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transition {
    pub s: CellId,
    pub s_next: CellId,
    pub g: CellId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    v: f64,
    target: f64,
    /// Polyak step count at which `target` was last materialized.
    sync: u32,
}

/// A single goal-conditioned value table with its Polyak target copy.
///
/// The target is updated lazily but exactly: an entry whose online value
/// has not changed for `k` Polyak steps has target
/// `v + (1 - polyak)^k * (target_then - v)`, so only touched entries are
/// ever written.
#[derive(Clone, Debug)]
pub struct ValueTable {
    n: usize,
    entries: Vec<Entry>,
    polyak_steps: u32,
    samples_seen: u64,
    decay: DecayPowers,
}

/// Cached powers `(1 - polyak)^k`; `powi` is far too slow for the inner loop.
#[derive(Clone, Debug, Default)]
struct DecayPowers {
    polyak: f64,
    pow: Vec<f64>,
}

const DECAY_CACHE: usize = 4096;

impl DecayPowers {
    fn for_polyak(polyak: f64) -> Self {
        let decay = 1.0 - polyak;
        let mut pow = Vec::with_capacity(DECAY_CACHE);
        let mut x = 1.0;
        for _ in 0..DECAY_CACHE {
            pow.push(x);
            x *= decay;
        }
        Self { polyak, pow }
    }

    #[inline]
    fn at(&self, k: u32) -> f64 {
        match self.pow.get(k as usize) {
            Some(&p) => p,
            None => (1.0 - self.polyak).powi(k as i32),
        }
    }
}

impl ValueTable {
    /// `v(s, s) = 0` and every other pair starts at `init`.
    pub fn new(n_cells: usize, init: f64) -> Self {
        let mut entries = vec![Entry { v: init, target: init, sync: 0 }; n_cells * n_cells];
        for i in 0..n_cells {
            entries[i * n_cells + i] = Entry { v: 0.0, target: 0.0, sync: 0 };
        }
        Self { n: n_cells, entries, polyak_steps: 0, samples_seen: 0, decay: DecayPowers::default() }
    }

    /// Table with every entry (diagonal included) at `v`.
    pub fn filled(n_cells: usize, v: f64) -> Self {
        Self {
            n: n_cells,
            entries: vec![Entry { v, target: v, sync: 0 }; n_cells * n_cells],
            polyak_steps: 0,
            samples_seen: 0,
            decay: DecayPowers::default(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.n
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    #[inline]
    fn idx(&self, s: CellId, g: CellId) -> usize {
        g.index() * self.n + s.index()
    }

    #[inline]
    pub fn value(&self, s: CellId, g: CellId) -> f64 {
        self.entries[self.idx(s, g)].v
    }

    pub fn set_value(&mut self, s: CellId, g: CellId, v: f64) {
        let i = self.idx(s, g);
        self.entries[i] = Entry { v, target: v, sync: self.polyak_steps };
    }

    #[inline]
    fn target_at(&self, i: usize) -> f64 {
        let e = &self.entries[i];
        let k = self.polyak_steps - e.sync;
        if k == 0 {
            e.target
        } else {
            e.v + self.decay.at(k) * (e.target - e.v)
        }
    }

    /// Current target-network value.
    pub fn target_value(&self, s: CellId, g: CellId, polyak: f64) -> f64 {
        let e = &self.entries[self.idx(s, g)];
        let k = self.polyak_steps - e.sync;
        e.v + (1.0 - polyak).powi(k as i32) * (e.target - e.v)
    }

    #[inline]
    fn td_target(&self, tr: Transition, gamma: f64) -> f64 {
        if tr.s == tr.g {
            0.0
        } else if tr.s_next == tr.g {
            -1.0
        } else {
            -1.0 + gamma * self.target_at(self.idx(tr.s_next, tr.g))
        }
    }

    /// One expectile gradient step on `v(s, g)`.
    #[inline]
    pub fn update_one(&mut self, tr: Transition, cfg: &ValueConfig) {
        if self.decay.polyak != cfg.polyak || self.decay.pow.is_empty() {
            self.decay = DecayPowers::for_polyak(cfg.polyak);
        }
        let target = self.td_target(tr, cfg.gamma);
        let i = self.idx(tr.s, tr.g);
        let materialized = self.target_at(i);
        let e = &mut self.entries[i];
        e.target = materialized;
        e.sync = self.polyak_steps;
        let u = target - e.v;
        e.v += cfg.lr * expectile_grad(u, cfg.tau);
        self.samples_seen += 1;
    }

    /// Applies a batch of per-sample steps, then one Polyak target update.
    pub fn update_batch(&mut self, batch: &[Transition], cfg: &ValueConfig) {
        for &tr in batch {
            self.update_one(tr, cfg);
        }
        self.polyak_step();
    }

    pub fn polyak_step(&mut self) {
        self.polyak_steps += 1;
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.v)
    }
}

/// Trained value ensemble with reachability readout.
#[derive(Clone, Debug)]
pub struct ValueModel {
    pub maze_id: String,
    pub config: ValueConfig,
    pub members: Vec<ValueTable>,
}

impl ValueModel {
    /// Single-member model with `v(s, g) = f(s, g)`, treated as trained.
    /// Used to inject oracle values.
    pub fn from_fn(world: &MazeWorld, config: ValueConfig, f: impl Fn(CellId, CellId) -> f64) -> Self {
        let n = world.n_cells();
        let mut t = ValueTable::filled(n, 0.0);
        for s in world.cell_ids() {
            for g in world.cell_ids() {
                t.set_value(s, g, f(s, g));
            }
        }
        t.samples_seen = 1;
        Self { maze_id: world.id().to_string(), config: ValueConfig { ensemble_size: 1, ..config }, members: vec![t] }
    }

    /// Exact discounted values `-(1 - gamma^d) / (1 - gamma)` from BFS.
    pub fn oracle(world: &MazeWorld, config: ValueConfig) -> Self {
        let far = -1.0 / (1.0 - config.gamma);
        Self::from_fn(world, config, |s, g| match world.distance(s, g) {
            Some(d) => -config.discounted_cost(d),
            None => far,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.members[0].n
    }

    pub fn is_trained(&self) -> bool {
        self.members.iter().all(|m| m.samples_seen > 0)
    }

    /// Conservative value: minimum over ensemble members.
    #[inline]
    pub fn conservative_value(&self, s: CellId, g: CellId) -> f64 {
        self.members.iter().map(|m| m.value(s, g)).fold(f64::INFINITY, f64::min)
    }

    /// Non-negative reachability cost `max(0, -min_m v_m(s, g))`.
    #[inline]
    pub fn reachability(&self, s: CellId, g: CellId) -> f64 {
        (-self.conservative_value(s, g)).max(0.0)
    }

    /// Designated single table for progress weights (member 0).
    #[inline]
    pub fn progress_value(&self, s: CellId, g: CellId) -> f64 {
        self.members[0].value(s, g)
    }

    pub fn to_text(&self) -> String {
        let n = self.n_cells();
        let c = &self.config;
        let mut out = String::with_capacity(self.members.len() * n * n * 12 + 256);
        writeln!(out, "CFHRL-VAL v1 {} {} {}", self.maze_id, n, self.members.len()).unwrap();
        writeln!(
            out,
            "config {} {} {} {} {} {} {} {} {} {} {} {}",
            c.tau,
            c.gamma,
            c.lr,
            c.polyak,
            c.mix.current,
            c.mix.future,
            c.mix.random,
            c.n_updates,
            c.batch_size,
            c.ensemble_size,
            c.init_value,
            c.bootstrap_frac
        )
        .unwrap();
        for (m, member) in self.members.iter().enumerate() {
            writeln!(out, "M {m} {}", member.samples_seen).unwrap();
            for g in 0..n {
                let row = &member.entries[g * n..(g + 1) * n];
                for (s, e) in row.iter().enumerate() {
                    if s > 0 {
                        out.push(' ');
                    }
                    write!(out, "{}", e.v).unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::format(0, format!("truncated value file: {what}")));
        let (ln, header) = next("header")?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 5 || h[0] != "CFHRL-VAL" || h[1] != "v1" {
            return Err(Error::format(ln, "expected `CFHRL-VAL v1 <maze_id> <n_cells> <n_members>`"));
        }
        let maze_id = h[2].to_string();
        let n: usize = num(h[3], ln)?;
        let n_members: usize = num(h[4], ln)?;
        let (ln, cfg_line) = next("config")?;
        let f: Vec<&str> = cfg_line.split_whitespace().collect();
        if f.len() != 13 || f[0] != "config" {
            return Err(Error::format(ln, "malformed config line"));
        }
        let config = ValueConfig {
            tau: num(f[1], ln)?,
            gamma: num(f[2], ln)?,
            lr: num(f[3], ln)?,
            polyak: num(f[4], ln)?,
            mix: GoalMix { current: num(f[5], ln)?, future: num(f[6], ln)?, random: num(f[7], ln)? },
            n_updates: num(f[8], ln)?,
            batch_size: num(f[9], ln)?,
            ensemble_size: num(f[10], ln)?,
            init_value: num(f[11], ln)?,
            bootstrap_frac: num(f[12], ln)?,
        };
        let mut members = Vec::with_capacity(n_members);
        for m in 0..n_members {
            let (ln, mline) = next("member header")?;
            let mh: Vec<&str> = mline.split_whitespace().collect();
            if mh.len() != 3 || mh[0] != "M" || num::<usize>(mh[1], ln)? != m {
                return Err(Error::format(ln, format!("expected `M {m} <samples>`")));
            }
            let mut table = ValueTable::filled(n, 0.0);
            table.samples_seen = num(mh[2], ln)?;
            for g in 0..n {
                let (ln, row) = next("value row")?;
                let mut count = 0;
                for (s, tok) in row.split_whitespace().enumerate() {
                    if s >= n {
                        return Err(Error::format(ln, "too many values in row"));
                    }
                    let v: f64 = num(tok, ln)?;
                    table.entries[g * n + s] = Entry { v, target: v, sync: 0 };
                    count += 1;
                }
                if count != n {
                    return Err(Error::format(ln, format!("expected {n} values, found {count}")));
                }
            }
            members.push(table);
        }
        Ok(Self { maze_id, config, members })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Exact equality of the frozen values.
    pub fn same_values(&self, other: &ValueModel) -> bool {
        self.members.len() == other.members.len()
            && self.members.iter().zip(&other.members).all(|(a, b)| a.n == b.n && a.values().eq(b.values()))
    }
}

fn num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::format(line, format!("bad number `{s}`")))
}

/// Trains a value ensemble. Each member of a two-member ensemble sees its
/// own random `bootstrap_frac` subset of trajectories.
pub fn train_value(world: &MazeWorld, data: &IndexedDataset, cfg: &ValueConfig, seed: u64) -> Result<ValueModel> {
    cfg.validate()?;
    let n = world.n_cells();
    let ln_gamma = cfg.gamma.ln();
    let mut members = Vec::with_capacity(cfg.ensemble_size);
    for m in 0..cfg.ensemble_size {
        let mut rng = rng::stream(seed, &format!("value/member{m}"));
        let transitions: Vec<u32> = if cfg.ensemble_size == 1 {
            data.transitions.clone()
        } else {
            let mut trajs: Vec<u32> = (0..data.bounds.len() as u32).collect();
            trajs.shuffle(&mut rng);
            let keep = ((trajs.len() as f64 * cfg.bootstrap_frac).ceil() as usize).clamp(1, trajs.len());
            let mut mask = vec![false; data.bounds.len()];
            for &t in &trajs[..keep] {
                mask[t as usize] = true;
            }
            data.transitions.iter().copied().filter(|&i| mask[data.traj_of[i as usize] as usize]).collect()
        };
        let mut table = ValueTable::new(n, cfg.init_value);
        if !transitions.is_empty() {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.n_updates {
                batch.clear();
                for _ in 0..cfg.batch_size {
                    let flat = transitions[fast_index(&mut rng, transitions.len())];
                    batch.push(relabeled_transition(data, flat, n, cfg, ln_gamma, &mut rng));
                }
                table.update_batch(&batch, cfg);
            }
        }
        members.push(table);
    }
    Ok(ValueModel { maze_id: world.id().to_string(), config: *cfg, members })
}

#[inline]
fn relabeled_transition<R: Rng>(
    data: &IndexedDataset,
    flat: u32,
    n_cells: usize,
    cfg: &ValueConfig,
    ln_gamma: f64,
    rng: &mut R,
) -> Transition {
    let (first, last) = data.bounds[data.traj_of[flat as usize] as usize];
    let t = (flat - first) as usize;
    let s = data.cells[flat as usize];
    let s_next = data.cells[flat as usize + 1];
    let g = match relabel(t, (last - first) as usize, &cfg.mix, ln_gamma, rng) {
        Relabel::Current => s,
        Relabel::Future(i) => data.cells[first as usize + i],
        Relabel::Random => CellId(fast_index(rng, n_cells) as u32),
    };
    Transition { s, s_next, g }
}

/// Multiply-shift index draw. The bias is below `len / 2^32`, irrelevant for
/// table sizes here, and it avoids the rejection loop in the hot path.
#[inline]
fn fast_index<R: Rng>(rng: &mut R, len: usize) -> usize {
    ((rng.next_u32() as u64 * len as u64) >> 32) as usize
}
