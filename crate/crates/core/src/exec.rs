//! Command (abstraction) policy `pi_z` and low-level policy `pi_a`, both
//! trained by progress-weighted imitation over fixed-horizon segments.
//!
//! With the identity goal representation the command for segment
//! `(s_t, ..., s_{t+h})` is the raw local goal `z_t = s_{t+h}`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::AnchorTable;
use crate::dataset::IndexedDataset;
use crate::env::{Action, CellId, MazeWorld};
use crate::error::{Error, Result};
use crate::planner::Readout;
use crate::value::ValueModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecConfig {
    /// Local horizon `h`.
    pub h: usize,
    pub alpha: f64,
    pub omega_max: f64,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self { h: 10, alpha: 10.0, omega_max: 100.0 }
    }
}

impl ExecConfig {
    /// Default local horizon for a maze: 25 on giant, 10 elsewhere.
    pub fn default_horizon(maze_id: &str) -> usize {
        if maze_id == "giant" {
            25
        } else {
            10
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::Config("local horizon h must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) || !(self.omega_max > 0.0) {
            return Err(Error::Config("alpha must be >= 0 and omega_max > 0".into()));
        }
        Ok(())
    }
}

/// `min(exp(alpha * delta_v), omega_max)`.
#[inline]
pub fn progress_weight_from_delta(delta_v: f64, alpha: f64, omega_max: f64) -> f64 {
    (alpha * delta_v).exp().min(omega_max)
}

/// Progress weight of moving `s -> s_next` toward `local_goal`, using the
/// designated single value table.
pub fn progress_weight(
    value: &ValueModel,
    s: CellId,
    s_next: CellId,
    local_goal: CellId,
    alpha: f64,
    omega_max: f64,
) -> f64 {
    let dv = value.progress_value(s_next, local_goal) - value.progress_value(s, local_goal);
    progress_weight_from_delta(dv, alpha, omega_max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecPolicies {
    pub maze_id: String,
    pub config: ExecConfig,
    /// `(s, refined target) -> command cell`.
    pub pi_z: AnchorTable,
    /// `(s, command) -> action id`.
    pub pi_a: AnchorTable,
}

/// One exhaustive pass over every transition; `t + h` is clipped to the
/// trajectory end. The same `omega_t` weights both losses.
pub fn train_exec(world: &MazeWorld, data: &IndexedDataset, value: &ValueModel, cfg: &ExecConfig) -> Result<ExecPolicies> {
    cfg.validate()?;
    if value.n_cells() != world.n_cells() {
        return Err(Error::Precondition("value model does not match the world".into()));
    }
    let mut pi_z = AnchorTable::new(world.n_cells());
    let mut pi_a = AnchorTable::new(world.n_cells());
    if value.is_trained() {
        for &flat in &data.transitions {
            let last = data.traj_last(flat);
            let (s, s_next) = (data.cell(flat), data.cell(flat + 1));
            let z = data.cell((flat + cfg.h as u32).min(last));
            let w = progress_weight(value, s, s_next, z, cfg.alpha, cfg.omega_max);
            pi_z.add(s, z, z.0, w);
            pi_a.add(s, z, data.actions[flat as usize].id() as u32, w);
        }
    }
    pi_z.freeze(world)?;
    pi_a.freeze(world)?;
    Ok(ExecPolicies { maze_id: world.id().to_string(), config: *cfg, pi_z, pi_a })
}

impl ExecPolicies {
    pub fn is_trained(&self) -> bool {
        !self.pi_z.is_empty() && !self.pi_a.is_empty()
    }

    /// `z ~ pi_z(. | s, target)`.
    pub fn command<R: Rng + ?Sized>(&self, s: CellId, target: CellId, mode: Readout, rng: &mut R) -> Result<CellId> {
        let a = self.pi_z.resolve(s, target).ok_or(Error::Untrained("abstraction policy"))?;
        Ok(CellId(read(a, mode, rng)))
    }

    /// `a ~ pi_a(. | s, z)`.
    pub fn action<R: Rng + ?Sized>(&self, s: CellId, z: CellId, mode: Readout, rng: &mut R) -> Result<Action> {
        let a = self.pi_a.resolve(s, z).ok_or(Error::Untrained("low-level policy"))?;
        let id = read(a, mode, rng);
        Action::from_id(id as u8).ok_or_else(|| Error::Precondition(format!("action id {id} out of range")))
    }

    /// Two-stage readout: command, then action.
    pub fn act<R: Rng + ?Sized>(&self, s: CellId, target: CellId, mode: Readout, rng: &mut R) -> Result<(CellId, Action)> {
        let z = self.command(s, target, mode, rng)?;
        Ok((z, self.action(s, z, mode, rng)?))
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out =
            format!("CFHRL-EXE v1 {} {}\nconfig {} {} {}\n", self.maze_id, self.pi_z.n_cells(), c.h, c.alpha, c.omega_max);
        out.push_str("pi_z\n");
        self.pi_z.write_text(&mut out);
        out.push_str("pi_a\n");
        self.pi_a.write_text(&mut out);
        out
    }

    pub fn from_text(text: &str, world: &MazeWorld) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let header: Vec<&str> = lines.first().map(|l| l.split_whitespace().collect()).unwrap_or_default();
        if header.len() != 4 || header[0] != "CFHRL-EXE" || header[1] != "v1" {
            return Err(Error::format(1, "expected `CFHRL-EXE v1 <maze_id> <n_cells>`"));
        }
        let n: usize = header[3].parse().map_err(|_| Error::format(1, "bad cell count"))?;
        if header[2] != world.id() || n != world.n_cells() {
            return Err(Error::format(1, format!("checkpoint is for maze `{}` with {n} cells", header[2])));
        }
        let cfg: Vec<&str> = lines.get(1).map(|l| l.split_whitespace().collect()).unwrap_or_default();
        if cfg.len() != 4 || cfg[0] != "config" {
            return Err(Error::format(2, "expected exec config line"));
        }
        let num = |i: usize| cfg[i].parse::<f64>().map_err(|_| Error::format(2, "bad config number"));
        let config = ExecConfig { h: num(1)? as usize, alpha: num(2)?, omega_max: num(3)? };
        if lines.get(2) != Some(&"pi_z") {
            return Err(Error::format(3, "expected `pi_z`"));
        }
        let (mut pi_z, used) = AnchorTable::read_text(n, &lines[3..], 4)?;
        let at = 3 + used;
        if lines.get(at) != Some(&"pi_a") {
            return Err(Error::format(at + 1, "expected `pi_a`"));
        }
        let (mut pi_a, _) = AnchorTable::read_text(n, &lines[at + 1..], at + 2)?;
        pi_z.freeze(world)?;
        pi_a.freeze(world)?;
        Ok(Self { maze_id: world.id().to_string(), config, pi_z, pi_a })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, world: &MazeWorld) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, world)
    }
}

fn read<R: Rng + ?Sized>(a: &crate::anchor::Anchor, mode: Readout, rng: &mut R) -> u32 {
    match mode {
        Readout::Argmax => a.argmax(),
        Readout::Sample => a.sample(rng),
    }
}
