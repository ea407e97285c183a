//! Coarse-to-fine refinement with value-thresholded stopping, and the
//! execute/replan loop around it.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, CellId, GridPos, MazeWorld};
use crate::error::{Error, Result};
use crate::exec::ExecPolicies;
use crate::planner::{PlannerPolicy, Readout};
use crate::value::ValueModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub k_max: usize,
    pub eps_exec: f64,
    pub h_exec: usize,
    pub mode: Readout,
    /// Hold the command fixed for a whole execution block instead of
    /// resampling it every step.
    pub hold_z: bool,
}

impl InferConfig {
    /// Desk defaults: `eps_exec` is the discounted cost of `h` steps, so a
    /// target is executable when it is estimated within the local horizon.
    pub fn for_horizon(h: usize, gamma: f64) -> Self {
        Self {
            k_max: 3,
            eps_exec: crate::value::discounted_cost(gamma, h as u32),
            h_exec: h,
            mode: Readout::Argmax,
            hold_z: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_exec >= 0.0) {
            return Err(Error::Config("eps_exec must be >= 0".into()));
        }
        if self.h_exec == 0 {
            return Err(Error::Config("h_exec must be >= 1".into()));
        }
        Ok(())
    }
}

/// How refinement depth is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    /// Stop at the first executable target, at most `k_max` proposals.
    Adaptive,
    /// Exactly `k` proposals, ignoring the threshold.
    Fixed(usize),
}

/// Source of subgoal proposals.
#[derive(Clone, Copy, Debug)]
pub enum Proposer<'a> {
    Planner(&'a PlannerPolicy),
    /// Uniform draw from a codebook, ignoring the query.
    Uniform(&'a [CellId]),
}

impl Proposer<'_> {
    fn propose<R: Rng + ?Sized>(&self, s: CellId, g: CellId, mode: Readout, rng: &mut R) -> Result<CellId> {
        match *self {
            Proposer::Planner(p) => p.propose(s, g, mode, rng),
            Proposer::Uniform(cells) if !cells.is_empty() => Ok(cells[rng.random_range(0..cells.len())]),
            Proposer::Uniform(_) => Err(Error::Untrained("codebook")),
        }
    }
}

/// How the executor turns the refined target into actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    /// `z ~ pi_z(. | s, g_bar)`, `a ~ pi_a(. | s, z)`.
    Hierarchical,
    /// Command is the refined target itself.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Timeout,
}

/// Record of one replanning step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    /// Environment step at which refinement ran.
    pub step: usize,
    pub targets: Vec<GridPos>,
    pub d_values: Vec<f64>,
    pub stopping_level: usize,
    pub fallback_used: bool,
    pub planner_calls: usize,
    pub commands: Vec<(GridPos, Action)>,
    /// Set on the last trace of an episode.
    pub outcome: Option<Outcome>,
}

impl RefinementTrace {
    pub fn refined_target(&self) -> GridPos {
        self.targets[self.stopping_level]
    }
}

/// Refines `g` from `s`. Returns the refined target and the trace (with no
/// commands yet).
///
/// Adaptive depth: for `l < k_max`, stop at `g^(l)` when
/// `D(s, g^(l)) <= eps_exec`, else propose `g^(l+1)`. If the budget runs
/// out the last proposal is used and `fallback_used` reports whether it is
/// still above the threshold. A planner that cannot propose ends
/// refinement early with `fallback_used` set.
#[allow(clippy::too_many_arguments)]
pub fn refine<R: Rng + ?Sized>(
    world: &MazeWorld,
    proposer: Proposer<'_>,
    value: &ValueModel,
    s: CellId,
    g: CellId,
    depth: Depth,
    cfg: &InferConfig,
    rng: &mut R,
) -> (CellId, RefinementTrace) {
    let eps = cfg.eps_exec;
    let mut targets = vec![g];
    let mut d_values = vec![value.reachability(s, g)];
    let mut calls = 0;
    let mut broken = false;
    let budget = match depth {
        Depth::Adaptive => cfg.k_max,
        Depth::Fixed(k) => k,
    };
    let mut level = 0;
    while level < budget {
        if depth == Depth::Adaptive && d_values[level] <= eps {
            break;
        }
        calls += 1;
        match proposer.propose(s, targets[level], cfg.mode, rng) {
            Ok(next) => {
                targets.push(next);
                d_values.push(value.reachability(s, next));
                level += 1;
            }
            Err(_) => {
                broken = true;
                break;
            }
        }
    }
    let fallback_used = match depth {
        Depth::Adaptive => broken || d_values[level] > eps,
        Depth::Fixed(_) => broken,
    };
    let trace = RefinementTrace {
        step: 0,
        targets: targets.iter().map(|&c| world.pos(c)).collect(),
        d_values,
        stopping_level: level,
        fallback_used,
        planner_calls: calls,
        commands: Vec::new(),
        outcome: None,
    };
    (targets[level], trace)
}

/// Full description of an inference variant.
#[derive(Clone, Copy, Debug)]
pub struct Agent<'a> {
    pub proposer: Proposer<'a>,
    pub depth: Depth,
    pub execution: Execution,
    pub value: &'a ValueModel,
    pub exec: &'a ExecPolicies,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub outcome: Outcome,
    pub steps: usize,
    pub traces: Vec<RefinementTrace>,
}

impl EpisodeResult {
    pub fn success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn planner_calls(&self) -> usize {
        self.traces.iter().map(|t| t.planner_calls).sum()
    }

    /// Planner calls per replanning step (0 for an episode with none).
    pub fn mean_refinement_calls(&self) -> f64 {
        if self.traces.is_empty() {
            0.0
        } else {
            self.planner_calls() as f64 / self.traces.len() as f64
        }
    }

    /// Visited states, start included.
    pub fn path(&self, s0: GridPos, world: &MazeWorld) -> Vec<GridPos> {
        let mut out = vec![s0];
        let mut cur = s0;
        for t in &self.traces {
            for &(_, a) in &t.commands {
                cur = world.step(cur, a);
                out.push(cur);
            }
        }
        out
    }
}

/// Alternates refinement and execution blocks of at most `h_exec` steps
/// until the goal is reached or `horizon` steps have been taken. Refinement
/// always restarts from the original goal.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<R: Rng + ?Sized>(
    world: &MazeWorld,
    agent: &Agent<'_>,
    s0: CellId,
    g: CellId,
    horizon: usize,
    cfg: &InferConfig,
    rng: &mut R,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let mut traces = Vec::new();
    let mut s = s0;
    let mut steps = 0;
    if s == g {
        return Ok(EpisodeResult { outcome: Outcome::Success, steps: 0, traces });
    }
    let mut outcome = Outcome::Timeout;
    'outer: while steps < horizon {
        let (g_bar, mut trace) = refine(world, agent.proposer, agent.value, s, g, agent.depth, cfg, rng);
        trace.step = steps;
        let mut z = g_bar;
        for j in 0..cfg.h_exec {
            let a = match agent.execution {
                Execution::Direct => agent.exec.action(s, g_bar, cfg.mode, rng)?,
                Execution::Hierarchical => {
                    if j == 0 || !cfg.hold_z {
                        z = agent.exec.command(s, g_bar, cfg.mode, rng)?;
                    }
                    agent.exec.action(s, z, cfg.mode, rng)?
                }
            };
            let command = if agent.execution == Execution::Direct { g_bar } else { z };
            trace.commands.push((world.pos(command), a));
            s = world.step_id(s, a);
            steps += 1;
            if s == g {
                outcome = Outcome::Success;
                traces.push(trace);
                break 'outer;
            }
            if steps >= horizon {
                break;
            }
        }
        traces.push(trace);
    }
    if let Some(last) = traces.last_mut() {
        last.outcome = Some(outcome);
    }
    Ok(EpisodeResult { outcome, steps, traces })
}

/// [`run_episode`] with exactly `k` proposals per replanning step.
#[allow(clippy::too_many_arguments)]
pub fn run_fixed_depth<R: Rng + ?Sized>(
    world: &MazeWorld,
    agent: &Agent<'_>,
    s0: CellId,
    g: CellId,
    horizon: usize,
    cfg: &InferConfig,
    k: usize,
    rng: &mut R,
) -> Result<EpisodeResult> {
    let fixed = Agent { depth: Depth::Fixed(k), ..*agent };
    run_episode(world, &fixed, s0, g, horizon, cfg, rng)
}

/// One line of the trace log.
#[derive(Serialize)]
struct TraceRecord<'a> {
    episode: usize,
    step: usize,
    targets: Vec<[u16; 2]>,
    d_values: &'a [f64],
    stopping_level: usize,
    fallback_used: bool,
    planner_calls: usize,
    outcome: Option<Outcome>,
}

/// Writes one JSON object per replanning step.
pub fn write_trace_log<W: Write + ?Sized>(out: &mut W, episode: usize, result: &EpisodeResult) -> std::io::Result<()> {
    for t in &result.traces {
        let rec = TraceRecord {
            episode,
            step: t.step,
            targets: t.targets.iter().map(|p| [p.row, p.col]).collect(),
            d_values: &t.d_values,
            stopping_level: t.stopping_level,
            fallback_used: t.fallback_used,
            planner_calls: t.planner_calls,
            outcome: t.outcome,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// First index with `d <= eps`, if any.
pub fn first_passage(d_values: &[f64], eps: f64) -> Option<usize> {
    d_values.iter().position(|&d| d <= eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::AnchorTable;
    use crate::exec::ExecConfig;
    use crate::planner::PlannerConfig;
    use crate::value::ValueConfig;

    /// A value whose reachability from every state is a fixed per-target number.
    fn scripted_value(world: &MazeWorld, d: &[(CellId, f64)]) -> ValueModel {
        ValueModel::from_fn(world, ValueConfig::default(), |_, g| {
            -d.iter().find(|(c, _)| *c == g).map_or(1000.0, |x| x.1)
        })
    }

    /// Planner that maps target cell `k` to `k + 1` from every state.
    fn chain_planner(world: &MazeWorld) -> PlannerPolicy {
        let n = world.n_cells();
        let mut table = AnchorTable::new(n);
        for s in 0..n as u32 {
            for g in 0..n as u32 - 1 {
                table.add(CellId(s), CellId(g), g + 1, 1.0);
            }
        }
        table.freeze(world).unwrap();
        PlannerPolicy { maze_id: world.id().into(), config: PlannerConfig::default(), table }
    }

    fn cfg(eps: f64) -> InferConfig {
        InferConfig { k_max: 3, eps_exec: eps, h_exec: 5, mode: Readout::Argmax, hold_z: false }
    }

    #[test]
    fn executable_goal_stops_immediately() {
        let w = MazeWorld::named("corridor8").unwrap();
        let v = scripted_value(&w, &[(CellId(1), 3.0)]);
        let p = chain_planner(&w);
        let mut rng = crate::rng::stream(0, "t");
        let (g_bar, t) = refine(&w, Proposer::Planner(&p), &v, CellId(0), CellId(1), Depth::Adaptive, &cfg(4.0), &mut rng);
        assert_eq!(g_bar, CellId(1));
        assert_eq!((t.stopping_level, t.planner_calls, t.fallback_used), (0, 0, false));
    }

    #[test]
    fn first_passage_level() {
        let w = MazeWorld::named("corridor8").unwrap();
        let v = scripted_value(&w, &[(CellId(1), 12.0), (CellId(2), 6.0), (CellId(3), 3.0)]);
        let p = chain_planner(&w);
        let mut rng = crate::rng::stream(0, "t");
        let (g_bar, t) = refine(&w, Proposer::Planner(&p), &v, CellId(0), CellId(1), Depth::Adaptive, &cfg(4.0), &mut rng);
        assert_eq!(t.stopping_level, 2);
        assert_eq!(g_bar, CellId(3));
        assert_eq!(t.d_values, vec![12.0, 6.0, 3.0]);
        assert_eq!(first_passage(&t.d_values, 4.0), Some(2));
        assert!(!t.fallback_used);
    }

    #[test]
    fn exhausted_budget_uses_last_proposal() {
        let w = MazeWorld::named("corridor8").unwrap();
        let v = scripted_value(&w, &[]);
        let p = chain_planner(&w);
        let mut rng = crate::rng::stream(0, "t");
        let (g_bar, t) = refine(&w, Proposer::Planner(&p), &v, CellId(0), CellId(1), Depth::Adaptive, &cfg(4.0), &mut rng);
        assert_eq!(g_bar, CellId(4));
        assert_eq!((t.stopping_level, t.planner_calls, t.targets.len()), (3, 3, 4));
        assert!(t.fallback_used);
    }

    #[test]
    fn fixed_depth_ignores_threshold() {
        let w = MazeWorld::named("corridor8").unwrap();
        let v = scripted_value(&w, &[]);
        let p = chain_planner(&w);
        let mut rng = crate::rng::stream(0, "t");
        for k in 0..4 {
            let (g_bar, t) =
                refine(&w, Proposer::Planner(&p), &v, CellId(0), CellId(1), Depth::Fixed(k), &cfg(f64::INFINITY), &mut rng);
            assert_eq!(t.planner_calls, k);
            assert_eq!(g_bar, CellId(1 + k as u32));
        }
    }

    #[test]
    fn untrained_planner_falls_back_gracefully() {
        let w = MazeWorld::named("corridor8").unwrap();
        let v = scripted_value(&w, &[]);
        let p = PlannerPolicy { maze_id: w.id().into(), config: PlannerConfig::default(), table: AnchorTable::new(8) };
        let mut rng = crate::rng::stream(0, "t");
        let (g_bar, t) = refine(&w, Proposer::Planner(&p), &v, CellId(0), CellId(5), Depth::Adaptive, &cfg(4.0), &mut rng);
        assert_eq!(g_bar, CellId(5));
        assert!(t.fallback_used);
        assert_eq!(t.stopping_level, 0);
    }

    fn corridor_exec(w: &MazeWorld) -> ExecPolicies {
        // Command = target, action = move toward it.
        let n = w.n_cells() as u32;
        let mut pi_z = AnchorTable::new(n as usize);
        let mut pi_a = AnchorTable::new(n as usize);
        for s in 0..n {
            for g in 0..n {
                pi_z.add(CellId(s), CellId(g), g, 1.0);
                let a = match g.cmp(&s) {
                    std::cmp::Ordering::Less => Action::Left,
                    std::cmp::Ordering::Greater => Action::Right,
                    std::cmp::Ordering::Equal => Action::Stay,
                };
                pi_a.add(CellId(s), CellId(g), a.id() as u32, 1.0);
            }
        }
        pi_z.freeze(w).unwrap();
        pi_a.freeze(w).unwrap();
        ExecPolicies { maze_id: w.id().into(), config: ExecConfig::default(), pi_z, pi_a }
    }

    #[test]
    fn start_at_goal_is_immediate_success() {
        let w = MazeWorld::named("corridor8").unwrap();
        let v = ValueModel::oracle(&w, ValueConfig::default());
        let p = chain_planner(&w);
        let e = corridor_exec(&w);
        let agent = Agent { proposer: Proposer::Planner(&p), depth: Depth::Adaptive, execution: Execution::Hierarchical, value: &v, exec: &e };
        let mut rng = crate::rng::stream(0, "t");
        let r = run_episode(&w, &agent, CellId(3), CellId(3), 10, &cfg(4.0), &mut rng).unwrap();
        assert!(r.success() && r.steps == 0 && r.traces.is_empty());
    }

    #[test]
    fn near_goal_needs_a_single_unrefined_trace() {
        let w = MazeWorld::named("corridor8").unwrap();
        let v = ValueModel::oracle(&w, ValueConfig::default());
        let p = chain_planner(&w);
        let e = corridor_exec(&w);
        let agent = Agent { proposer: Proposer::Planner(&p), depth: Depth::Adaptive, execution: Execution::Hierarchical, value: &v, exec: &e };
        let mut rng = crate::rng::stream(0, "t");
        let r = run_episode(&w, &agent, CellId(0), CellId(3), 32, &cfg(4.0), &mut rng).unwrap();
        assert!(r.success());
        assert_eq!(r.steps, 3);
        assert_eq!(r.traces.len(), 1);
        assert_eq!(r.traces[0].stopping_level, 0);
        assert_eq!(r.traces[0].outcome, Some(Outcome::Success));
    }

    #[test]
    fn horizon_bounds_steps() {
        let w = MazeWorld::named("corridor8").unwrap();
        let v = ValueModel::oracle(&w, ValueConfig::default());
        // Proposals for goal 0 point at cell 1, so the agent parks there.
        let p = chain_planner(&w);
        let e = corridor_exec(&w);
        let agent = Agent { proposer: Proposer::Planner(&p), depth: Depth::Fixed(1), execution: Execution::Direct, value: &v, exec: &e };
        let mut rng = crate::rng::stream(0, "t");
        let r = run_episode(&w, &agent, CellId(3), CellId(0), 12, &cfg(4.0), &mut rng).unwrap();
        assert_eq!(r.outcome, Outcome::Timeout);
        assert_eq!(r.steps, 12);
        assert!(r.traces.iter().all(|t| t.commands.len() <= 5 && t.planner_calls == 1));
        assert_eq!(r.traces.last().unwrap().outcome, Some(Outcome::Timeout));
    }

    #[test]
    fn trace_log_is_one_json_object_per_replan() {
        let w = MazeWorld::named("corridor8").unwrap();
        let v = ValueModel::oracle(&w, ValueConfig::default());
        let p = chain_planner(&w);
        let e = corridor_exec(&w);
        let agent = Agent { proposer: Proposer::Planner(&p), depth: Depth::Fixed(1), execution: Execution::Direct, value: &v, exec: &e };
        let mut rng = crate::rng::stream(0, "t");
        let r = run_episode(&w, &agent, CellId(3), CellId(0), 12, &cfg(4.0), &mut rng).unwrap();
        let mut buf = Vec::new();
        write_trace_log(&mut buf, 7, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), r.traces.len());
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["episode"], 7);
            assert!(v["targets"].is_array() && v["d_values"].is_array());
        }
    }
}
