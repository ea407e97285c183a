//! Amortized subgoal planner trained by value-weighted imitation of
//! replay-supported candidates.

use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::AnchorTable;
use crate::dataset::IndexedDataset;
use crate::env::{CellId, MazeWorld};
use crate::error::{Error, Result};
use crate::rng;
use crate::value::ValueModel;

/// Readout rule shared by the planner and the executors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Argmax,
    Sample,
}

impl std::fmt::Display for Readout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Readout::Argmax => "argmax",
            Readout::Sample => "sample",
        })
    }
}

impl std::str::FromStr for Readout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Readout::Argmax),
            "sample" => Ok(Readout::Sample),
            _ => Err(Error::Parse(format!("unknown readout mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub n_candidates: usize,
    pub eta: f64,
    /// Number of `(s_t, g, candidates)` training tuples.
    pub n_tuples: usize,
    /// Probability of a same-trajectory future goal; the rest are random
    /// dataset states.
    pub future_prob: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { n_candidates: 16, eta: 1.0, n_tuples: 100_000, future_prob: 0.8 }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::Config("n_candidates must be >= 1".into()));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config("planner temperature must be positive and finite".into()));
        }
        if !(0.0..=1.0).contains(&self.future_prob) {
            return Err(Error::Config("future_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scored candidates for one training anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub anchor: (CellId, CellId),
    pub candidates: Vec<CellId>,
    pub costs: Vec<f64>,
    pub weights: Vec<f64>,
    /// Whether candidates came from the between-segment (else replay).
    pub from_segment: bool,
}

/// Samples `n_c` candidates for the anchor formed by occurrences `start`
/// and `goal` (flat dataset indices). Same-trajectory goals after `start`
/// draw from the strictly-between segment, without replacement when it is
/// long enough; anything else draws from all state occurrences.
pub fn build_candidates<R: Rng + ?Sized>(
    data: &IndexedDataset,
    start: u32,
    goal: u32,
    n_c: usize,
    rng: &mut R,
) -> (Vec<CellId>, bool) {
    let same = data.traj_of[start as usize] == data.traj_of[goal as usize];
    let between = if same && goal > start { (goal - start - 1) as usize } else { 0 };
    if between == 0 {
        let n = data.n_occurrences();
        let picks = (0..n_c).map(|_| data.cells[rng.random_range(0..n)]).collect();
        return (picks, false);
    }
    let first = start as usize + 1;
    let picks = if between >= n_c {
        index::sample(rng, between, n_c).into_iter().map(|i| data.cells[first + i]).collect()
    } else {
        (0..n_c).map(|_| data.cells[first + rng.random_range(0..between)]).collect()
    };
    (picks, true)
}

/// Bottleneck cost `max(D(s, c), D(c, g))`.
#[inline]
pub fn decomposition_cost(value: &ValueModel, s: CellId, c: CellId, g: CellId) -> f64 {
    value.reachability(s, c).max(value.reachability(c, g))
}

/// `softmax(-costs / eta)` with max-subtraction.
pub fn candidate_weights(costs: &[f64], eta: f64) -> Vec<f64> {
    let mut w = Vec::with_capacity(costs.len());
    candidate_weights_into(costs, eta, &mut w);
    w
}

fn candidate_weights_into(costs: &[f64], eta: f64, out: &mut Vec<f64>) {
    out.clear();
    let lo = costs.iter().copied().fold(f64::INFINITY, f64::min);
    out.extend(costs.iter().map(|&c| (-(c - lo) / eta).exp()));
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
}

/// Samples a training anchor: a transition occurrence and a high-level goal
/// occurrence (uniform future index on the same trajectory, or a uniform
/// dataset occurrence).
fn sample_anchor<R: Rng + ?Sized>(data: &IndexedDataset, future_prob: f64, rng: &mut R) -> (u32, u32) {
    let start = data.transitions[rng.random_range(0..data.transitions.len())];
    let goal = if rng.random::<f64>() < future_prob {
        rng.random_range(start + 1..=data.traj_last(start))
    } else {
        rng.random_range(0..data.n_occurrences() as u32)
    };
    (start, goal)
}

/// Scores one freshly sampled anchor.
pub fn sample_candidate_set<R: Rng + ?Sized>(
    data: &IndexedDataset,
    value: &ValueModel,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> CandidateSet {
    let (start, goal) = sample_anchor(data, cfg.future_prob, rng);
    let (s, g) = (data.cell(start), data.cell(goal));
    let (candidates, from_segment) = build_candidates(data, start, goal, cfg.n_candidates, rng);
    let costs: Vec<f64> = candidates.iter().map(|&c| decomposition_cost(value, s, c, g)).collect();
    let weights = candidate_weights(&costs, cfg.eta);
    CandidateSet { anchor: (s, g), candidates, costs, weights, from_segment }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub tuples: usize,
    pub seconds: f64,
}

impl TrainStats {
    pub fn tuples_per_sec(&self) -> f64 {
        if self.seconds > 0.0 {
            self.tuples as f64 / self.seconds
        } else {
            f64::INFINITY
        }
    }
}

/// Tabular refinement planner `pi_p(u | s, g)` over the dataset codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerPolicy {
    pub maze_id: String,
    pub config: PlannerConfig,
    pub table: AnchorTable,
}

impl PlannerPolicy {
    pub fn is_trained(&self) -> bool {
        !self.table.is_empty()
    }

    /// Proposes a subgoal for `(s, g)`, backing off for unseen anchors.
    pub fn propose<R: Rng + ?Sized>(&self, s: CellId, g: CellId, mode: Readout, rng: &mut R) -> Result<CellId> {
        let anchor = self.table.resolve(s, g).ok_or(Error::Untrained("planner"))?;
        Ok(CellId(match mode {
            Readout::Argmax => anchor.argmax(),
            Readout::Sample => anchor.sample(rng),
        }))
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "CFHRL-PLN v1 {} {}\nconfig {} {} {} {}\n",
            self.maze_id,
            self.table.n_cells(),
            c.n_candidates,
            c.eta,
            c.n_tuples,
            c.future_prob
        );
        self.table.write_text(&mut out);
        out
    }

    pub fn from_text(text: &str, world: &MazeWorld) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let header: Vec<&str> = lines.first().map(|l| l.split_whitespace().collect()).unwrap_or_default();
        if header.len() != 4 || header[0] != "CFHRL-PLN" || header[1] != "v1" {
            return Err(Error::format(1, "expected `CFHRL-PLN v1 <maze_id> <n_cells>`"));
        }
        let n: usize = header[3].parse().map_err(|_| Error::format(1, "bad cell count"))?;
        if header[2] != world.id() || n != world.n_cells() {
            return Err(Error::format(1, format!("checkpoint is for maze `{}` with {n} cells", header[2])));
        }
        let cfg: Vec<&str> = lines.get(1).map(|l| l.split_whitespace().collect()).unwrap_or_default();
        if cfg.len() != 5 || cfg[0] != "config" {
            return Err(Error::format(2, "expected planner config line"));
        }
        let num = |i: usize| cfg[i].parse::<f64>().map_err(|_| Error::format(2, "bad config number"));
        let config = PlannerConfig {
            n_candidates: num(1)? as usize,
            eta: num(2)?,
            n_tuples: num(3)? as usize,
            future_prob: num(4)?,
        };
        let (mut table, _) = AnchorTable::read_text(n, &lines[2..], 3)?;
        table.freeze(world)?;
        Ok(Self { maze_id: world.id().to_string(), config, table })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, world: &MazeWorld) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, world)
    }
}

/// Trains the planner against a frozen value. An untrained value or zero
/// tuples leaves the planner empty (and [`PlannerPolicy::propose`] errors).
pub fn train_planner(
    world: &MazeWorld,
    data: &IndexedDataset,
    value: &ValueModel,
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<(PlannerPolicy, TrainStats)> {
    cfg.validate()?;
    if value.n_cells() != world.n_cells() {
        return Err(Error::Precondition("value model does not match the world".into()));
    }
    let mut table = AnchorTable::new(world.n_cells());
    let mut rng = rng::stream(seed, "planner");
    let tuples = if value.is_trained() && !data.transitions.is_empty() { cfg.n_tuples } else { 0 };
    let mut candidates = Vec::with_capacity(cfg.n_candidates);
    let mut costs = Vec::with_capacity(cfg.n_candidates);
    let mut weights = Vec::with_capacity(cfg.n_candidates);
    let t0 = Instant::now();
    for _ in 0..tuples {
        let (start, goal) = sample_anchor(data, cfg.future_prob, &mut rng);
        let (s, g) = (data.cell(start), data.cell(goal));
        let (picks, _) = build_candidates(data, start, goal, cfg.n_candidates, &mut rng);
        candidates.clear();
        candidates.extend(picks);
        costs.clear();
        costs.extend(candidates.iter().map(|&c| decomposition_cost(value, s, c, g)));
        candidate_weights_into(&costs, cfg.eta, &mut weights);
        for (&c, &w) in candidates.iter().zip(&weights) {
            table.add(s, g, c.0, w);
        }
    }
    let seconds = t0.elapsed().as_secs_f64();
    table.freeze(world)?;
    let policy = PlannerPolicy { maze_id: world.id().to_string(), config: *cfg, table };
    Ok((policy, TrainStats { tuples, seconds }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Trajectory;
    use crate::env::{Action, GridPos};
    use crate::value::ValueConfig;
    use proptest::prelude::*;

    /// A value model holding exact BFS distances as reachability.
    fn oracle_value(world: &MazeWorld) -> ValueModel {
        ValueModel::from_fn(world, ValueConfig::default(), |s, g| -(world.distance_raw(s, g) as f64))
    }

    fn corridor_data(world: &MazeWorld, len: u16) -> IndexedDataset {
        let traj = Trajectory {
            states: (0..len).map(|c| GridPos::new(0, c)).collect(),
            actions: vec![Action::Right; len as usize - 1],
        };
        IndexedDataset::from_trajectories(world, std::iter::once(&traj)).unwrap()
    }

    #[test]
    fn weights_for_two_costs() {
        let w = candidate_weights(&[1.0, 3.0], 1.0);
        // 1 / (1 + e^-2) and e^-2 / (1 + e^-2)
        assert!((w[0] - 0.880_797_077_977_882_4).abs() < 1e-12);
        assert!((w[1] - 0.119_202_922_022_117_6).abs() < 1e-12);
        assert!((w[0] - 0.8808).abs() < 1e-4 && (w[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn equal_costs_are_uniform_and_small_eta_is_one_hot() {
        let w = candidate_weights(&[2.0; 4], 1.0);
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let w = candidate_weights(&[3.0, 1.0, 2.0], 1e-6);
        assert_eq!(w, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn decomposition_cost_is_bottleneck() {
        let world = MazeWorld::named("corridor12").unwrap();
        let v = oracle_value(&world);
        let (s, c, g) = (CellId(0), CellId(3), CellId(10));
        assert_eq!(decomposition_cost(&v, s, c, g), 7.0);
        assert_eq!(decomposition_cost(&v, s, s, g), 10.0);
        assert_eq!(decomposition_cost(&v, s, g, g), 10.0);
    }

    #[test]
    fn segment_candidates_stay_strictly_between() {
        let world = MazeWorld::named("corridor40").unwrap();
        let data = corridor_data(&world, 40);
        let mut rng = rng::stream(0, "t");
        let (picks, seg) = build_candidates(&data, 2, 33, 16, &mut rng);
        assert!(seg);
        assert_eq!(picks.len(), 16);
        assert!(picks.iter().all(|c| (3..33).contains(&c.0)));
        let mut sorted = picks.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 16, "long segments are sampled without replacement");
    }

    #[test]
    fn adjacent_goal_falls_back_to_replay() {
        let world = MazeWorld::named("corridor10").unwrap();
        let data = corridor_data(&world, 10);
        let mut rng = rng::stream(0, "t");
        let (picks, seg) = build_candidates(&data, 4, 5, 8, &mut rng);
        assert!(!seg);
        assert_eq!(picks.len(), 8);
        let (_, seg) = build_candidates(&data, 6, 2, 8, &mut rng);
        assert!(!seg, "earlier goals are not a forward segment");
    }

    #[test]
    fn replay_candidates_follow_occurrence_frequencies() {
        let world = MazeWorld::named("corridor6").unwrap();
        // Cell 0 occurs in both trajectories, so it carries 2/8 of the mass.
        let a = Trajectory { states: (0..4).map(|c| GridPos::new(0, c)).collect(), actions: vec![Action::Right; 3] };
        let b = Trajectory {
            states: vec![GridPos::new(0, 0), GridPos::new(0, 1), GridPos::new(0, 0), GridPos::new(0, 1)],
            actions: vec![Action::Right, Action::Left, Action::Right],
        };
        let data = IndexedDataset::from_trajectories(&world, [&a, &b].into_iter()).unwrap();
        let mut rng = rng::stream(2, "t");
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws / 10 {
            let (picks, seg) = build_candidates(&data, 0, 5, 10, &mut rng);
            assert!(!seg);
            for c in picks {
                counts[c.index()] += 1;
            }
        }
        let expected = [3.0 / 8.0, 3.0 / 8.0, 1.0 / 8.0, 1.0 / 8.0];
        let chi2: f64 = counts
            .iter()
            .zip(expected)
            .map(|(&o, p)| {
                let e = p * draws as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        // 99.9% quantile of chi-square with 3 degrees of freedom.
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn untrained_planner_refuses_to_propose() {
        let world = MazeWorld::named("small").unwrap();
        let ds = crate::dataset::generate_dataset(
            &world,
            &crate::dataset::GenConfig::new(crate::env::Regime::Navigate, 10),
            0,
        )
        .unwrap();
        let data = IndexedDataset::new(&world, &ds).unwrap();
        let cfg = ValueConfig { n_updates: 0, ..ValueConfig::default() };
        let value = crate::value::train_value(&world, &data, &cfg, 0).unwrap();
        let (p, stats) = train_planner(&world, &data, &value, &PlannerConfig::default(), 0).unwrap();
        assert_eq!(stats.tuples, 0);
        let mut rng = rng::stream(0, "t");
        assert!(matches!(p.propose(CellId(0), CellId(1), Readout::Argmax, &mut rng), Err(Error::Untrained(_))));
    }

    #[test]
    fn oracle_planner_proposes_inside_contraction_set() {
        let world = MazeWorld::named("small").unwrap();
        let ds = crate::dataset::generate_dataset(
            &world,
            &crate::dataset::GenConfig::new(crate::env::Regime::Navigate, 2000),
            3,
        )
        .unwrap();
        let data = IndexedDataset::new(&world, &ds).unwrap();
        let value = oracle_value(&world);
        let cfg = PlannerConfig { n_tuples: 400_000, ..PlannerConfig::default() };
        let (p, _) = train_planner(&world, &data, &value, &cfg, 0).unwrap();
        let mut rng = rng::stream(0, "t");
        let (mut inside, mut total) = (0, 0);
        for a in p.table.anchors() {
            let d = world.distance_raw(a.s, a.g);
            if d < 10 {
                continue;
            }
            let c = p.propose(a.s, a.g, Readout::Argmax, &mut rng).unwrap();
            let bottleneck = world.distance_raw(a.s, c).max(world.distance_raw(c, a.g));
            total += 1;
            if bottleneck as f64 <= 0.75 * d as f64 {
                inside += 1;
            }
        }
        let frac = inside as f64 / total as f64;
        assert!(total > 1000 && frac >= 0.95, "{inside}/{total} = {frac}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let world = MazeWorld::named("small").unwrap();
        let ds = crate::dataset::generate_dataset(
            &world,
            &crate::dataset::GenConfig::new(crate::env::Regime::Stitch, 50),
            1,
        )
        .unwrap();
        let data = IndexedDataset::new(&world, &ds).unwrap();
        let value = oracle_value(&world);
        let cfg = PlannerConfig { n_tuples: 2000, ..PlannerConfig::default() };
        let (p, _) = train_planner(&world, &data, &value, &cfg, 9).unwrap();
        let back = PlannerPolicy::from_text(&p.to_text(), &world).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_text(), p.to_text());
    }

    #[test]
    fn proposals_stay_in_codebook() {
        let world = MazeWorld::named("small").unwrap();
        let ds = crate::dataset::generate_dataset(
            &world,
            &crate::dataset::GenConfig::new(crate::env::Regime::Stitch, 30),
            5,
        )
        .unwrap();
        let data = IndexedDataset::new(&world, &ds).unwrap();
        let value = oracle_value(&world);
        let cfg = PlannerConfig { n_tuples: 3000, ..PlannerConfig::default() };
        let (p, _) = train_planner(&world, &data, &value, &cfg, 1).unwrap();
        let mut rng = rng::stream(4, "t");
        for s in world.cell_ids() {
            for g in world.cell_ids() {
                for mode in [Readout::Argmax, Readout::Sample] {
                    let c = p.propose(s, g, mode, &mut rng).unwrap();
                    assert!(data.codebook.binary_search(&c).is_ok());
                }
            }
        }
    }

    proptest! {
        #[test]
        fn weights_lie_on_simplex(costs in proptest::collection::vec(-50.0f64..500.0, 1..32), eta in 0.01f64..10.0) {
            let w = candidate_weights(&costs, eta);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn lower_cost_gets_more_weight(a in 0.0f64..20.0, gap in 0.01f64..5.0, eta in 0.1f64..5.0) {
            let w = candidate_weights(&[a, a + gap], eta);
            prop_assert!(w[0] > w[1]);
        }

        #[test]
        fn shift_invariance(costs in proptest::collection::vec(0.0f64..50.0, 1..16), shift in -100.0f64..100.0) {
            let shifted: Vec<f64> = costs.iter().map(|c| c + shift).collect();
            let (a, b) = (candidate_weights(&costs, 1.0), candidate_weights(&shifted, 1.0));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
