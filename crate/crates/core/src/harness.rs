//! Experiment configuration, staged training, evaluation, ablations, the
//! candidate-budget sweep and metrics reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_dataset, GenConfig, IndexedDataset, OfflineDataset};
use crate::env::{CellId, MazeWorld, Regime};
use crate::exec::{train_exec, ExecConfig, ExecPolicies};
use crate::infer::{run_episode, write_trace_log, Agent, Depth, EpisodeResult, Execution, InferConfig, Proposer};
use crate::planner::{train_planner, PlannerConfig, PlannerPolicy, TrainStats};
use crate::rng;
use crate::value::{discounted_cost, train_value, ValueConfig, ValueModel};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Inference variants compared in the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// Direct `pi_a(s, g)` on the final goal.
    Flat,
    /// No refinement; `pi_z` conditioned on the final goal.
    NoPlanner,
    /// Exactly `k` refinement calls, threshold ignored.
    FixedK(usize),
    /// Refined target handed straight to `pi_a`.
    NoAbstraction,
    /// Proposals drawn uniformly from the dataset codebook.
    RandomSubgoals,
}

impl Variant {
    /// Every variant of the ablation table, full last.
    pub fn ablation_suite() -> Vec<Variant> {
        vec![
            Variant::Flat,
            Variant::NoPlanner,
            Variant::FixedK(1),
            Variant::FixedK(2),
            Variant::FixedK(3),
            Variant::NoAbstraction,
            Variant::RandomSubgoals,
            Variant::Full,
        ]
    }

    pub fn agent<'a>(self, b: &'a Bundle) -> Agent<'a> {
        let planner = Proposer::Planner(&b.planner);
        let (proposer, depth, execution) = match self {
            Variant::Full => (planner, Depth::Adaptive, Execution::Hierarchical),
            Variant::Flat => (planner, Depth::Fixed(0), Execution::Direct),
            Variant::NoPlanner => (planner, Depth::Fixed(0), Execution::Hierarchical),
            Variant::FixedK(k) => (planner, Depth::Fixed(k), Execution::Hierarchical),
            Variant::NoAbstraction => (planner, Depth::Adaptive, Execution::Direct),
            Variant::RandomSubgoals => (Proposer::Uniform(&b.data.codebook), Depth::Adaptive, Execution::Hierarchical),
        };
        Agent { proposer, depth, execution, value: &b.value, exec: &b.exec }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::Flat => f.write_str("flat"),
            Variant::NoPlanner => f.write_str("no_planner"),
            Variant::FixedK(k) => write!(f, "fixed_k{k}"),
            Variant::NoAbstraction => f.write_str("no_abstraction"),
            Variant::RandomSubgoals => f.write_str("random_subgoals"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "flat" => Variant::Flat,
            "no_planner" => Variant::NoPlanner,
            "no_abstraction" => Variant::NoAbstraction,
            "random_subgoals" => Variant::RandomSubgoals,
            _ => match s.strip_prefix("fixed_k").and_then(|k| k.parse().ok()) {
                Some(k) => Variant::FixedK(k),
                None => return Err(Error::Parse(format!("unknown variant `{s}`"))),
            },
        })
    }
}

/// Start/goal pair sampling for evaluation. The first
/// `ceil(long_fraction * n)` pairs have `d >= long_distance` (0 means half
/// the diameter); the rest only need `d >= min_distance`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub long_fraction: f64,
    pub long_distance: u32,
    pub min_distance: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_episodes: 50, long_fraction: 0.5, long_distance: 0, min_distance: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub maze_id: String,
    pub regime: Regime,
    pub n_trajectories: usize,
    pub stitch_segment_len: usize,
    pub navigate_noise: f64,
    /// Seed of the offline dataset, shared by all training seeds.
    pub data_seed: u64,
    /// Load the dataset from here instead of generating it.
    pub data_path: Option<PathBuf>,
    pub value: ValueConfig,
    pub planner: PlannerConfig,
    pub exec: ExecConfig,
    pub infer: InferConfig,
    pub n_seeds: usize,
    pub seed_base: u64,
    pub eval: EvalConfig,
    pub variant: Variant,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_maze("small", Regime::Navigate)
    }
}

impl ExperimentConfig {
    /// Defaults for a maze: local horizon 25 on giant and 10 elsewhere,
    /// `H_exec = h`, and `eps_exec` the discounted cost of `h` steps.
    pub fn for_maze(maze_id: &str, regime: Regime) -> Self {
        let value = ValueConfig::default();
        let h = ExecConfig::default_horizon(maze_id);
        Self {
            maze_id: maze_id.to_string(),
            regime,
            n_trajectories: 1000,
            stitch_segment_len: 20,
            navigate_noise: 0.2,
            data_seed: 0,
            data_path: None,
            value,
            planner: PlannerConfig::default(),
            exec: ExecConfig { h, ..ExecConfig::default() },
            infer: InferConfig::for_horizon(h, value.gamma),
            n_seeds: 8,
            seed_base: 0,
            eval: EvalConfig::default(),
            variant: Variant::Full,
        }
    }

    /// The long-horizon stitching protocol on the giant maze: 20k segments
    /// of 20 steps, evaluation pairs at least 40 apart.
    ///
    /// Pessimistic initialisation lets one member propagate values across
    /// the maze within the update budget. Refinement may use four calls,
    /// and targets count as executable at 20 steps rather than the full
    /// local horizon of 25, because `pi_a` reliability drops sharply
    /// beyond the segment length.
    pub fn giant_stitch() -> Self {
        let mut c = Self::for_maze("giant", Regime::Stitch);
        c.n_trajectories = 20_000;
        c.value.n_updates = 1_500_000;
        c.value.ensemble_size = 1;
        c.value.init_value = -1.0 / (1.0 - c.value.gamma);
        c.planner.n_tuples = 2_000_000;
        c.infer.k_max = 4;
        c.infer.eps_exec = discounted_cost(c.value.gamma, 20);
        c.eval = EvalConfig { n_episodes: 50, long_fraction: 1.0, long_distance: 40, min_distance: 40 };
        c
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_seeds as u64).map(move |i| self.seed_base + i)
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            regime: self.regime,
            n_trajectories: self.n_trajectories,
            stitch_segment_len: self.stitch_segment_len,
            noise: self.navigate_noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        MazeWorld::named(&self.maze_id)?;
        self.value.validate()?;
        self.planner.validate()?;
        self.exec.validate()?;
        self.infer.validate()?;
        if self.n_seeds == 0 || self.eval.n_episodes == 0 {
            return Err(Error::Config("n_seeds and eval.n_episodes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.long_fraction) {
            return Err(Error::Config("eval.long_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Flat `key = value` lines, one per field, version first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let v = &self.value;
        vec![
            ("version", CONFIG_VERSION.to_string()),
            ("maze", self.maze_id.clone()),
            ("regime", self.regime.to_string()),
            ("n_trajectories", self.n_trajectories.to_string()),
            ("stitch_segment_len", self.stitch_segment_len.to_string()),
            ("navigate_noise", self.navigate_noise.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("data_path", self.data_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("value.tau", v.tau.to_string()),
            ("value.gamma", v.gamma.to_string()),
            ("value.lr", v.lr.to_string()),
            ("value.polyak", v.polyak.to_string()),
            ("value.mix_current", v.mix.current.to_string()),
            ("value.mix_future", v.mix.future.to_string()),
            ("value.mix_random", v.mix.random.to_string()),
            ("value.n_updates", v.n_updates.to_string()),
            ("value.batch_size", v.batch_size.to_string()),
            ("value.ensemble_size", v.ensemble_size.to_string()),
            ("value.init_value", v.init_value.to_string()),
            ("value.bootstrap_frac", v.bootstrap_frac.to_string()),
            ("planner.n_candidates", self.planner.n_candidates.to_string()),
            ("planner.eta", self.planner.eta.to_string()),
            ("planner.n_tuples", self.planner.n_tuples.to_string()),
            ("planner.future_prob", self.planner.future_prob.to_string()),
            ("exec.h", self.exec.h.to_string()),
            ("exec.alpha", self.exec.alpha.to_string()),
            ("exec.omega_max", self.exec.omega_max.to_string()),
            ("infer.k_max", self.infer.k_max.to_string()),
            ("infer.eps_exec", self.infer.eps_exec.to_string()),
            ("infer.h_exec", self.infer.h_exec.to_string()),
            ("infer.readout", self.infer.mode.to_string()),
            ("infer.hold_z", self.infer.hold_z.to_string()),
            ("n_seeds", self.n_seeds.to_string()),
            ("seed_base", self.seed_base.to_string()),
            ("eval.n_episodes", self.eval.n_episodes.to_string()),
            ("eval.long_fraction", self.eval.long_fraction.to_string()),
            ("eval.long_distance", self.eval.long_distance.to_string()),
            ("eval.min_distance", self.eval.min_distance.to_string()),
            ("variant", self.variant.to_string()),
        ]
    }

    /// Sets one field from its text form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, raw: &str) -> Result<T> {
            raw.parse().map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))
        }
        let v = &mut self.value;
        match key {
            "version" => {
                let ver: u32 = num(key, raw)?;
                if ver != CONFIG_VERSION {
                    return Err(Error::Config(format!("unsupported config version {ver}")));
                }
            }
            "maze" => self.maze_id = raw.to_string(),
            "regime" => self.regime = raw.parse()?,
            "n_trajectories" => self.n_trajectories = num(key, raw)?,
            "stitch_segment_len" => self.stitch_segment_len = num(key, raw)?,
            "navigate_noise" => self.navigate_noise = num(key, raw)?,
            "data_seed" => self.data_seed = num(key, raw)?,
            "data_path" => self.data_path = (!raw.is_empty()).then(|| PathBuf::from(raw)),
            "value.tau" => v.tau = num(key, raw)?,
            "value.gamma" => v.gamma = num(key, raw)?,
            "value.lr" => v.lr = num(key, raw)?,
            "value.polyak" => v.polyak = num(key, raw)?,
            "value.mix_current" => v.mix.current = num(key, raw)?,
            "value.mix_future" => v.mix.future = num(key, raw)?,
            "value.mix_random" => v.mix.random = num(key, raw)?,
            "value.n_updates" => v.n_updates = num(key, raw)?,
            "value.batch_size" => v.batch_size = num(key, raw)?,
            "value.ensemble_size" => v.ensemble_size = num(key, raw)?,
            "value.init_value" => v.init_value = num(key, raw)?,
            "value.bootstrap_frac" => v.bootstrap_frac = num(key, raw)?,
            "planner.n_candidates" => self.planner.n_candidates = num(key, raw)?,
            "planner.eta" => self.planner.eta = num(key, raw)?,
            "planner.n_tuples" => self.planner.n_tuples = num(key, raw)?,
            "planner.future_prob" => self.planner.future_prob = num(key, raw)?,
            "exec.h" => self.exec.h = num(key, raw)?,
            "exec.alpha" => self.exec.alpha = num(key, raw)?,
            "exec.omega_max" => self.exec.omega_max = num(key, raw)?,
            "infer.k_max" => self.infer.k_max = num(key, raw)?,
            "infer.eps_exec" => self.infer.eps_exec = num(key, raw)?,
            "infer.h_exec" => self.infer.h_exec = num(key, raw)?,
            "infer.readout" => self.infer.mode = raw.parse()?,
            "infer.hold_z" => self.infer.hold_z = num(key, raw)?,
            "n_seeds" => self.n_seeds = num(key, raw)?,
            "seed_base" => self.seed_base = num(key, raw)?,
            "eval.n_episodes" => self.eval.n_episodes = num(key, raw)?,
            "eval.long_fraction" => self.eval.long_fraction = num(key, raw)?,
            "eval.long_distance" => self.eval.long_distance = num(key, raw)?,
            "eval.min_distance" => self.eval.min_distance = num(key, raw)?,
            "variant" => self.variant = raw.parse()?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses [`to_text`](Self::to_text) output. The `version` key is
    /// required; blank lines and `#` comments are ignored. Fields left out
    /// take the defaults of the named maze and regime.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format(i + 1, "expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), i + 1).is_some() {
                return Err(Error::format(i + 1, format!("duplicate key `{k}`")));
            }
            pairs.push((k, v));
        }
        if !seen.contains_key("version") {
            return Err(Error::Config("missing `version` key".into()));
        }
        let lookup = |key: &str| pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let maze = lookup("maze").unwrap_or("small");
        let regime = lookup("regime").map(str::parse).transpose()?.unwrap_or(Regime::Navigate);
        let mut cfg = Self::for_maze(maze, regime);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// The configured dataset: loaded from `data_path` when set, otherwise
    /// generated from `data_seed`.
    pub fn dataset(&self, world: &MazeWorld) -> Result<OfflineDataset> {
        match &self.data_path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found")));
                }
                let d = OfflineDataset::load(p)?;
                d.validate(world)?;
                Ok(d)
            }
            None => generate_dataset(world, &self.gen_config(), self.data_seed),
        }
    }
}

/// Everything one training seed produces.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub seed: u64,
    pub world: MazeWorld,
    pub data: IndexedDataset,
    pub value: ValueModel,
    pub planner: PlannerPolicy,
    pub exec: ExecPolicies,
    pub planner_stats: TrainStats,
}

const VALUE_FILE: &str = "value.txt";
const PLANNER_FILE: &str = "planner.txt";
const EXEC_FILE: &str = "exec.txt";

impl Bundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.value.save(&dir.join(VALUE_FILE))?;
        self.planner.save(&dir.join(PLANNER_FILE))?;
        self.exec.save(&dir.join(EXEC_FILE))
    }

    /// Loads checkpoints written by [`save`](Self::save); the dataset is
    /// rebuilt from the config.
    pub fn load(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<Self> {
        let world = MazeWorld::named(&cfg.maze_id)?;
        let data = IndexedDataset::new(&world, &cfg.dataset(&world)?)?;
        let value = ValueModel::load(&dir.join(VALUE_FILE))?;
        let planner = PlannerPolicy::load(&dir.join(PLANNER_FILE), &world)?;
        let exec = ExecPolicies::load(&dir.join(EXEC_FILE), &world)?;
        Ok(Bundle { seed, world, data, value, planner, exec, planner_stats: TrainStats::default() })
    }
}

/// Checkpoint directory of one seed under an output root.
pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

/// Value first, frozen, then planner and executor against it.
pub fn train_all(cfg: &ExperimentConfig, seed: u64) -> Result<Bundle> {
    cfg.validate()?;
    let world = MazeWorld::named(&cfg.maze_id)?;
    let data = IndexedDataset::new(&world, &cfg.dataset(&world)?)?;
    let value = train_value(&world, &data, &cfg.value, seed)?;
    let (planner, planner_stats) = train_planner(&world, &data, &value, &cfg.planner, seed)?;
    let exec = train_exec(&world, &data, &value, &cfg.exec)?;
    Ok(Bundle { seed, world, data, value, planner, exec, planner_stats })
}

/// Per-seed evaluation summary. `wall_updates_per_sec` is only filled by
/// the candidate sweep; everything else is a deterministic function of the
/// config and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub n_candidates: usize,
    pub seed: u64,
    pub n_episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_refinement_calls: f64,
    pub mean_episode_steps: f64,
    pub wall_updates_per_sec: Option<f64>,
}

/// Evaluation pairs for a seed, identical across variants.
pub fn eval_pairs(world: &MazeWorld, cfg: &EvalConfig, seed: u64) -> Result<Vec<(CellId, CellId)>> {
    let n = world.n_cells() as u32;
    let long_d = if cfg.long_distance == 0 { world.diameter().div_ceil(2) } else { cfg.long_distance };
    let n_long = (cfg.long_fraction * cfg.n_episodes as f64).ceil() as usize;
    let min_d = cfg.min_distance.max(1);
    if long_d > world.diameter() || min_d > world.diameter() {
        return Err(Error::Config(format!("no pairs that far apart; diameter is {}", world.diameter())));
    }
    let mut rng = rng::stream(seed, "eval-pairs");
    let mut pairs = Vec::with_capacity(cfg.n_episodes);
    while pairs.len() < cfg.n_episodes {
        let need = if pairs.len() < n_long { long_d } else { min_d };
        let (s, g) = (CellId(rng.random_range(0..n)), CellId(rng.random_range(0..n)));
        match world.distance(s, g) {
            Some(d) if d >= need => pairs.push((s, g)),
            _ => {}
        }
    }
    Ok(pairs)
}

/// Runs every evaluation episode of one variant. Episode `i` uses the same
/// pair and random stream for every variant.
pub fn run_episodes(b: &Bundle, cfg: &ExperimentConfig, variant: Variant) -> Result<Vec<EpisodeResult>> {
    if !b.value.is_trained() {
        return Err(Error::Untrained("value"));
    }
    if !b.exec.is_trained() {
        return Err(Error::Untrained("executor"));
    }
    let agent = variant.agent(b);
    let horizon = b.world.max_episode_steps();
    eval_pairs(&b.world, &cfg.eval, b.seed)?
        .into_iter()
        .enumerate()
        .map(|(i, (s, g))| {
            let mut rng = rng::substream(b.seed, "episode", i as u64);
            run_episode(&b.world, &agent, s, g, horizon, &cfg.infer, &mut rng)
        })
        .collect()
}

pub fn summarize(variant: Variant, n_candidates: usize, seed: u64, episodes: &[EpisodeResult]) -> MetricsRecord {
    let n = episodes.len();
    let successes = episodes.iter().filter(|e| e.success()).count();
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| episodes.iter().map(f).sum::<f64>() / n.max(1) as f64;
    MetricsRecord {
        variant: variant.to_string(),
        n_candidates,
        seed,
        n_episodes: n,
        successes,
        success_rate: successes as f64 / n.max(1) as f64,
        mean_refinement_calls: mean(&|e| e.mean_refinement_calls()),
        mean_episode_steps: mean(&|e| e.steps as f64),
        wall_updates_per_sec: None,
    }
}

pub fn evaluate(b: &Bundle, cfg: &ExperimentConfig, variant: Variant) -> Result<MetricsRecord> {
    let episodes = run_episodes(b, cfg, variant)?;
    Ok(summarize(variant, cfg.planner.n_candidates, b.seed, &episodes))
}

/// [`evaluate`] that also writes every replanning trace as JSON lines.
pub fn evaluate_with_traces(b: &Bundle, cfg: &ExperimentConfig, variant: Variant, out: &mut dyn Write) -> Result<MetricsRecord> {
    let episodes = run_episodes(b, cfg, variant)?;
    for (i, e) in episodes.iter().enumerate() {
        write_trace_log(out, i, e).map_err(|e| Error::io("trace log", e))?;
    }
    Ok(summarize(variant, cfg.planner.n_candidates, b.seed, &episodes))
}

/// Trains one bundle per seed and evaluates every variant on it, so all
/// variants share the value backend. Records are grouped by variant.
pub fn ablate(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<MetricsRecord>> {
    let mut per_variant = vec![Vec::new(); variants.len()];
    for seed in cfg.seeds() {
        let b = train_all(cfg, seed)?;
        for (slot, &v) in per_variant.iter_mut().zip(variants) {
            slot.push(evaluate(&b, cfg, v)?);
        }
    }
    Ok(per_variant.into_iter().flatten().collect())
}

/// For each seed, trains the value and executor once and a planner per
/// candidate budget, recording planner throughput and full-variant
/// metrics. Records are grouped by `N_c`.
pub fn sweep_candidates(cfg: &ExperimentConfig, ncs: &[usize]) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let world = MazeWorld::named(&cfg.maze_id)?;
    let data = IndexedDataset::new(&world, &cfg.dataset(&world)?)?;
    let mut per_nc = vec![Vec::new(); ncs.len()];
    for seed in cfg.seeds() {
        let value = train_value(&world, &data, &cfg.value, seed)?;
        let exec = train_exec(&world, &data, &value, &cfg.exec)?;
        let mut bundle: Option<Bundle> = None;
        for (slot, &nc) in per_nc.iter_mut().zip(ncs) {
            let pcfg = PlannerConfig { n_candidates: nc, ..cfg.planner };
            let (planner, stats) = train_planner(&world, &data, &value, &pcfg, seed)?;
            let b = match bundle.take() {
                Some(mut b) => {
                    b.planner = planner;
                    b.planner_stats = stats;
                    b
                }
                None => Bundle {
                    seed,
                    world: world.clone(),
                    data: data.clone(),
                    value: value.clone(),
                    planner,
                    exec: exec.clone(),
                    planner_stats: stats,
                },
            };
            let run_cfg = ExperimentConfig { planner: pcfg, ..cfg.clone() };
            let mut rec = evaluate(&b, &run_cfg, Variant::Full)?;
            rec.wall_updates_per_sec = Some(b.planner_stats.tuples_per_sec());
            slot.push(rec);
            bundle = Some(b);
        }
    }
    Ok(per_nc.into_iter().flatten().collect())
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Across-seed summary for one (variant, N_c) group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub variant: String,
    pub n_candidates: usize,
    pub n_seeds: usize,
    pub success_mean: f64,
    pub success_std: f64,
    pub calls_mean: f64,
    pub calls_std: f64,
    pub steps_mean: f64,
    pub steps_std: f64,
    pub updates_per_sec_mean: Option<f64>,
}

/// Groups records by (variant, N_c) in first-appearance order.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in records {
        let k = (r.variant.clone(), r.n_candidates);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(variant, nc)| {
            let group: Vec<&MetricsRecord> = records.iter().filter(|r| r.variant == variant && r.n_candidates == nc).collect();
            let col = |f: fn(&MetricsRecord) -> f64| mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (success_mean, success_std) = col(|r| r.success_rate);
            let (calls_mean, calls_std) = col(|r| r.mean_refinement_calls);
            let (steps_mean, steps_std) = col(|r| r.mean_episode_steps);
            let ups: Option<Vec<f64>> = group.iter().map(|r| r.wall_updates_per_sec).collect();
            Aggregate {
                variant,
                n_candidates: nc,
                n_seeds: group.len(),
                success_mean,
                success_std,
                calls_mean,
                calls_std,
                steps_mean,
                steps_std,
                updates_per_sec_mean: ups.map(|u| mean_std(&u).0),
            }
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, records_to_jsonl(records)).map_err(|e| Error::io(path, e))
}

pub fn records_to_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(i + 1, e.to_string())))
        .collect()
}

/// Aligned text table of aggregates.
pub fn render_table(aggs: &[Aggregate]) -> String {
    let header = ["variant", "N_c", "seeds", "success", "refine calls", "steps", "tuples/s"];
    let rows: Vec<[String; 7]> = aggs
        .iter()
        .map(|a| {
            [
                a.variant.clone(),
                a.n_candidates.to_string(),
                a.n_seeds.to_string(),
                format!("{:.3} ± {:.3}", a.success_mean, a.success_std),
                format!("{:.2} ± {:.2}", a.calls_mean, a.calls_std),
                format!("{:.1} ± {:.1}", a.steps_mean, a.steps_std),
                a.updates_per_sec_mean.map(|u| format!("{u:.0}")).unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(&header.map(String::from));
    out.push('\n');
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// Per-seed records as delimiter-separated values with a header row.
pub fn render_delimited(records: &[MetricsRecord], sep: char) -> String {
    let cols = [
        "variant",
        "n_candidates",
        "seed",
        "n_episodes",
        "successes",
        "success_rate",
        "mean_refinement_calls",
        "mean_episode_steps",
        "wall_updates_per_sec",
    ];
    let mut out = cols.join(&sep.to_string());
    out.push('\n');
    for r in records {
        let fields = [
            r.variant.clone(),
            r.n_candidates.to_string(),
            r.seed.to_string(),
            r.n_episodes.to_string(),
            r.successes.to_string(),
            r.success_rate.to_string(),
            r.mean_refinement_calls.to_string(),
            r.mean_episode_steps.to_string(),
            r.wall_updates_per_sec.map(|u| u.to_string()).unwrap_or_default(),
        ];
        out.push_str(&fields.join(&sep.to_string()));
        out.push('\n');
    }
    out
}
