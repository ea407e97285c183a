//! Acceptance checks shared by the `analyze` subcommand and the acceptance
//! test target. Each returns a [`CheckRecord`] with its measured values.

use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{
    negative_control_violations, p_fix_closed_form, p_fix_monte_carlo, verify_contraction_on_space, verify_coverage,
    ContractionSpec, CoverageInstance, FaultModel, Line, NoiseModel, StateSpace,
};
use crate::dataset::{generate_dataset, GenConfig, IndexedDataset};
use crate::env::{CellId, MazeWorld, Regime};
use crate::harness::{ablate, aggregate, run_episodes, sweep_candidates, Bundle, ExperimentConfig, MetricsRecord, Variant};
use crate::infer::{first_passage, Depth};
use crate::rng;
use crate::value::{expectile_grad, expectile_loss, train_value, ValueConfig};
use crate::Result;

#[derive(Clone, Debug, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub seconds: f64,
    pub detail: Value,
}

impl CheckRecord {
    fn new(name: &str, passed: bool, started: Instant, detail: Value) -> Self {
        CheckRecord { name: name.to_string(), passed, seconds: started.elapsed().as_secs_f64(), detail }
    }

    /// `PASS name (1.2 s): detail`, with any per-case `cases` array left
    /// out for brevity.
    pub fn line(&self) -> String {
        let mut shown = self.detail.clone();
        if let Some(obj) = shown.as_object_mut() {
            obj.remove("cases");
        }
        format!("{} {} ({:.1} s): {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.seconds, shown)
    }
}

/// Analytic expectile gradient against central differences.
pub fn expectile_gradient() -> CheckRecord {
    let t0 = Instant::now();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for tau in [0.5, 0.7, 0.9] {
        for u in [-3.0, -0.1, 0.1, 3.0] {
            let fd = (expectile_loss(u + h, tau) - expectile_loss(u - h, tau)) / (2.0 * h);
            let g = expectile_grad(u, tau);
            worst = worst.max(((g - fd) / g).abs());
        }
    }
    let passed = worst <= 1e-6 && t0.elapsed().as_secs_f64() < 1.0;
    CheckRecord::new("expectile_gradient", passed, t0, json!({ "max_rel_err": worst, "tol": 1e-6 }))
}

/// Fraction of pairs with `d <= 20` whose trained value is within 0.25 of
/// the discounted shortest-path cost.
pub fn value_oracle_fraction(cfg: &ValueConfig, n_trajectories: usize, seed: u64) -> Result<(f64, usize)> {
    let w = MazeWorld::named("small")?;
    let ds = generate_dataset(&w, &GenConfig::new(Regime::Navigate, n_trajectories), seed)?;
    let data = IndexedDataset::new(&w, &ds)?;
    let model = train_value(&w, &data, cfg, seed)?;
    let (mut ok, mut n) = (0, 0);
    for s in w.cell_ids() {
        for g in w.cell_ids() {
            let Some(d) = w.distance(s, g) else { continue };
            if d > 20 {
                continue;
            }
            n += 1;
            let v = model.conservative_value(s, g);
            if (v + cfg.discounted_cost(d)).abs() <= 0.25 {
                ok += 1;
            }
        }
    }
    Ok((ok as f64 / n as f64, n))
}

/// Value agreement on the 11x11 maze with dense navigate data. Passes on
/// the `accepted` config; `reference` is reported alongside.
pub fn value_oracle(accepted: &ValueConfig, reference: &ValueConfig, n_trajectories: usize) -> Result<CheckRecord> {
    let t0 = Instant::now();
    let (frac, n) = value_oracle_fraction(accepted, n_trajectories, 0)?;
    let secs = t0.elapsed().as_secs_f64();
    let (ref_frac, _) = value_oracle_fraction(reference, n_trajectories, 0)?;
    let passed = frac >= 0.95 && secs < 120.0;
    Ok(CheckRecord::new(
        "value_oracle",
        passed,
        t0,
        json!({
            "pairs": n, "fraction_within_0.25": frac, "required": 0.95,
            "tau": accepted.tau, "init_value": accepted.init_value, "train_seconds": secs,
            "reference_tau": reference.tau, "reference_init_value": reference.init_value,
            "reference_fraction": ref_frac,
        }),
    ))
}

/// Closed form against Monte Carlo over a 3x3x2 (T, sigma, alpha) grid, and
/// the large-T limit.
pub fn fixed_scale_snr(seed: u64) -> Result<CheckRecord> {
    let t0 = Instant::now();
    let k = 2.0;
    let n = 100_000;
    let mut worst_z: f64 = 0.0;
    let mut points = 0;
    for (i, t) in [5.0, 20.0, 100.0].into_iter().enumerate() {
        for (j, sigma) in [0.1, 0.5, 1.0].into_iter().enumerate() {
            for (l, alpha) in [0.5, 1.0].into_iter().enumerate() {
                let m = NoiseModel::new(sigma, alpha)?;
                let p = p_fix_closed_form(t, k, m)?;
                let mut r = rng::substream(seed, "pfix-grid", (i * 6 + j * 2 + l) as u64);
                let est = p_fix_monte_carlo(t, k, m, n, &mut r)?;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                let diff = (est.p - p).abs();
                let z = if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
                worst_z = worst_z.max(z);
                points += 1;
            }
        }
    }
    let limit = p_fix_closed_form(1e8, k, NoiseModel::new(1.0, 1.0)?)?;
    let passed = worst_z <= 3.0 && (limit - 0.5).abs() < 1e-3 && t0.elapsed().as_secs_f64() < 60.0;
    Ok(CheckRecord::new(
        "fixed_scale_snr",
        passed,
        t0,
        json!({ "grid_points": points, "samples": n, "max_abs_z": worst_z, "p_fix_1e8": limit }),
    ))
}

/// Zero violations under the hypotheses, at least one constructed
/// violation without them.
pub fn approximate_contraction(seed: u64) -> Result<CheckRecord> {
    let t0 = Instant::now();
    let mut rng = rng::stream(seed, "contraction");
    let w = MazeWorld::named("small")?;
    let line = Line::new(0, 60);
    let configs = [(0.75, 0.55), (0.8, 0.6), (0.9, 0.5)];
    let mut random_trials = 0;
    let mut exhaustive_trials = 0;
    let mut violations = 0;
    let mut selector_trials = 0;
    let mut selector_violations = 0;
    for (rho, rho0) in configs {
        let eps = ContractionSpec::boundary_eps(rho, rho0, 1e-6);
        let exact = ContractionSpec { rho, rho0, eps, beta: 0.0 };
        for (space, n_inst, min_t) in [(&w as &dyn StateSpace, 8, 4.0), (&line as &dyn StateSpace, 6, 8.0)] {
            let (random, exhaustive) = verify_contraction_on_space(space, &exact, n_inst, 12, 2_500, min_t, &mut rng)?;
            random_trials += random.trials;
            exhaustive_trials += exhaustive.trials;
            violations += random.exact_violations + exhaustive.exact_violations;
        }
        let beta = (rho - rho0) / 3.0;
        let sel = ContractionSpec { rho, rho0, eps: (rho - rho0 - beta) / 2.0 - 1e-6, beta };
        let (random, exhaustive) = verify_contraction_on_space(&w, &sel, 6, 12, 2_000, 4.0, &mut rng)?;
        selector_trials += random.trials + exhaustive.trials;
        selector_violations += random.selector_violations + exhaustive.selector_violations;
    }
    let neg_selector = negative_control_violations(&ContractionSpec { rho: 0.8, rho0: 0.6, eps: 0.01, beta: 0.2 }, 20.0)?;
    let neg_exact = negative_control_violations(&ContractionSpec { rho: 0.8, rho0: 0.6, eps: 0.12, beta: 0.0 }, 20.0)?;
    let passed = violations == 0
        && selector_violations == 0
        && random_trials >= 100_000
        && neg_selector.selector_violations >= 1
        && neg_exact.exact_violations >= 1
        && t0.elapsed().as_secs_f64() < 120.0;
    Ok(CheckRecord::new(
        "approximate_contraction",
        passed,
        t0,
        json!({
            "random_trials": random_trials, "exhaustive_trials": exhaustive_trials, "violations": violations,
            "selector_trials": selector_trials, "selector_violations": selector_violations,
            "negative_control_selector": neg_selector.selector_violations,
            "negative_control_exact": neg_exact.exact_violations,
        }),
    ))
}

/// Coverage bound on constructed line and maze instances with measured
/// failure rates.
pub fn coverage_decomposition(seed: u64) -> Result<CheckRecord> {
    let t0 = Instant::now();
    let n_trials = 10_000;
    let spec = ContractionSpec { rho: 0.8, rho0: 0.6, eps: 0.05, beta: 0.05 };
    let mut cases = Vec::new();
    let mut all = true;

    // Line of length 40 with uniform replay: q = 9/41 for rho0 = 0.6.
    let line = Line::new(0, 40);
    let line_inst = CoverageInstance::from_space(&line, 0, 40, vec![1.0; 41])?;
    // Same line reweighted so the good set [16, 24] carries exactly q = 0.1.
    let skewed: Vec<f64> = (0..=40).map(|x| if (16..=24).contains(&x) { 0.1 / 9.0 } else { 0.9 / 32.0 }).collect();
    let q10_inst = CoverageInstance::from_space(&line, 0, 40, skewed)?;
    // Maze with mass skewed toward the start region.
    let w = MazeWorld::named("small")?;
    let (s, g) = farthest_pair(&w);
    let weights: Vec<f64> = w.cell_ids().map(|x| 1.0 / (1.0 + w.distance_raw(s, x) as f64)).collect();
    let maze_inst = CoverageInstance::from_space(&w, s.index(), g.index(), weights)?;

    let faults = [
        FaultModel { p_value_fail: 0.0, value_fail_scale: 0.0, p_planner_fail: 0.0 },
        FaultModel { p_value_fail: 0.1, value_fail_scale: 0.5, p_planner_fail: 0.05 },
        FaultModel { p_value_fail: 0.3, value_fail_scale: 1.0, p_planner_fail: 0.2 },
    ];
    for (ii, (name, inst)) in [("line", &line_inst), ("line_q0.1", &q10_inst), ("maze", &maze_inst)].into_iter().enumerate() {
        for (fi, f) in faults.iter().enumerate() {
            for n_c in [1, 4, 16] {
                let mut r = rng::substream(seed, "prop-a1", (ii * 10_000 + fi * 100 + n_c) as u64);
                let rep = verify_coverage(inst, n_c, &spec, f, n_trials, &mut r)?;
                all &= rep.passed;
                cases.push(json!({
                    "instance": name, "n_c": n_c, "q": rep.q, "delta_v": rep.delta_v, "delta_pi": rep.delta_pi,
                    "success": rep.success.p, "se": rep.success.se, "bound": rep.bound, "passed": rep.passed,
                }));
            }
        }
    }
    let min_margin = cases
        .iter()
        .map(|c| c["success"].as_f64().unwrap_or(0.0) + 3.0 * c["se"].as_f64().unwrap_or(0.0) - c["bound"].as_f64().unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min);
    let passed = all && t0.elapsed().as_secs_f64() < 120.0;
    Ok(CheckRecord::new(
        "coverage_decomposition",
        passed,
        t0,
        json!({ "trials": n_trials, "n_cases": cases.len(), "min_margin": min_margin, "cases": cases }),
    ))
}

fn farthest_pair(w: &MazeWorld) -> (CellId, CellId) {
    let mut best = (CellId(0), CellId(0), 0);
    for s in w.cell_ids() {
        for g in w.cell_ids() {
            let d = w.distance_raw(s, g);
            if d != crate::env::UNREACHABLE && d > best.2 {
                best = (s, g, d);
            }
        }
    }
    (best.0, best.1)
}

/// Stopping levels recomputed from logged traces, the planner-call
/// budget, and step-identity with the no-planner executor at
/// `eps_exec = inf`.
pub fn stopping_mechanics(b: &Bundle, cfg: &ExperimentConfig) -> Result<CheckRecord> {
    let t0 = Instant::now();
    let episodes = run_episodes(b, cfg, Variant::Full)?;
    let mut log = Vec::new();
    for (i, e) in episodes.iter().enumerate() {
        crate::infer::write_trace_log(&mut log, i, e).map_err(|e| crate::Error::io("trace log", e))?;
    }
    let (mut traces, mut level_mismatch, mut over_budget) = (0, 0, 0);
    for line in String::from_utf8_lossy(&log).lines() {
        let rec: Value = serde_json::from_str(line).map_err(|e| crate::Error::Parse(e.to_string()))?;
        let d: Vec<f64> = rec["d_values"].as_array().into_iter().flatten().filter_map(Value::as_f64).collect();
        let level = rec["stopping_level"].as_u64().unwrap_or(u64::MAX) as usize;
        let calls = rec["planner_calls"].as_u64().unwrap_or(u64::MAX) as usize;
        let expected = first_passage(&d, cfg.infer.eps_exec).unwrap_or(d.len().saturating_sub(1));
        level_mismatch += (level != expected) as usize;
        over_budget += (calls > cfg.infer.k_max) as usize;
        traces += 1;
    }

    let mut inf = cfg.clone();
    inf.infer.eps_exec = f64::INFINITY;
    let full = run_episodes(b, &inf, Variant::Full)?;
    let flat = run_episodes(b, &inf, Variant::NoPlanner)?;
    let path_mismatch = full
        .iter()
        .zip(&flat)
        .filter(|(a, c)| {
            let steps = |e: &crate::infer::EpisodeResult| -> Vec<_> { e.traces.iter().flat_map(|t| t.commands.clone()).collect() };
            steps(a) != steps(c) || a.outcome != c.outcome
        })
        .count();
    debug_assert_eq!(Variant::Full.agent(b).depth, Depth::Adaptive);
    let passed = traces > 0 && level_mismatch == 0 && over_budget == 0 && path_mismatch == 0 && t0.elapsed().as_secs_f64() < 60.0;
    Ok(CheckRecord::new(
        "stopping_mechanics",
        passed,
        t0,
        json!({
            "episodes": episodes.len(), "traces": traces, "level_mismatches": level_mismatch,
            "over_budget": over_budget, "eps_inf_path_mismatches": path_mismatch,
        }),
    ))
}

/// Outcome of the giant-stitch ablation: the gain and collapse checks plus
/// the raw records.
pub struct StitchOutcome {
    pub gain: CheckRecord,
    pub collapse: CheckRecord,
    pub records: Vec<MetricsRecord>,
}

pub const STITCH_VARIANTS: [Variant; 4] = [Variant::Full, Variant::Flat, Variant::FixedK(3), Variant::RandomSubgoals];

/// Full vs flat, fixed K=3 and random subgoals on the giant-stitch
/// protocol.
pub fn stitch_ablation(cfg: &ExperimentConfig) -> Result<StitchOutcome> {
    let t0 = Instant::now();
    let records = ablate(cfg, &STITCH_VARIANTS)?;
    Ok(stitch_checks(cfg, records, t0))
}

pub fn stitch_checks(cfg: &ExperimentConfig, records: Vec<MetricsRecord>, t0: Instant) -> StitchOutcome {
    let aggs = aggregate(&records);
    let mean = |v: Variant| aggs.iter().find(|a| a.variant == v.to_string()).map(|a| a.success_mean).unwrap_or(f64::NAN);
    let (full, flat, k3, random) = (mean(Variant::Full), mean(Variant::Flat), mean(Variant::FixedK(3)), mean(Variant::RandomSubgoals));
    let secs = t0.elapsed().as_secs_f64();
    let budget = secs < 1800.0;
    let detail = json!({
        "seeds": cfg.n_seeds, "episodes": cfg.eval.n_episodes, "min_distance": cfg.eval.min_distance,
        "full": full, "flat": flat, "fixed_k3": k3, "random_subgoals": random, "seconds": secs,
    });
    let gain = CheckRecord::new("stitch_gain", full - flat >= 0.30 && full > k3 && budget, t0, detail.clone());
    let collapse = CheckRecord::new("random_subgoal_collapse", random <= flat && budget, t0, detail);
    StitchOutcome { gain, collapse, records }
}

/// Planner throughput strictly decreasing in `N_c` and refinement calls at
/// the largest budget no higher than at the smallest.
pub fn candidate_budget(cfg: &ExperimentConfig, ncs: &[usize]) -> Result<(CheckRecord, Vec<MetricsRecord>)> {
    let t0 = Instant::now();
    let records = sweep_candidates(cfg, ncs)?;
    Ok((candidate_budget_check(&records, ncs, t0), records))
}

pub fn candidate_budget_check(records: &[MetricsRecord], ncs: &[usize], t0: Instant) -> CheckRecord {
    let aggs = aggregate(records);
    let by_nc = |nc: usize| aggs.iter().find(|a| a.n_candidates == nc);
    let ups: Vec<f64> = ncs.iter().map(|&nc| by_nc(nc).and_then(|a| a.updates_per_sec_mean).unwrap_or(f64::NAN)).collect();
    let calls: Vec<f64> = ncs.iter().map(|&nc| by_nc(nc).map(|a| a.calls_mean).unwrap_or(f64::NAN)).collect();
    let success: Vec<f64> = ncs.iter().map(|&nc| by_nc(nc).map(|a| a.success_mean).unwrap_or(f64::NAN)).collect();
    let decreasing = ups.windows(2).all(|w| w[0] > w[1]);
    let fewer_calls = calls.last().zip(calls.first()).is_some_and(|(l, f)| l <= f);
    let passed = ncs.len() >= 2 && decreasing && fewer_calls && t0.elapsed().as_secs_f64() < 1200.0;
    CheckRecord::new(
        "candidate_budget",
        passed,
        t0,
        json!({ "n_c": ncs, "tuples_per_sec": ups, "mean_refinement_calls": calls, "success": success }),
    )
}

/// The cheap analysis checks, in order.
pub fn analysis_suite(seed: u64) -> Result<Vec<CheckRecord>> {
    Ok(vec![expectile_gradient(), fixed_scale_snr(seed)?, approximate_contraction(seed)?, coverage_decomposition(seed)?])
}
