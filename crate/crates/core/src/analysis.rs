//! Numerical checks of the stylized analysis: the fixed-scale error
//! probability on a 1-D line, approximate contraction under bounded cost
//! error, the refinement stopping bound, and the coverage decomposition of
//! planner success.
//!
//! Everything here is pure given an explicit random stream.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::env::MazeWorld;
use crate::{Error, Result};

/// Complementary error function, Numerical Recipes `erfcc` (Chebyshev fit
/// in `t = 1/(1 + z/2)`). Fractional error below 1.2e-7 for every `x`.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let ans = t * poly.exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Standard normal CDF. Always evaluates `erfc` at a non-negative argument,
/// where its value is at most 1, so the absolute error stays below 6e-8.
pub fn std_normal_cdf(x: f64) -> f64 {
    let e = erfc(x.abs() / std::f64::consts::SQRT_2);
    if x >= 0.0 {
        1.0 - 0.5 * e
    } else {
        0.5 * e
    }
}

/// Distance-dependent noise `Var[xi] = sigma^2 * D^(2 alpha)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub alpha: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64, alpha: f64) -> Result<Self> {
        let m = NoiseModel { sigma, alpha };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Precondition(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Precondition(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// Standard deviation of the estimate at true distance `d`.
    pub fn std_at(&self, d: f64) -> f64 {
        self.sigma * d.powf(self.alpha)
    }
}

fn check_fixed_scale(t: f64, k: f64) -> Result<()> {
    if !(k > 0.0 && k < t && t.is_finite()) {
        return Err(Error::Precondition(format!("need 0 < k < T, got k={k}, T={t}")));
    }
    Ok(())
}

/// Probability that a fixed-scale selector comparing `x+ = k` against
/// `x- = -k` prefers the wrong one when the goal is `T` away.
pub fn p_fix_closed_form(t: f64, k: f64, noise: NoiseModel) -> Result<f64> {
    check_fixed_scale(t, k)?;
    noise.validate()?;
    if noise.sigma == 0.0 {
        return Ok(0.0);
    }
    let spread = ((t - k).powf(2.0 * noise.alpha) + (t + k).powf(2.0 * noise.alpha)).sqrt();
    Ok(std_normal_cdf(-2.0 * k / (noise.sigma * spread)))
}

/// A Monte Carlo frequency with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub p: f64,
    pub se: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_counts(hits: usize, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        McEstimate { p, se: (p * (1.0 - p) / n as f64).sqrt(), n }
    }
}

pub const MIN_MC_SAMPLES: usize = 10_000;

/// Simulates the noisy distance model and counts `D^(x+) > D^(x-)`.
pub fn p_fix_monte_carlo<R: Rng + ?Sized>(
    t: f64,
    k: f64,
    noise: NoiseModel,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_fixed_scale(t, k)?;
    noise.validate()?;
    if n_samples < MIN_MC_SAMPLES {
        return Err(Error::Precondition(format!("need at least {MIN_MC_SAMPLES} samples, got {n_samples}")));
    }
    let (sd_plus, sd_minus) = (noise.std_at(t - k), noise.std_at(t + k));
    let mut wrong = 0;
    for _ in 0..n_samples {
        let xi_plus: f64 = rng.sample(StandardNormal);
        let xi_minus: f64 = rng.sample(StandardNormal);
        if (t - k) + sd_plus * xi_plus > (t + k) + sd_minus * xi_minus {
            wrong += 1;
        }
    }
    Ok(McEstimate::from_counts(wrong, n_samples))
}

/// A finite state set with a true reachability distance.
pub trait StateSpace {
    fn n_states(&self) -> usize;
    /// `None` when `b` is unreachable from `a`.
    fn dist(&self, a: usize, b: usize) -> Option<f64>;
}

/// Integer points `lo..=hi` on a line, indexed from 0.
#[derive(Clone, Copy, Debug)]
pub struct Line {
    pub lo: i64,
    pub hi: i64,
}

impl Line {
    pub fn new(lo: i64, hi: i64) -> Self {
        assert!(lo <= hi, "empty line");
        Line { lo, hi }
    }

    pub fn index(&self, x: i64) -> usize {
        assert!((self.lo..=self.hi).contains(&x), "{x} outside line");
        (x - self.lo) as usize
    }

    pub fn coord(&self, i: usize) -> i64 {
        self.lo + i as i64
    }
}

impl StateSpace for Line {
    fn n_states(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    fn dist(&self, a: usize, b: usize) -> Option<f64> {
        Some((a as f64 - b as f64).abs())
    }
}

impl StateSpace for MazeWorld {
    fn n_states(&self) -> usize {
        self.n_cells()
    }

    fn dist(&self, a: usize, b: usize) -> Option<f64> {
        self.distance(crate::env::CellId(a as u32), crate::env::CellId(b as u32)).map(f64::from)
    }
}

/// True bottleneck cost `max(D*(s,x), D*(x,g))`, infinite if either leg is
/// unreachable.
pub fn true_decomposition_cost<S: StateSpace + ?Sized>(space: &S, s: usize, x: usize, g: usize) -> f64 {
    match (space.dist(s, x), space.dist(x, g)) {
        (Some(a), Some(b)) => a.max(b),
        _ => f64::INFINITY,
    }
}

fn horizon<S: StateSpace + ?Sized>(space: &S, s: usize, g: usize) -> Result<f64> {
    match space.dist(s, g) {
        Some(t) if t > 0.0 => Ok(t),
        Some(_) => Err(Error::Precondition("contraction needs D*(s,g) > 0".into())),
        None => Err(Error::Precondition("goal unreachable from start".into())),
    }
}

/// All states whose true bottleneck cost is at most `rho * D*(s,g)`,
/// by exhaustive enumeration.
pub fn contraction_set<S: StateSpace + ?Sized>(space: &S, s: usize, g: usize, rho: f64) -> Result<Vec<usize>> {
    let t = horizon(space, s, g)?;
    Ok((0..space.n_states()).filter(|&x| true_decomposition_cost(space, s, x, g) <= rho * t).collect())
}

/// Contraction parameters: target factor `rho`, good-candidate factor
/// `rho0`, uniform cost error fraction `eps` and selector slack `beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContractionSpec {
    pub rho: f64,
    pub rho0: f64,
    pub eps: f64,
    pub beta: f64,
}

impl ContractionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.5 && self.rho < 1.0) {
            return Err(Error::Precondition(format!("rho must lie in (1/2, 1), got {}", self.rho)));
        }
        if !(self.rho0 >= 0.5 && self.rho0 < self.rho) {
            return Err(Error::Precondition(format!("rho0 must lie in [1/2, rho), got {}", self.rho0)));
        }
        if !(self.eps >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Precondition("eps and beta must be non-negative".into()));
        }
        Ok(())
    }

    /// The exact-minimizer hypothesis `eps < (rho - rho0) / 2`.
    pub fn exact_condition(&self) -> bool {
        self.eps < (self.rho - self.rho0) / 2.0
    }

    /// The approximate-selector hypothesis `eps < (rho - rho0 - beta) / 2`.
    pub fn selector_condition(&self) -> bool {
        self.eps < (self.rho - self.rho0 - self.beta) / 2.0
    }

    /// Largest error fraction that still satisfies the exact condition,
    /// backed off by `margin`.
    pub fn boundary_eps(rho: f64, rho0: f64, margin: f64) -> f64 {
        (rho - rho0) / 2.0 - margin
    }
}

/// Candidates for one (s, g) decision, described by their true
/// decomposition costs and the true horizon `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateInstance {
    pub t: f64,
    pub costs: Vec<f64>,
}

impl CandidateInstance {
    pub fn from_space<S: StateSpace + ?Sized>(space: &S, s: usize, g: usize, candidates: &[usize]) -> Result<Self> {
        let t = horizon(space, s, g)?;
        let costs = candidates.iter().map(|&x| true_decomposition_cost(space, s, x, g)).collect();
        Ok(CandidateInstance { t, costs })
    }

    pub fn has_good_candidate(&self, rho0: f64) -> bool {
        self.costs.iter().any(|&c| c <= rho0 * self.t)
    }

    fn in_set(&self, i: usize, rho: f64) -> bool {
        self.costs[i] <= rho * self.t
    }

    /// Counts the two violation kinds for one perturbed cost vector: some
    /// exact minimizer outside `G_rho`, and some `beta T`-approximate
    /// choice outside `G_rho`. Both are adversarial over ties.
    fn violations(&self, est: &[f64], rho: f64, beta: f64) -> (bool, bool) {
        let min = est.iter().copied().fold(f64::INFINITY, f64::min);
        let mut exact = false;
        let mut approx = false;
        for (i, &c) in est.iter().enumerate() {
            if self.in_set(i, rho) {
                continue;
            }
            exact |= c == min;
            approx |= c <= min + beta * self.t;
        }
        (exact, approx)
    }
}

/// Outcome of a contraction check. `exact_violations` counts minimizers
/// outside `G_rho`; `selector_violations` counts `beta`-approximate picks
/// outside `G_rho`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ContractionReport {
    pub trials: usize,
    pub exact_violations: usize,
    pub selector_violations: usize,
}

impl ContractionReport {
    fn add(&mut self, (exact, approx): (bool, bool)) {
        self.trials += 1;
        self.exact_violations += exact as usize;
        self.selector_violations += approx as usize;
    }

    fn merge(&mut self, other: &ContractionReport) {
        self.trials += other.trials;
        self.exact_violations += other.exact_violations;
        self.selector_violations += other.selector_violations;
    }
}

fn check_instance(spec: &ContractionSpec, inst: &CandidateInstance) -> Result<()> {
    spec.validate()?;
    if !inst.has_good_candidate(spec.rho0) {
        return Err(Error::Precondition(format!("no candidate with C* <= rho0 * T (rho0 = {})", spec.rho0)));
    }
    Ok(())
}

/// Random perturbations with `sup |C^ - C*| <= eps T`. Half the trials
/// draw each error uniformly, half put it on the boundary with a random
/// sign.
pub fn verify_contraction<R: Rng + ?Sized>(
    spec: &ContractionSpec,
    inst: &CandidateInstance,
    n_trials: usize,
    rng: &mut R,
) -> Result<ContractionReport> {
    check_instance(spec, inst)?;
    let bound = spec.eps * inst.t;
    let mut report = ContractionReport::default();
    let mut est = vec![0.0; inst.costs.len()];
    for trial in 0..n_trials {
        for (e, &c) in est.iter_mut().zip(&inst.costs) {
            let err = if trial % 2 == 0 {
                rng.random_range(-1.0..=1.0) * bound
            } else if rng.random::<bool>() {
                bound
            } else {
                -bound
            };
            *e = c + err;
        }
        report.add(inst.violations(&est, spec.rho, spec.beta));
    }
    Ok(report)
}

pub const MAX_EXHAUSTIVE_CANDIDATES: usize = 20;

/// Every sign pattern of boundary errors `+-eps T`. The worst case for any
/// single candidate (push it down, push the rest up) is one of these
/// vertices, so zero violations here covers the whole error box.
pub fn verify_contraction_exhaustive(spec: &ContractionSpec, inst: &CandidateInstance) -> Result<ContractionReport> {
    check_instance(spec, inst)?;
    let n = inst.costs.len();
    if n > MAX_EXHAUSTIVE_CANDIDATES {
        return Err(Error::Precondition(format!("exhaustive search is limited to {MAX_EXHAUSTIVE_CANDIDATES} candidates, got {n}")));
    }
    let bound = spec.eps * inst.t;
    let mut report = ContractionReport::default();
    let mut est = vec![0.0; n];
    for mask in 0u32..(1u32 << n) {
        for (i, e) in est.iter_mut().enumerate() {
            *e = inst.costs[i] + if mask >> i & 1 == 1 { bound } else { -bound };
        }
        report.add(inst.violations(&est, spec.rho, spec.beta));
    }
    Ok(report)
}

/// Runs [`verify_contraction`] and [`verify_contraction_exhaustive`] over random
/// instances drawn from `space`: a random pair with `D* >= min_t`, a random
/// candidate subset padded with one good candidate. Returns the random and
/// exhaustive reports separately.
pub fn verify_contraction_on_space<S: StateSpace + ?Sized, R: Rng + ?Sized>(
    space: &S,
    spec: &ContractionSpec,
    n_instances: usize,
    n_candidates: usize,
    trials_per_instance: usize,
    min_t: f64,
    rng: &mut R,
) -> Result<(ContractionReport, ContractionReport)> {
    let n = space.n_states();
    let mut random = ContractionReport::default();
    let mut exhaustive = ContractionReport::default();
    let mut built = 0;
    let mut attempts = 0;
    while built < n_instances {
        attempts += 1;
        if attempts > 100 * n_instances.max(1) {
            return Err(Error::Precondition("could not build instances with a good candidate".into()));
        }
        let (s, g) = (rng.random_range(0..n), rng.random_range(0..n));
        let Some(t) = space.dist(s, g) else { continue };
        if t < min_t {
            continue;
        }
        let good: Vec<usize> = (0..n).filter(|&x| true_decomposition_cost(space, s, x, g) <= spec.rho0 * t).collect();
        if good.is_empty() {
            continue;
        }
        let mut cands = vec![good[rng.random_range(0..good.len())]];
        while cands.len() < n_candidates {
            cands.push(rng.random_range(0..n));
        }
        let inst = CandidateInstance::from_space(space, s, g, &cands)?;
        random.merge(&verify_contraction(spec, &inst, trials_per_instance, rng)?);
        if n_candidates <= MAX_EXHAUSTIVE_CANDIDATES {
            exhaustive.merge(&verify_contraction_exhaustive(spec, &inst)?);
        }
        built += 1;
    }
    Ok((random, exhaustive))
}

/// A violated-hypothesis instance with explicit errors that puts a
/// minimizer (or a `beta`-approximate pick) outside `G_rho`. Returns the
/// instance and the perturbed cost vector; both errors stay within
/// `eps T`.
///
/// The good candidate sits at `rho0 T` and is pushed up by `eps T`; the bad
/// one sits just outside `rho T` and is pushed down by `eps T`.
pub fn negative_control(spec: &ContractionSpec, t: f64) -> Result<(CandidateInstance, Vec<f64>)> {
    spec.validate()?;
    let gap = (spec.rho - spec.rho0 - spec.beta - 2.0 * spec.eps) * t;
    if gap >= 0.0 {
        return Err(Error::Precondition("hypothesis holds; no counterexample exists".into()));
    }
    // Bad candidate overshoots rho T by a third of the available slack.
    let bad = spec.rho * t + (-gap / 3.0).min(0.5 * (1.0 - spec.rho) * t);
    let inst = CandidateInstance { t, costs: vec![spec.rho0 * t, bad] };
    let est = vec![spec.rho0 * t + spec.eps * t, bad - spec.eps * t];
    Ok((inst, est))
}

/// Evaluates a [`negative_control`] perturbation.
pub fn negative_control_violations(spec: &ContractionSpec, t: f64) -> Result<ContractionReport> {
    let (inst, est) = negative_control(spec, t)?;
    let mut report = ContractionReport::default();
    report.add(inst.violations(&est, spec.rho, spec.beta));
    Ok(report)
}

/// Smallest `L` with `rho^L * T0 <= r`, i.e. `ceil(log(T0/r) / log(1/rho))`
/// computed without floating off-by-one at exact powers.
pub fn stopping_bound(t0: f64, r: f64, rho: f64) -> Result<u32> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Precondition(format!("rho must lie in (0, 1), got {rho}")));
    }
    if !(r > 0.0 && r <= t0 && t0.is_finite()) {
        return Err(Error::Precondition(format!("need 0 < r <= T0, got r={r}, T0={t0}")));
    }
    let tol = 1e-12 * r;
    let within = |l: u32| rho.powi(l as i32) * t0 <= r + tol;
    let mut l = ((t0 / r).ln() / (1.0 / rho).ln()).ceil().max(0.0) as u32;
    while !within(l) {
        l += 1;
    }
    while l > 0 && within(l - 1) {
        l -= 1;
    }
    debug_assert!(within(l));
    Ok(l)
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Precondition(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// Probability that `n_c` i.i.d. draws include at least one state of mass
/// `q`.
pub fn coverage_bound(q: f64, n_c: usize) -> Result<f64> {
    check_prob("q", q)?;
    if n_c == 0 {
        return Err(Error::Precondition("N_c must be >= 1".into()));
    }
    Ok(1.0 - (1.0 - q).powi(n_c as i32))
}

/// `sum(deltas) + psi_terminal`, clamped to 1.
pub fn union_bound(deltas: &[f64], psi_terminal: f64) -> Result<f64> {
    for &d in deltas {
        check_prob("delta", d)?;
    }
    check_prob("psi", psi_terminal)?;
    Ok((deltas.iter().sum::<f64>() + psi_terminal).min(1.0))
}

/// Candidate pool for the coverage check: true decomposition costs of every
/// state and a replay distribution over them.
#[derive(Clone, Debug)]
pub struct CoverageInstance {
    pub t: f64,
    pub costs: Vec<f64>,
    pub weights: Vec<f64>,
}

impl CoverageInstance {
    pub fn from_space<S: StateSpace + ?Sized>(space: &S, s: usize, g: usize, weights: Vec<f64>) -> Result<Self> {
        let t = horizon(space, s, g)?;
        if weights.len() != space.n_states() {
            return Err(Error::Precondition("one replay weight per state required".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Precondition("replay weights must be non-negative with positive mass".into()));
        }
        let costs = (0..space.n_states()).map(|x| true_decomposition_cost(space, s, x, g)).collect();
        Ok(CoverageInstance { t, costs, weights })
    }

    /// Exact replay mass of states with `C* <= rho0 T`.
    pub fn contraction_mass(&self, rho0: f64) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let good: f64 = self
            .weights
            .iter()
            .zip(&self.costs)
            .filter(|(_, &c)| c <= rho0 * self.t)
            .map(|(w, _)| w)
            .sum();
        good / total
    }
}

/// How the simulated value and planner misbehave. With probability
/// `p_value_fail` a trial's cost errors are drawn from `[-big, big] * T`
/// instead of `[-eps, eps] * T`; with probability `p_planner_fail` the
/// planner picks a uniformly random candidate instead of a
/// `beta`-approximate one. Failure rates are then measured, not assumed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FaultModel {
    pub p_value_fail: f64,
    pub value_fail_scale: f64,
    pub p_planner_fail: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CoverageReport {
    pub q: f64,
    pub delta_v: f64,
    pub delta_pi: f64,
    pub success: McEstimate,
    pub bound: f64,
    pub passed: bool,
}

/// Simulates `n_trials` planner decisions and compares the success rate
/// against `1 - (1-q)^N_c - delta_V - delta_pi`.
pub fn verify_coverage<R: Rng + ?Sized>(
    inst: &CoverageInstance,
    n_c: usize,
    spec: &ContractionSpec,
    faults: &FaultModel,
    n_trials: usize,
    rng: &mut R,
) -> Result<CoverageReport> {
    spec.validate()?;
    if !(spec.rho0 + spec.beta + 2.0 * spec.eps < spec.rho) {
        return Err(Error::Precondition("need rho0 + beta + 2 eps < rho".into()));
    }
    check_prob("p_value_fail", faults.p_value_fail)?;
    check_prob("p_planner_fail", faults.p_planner_fail)?;
    if n_trials == 0 || n_c == 0 {
        return Err(Error::Precondition("need n_trials >= 1 and N_c >= 1".into()));
    }
    let q = inst.contraction_mass(spec.rho0);
    let cdf: Vec<f64> = inst
        .weights
        .iter()
        .scan(0.0, |acc, &w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let total = *cdf.last().expect("non-empty");
    let t = inst.t;
    let (mut value_fails, mut planner_fails, mut hits) = (0, 0, 0);
    let mut cand = vec![0usize; n_c];
    let mut est = vec![0.0; n_c];
    let mut near = Vec::with_capacity(n_c);
    for _ in 0..n_trials {
        for c in cand.iter_mut() {
            let u = rng.random::<f64>() * total;
            *c = cdf.partition_point(|&x| x <= u).min(cdf.len() - 1);
        }
        let scale = if rng.random::<f64>() < faults.p_value_fail { faults.value_fail_scale } else { spec.eps };
        let mut sup: f64 = 0.0;
        for (e, &c) in est.iter_mut().zip(&cand) {
            let err = rng.random_range(-1.0..=1.0) * scale * t;
            sup = sup.max(err.abs());
            *e = inst.costs[c] + err;
        }
        value_fails += (sup > spec.eps * t) as usize;
        let min = est.iter().copied().fold(f64::INFINITY, f64::min);
        let pick = if rng.random::<f64>() < faults.p_planner_fail {
            rng.random_range(0..n_c)
        } else {
            near.clear();
            near.extend((0..n_c).filter(|&i| est[i] <= min + spec.beta * t));
            near[rng.random_range(0..near.len())]
        };
        planner_fails += (est[pick] > min + spec.beta * t) as usize;
        hits += (inst.costs[cand[pick]] <= spec.rho * t) as usize;
    }
    let delta_v = value_fails as f64 / n_trials as f64;
    let delta_pi = planner_fails as f64 / n_trials as f64;
    let success = McEstimate::from_counts(hits, n_trials);
    let bound = (coverage_bound(q, n_c)? - delta_v - delta_pi).clamp(0.0, 1.0);
    let passed = success.p >= bound - 3.0 * success.se;
    Ok(CoverageReport { q, delta_v, delta_pi, success, bound, passed })
}
