use cfhrl::anchor::AnchorTable;
use cfhrl::env::{Action, MazeWorld, Regime};
use cfhrl::exec::{ExecConfig, ExecPolicies};
use cfhrl::harness::{evaluate, run_episodes, train_all, Bundle, ExperimentConfig, Variant};
use cfhrl::planner::{train_planner, PlannerConfig, PlannerPolicy, TrainStats};
use cfhrl::value::{ValueConfig, ValueModel};

fn small_cfg() -> ExperimentConfig {
    let mut c = ExperimentConfig::for_maze("small", Regime::Navigate);
    c.n_trajectories = 400;
    c.value.n_updates = 10_000;
    c.planner.n_tuples = 10_000;
    c.n_seeds = 1;
    c.eval.n_episodes = 30;
    c
}

/// Shortest-path executor: `pi_a(s, z)` is a BFS-optimal move and
/// `pi_z(s, g) = g`.
fn oracle_exec(w: &MazeWorld) -> ExecPolicies {
    let mut pi_a = AnchorTable::new(w.n_cells());
    let mut pi_z = AnchorTable::new(w.n_cells());
    for s in w.cell_ids() {
        for z in w.cell_ids() {
            pi_z.add(s, z, z.0, 1.0);
            let a = if s == z {
                Action::Stay
            } else {
                let d = w.distance_raw(s, z);
                w.open_moves(s).find(|&a| w.distance_raw(w.step_id(s, a), z) + 1 == d).unwrap()
            };
            pi_a.add(s, z, a.id() as u32, 1.0);
        }
    }
    pi_a.freeze(w).unwrap();
    pi_z.freeze(w).unwrap();
    ExecPolicies { maze_id: w.id().into(), config: ExecConfig::default(), pi_z, pi_a }
}

fn oracle_bundle(cfg: &ExperimentConfig) -> Bundle {
    let trained = train_all(cfg, 0).unwrap();
    let value = ValueModel::oracle(&trained.world, ValueConfig::default());
    let (planner, planner_stats) =
        train_planner(&trained.world, &trained.data, &value, &PlannerConfig { n_tuples: 20_000, ..cfg.planner }, 0).unwrap();
    Bundle { exec: oracle_exec(&trained.world), value, planner, planner_stats, ..trained }
}

#[test]
fn oracle_policies_succeed_everywhere() {
    let cfg = small_cfg();
    let b = oracle_bundle(&cfg);
    for v in [Variant::Full, Variant::Flat, Variant::NoPlanner, Variant::NoAbstraction] {
        let rec = evaluate(&b, &cfg, v).unwrap();
        assert_eq!(rec.success_rate, 1.0, "{v}");
    }
}

#[test]
fn untrained_planner_degrades_gracefully() {
    let cfg = small_cfg();
    let mut b = train_all(&cfg, 0).unwrap();
    b.planner = PlannerPolicy { maze_id: "small".into(), config: cfg.planner, table: AnchorTable::new(b.world.n_cells()) };
    b.planner_stats = TrainStats::default();
    let episodes = run_episodes(&b, &cfg, Variant::Full).unwrap();
    let rec = evaluate(&b, &cfg, Variant::Full).unwrap();
    assert!((0.0..=1.0).contains(&rec.success_rate));
    let traces: Vec<_> = episodes.iter().flat_map(|e| &e.traces).collect();
    // Far pairs fail to propose and fall back to the goal itself.
    assert!(traces.iter().any(|t| t.fallback_used));
    assert!(traces.iter().all(|t| t.stopping_level == 0));
}

#[test]
fn training_is_reproducible() {
    let cfg = small_cfg();
    let a = train_all(&cfg, 3).unwrap();
    let b = train_all(&cfg, 3).unwrap();
    assert_eq!(a.value.to_text(), b.value.to_text());
    assert_eq!(a.planner.to_text(), b.planner.to_text());
    assert_eq!(a.exec.to_text(), b.exec.to_text());
    let c = train_all(&cfg, 4).unwrap();
    assert_ne!(a.value.to_text(), c.value.to_text());
}

#[test]
fn variants_share_one_value_backend() {
    let cfg = small_cfg();
    let b = train_all(&cfg, 0).unwrap();
    for v in Variant::ablation_suite() {
        let agent = v.agent(&b);
        assert!(std::ptr::eq(agent.value, &b.value));
        assert!(std::ptr::eq(agent.exec, &b.exec));
    }
}

#[test]
fn checkpoints_reload_to_identical_metrics() {
    let cfg = small_cfg();
    let b = train_all(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    b.save(dir.path()).unwrap();
    let back = Bundle::load(&cfg, 0, dir.path()).unwrap();
    assert_eq!(evaluate(&b, &cfg, Variant::Full).unwrap(), evaluate(&back, &cfg, Variant::Full).unwrap());
}
