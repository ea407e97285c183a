use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cfhrl::checks::{self, CheckRecord, STITCH_VARIANTS};
use cfhrl::env::{MazeWorld, Regime};
use cfhrl::harness::{
    ablate, aggregate, evaluate, evaluate_with_traces, read_records, render_delimited, render_table, seed_dir,
    train_all, write_records, Bundle, ExperimentConfig, MetricsRecord, Variant,
};

#[derive(Parser)]
#[command(name = "cfhrl", about = "Coarse-to-fine hierarchical offline GCRL on tabular mazes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    /// Maze defaults.
    Default,
    /// Giant maze, stitch data, long-horizon evaluation pairs.
    GiantStitch,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point when no config file is given.
    #[arg(long, value_enum, default_value = "default")]
    protocol: Protocol,
    #[arg(long)]
    maze: Option<String>,
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Any config field, e.g. `--set value.n_updates=50000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.protocol) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Protocol::GiantStitch) => ExperimentConfig::giant_stitch(),
            (None, Protocol::Default) => {
                let maze = self.maze.as_deref().unwrap_or("small");
                ExperimentConfig::for_maze(maze, self.regime.unwrap_or(Regime::Navigate))
            }
        };
        if let Some(m) = &self.maze {
            cfg.maze_id = m.clone();
        }
        if let Some(r) = self.regime {
            cfg.regime = r;
        }
        if let Some(n) = self.seeds {
            cfg.n_seeds = n;
        }
        if let Some(b) = self.seed_base {
            cfg.seed_base = b;
        }
        if let Some(n) = self.episodes {
            cfg.eval.n_episodes = n;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the offline dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train value, planner and executor for every seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint root; one `seed_<n>` directory per seed.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained checkpoints with the configured variant.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-replan trace log (JSON lines), seed 0 only.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Train once per seed and evaluate several variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants; defaults to the whole ablation table.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Planner candidate-budget sweep.
    SweepNc {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,4,8,16,32")]
        nc: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Numerical checks of the analysis.
    Analyze {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report as JSON lines; printed to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render stored metrics as tables and delimited files.
    Report {
        /// Metrics files written by eval, ablate or sweep-nc.
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        /// Directory for `table.txt`, `records.tsv` and `summary.csv`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn print_checks(checks: &[CheckRecord]) -> bool {
    for c in checks {
        println!("{}", c.line());
    }
    checks.iter().all(|c| c.passed)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join("config.txt"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenData { common, out } => {
            let cfg = common.resolve()?;
            let world = MazeWorld::named(&cfg.maze_id)?;
            let data = cfg.dataset(&world)?;
            data.save(&out)?;
            println!("wrote {} trajectories ({} transitions) to {}", data.trajectories.len(), data.n_transitions(), out.display());
            Ok(true)
        }
        Cmd::Train { common, out } => {
            let cfg = common.resolve()?;
            write_config(&out, &cfg)?;
            for seed in cfg.seeds() {
                let t0 = Instant::now();
                let b = train_all(&cfg, seed)?;
                b.save(&seed_dir(&out, seed))?;
                println!(
                    "seed {seed}: trained in {:.1} s, {} planner anchors, {:.0} tuples/s",
                    t0.elapsed().as_secs_f64(),
                    b.planner.table.n_anchors(),
                    b.planner_stats.tuples_per_sec()
                );
            }
            Ok(true)
        }
        Cmd::Eval { common, checkpoints, out, traces } => {
            let cfg = common.resolve()?;
            let mut records = Vec::new();
            for seed in cfg.seeds() {
                let dir = seed_dir(&checkpoints, seed);
                if !dir.exists() {
                    bail!("no checkpoints for seed {seed} at {}", dir.display());
                }
                let b = Bundle::load(&cfg, seed, &dir)?;
                let rec = match (&traces, seed == cfg.seed_base) {
                    (Some(path), true) => {
                        let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                        evaluate_with_traces(&b, &cfg, cfg.variant, &mut BufWriter::new(f))?
                    }
                    _ => evaluate(&b, &cfg, cfg.variant)?,
                };
                records.push(rec);
            }
            finish_records(&out, &records)?;
            Ok(true)
        }
        Cmd::Ablate { common, variants, out } => {
            let cfg = common.resolve()?;
            let variants = if variants.is_empty() { Variant::ablation_suite() } else { variants };
            let t0 = Instant::now();
            let records = ablate(&cfg, &variants)?;
            finish_records(&out, &records)?;
            if STITCH_VARIANTS.iter().all(|v| variants.contains(v)) {
                let o = checks::stitch_checks(&cfg, records, t0);
                return Ok(print_checks(&[o.gain, o.collapse]));
            }
            Ok(true)
        }
        Cmd::SweepNc { common, nc, out } => {
            let cfg = common.resolve()?;
            let (check, records) = checks::candidate_budget(&cfg, &nc)?;
            finish_records(&out, &records)?;
            Ok(print_checks(&[check]))
        }
        Cmd::Analyze { seed, out } => {
            let report = checks::analysis_suite(seed)?;
            if let Some(path) = out {
                let mut text = String::new();
                for c in &report {
                    text.push_str(&serde_json::to_string(c)?);
                    text.push('\n');
                }
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(print_checks(&report))
        }
        Cmd::Report { metrics, out_dir } => {
            let mut records = Vec::new();
            for p in &metrics {
                records.extend(read_records(p)?);
            }
            let aggs = aggregate(&records);
            let table = render_table(&aggs);
            print!("{table}");
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                fs::write(dir.join("table.txt"), &table)?;
                fs::write(dir.join("records.tsv"), render_delimited(&records, '\t'))?;
                let mut csv = String::from("variant,n_candidates,n_seeds,success_mean,success_std,calls_mean,calls_std,steps_mean,steps_std,updates_per_sec_mean\n");
                for a in &aggs {
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{}\n",
                        a.variant,
                        a.n_candidates,
                        a.n_seeds,
                        a.success_mean,
                        a.success_std,
                        a.calls_mean,
                        a.calls_std,
                        a.steps_mean,
                        a.steps_std,
                        a.updates_per_sec_mean.map(|u| u.to_string()).unwrap_or_default()
                    ));
                }
                fs::write(dir.join("summary.csv"), csv)?;
            }
            Ok(true)
        }
    }
}

fn finish_records(out: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_records(out, records)?;
    print!("{}", render_table(&aggregate(records)));
    Ok(())
}
