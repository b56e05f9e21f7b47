//! `owod` command-line front-end.
//!
//! Exit codes: 0 on success, 1 on runtime, domain or version errors, 2 on
//! usage or configuration errors.

use std::ffi::OsString;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use owod_core::checkpoint::Checkpoint;
use owod_core::config::RunConfig;
use owod_core::data::{generate_dataset, read_dataset, write_dataset, Dataset, Split};
use owod_core::model::gradcheck::{gradient_check, toy_problem};
use owod_core::model::TrainConfig;
use owod_core::protocol::{evaluate, run_benchmark, run_seed, run_task, temperature_sweep};
use owod_core::report::{multi_seed_csv, summary_csv, write_atomic, EvalReport};
use owod_core::{plot, Error, Result};

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "owod", version, about = "Open-world detection with probabilistic objectness")]
struct Cli {
    /// Run configuration (JSON). Missing fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for data generation and training; replaces the configured seeds.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset (dataset.jsonl).
    Generate,
    /// Train one task; tasks after the first continue from a checkpoint.
    Train {
        #[arg(long, default_value_t = 0)]
        task: usize,
        /// Checkpoint of the previous task.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Dataset file; generated from the config when absent.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a task's test view.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint's task.
        #[arg(long)]
        task: Option<usize>,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Run every task of the schedule for each configured seed.
    Benchmark,
    /// Re-evaluate a trained detector at several objectness temperatures.
    Sweep {
        /// Trained checkpoint; a single-seed benchmark is run when absent.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', value_name = "TAU,...")]
        taus: Option<Vec<f64>>,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on toy problems.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        configs: u64,
    },
    /// Turn report JSON files into summary.csv and SVG plots.
    Report {
        #[arg(required = true, value_name = "REPORT")]
        inputs: Vec<PathBuf>,
    },
}

struct Ctx<'a> {
    out_dir: PathBuf,
    quiet: bool,
    stdout: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn say(&mut self, msg: impl AsRef<str>) {
        if !self.quiet {
            let _ = writeln!(self.stdout, "{}", msg.as_ref());
        }
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        write_atomic(&path, contents)?;
        self.say(format!("wrote {}", path.display()));
        Ok(path)
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    let mut ctx = Ctx {
        out_dir: cli.out.clone(),
        quiet: cli.quiet,
        stdout,
    };
    match run(&cli, &mut ctx) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>> {
    cli.config.as_deref().map(RunConfig::load).transpose()
}

fn with_seed(mut cfg: RunConfig, seed: Option<u64>) -> Result<RunConfig> {
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(path: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    match path {
        Some(p) => {
            let f = std::fs::File::open(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            read_dataset(BufReader::new(f))
        }
        None => generate_dataset(&cfg.dataset),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn describe(r: &EvalReport) -> String {
    format!(
        "task {} seed {} tau {}: map_prev {} map_current {} map_both {} u_recall {} a_ose {} wi {}",
        r.task,
        r.seed,
        r.config.tau,
        fmt_opt(r.map_prev),
        fmt_opt(r.map_current),
        fmt_opt(r.map_both),
        fmt_opt(r.u_recall),
        r.a_ose,
        fmt_opt(r.wi)
    )
}

fn write_report(ctx: &mut Ctx, name: &str, r: &EvalReport) -> Result<()> {
    ctx.write(name, r.to_json()?.as_bytes())?;
    Ok(())
}

fn run(cli: &Cli, ctx: &mut Ctx) -> Result<u8> {
    match &cli.command {
        Command::Generate => {
            let cfg = with_seed(load_config(cli)?.unwrap_or_default(), cli.seed)?;
            let ds = generate_dataset(&cfg.dataset)?;
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf)?;
            ctx.write("dataset.jsonl", &buf)?;
            ctx.say(format!("{} scenes", ds.scenes.len()));
        }
        Command::Train {
            task,
            checkpoint,
            dataset: data_path,
        } => {
            let cfg = with_seed(load_config(cli)?.unwrap_or_default(), cli.seed)?;
            let ds = dataset(data_path.as_deref(), &cfg)?;
            let prev = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            if let Some(p) = &prev {
                if *task == 0 || p.task + 1 != *task {
                    return Err(Error::Protocol(format!(
                        "checkpoint holds task {}, training task {task} needs task {}",
                        p.task,
                        task.wrapping_sub(1)
                    )));
                }
            }
            let state = prev.map(|p| p.state());
            let outcome = run_task(state.as_ref(), &ds, *task, &cfg.benchmark())?;
            if let Some(last) = outcome.train_curve.last() {
                ctx.say(format!("task {task}: final epoch loss {:.6}", last.total));
            }
            Checkpoint::new(&outcome.state, *task, &cfg)
                .save(&ctx.out_dir.join(format!("checkpoint_task{task}.json")))?;
            ctx.say(format!(
                "wrote {}",
                ctx.out_dir.join(format!("checkpoint_task{task}.json")).display()
            ));
            write_report(ctx, &format!("report_task{task}.json"), &outcome.report)?;
            ctx.say(describe(&outcome.report));
        }
        Command::Eval {
            checkpoint,
            task,
            dataset: data_path,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let base = load_config(cli)?.unwrap_or_else(|| ck.config.clone());
            let cfg = with_seed(base, cli.seed)?;
            let t = task.unwrap_or(ck.task);
            let ds = dataset(data_path.as_deref(), &cfg)?;
            let view = ds.task_view(t, Split::Test)?;
            let bench = cfg.benchmark();
            let mut report = evaluate(&ck.detector, &view, t, &bench, &bench.inference, cfg.train.seed)?;
            report.counts.exemplar_scenes = ck.exemplars.scene_ids().len();
            write_report(ctx, &format!("report_task{t}.json"), &report)?;
            ctx.write(&format!("pr_task{t}.svg"), plot::pr_svg(&report).as_bytes())?;
            ctx.say(describe(&report));
        }
        Command::Benchmark => {
            let cfg = with_seed(load_config(cli)?.unwrap_or_default(), cli.seed)?;
            let runs = run_benchmark(&cfg.benchmark())?;
            if let [run] = runs.as_slice() {
                let reports = run.reports();
                for r in &reports {
                    write_report(ctx, &format!("report_task{}.json", r.task), r)?;
                    ctx.write(&format!("pr_task{}.svg", r.task), plot::pr_svg(r).as_bytes())?;
                    ctx.say(describe(r));
                }
                ctx.write("summary.csv", summary_csv(&reports).as_bytes())?;
                let last = run.outcomes.len() - 1;
                let seeded = cfg.clone();
                Checkpoint::new(run.final_state(), last, &seeded).save(&ctx.out_dir.join("checkpoint.json"))?;
                ctx.say(format!("wrote {}", ctx.out_dir.join("checkpoint.json").display()));
            } else {
                let mut all = Vec::new();
                for run in &runs {
                    let reports = run.reports();
                    for r in &reports {
                        write_report(ctx, &format!("report_seed{}_task{}.json", run.seed, r.task), r)?;
                        ctx.say(describe(r));
                    }
                    all.push(reports);
                }
                ctx.write("summary.csv", multi_seed_csv(&all).as_bytes())?;
            }
        }
        Command::Sweep {
            checkpoint,
            taus,
            dataset: data_path,
        } => {
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let base = match (load_config(cli)?, &ck) {
                (Some(c), _) => c,
                (None, Some(ck)) => ck.config.clone(),
                (None, None) => RunConfig::default(),
            };
            let cfg = with_seed(base, cli.seed)?;
            let bench = cfg.benchmark();
            let (detector, t, ds) = match ck {
                Some(ck) => (ck.detector, ck.task, dataset(data_path.as_deref(), &cfg)?),
                None => {
                    let run = run_seed(&bench, cfg.train.seed)?;
                    let t = run.outcomes.len() - 1;
                    (run.final_state().detector.clone(), t, run.dataset)
                }
            };
            let taus = taus.clone().unwrap_or_else(|| cfg.protocol.tau_list.clone());
            let view = ds.task_view(t, Split::Test)?;
            let reports = temperature_sweep(&detector, &view, t, &bench, &taus)?;
            for r in &reports {
                ctx.say(describe(r));
            }
            let mut json = serde_json::to_string_pretty(&reports)?;
            json.push('\n');
            ctx.write("sweep_reports.json", json.as_bytes())?;
            ctx.write("sweep.csv", summary_csv(&reports).as_bytes())?;
            ctx.write("sweep.svg", plot::sweep_svg(&reports)?.as_bytes())?;
        }
        Command::Gradcheck { configs } => {
            let cfg = with_seed(load_config(cli)?.unwrap_or_default(), cli.seed)?;
            let train = TrainConfig {
                alpha: cfg.train.alpha.max(0.1),
                ..cfg.train.clone()
            };
            let mut worst = 0.0f64;
            for seed in 0..*configs {
                let toy = toy_problem(seed, 2, 5);
                let r = gradient_check(&toy.detector, &toy.batch(), &train)?;
                ctx.say(format!(
                    "config {seed}: {} parameters, max relative error {:.3e}",
                    r.parameters, r.max_rel_error
                ));
                worst = worst.max(r.max_rel_error);
                if r.max_rel_error.is_nan() {
                    worst = f64::INFINITY;
                }
            }
            ctx.say(format!("worst {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})"));
            if worst >= GRADCHECK_TOLERANCE {
                return Err(Error::Domain(format!(
                    "gradient check failed: max relative error {worst:e}"
                )));
            }
        }
        Command::Report { inputs } => {
            let mut reports = Vec::new();
            for p in inputs {
                let s = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                reports.push(EvalReport::from_json(&s)?);
            }
            ctx.write("summary.csv", summary_csv(&reports).as_bytes())?;
            let distinct_tasks = {
                let mut t: Vec<usize> = reports.iter().map(|r| r.task).collect();
                t.sort_unstable();
                t.dedup();
                t.len() == reports.len()
            };
            for (i, r) in reports.iter().enumerate() {
                let name = if distinct_tasks {
                    format!("pr_task{}.svg", r.task)
                } else {
                    format!("pr_{i}.svg")
                };
                ctx.write(&name, plot::pr_svg(r).as_bytes())?;
            }
            ctx.write("sweep.svg", plot::sweep_svg(&reports)?.as_bytes())?;
        }
    }
    Ok(0)
}
