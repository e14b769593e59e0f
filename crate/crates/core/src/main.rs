use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opdlab::config::ExperimentConfig;
use opdlab::distill::collect_teacher_trajectories;
use opdlab::metrics::{EvalRecord, MetricsLog, Record};
use opdlab::policy::{Checkpoint, Policy};
use opdlab::runtime::{evaluate_with, run_training, Algo};
use opdlab::seed::mix_seed;
use opdlab::{Env, Error, Result, TeacherPolicy, TeacherTrajectoryStore};

/// Multi-turn on-policy distillation experiments.
///
/// Any config key can be overridden with `--section.key=value`, for example
/// `--train.lr=80 --run.algo=f2b`.
#[derive(Parser, Debug)]
#[command(name = "opdlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect successful teacher trajectories (pass@m) for B2F and SFT.
    Collect {
        config: Option<PathBuf>,
        /// Store file; defaults to `collect.store`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a student and write metrics, CSV and the final checkpoint.
    Train {
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_algo)]
        algo: Option<Algo>,
        /// Run one training per value, e.g. `eta=2,4,6`.
        #[arg(long)]
        sweep: Option<String>,
        /// Run sweep members concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Evaluate a checkpoint end to end at full horizon.
    Eval {
        checkpoint: PathBuf,
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Output file; defaults to `<output_dir>/eval.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Shorthand for `train --sweep`.
    Sweep {
        /// `key=v1,v2,...`; `eta`, `lr` and `seed` are accepted as short keys.
        spec: String,
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_algo)]
        algo: Option<Algo>,
        #[arg(long)]
        parallel: bool,
    },
}

fn parse_algo(s: &str) -> std::result::Result<Algo, String> {
    match s.to_ascii_lowercase().as_str() {
        "opd" => Ok(Algo::Opd),
        "f2b" => Ok(Algo::F2b),
        "b2f" => Ok(Algo::B2f),
        "sft" => Ok(Algo::Sft),
        _ => Err(format!("unknown algorithm `{s}` (opd, f2b, b2f, sft)")),
    }
}

/// Pulls `--section.key=value` arguments out before clap sees them.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--") {
            Some(body) if body.split('=').next().is_some_and(|k| k.contains('.')) => {
                overrides.push(body.to_string())
            }
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli, overrides: &[String]) -> Result<()> {
    match cli.command {
        Command::Collect { config, out } => {
            let cfg = ExperimentConfig::load(config.as_deref(), overrides)?;
            cmd_collect(&cfg, out.as_deref())
        }
        Command::Train {
            config,
            algo,
            sweep,
            parallel,
        } => {
            let cfg = load_with_algo(config.as_deref(), overrides, algo)?;
            match sweep {
                Some(spec) => cmd_sweep(&cfg, &spec, parallel),
                None => cmd_train(&cfg).map(|_| ()),
            }
        }
        Command::Sweep {
            config,
            spec,
            algo,
            parallel,
        } => {
            let cfg = load_with_algo(config.as_deref(), overrides, algo)?;
            cmd_sweep(&cfg, &spec, parallel)
        }
        Command::Eval {
            checkpoint,
            config,
            episodes,
            out,
        } => {
            let mut o = overrides.to_vec();
            if let Some(n) = episodes {
                o.push(format!("eval.episodes={n}"));
            }
            let cfg = ExperimentConfig::load(config.as_deref(), &o)?;
            cmd_eval(&cfg, &checkpoint, out.as_deref())
        }
    }
}

fn load_with_algo(path: Option<&Path>, overrides: &[String], algo: Option<Algo>) -> Result<ExperimentConfig> {
    let mut o = overrides.to_vec();
    if let Some(a) = algo {
        let name = match a {
            Algo::Opd => "opd",
            Algo::F2b => "f2b",
            Algo::B2f => "b2f",
            Algo::Sft => "sft",
        };
        o.push(format!("run.algo={name}"));
    }
    ExperimentConfig::load(path, &o)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_collect(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let rc = cfg.to_run_config();
    let env = Env::new(rc.env.clone())?;
    let teacher = TeacherPolicy::new(env.clone(), rc.teacher)?;
    let store = collect_teacher_trajectories(
        &env,
        &teacher,
        rc.pass_m,
        rc.collect_temperature,
        mix_seed(rc.seed, &[4]),
    )?;
    println!(
        "coverage {}/{} tasks, mean L {:.2}",
        store.len(),
        env.config().task_count,
        store.mean_len()
    );
    if !store.missing.is_empty() {
        println!("tasks without a successful trajectory: {:?}", store.missing);
    }
    store.require_non_empty()?;
    let path = out.unwrap_or(&cfg.collect.store);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    store.write(path)?;
    let teacher_ckpt = path.with_file_name("teacher.ckpt");
    Checkpoint::Teacher {
        num_actions: env.num_actions(),
        config: rc.teacher,
    }
    .write(&teacher_ckpt)?;
    println!("wrote {} and {}", path.display(), teacher_ckpt.display());
    Ok(())
}

fn summary(r: &EvalRecord) -> String {
    format!(
        "step {} SR {:.3} rounds {:.2} traj KL {:.4} ({} episodes)",
        r.step, r.success_rate, r.avg_rounds, r.traj_kl_mean, r.episodes
    )
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<EvalRecord> {
    let rc = cfg.to_run_config();
    let store = if rc.algo.needs_store() {
        let path = &cfg.collect.store;
        if !path.exists() {
            return Err(Error::Config(format!(
                "{:?} needs a teacher trajectory store, but {} does not exist (run `opdlab collect` first)",
                rc.algo,
                path.display()
            )));
        }
        let env = Env::new(rc.env.clone())?;
        Some(TeacherTrajectoryStore::read(path, &env)?)
    } else {
        None
    };
    let dir = &cfg.run.output_dir;
    create_dir(dir)?;
    let echo = cfg.echo();
    write_file(&dir.join("config.toml"), &echo)?;
    let outcome = run_training(&rc, store, &cfg.hash())?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    outcome.log.write(&dir.join("metrics.jsonl"))?;
    outcome.log.write_csv(&dir.join("metrics.csv"))?;
    Checkpoint::Student(outcome.params).write(&dir.join("final.ckpt"))?;
    let last = outcome
        .log
        .last_eval()
        .cloned()
        .ok_or_else(|| Error::Usage("run produced no evaluation".into()))?;
    println!("{}: {}", cfg.run.name, summary(&last));
    Ok(last)
}

/// Expands `key=v1,v2` into one config per value, each writing to a sibling
/// of the configured output directory.
fn sweep_members(cfg: &ExperimentConfig, spec: &str) -> Result<Vec<ExperimentConfig>> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep `{spec}` is not of the form key=v1,v2")))?;
    let key = key.trim();
    let full = match key {
        "eta" => "curriculum.eta",
        "lr" => "train.lr",
        "seed" => "run.seed",
        k => k,
    };
    let short = full.rsplit('.').next().unwrap_or(full);
    let base_echo = cfg.echo();
    let base_dir = &cfg.run.output_dir;
    let stem = base_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let mut members = Vec::new();
    for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let dir = base_dir.with_file_name(format!("{stem}-{short}{v}"));
        let member = ExperimentConfig::from_str_with(
            &base_echo,
            "sweep",
            &[
                format!("{full}={v}"),
                format!("run.output_dir=\"{}\"", dir.display()),
                format!("run.name=\"{}-{short}{v}\"", cfg.run.name),
            ],
        )?;
        members.push(member);
    }
    if members.is_empty() {
        return Err(Error::Config(format!("sweep `{spec}` lists no values")));
    }
    Ok(members)
}

fn cmd_sweep(cfg: &ExperimentConfig, spec: &str, parallel: bool) -> Result<()> {
    let members = sweep_members(cfg, spec)?;
    let results: Vec<Result<EvalRecord>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = members.iter().map(|m| s.spawn(|| cmd_train(m))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep member panicked"))
                .collect()
        })
    } else {
        members.iter().map(cmd_train).collect()
    };
    let mut failed = 0;
    for (m, r) in members.iter().zip(results) {
        match r {
            Ok(rec) => println!("{}  {}", m.run.output_dir.display(), summary(&rec)),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", m.run.output_dir.display());
            }
        }
    }
    if failed > 0 {
        return Err(Error::Usage(format!("{failed} sweep member(s) failed")));
    }
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let rc = cfg.to_run_config();
    let env = Env::new(rc.env.clone())?;
    let teacher = TeacherPolicy::new(env.clone(), rc.teacher)?;
    let ckpt = Checkpoint::read(checkpoint)?;
    if ckpt.num_actions() != env.num_actions() {
        return Err(Error::Incompatible(format!(
            "{} has {} actions, the environment has {}",
            checkpoint.display(),
            ckpt.num_actions(),
            env.num_actions()
        )));
    }
    let seed = mix_seed(rc.seed, &[6]);
    let eval = |p: &dyn Policy| {
        evaluate_with(
            rc.execution,
            p,
            &env,
            &teacher,
            rc.eval_episodes,
            rc.eval_temperature,
            seed,
        )
    };
    let record = match ckpt {
        Checkpoint::Student(params) => eval(&params),
        Checkpoint::Teacher { config, .. } => eval(&TeacherPolicy::new(env.clone(), config)?),
    };
    println!("{}", summary(&record));
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run.output_dir.join("eval.jsonl"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut log = MetricsLog::new(cfg.hash());
    log.push(Record::Eval(record));
    log.write(&path)
}
