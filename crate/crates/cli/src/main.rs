use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lgedet::ablate::{load_data, run_ablation, AblationGrid};
use lgedet::config::Config;
use lgedet::eval::{evaluate, write_scene_dumps};
use lgedet::gradcheck::gradient_suite;
use lgedet::head::write_query_csv;
use lgedet::model::Detector;
use lgedet::scene::{generate_split, read_manifest, read_split, write_dataset, Split};
use lgedet::train::{samples_from, train, Sample};
use lgedet::Result;

/// Dotted `--section.field=value` flags are config overrides and may be
/// mixed freely with the options below.
#[derive(Parser)]
#[command(name = "lgedet", version, about = "Synthetic BEV detection: data, training, evaluation, sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and eval scenes plus a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector; writes checkpoint.bin, train_log.json and config.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory from gen-data; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes metrics.json and per-scene CSV dumps.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every cell of a sweep grid into one CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON: {"axes": [{"key": "model.stages", "values": [1, 2, 3]}], "seeds": [0]}
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where divergence dumps go.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Run the gradient check suite; exits non-zero on any failure.
    GradCheck {
        #[arg(long)]
        json: bool,
    },
}

fn is_override(arg: &str) -> bool {
    arg.strip_prefix("--")
        .and_then(|a| a.split_once('='))
        .is_some_and(|(key, _)| key.contains('.'))
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let base = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    base.with_overrides(overrides)
}

type Splits = (Vec<Sample<f32>>, Vec<Sample<f32>>);

fn datasets(cfg: &Config, dir: Option<&Path>) -> Result<Splits> {
    match dir {
        Some(d) => {
            let m = read_manifest(d)?;
            Ok((samples_from(&read_split(d, &m.train)?), samples_from(&read_split(d, &m.eval)?)))
        }
        None => load_data(cfg),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli, overrides: &[String]) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let d = &cfg.data;
            let tr = generate_split(&d.scene, d.seed, Split::Train, d.train_scenes)?;
            let ev = generate_split(&d.scene, d.seed, Split::Eval, d.eval_scenes)?;
            write_dataset(&out, d.seed, &d.scene, &tr, &ev)?;
            println!("wrote {} train and {} eval scenes to {}", tr.len(), ev.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let (tr, _) = datasets(&cfg, data.as_deref())?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("config.json"), &cfg)?;
            let res = train(&cfg, &tr, Some(&out))?;
            res.detector.save(&out.join("checkpoint.bin"))?;
            write_json(&out.join("train_log.json"), &res.log)?;
            let last = res.log.losses.last().copied().unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {last:.5}", res.log.losses.len());
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
        } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let det = Detector::<f32>::load(&checkpoint)?;
            let (_, ev) = datasets(&cfg, data.as_deref())?;
            let mut result = evaluate(&det, &ev, &cfg.eval)?;
            let log_path = checkpoint.with_file_name("train_log.json");
            if log_path.exists() {
                let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(&log_path)?)?;
                if let Some(points) = log.get("points") {
                    result.report.loss_curve = serde_json::from_value(points.clone())?;
                }
            }
            fs::create_dir_all(&out)?;
            write_json(&out.join("metrics.json"), &result.report)?;
            write_scene_dumps(&out.join("detections"), &result.scenes)?;
            let qdir = out.join("queries");
            fs::create_dir_all(&qdir)?;
            for (i, s) in result.scenes.iter().enumerate() {
                let mut f = BufWriter::new(fs::File::create(qdir.join(format!("scene_{i:05}.csv")))?);
                write_query_csv(&mut f, &s.selection.queries)?;
                f.flush()?;
            }
            let r = &result.report;
            for (t, rec) in r.thresholds.iter().zip(&r.recall) {
                println!("recall@{t}m {rec:.4}");
            }
            println!("mAP {:.4}", r.map);
        }
        Command::Ablate {
            config,
            grid,
            out,
            dump_dir,
        } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let grid: AblationGrid = serde_json::from_str(&fs::read_to_string(&grid)?)?;
            let file = BufWriter::new(fs::File::create(&out)?);
            let rows = run_ablation(&cfg, &grid, file, dump_dir.as_deref())?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} rows written to {} ({failed} failed)", rows.len(), out.display());
        }
        Command::GradCheck { json } => {
            let results = gradient_suite()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&results)?);
            } else {
                for r in &results {
                    let verdict = if r.passed() { "ok" } else { "FAIL" };
                    println!("{:<18} {:>10.3e}  (< {:.0e})  {verdict}", r.name, r.error, r.tolerance);
                }
            }
            return Ok(results.iter().all(|r| r.passed()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (overrides, args): (Vec<String>, Vec<String>) = std::env::args().partition(|a| is_override(a));
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
