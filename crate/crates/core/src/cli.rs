//! The `fewshot-dml` command line.
//!
//! Every subcommand resolves a [`RunConfig`] (defaults, then `--config`,
//! then `--set KEY=VALUE` in order, then the dedicated flags), writes it to
//! `<out>/config.txt`, and places its outputs under `--out` with fixed file
//! names:
//!
//! | command      | outputs |
//! |--------------|---------|
//! | synth-data   | `ground.jsonl`, `real_aerial.jsonl`, `game_aerial.jsonl` and the split files |
//! | split        | `real_train.jsonl`, `real_val.jsonl`, `real_test.jsonl`, `real_fewshot.jsonl` |
//! | train-gan    | `generator.json`, `gan_log.csv` |
//! | generate     | `generated_aerial.jsonl` |
//! | train-dml    | `dml.json`, `dml_log.csv` |
//! | evaluate     | `report.csv`, `report.txt`, `report.json` |
//! | kshot-sweep  | `curve_<mode>.csv` per mode, `curves.dat` |
//! | gradcheck    | `gradcheck.csv` (only with `--out`) |

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::config::RunConfig;
use crate::data::{
    kshot_sample, load_checkpoint, load_dataset, save_checkpoint, save_dataset, split, synth_benchmark, Dataset,
    SplitSpec,
};
use crate::dml::{train_dml, write_dml_log, DmlInputs, DmlMode, TrainedDml};
use crate::error::{Error, Result};
use crate::eval::{
    curve_csv, curves_gnuplot, evaluate, kshot_sweep, thread_budget, write_report, PipelineData, PipelineSeeds,
};
use crate::gan::{classifier_accuracy, synthesize_features, train_wcgan, write_gan_log, Generator, Interpolation};
use crate::gradcheck::{gradient_suite, GRADCHECK_TOLERANCE};

#[derive(Debug, Parser)]
#[command(name = "fewshot-dml", version, about = "Few-shot aerial action classification with generated and game features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and its real-aerial splits.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Shots per class in `real_fewshot.jsonl`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Split a real-aerial dataset into train/val/test and draw k shots.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        aerial: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the conditional WGAN-GP feature generator.
    TrainGan {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        ground: Option<PathBuf>,
        /// The k-shot real-aerial training records.
        #[arg(long, value_name = "FILE")]
        aerial: Option<PathBuf>,
        /// Use −E[log D] for the real term of the critic loss.
        #[arg(long)]
        eq2_literal: bool,
        /// Interpolate between generated and real aerial features for the penalty.
        #[arg(long)]
        interpolate_real_aerial: bool,
    },
    /// Synthesize aerial features from ground features with a trained generator.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Generator checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        ground: Option<PathBuf>,
        #[arg(long)]
        per_record: Option<usize>,
    },
    /// Train a disjoint multitask classifier.
    TrainDml {
        #[command(flatten)]
        common: Common,
        /// baseline, games, generated or games_plus_generated.
        #[arg(long)]
        mode: Option<String>,
        /// The k-shot real-aerial training records.
        #[arg(long, value_name = "FILE")]
        real: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        val: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        games: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        generated: Option<PathBuf>,
        /// A games-mode DML checkpoint to fine-tune from.
        #[arg(long, value_name = "FILE")]
        warm_start: Option<PathBuf>,
    },
    /// Evaluate a DML checkpoint on real-aerial test records.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        test: Option<PathBuf>,
    },
    /// Accuracy against shots per class, one curve per mode.
    KshotSweep {
        #[command(flatten)]
        common: Common,
        /// Ground records; the synthetic benchmark is used when omitted.
        #[arg(long, value_name = "FILE")]
        ground: Option<PathBuf>,
        /// All real-aerial records.
        #[arg(long, value_name = "FILE")]
        aerial: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        games: Option<PathBuf>,
    },
    /// Compare every analytic loss gradient with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

type Overrides = Vec<(&'static str, String)>;

fn push_path(o: &mut Overrides, key: &'static str, p: &Option<PathBuf>) {
    if let Some(p) = p {
        o.push((key, p.display().to_string()));
    }
}

fn resolve(common: &Common, flags: Overrides) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &common.config {
        let path_text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config.apply_text(&path_text)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.paths.out = Some(out.clone());
    }
    for (k, v) in flags {
        config.set(k, &v)?;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config
        .paths
        .out
        .clone()
        .ok_or_else(|| Error::Config("an output directory is required (--out or paths.out)".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    config.write_resolved(&dir)?;
    Ok(dir)
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("missing input: set paths.{key} or pass --{}", key.replace('_', "-"))))
}

fn optional(path: &Option<PathBuf>) -> Result<Option<Dataset>> {
    path.as_ref().map(load_dataset).transpose()
}

/// Split the real aerial set and draw k shots with the sub-seeds of a
/// pipeline run, so the files match what `kshot-sweep` uses for `seed`.
fn write_splits(aerial: &Dataset, config: &RunConfig, dir: &Path) -> Result<()> {
    let seeds = PipelineSeeds::new(config.seed);
    let spec = SplitSpec {
        seed: seeds.split,
        ..config.split
    };
    let (train, val, test) = split(aerial, &spec)?;
    let few = kshot_sample(&train, config.k, seeds.kshot)?;
    for (name, d) in [("real_train", &train), ("real_val", &val), ("real_test", &test), ("real_fewshot", &few)] {
        save_dataset(d, dir.join(format!("{name}.jsonl")))?;
    }
    info!(
        "split {} records into {} train, {} val, {} test; {} shots",
        aerial.len(),
        train.len(),
        val.len(),
        test.len(),
        few.len()
    );
    Ok(())
}

fn synth_data(config: &RunConfig) -> Result<()> {
    let dir = out_dir(config)?;
    let bench = synth_benchmark(&config.synth_config())?;
    save_dataset(&bench.ground, dir.join("ground.jsonl"))?;
    save_dataset(&bench.real_aerial, dir.join("real_aerial.jsonl"))?;
    save_dataset(&bench.game_aerial, dir.join("game_aerial.jsonl"))?;
    info!(
        "wrote {} ground, {} real aerial and {} game aerial records",
        bench.ground.len(),
        bench.real_aerial.len(),
        bench.game_aerial.len()
    );
    write_splits(&bench.real_aerial, config, &dir)
}

fn split_cmd(config: &RunConfig) -> Result<()> {
    let aerial = load_dataset(required(&config.paths.aerial, "aerial")?)?;
    let dir = out_dir(config)?;
    write_splits(&aerial, config, &dir)
}

fn train_gan(config: &RunConfig) -> Result<()> {
    let ground = load_dataset(required(&config.paths.ground, "ground")?)?;
    let aerial = load_dataset(required(&config.paths.aerial, "aerial")?)?;
    let dir = out_dir(config)?;
    let seed = PipelineSeeds::new(config.seed).gan;
    let gan = train_wcgan(&ground, &aerial, &config.gan, seed)?;
    info!(
        "classifier accuracy on the k-shot set: {:.3}",
        classifier_accuracy(&gan.classifier, &aerial)?
    );
    if let Some(last) = gan.log.last() {
        info!("final epoch: {last:?}");
    }
    save_checkpoint(&gan.to_checkpoint(config.seed, &config.hash()), dir.join("generator.json"))?;
    write_gan_log(&gan.log, dir.join("gan_log.csv"))
}

fn generate(config: &RunConfig) -> Result<()> {
    let ckpt = load_checkpoint(required(&config.paths.checkpoint, "checkpoint")?)?;
    let generator = Generator::from_checkpoint(&ckpt)?;
    let ground = load_dataset(required(&config.paths.ground, "ground")?)?;
    let dir = out_dir(config)?;
    let seed = PipelineSeeds::new(config.seed).synthesize;
    let generated = synthesize_features(&generator, &ground, config.per_record, seed)?;
    info!("generated {} records", generated.len());
    save_dataset(&generated, dir.join("generated_aerial.jsonl"))
}

fn train_dml_cmd(config: &RunConfig) -> Result<()> {
    let real = load_dataset(required(&config.paths.real, "real")?)?;
    let val = load_dataset(required(&config.paths.val, "val")?)?;
    let games = optional(&config.paths.games)?;
    let generated = optional(&config.paths.generated)?;
    let warm = match &config.paths.warm_start {
        Some(path) if config.mode == DmlMode::GamesPlusGenerated => {
            let source = TrainedDml::from_checkpoint(&load_checkpoint(path)?)?;
            if source.mode != DmlMode::Games {
                warn!("warm-start checkpoint was trained in {} mode, not games", source.mode);
            }
            Some(source.net)
        }
        Some(_) => {
            warn!("--warm-start only applies to games_plus_generated; ignoring it in {} mode", config.mode);
            None
        }
        None => None,
    };
    let dir = out_dir(config)?;
    let inputs = DmlInputs {
        real: &real,
        val: &val,
        games: games.as_ref(),
        generated: generated.as_ref(),
        warm_start: warm.as_ref(),
    };
    let seed = PipelineSeeds::new(config.seed).dml;
    let trained = train_dml(config.mode, &inputs, &config.dml, seed)?;
    info!(
        "best validation accuracy {:.3} at epoch {}",
        trained.best_val_accuracy, trained.best_epoch
    );
    save_checkpoint(&trained.to_checkpoint(config.seed, &config.hash()), dir.join("dml.json"))?;
    write_dml_log(&trained.log, dir.join("dml_log.csv"))
}

fn evaluate_cmd(config: &RunConfig) -> Result<()> {
    let ckpt = load_checkpoint(required(&config.paths.checkpoint, "checkpoint")?)?;
    let model = TrainedDml::from_checkpoint(&ckpt)?;
    let test = load_dataset(required(&config.paths.test, "test")?)?;
    let dir = out_dir(config)?;
    let report = evaluate(&model, &test)?.with_provenance(vec![ckpt.seed], &ckpt.config_hash);
    println!("{}: overall accuracy {:.4}", report.mode, report.overall_accuracy);
    write_report(&report, &dir, "report")?;
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("reports always serialize");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn kshot_sweep_cmd(config: &RunConfig) -> Result<()> {
    let (ground, aerial, games) = match (&config.paths.ground, &config.paths.aerial) {
        (Some(g), Some(a)) => (load_dataset(g)?, load_dataset(a)?, optional(&config.paths.games)?),
        (None, None) => {
            info!("no datasets given; using the synthetic benchmark");
            let bench = synth_benchmark(&config.synth_config())?;
            (bench.ground, bench.real_aerial, Some(bench.game_aerial))
        }
        _ => return Err(Error::Config("kshot-sweep needs both paths.ground and paths.aerial, or neither".into())),
    };
    let dir = out_dir(config)?;
    let data = PipelineData {
        ground: &ground,
        real_aerial: &aerial,
        games: games.as_ref(),
    };
    let threads = thread_budget();
    info!(
        "sweeping k = {:?} over {} seeds and {} modes on {threads} threads",
        config.ks,
        config.seeds.len(),
        config.modes.len()
    );
    let curves = kshot_sweep(&data, &config.pipeline(), &config.modes, &config.ks, &config.seeds, threads)?;
    for c in &curves {
        let path = dir.join(format!("curve_{}.csv", c.mode));
        fs::write(&path, curve_csv(c)).map_err(|e| Error::io(&path, e))?;
        for p in &c.points {
            println!("{} k={} mean={:.4} std={:.4}", c.mode, p.k, p.mean, p.std);
        }
    }
    let path = dir.join("curves.dat");
    fs::write(&path, curves_gnuplot(&curves)).map_err(|e| Error::io(&path, e))
}

fn gradcheck_cmd(config: &RunConfig) -> Result<bool> {
    let cases = gradient_suite(config.seed)?;
    let mut csv = String::from("case,max_relative_error,passed\n");
    for c in &cases {
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {} max relative error {:.3e}", c.name, c.max_relative_error);
        csv.push_str(&format!("{},{},{}\n", c.name, c.max_relative_error, c.passed()));
    }
    if config.paths.out.is_some() {
        let path = out_dir(config)?.join("gradcheck.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    let ok = cases.iter().all(|c| c.passed());
    if !ok {
        println!("some gradients exceed relative error {GRADCHECK_TOLERANCE:e}");
    }
    Ok(ok)
}

fn dispatch(command: Command) -> Result<bool> {
    let mut o = Overrides::new();
    let (common, run): (Common, fn(&RunConfig) -> Result<()>) = match command {
        Command::SynthData { common, k } => {
            if let Some(k) = k {
                o.push(("k", k.to_string()));
            }
            (common, synth_data)
        }
        Command::Split { common, aerial, k } => {
            push_path(&mut o, "paths.aerial", &aerial);
            if let Some(k) = k {
                o.push(("k", k.to_string()));
            }
            (common, split_cmd)
        }
        Command::TrainGan {
            common,
            ground,
            aerial,
            eq2_literal,
            interpolate_real_aerial,
        } => {
            push_path(&mut o, "paths.ground", &ground);
            push_path(&mut o, "paths.aerial", &aerial);
            if eq2_literal {
                o.push(("gan.eq2_literal", "true".into()));
            }
            if interpolate_real_aerial {
                let name = serde_json::to_value(Interpolation::GeneratedToRealAerial).expect("enum serializes");
                o.push(("gan.interpolation", name.as_str().unwrap_or_default().to_string()));
            }
            (common, train_gan)
        }
        Command::Generate {
            common,
            checkpoint,
            ground,
            per_record,
        } => {
            push_path(&mut o, "paths.checkpoint", &checkpoint);
            push_path(&mut o, "paths.ground", &ground);
            if let Some(n) = per_record {
                o.push(("per_record", n.to_string()));
            }
            (common, generate)
        }
        Command::TrainDml {
            common,
            mode,
            real,
            val,
            games,
            generated,
            warm_start,
        } => {
            if let Some(m) = mode {
                o.push(("mode", m));
            }
            push_path(&mut o, "paths.real", &real);
            push_path(&mut o, "paths.val", &val);
            push_path(&mut o, "paths.games", &games);
            push_path(&mut o, "paths.generated", &generated);
            push_path(&mut o, "paths.warm_start", &warm_start);
            (common, train_dml_cmd)
        }
        Command::Evaluate { common, checkpoint, test } => {
            push_path(&mut o, "paths.checkpoint", &checkpoint);
            push_path(&mut o, "paths.test", &test);
            (common, evaluate_cmd)
        }
        Command::KshotSweep {
            common,
            ground,
            aerial,
            games,
        } => {
            push_path(&mut o, "paths.ground", &ground);
            push_path(&mut o, "paths.aerial", &aerial);
            push_path(&mut o, "paths.games", &games);
            (common, kshot_sweep_cmd)
        }
        Command::Gradcheck { common } => return gradcheck_cmd(&resolve(&common, o)?),
    };
    let config = resolve(&common, o)?;
    run(&config)?;
    Ok(true)
}

/// Parse `args` (including the program name) and run the command. Returns
/// the process exit code: 0 on success, 1 on failure, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            log::error!("{e}");
            1
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
