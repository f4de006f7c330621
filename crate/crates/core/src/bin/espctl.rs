//! Command-line front end: data generation, occlusion, training, evaluation,
//! cost profiles, ablations and the gradient check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use esppct::config::PipelineConfig;
use esppct::pipeline::{
    ablate, gradcheck, load_eval_dataset, parse_grid, profile, rows_csv, train_observed, DataSplits, TrainedModel,
};
use esppct::pointcloud::{
    load_dataset, occlude_dataset, split_dataset, synth_generate, write_dataset, OcclusionModel, OcclusionPreset,
    Split, MANIFEST_FILE,
};

#[derive(Parser, Debug)]
#[command(name = "espctl", version, about = "Point-cloud recognition with attention-guided point selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and write train/val/test splits.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the generator seed in the config.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply an occlusion preset to a dataset directory or to every split under it.
    Occlude {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = parse_preset)]
        preset: OcclusionPreset,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on `<data>/train`, early-stop on `<data>/val`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Validation metrics and loss curves as JSON.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory (or its test split).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Cost (and, with --data, accuracy) over a grid of top_k,eta pairs.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV file of `k,eta` lines.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// The four single-component ablations plus the full model.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter on a toy pipeline.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_preset(s: &str) -> Result<OcclusionPreset, String> {
    match s.parse::<OcclusionPreset>() {
        Ok(OcclusionPreset::Custom) | Err(_) => Err(format!("expected none, wood, brick or combined, got {s:?}")),
        Ok(p) => Ok(p),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(config: &Path, seed: u64, out: &Path) -> Result<()> {
    let mut cfg = PipelineConfig::load(config)?;
    cfg.synth.seed = seed;
    let ds = synth_generate(&cfg.synth)?;
    let splits = split_dataset(&ds, cfg.training.train_fraction, cfg.training.val_fraction, seed)?;
    for part in &splits {
        write_dataset(part, out.join(part.split.as_str()))?;
    }
    eprintln!(
        "wrote {} sequences ({} train, {} val, {} test) to {}",
        ds.len(),
        splits[0].len(),
        splits[1].len(),
        splits[2].len(),
        out.display()
    );
    Ok(())
}

fn occlude(input: &Path, preset: OcclusionPreset, seed: u64, out: &Path) -> Result<()> {
    let model = OcclusionModel::preset(preset)?;
    if input.join(MANIFEST_FILE).exists() {
        let ds = load_dataset(input)?;
        return Ok(write_dataset(&occlude_dataset(&ds, &model, seed)?, out)?);
    }
    for (i, split) in Split::ALL.into_iter().enumerate() {
        let dir = input.join(split.as_str());
        if !dir.join(MANIFEST_FILE).exists() {
            continue;
        }
        let ds = load_dataset(&dir)?;
        let occluded = occlude_dataset(&ds, &model, seed.wrapping_add(i as u64))?;
        write_dataset(&occluded, out.join(split.as_str()))?;
    }
    Ok(())
}

fn run_train(config: &Path, data: &Path, out: &Path, metrics: Option<&Path>) -> Result<()> {
    let cfg = PipelineConfig::load(config)?;
    let splits = DataSplits::load(data)?;
    let (trained, m) = train_observed(&cfg, &splits.train, &splits.val, |log| {
        eprintln!(
            "epoch {:>4}  train {:.5}  val {:.5}  best {:.5}",
            log.epoch, log.train_loss, log.val_loss, log.best_val_loss
        );
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    trained.save(out)?;
    if let Some(path) = metrics {
        write_json(path, &m)?;
    }
    eprintln!(
        "stopped after epoch {}, best val loss {:.5}, val top-1 {}",
        trained.stopped_epoch,
        trained.best_val_loss,
        m.top1_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(())
}

fn run_eval(model: &Path, data: &Path, report: &Path) -> Result<()> {
    let trained = TrainedModel::load(model)?;
    let ds = load_eval_dataset(data)?;
    let m = esppct::pipeline::evaluate(&trained, &ds)?;
    write_json(report, &m)?;
    println!(
        "top1 {}  purity {}  samples {}",
        m.top1_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
        m.region_purity.map_or("n/a".into(), |a| format!("{a:.4}")),
        m.samples
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => gen_data(&config, seed, &out),
        Command::Occlude {
            input,
            preset,
            seed,
            out,
        } => occlude(&input, preset, seed, &out),
        Command::Train {
            config,
            data,
            out,
            metrics,
        } => run_train(&config, &data, &out, metrics.as_deref()),
        Command::Eval { model, data, report } => run_eval(&model, &data, &report),
        Command::Profile {
            config,
            data,
            grid,
            out,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let text = fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let grid = parse_grid(&text)?;
            let data = data.map(DataSplits::load).transpose()?;
            let rows = profile(&cfg, &grid, data.as_ref())?;
            write_text(&out, &rows_csv(&rows)?)
        }
        Command::Ablate { config, data, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let data = data.map(DataSplits::load).transpose()?;
            let rows = ablate(&cfg, data.as_ref())?;
            write_text(&out, &rows_csv(&rows)?)
        }
        Command::Gradcheck { config, seed } => {
            let cfg = PipelineConfig::load(&config)?;
            let summary = gradcheck(&cfg, seed)?;
            for r in &summary.runs {
                eprintln!(
                    "{:?}/{:?}: {} params, {} checked, {} skipped, max rel err {:.3e}",
                    r.head, r.mode, r.params, r.report.checked, r.report.skipped, r.report.max_rel_err
                );
            }
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if !summary.passed() {
                return Err(esppct::Error::Numeric("gradient check failed".into()).into());
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<esppct::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
