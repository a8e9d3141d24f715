use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use coal_core::data::{
    build_shift, generate_twin_domains, load_csv, load_idx, sha256_hex, DatasetManifest, LabeledDataset, ShiftDirection,
    ShiftSpec, TwinDomainConfig,
};
use coal_core::evaluation::{features_csv, project_features_2d, render_table, TableFormat};
use coal_core::model::ModelParams;
use coal_core::trainer::{evaluate, run_experiment, write_outputs, ExperimentConfig, RunReport};

#[derive(Parser, Debug)]
#[command(name = "coal", version, about = "Class-imbalanced domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Subsample a dataset to a long-tailed label distribution.
    GenShift {
        /// CSV path, `idx:<images>:<labels>`, or `synthetic:key=value,...`
        /// (keys: classes, dim, radius, noise, rotation, tx, ty, per_class, domain=source|target).
        #[arg(long)]
        input: String,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Shift degree in percent.
        #[arg(long)]
        degree: f64,
        #[arg(long)]
        budget: usize,
        /// `rs` (reversed ranking, source side) or `ut` (ranked, target side).
        #[arg(long)]
        direction: ShiftDirection,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        min_per_class: usize,
        #[arg(long, default_value_t = 1.0)]
        interval_width: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per shift degree, in parallel.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,20,40,60,80,100")]
        degrees: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full COAL against each single-term ablation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset manifest; writes confusion.csv and features_2d.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Collect report.json files into a method x task table.
    Report {
        #[arg(long)]
        glob: String,
        #[arg(long, default_value = "markdown")]
        format: TableFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenShift {
            input,
            alpha,
            degree,
            budget,
            direction,
            seed,
            min_per_class,
            interval_width,
            out,
        } => {
            let (dataset, inputs) = load_input(&input, seed)?;
            let spec = ShiftSpec {
                alpha,
                direction,
                degree,
                min_per_class,
                budget,
                interval_width,
            };
            let shifted = build_shift(&dataset, &spec, seed).with_context(|| format!("shifting `{input}`"))?;
            let mut manifest = DatasetManifest::describe(&shifted, Some(spec), seed);
            for path in inputs {
                let bytes = std::fs::read(&path).with_context(|| format!("hashing {}", path.display()))?;
                manifest.source_hashes.insert(path.display().to_string(), sha256_hex(&bytes));
            }
            let manifest = manifest.write_with_data(&shifted, &out, "shifted")?;
            println!("wrote {} samples, per-class counts {:?}", manifest.num_samples, manifest.per_class_counts);
            println!("manifest: {}", out.join("shifted.manifest.json").display());
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let dir = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs").join(slug(&cfg)));
            let report = train_one(&cfg, &dir)?;
            print_summary(&report, &dir);
        }
        Command::Sweep { config, degrees, out } => {
            let cfg = load_config(&config)?;
            let base = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs").join("sweep"));
            let runs = cfg.sweep(&degrees);
            let reports = run_many(&runs, |c| base.join(format!("d{}", c.data.degree)))?;
            println!("{}", render_table(&reports, TableFormat::Markdown)?);
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(&config)?;
            let base = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs").join("ablate"));
            let runs = cfg.ablation_variants();
            let reports = run_many(&runs, |c| base.join(slug(c)))?;
            println!("{}", render_table(&reports, TableFormat::Markdown)?);
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            seed,
        } => {
            let model = ModelParams::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let (_, dataset) =
                DatasetManifest::load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let eval = evaluate(&model, &dataset)?;
            println!("samples: {}", dataset.len());
            println!("per-class mean accuracy: {:.4}", eval.per_class_mean_accuracy);
            println!("overall accuracy: {:.4}", eval.overall_accuracy);
            for (class, acc) in eval.per_class_accuracy.iter().enumerate() {
                println!("  class {class}: {acc:.4}");
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("confusion.csv"), eval.confusion.to_csv()?)?;
            let prediction = model.classify(&dataset.features)?;
            let projection = project_features_2d(&prediction.embeddings, seed)?;
            for w in &projection.warnings {
                eprintln!("warning: {w}");
            }
            std::fs::write(
                out.join("features_2d.csv"),
                features_csv(&projection, &dataset.labels, &prediction.labels())?,
            )?;
            println!("wrote {} and {}", out.join("confusion.csv").display(), out.join("features_2d.csv").display());
        }
        Command::Report { glob, format, out } => {
            let mut reports = Vec::new();
            for entry in glob::glob(&glob).with_context(|| format!("bad glob `{glob}`"))? {
                let path = entry?;
                reports.push(RunReport::load(&path).with_context(|| format!("reading {}", path.display()))?);
            }
            if reports.is_empty() {
                bail!("no reports match `{glob}`");
            }
            let table = render_table(&reports, format)?;
            match out {
                Some(path) => std::fs::write(&path, table).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn slug(cfg: &ExperimentConfig) -> String {
    cfg.train
        .run_label()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

fn train_one(cfg: &ExperimentConfig, dir: &Path) -> Result<RunReport> {
    let outcome = run_experiment(cfg).with_context(|| format!("running `{}`", cfg.train.run_label()))?;
    write_outputs(&outcome, cfg, dir).with_context(|| format!("writing outputs to {}", dir.display()))?;
    Ok(outcome.report)
}

fn run_many(runs: &[ExperimentConfig], dir_for: impl Fn(&ExperimentConfig) -> PathBuf + Sync) -> Result<Vec<RunReport>> {
    let results: Vec<Result<RunReport>> = runs
        .par_iter()
        .map(|cfg| {
            let dir = dir_for(cfg);
            let report = train_one(cfg, &dir)?;
            print_summary(&report, &dir);
            Ok(report)
        })
        .collect();
    results.into_iter().collect()
}

fn print_summary(report: &RunReport, dir: &Path) {
    let m = &report.metrics;
    println!(
        "{} | {} d={} seed={} | per-class mean accuracy {:.4} | {:.1}s | {}",
        m.label,
        m.task,
        m.degree,
        m.seed,
        m.summary.per_class_mean_accuracy,
        report.timing.total_seconds,
        dir.display()
    );
}

/// Resolves `--input` for gen-shift; returns the dataset and files to hash.
fn load_input(input: &str, seed: u64) -> Result<(LabeledDataset, Vec<PathBuf>)> {
    if let Some(rest) = input.strip_prefix("synthetic:") {
        let (cfg, domain) = parse_synthetic(rest)?;
        let (source, target) = generate_twin_domains(&cfg, &cfg.class_means(), seed)?;
        return Ok((if domain == "target" { target } else { source }, Vec::new()));
    }
    if let Some(rest) = input.strip_prefix("idx:") {
        let Some((images, labels)) = rest.split_once(':') else {
            bail!("expected idx:<images>:<labels>, got `{input}`");
        };
        let (images, labels) = (PathBuf::from(images), PathBuf::from(labels));
        let ds = load_idx(&images, &labels).with_context(|| format!("loading {input}"))?;
        return Ok((ds, vec![images, labels]));
    }
    let path = PathBuf::from(input);
    let ds = load_csv(&path, None).with_context(|| format!("loading {}", path.display()))?;
    Ok((ds, vec![path]))
}

fn parse_synthetic(spec: &str) -> Result<(TwinDomainConfig, String)> {
    let mut cfg = TwinDomainConfig::default();
    let mut domain = "source".to_string();
    let mut translation = BTreeMap::new();
    for pair in spec.split(',').filter(|s| !s.is_empty()) {
        let Some((key, value)) = pair.split_once('=') else {
            bail!("expected key=value in synthetic spec, got `{pair}`");
        };
        let num = || value.parse::<f64>().with_context(|| format!("`{key}` needs a number, got `{value}`"));
        let count = || value.parse::<usize>().with_context(|| format!("`{key}` needs an integer, got `{value}`"));
        match key {
            "classes" => cfg.num_classes = count()?,
            "dim" => cfg.dim = count()?,
            "radius" => cfg.radius = num()?,
            "noise" => cfg.noise_std = num()?,
            "rotation" => cfg.rotation_deg = num()?,
            "per_class" => cfg.per_class = count()?,
            "tx" => {
                translation.insert(0, num()?);
            }
            "ty" => {
                translation.insert(1, num()?);
            }
            "domain" => {
                if value != "source" && value != "target" {
                    bail!("domain must be source or target, got `{value}`");
                }
                domain = value.to_string();
            }
            other => bail!("unknown synthetic key `{other}`"),
        }
    }
    cfg.translation = vec![0.0; cfg.dim];
    for (axis, v) in translation {
        cfg.translation[axis] = v;
    }
    Ok((cfg, domain))
}
