//! `reuselab` command surface. Each subcommand reads a flat `key=value`
//! config, writes its artifacts under `--out`, and drops the resolved
//! config next to them as `config.resolved`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use reuselab::analysis::{default_window, perturbation_sweep, similarity_curve, ExponentialFit, SimilarityCurve};
use reuselab::compare::compare;
use reuselab::config::RunConfig;
use reuselab::io::{write_ppm, write_ranked_csv, write_similarity_csv, write_sweep_csv};
use reuselab::model::{load_checkpoint, save_checkpoint, train_toy};
use reuselab::sampler::sample;
use reuselab::search::{exhaustive_search, median_utility, phast_search, LogEntry, ModelUtility};
use reuselab::{CostTally, Error, ModelWeights, Result, StrategyVector};

#[derive(Debug, Parser)]
#[command(name = "reuselab", version, about = "Attention-map reuse experiments on a toy diffusion model")]
pub struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces the seed list with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the toy denoiser and write a checkpoint.
    Train,
    /// Sample images under the configured strategy (all-compute if unset).
    Sample,
    /// Adjacent-step attention distance curve.
    Similarity,
    /// Per-step logit perturbation sweep and exponential fit.
    Perturb,
    /// PHAST local search from the HURRY seed.
    Search,
    /// Rank every strategy with the configured N and r.
    Exhaustive,
    /// Reference vs HURRY vs PHAST vs a reduced-step sampler.
    Compare,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidStrategy(_) | Error::Domain(_) => 2,
        Error::Checkpoint(_) => 3,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Budget(_) => 4,
        Error::Numeric(_) | Error::Training { .. } | Error::Dimension(_) | Error::ReuseViolation(_) => 5,
        Error::Io(_) => 1,
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override {kv:?}: expected key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out)?;
    fs::write(cli.out.join("config.resolved"), cfg.resolved())?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Train => train(&cfg, out),
        cmd => {
            let weights = load_checkpoint(&cfg.checkpoint)?;
            match cmd {
                Command::Sample => sample_cmd(&cfg, &weights, out),
                Command::Similarity => similarity(&cfg, &weights, out),
                Command::Perturb => perturb(&cfg, &weights, out),
                Command::Search => search(&cfg, &weights, out),
                Command::Exhaustive => exhaustive(&cfg, &weights, out),
                Command::Compare => compare_cmd(&cfg, &weights, out),
                Command::Train => unreachable!(),
            }
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(std::io::Error::from)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for entry in log {
        serde_json::to_writer(&mut f, entry).map_err(std::io::Error::from)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seed = cfg.seeds[0];
    let (weights, report) = train_toy(&cfg.train, seed)?;
    if let Some(dir) = cfg.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&weights, &cfg.checkpoint)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        seed: u64,
        checkpoint: String,
        initial_val_loss: f32,
        final_val_loss: f32,
        losses: &'a [f32],
    }
    write_json(
        &out.join("train.json"),
        &Summary {
            seed,
            checkpoint: cfg.checkpoint.display().to_string(),
            initial_val_loss: report.initial_val_loss,
            final_val_loss: report.final_val_loss,
            losses: &report.losses,
        },
    )?;
    println!("trained {} steps: validation loss {:.4} -> {:.4}", cfg.train.steps, report.initial_val_loss, report.final_val_loss);
    Ok(())
}

fn sample_cmd(cfg: &RunConfig, weights: &ModelWeights, out: &Path) -> Result<()> {
    let strategy = match &cfg.strategy {
        Some(s) => s.clone(),
        None => StrategyVector::all_compute(cfg.steps)?,
    };
    #[derive(Serialize)]
    struct Record {
        prompt: String,
        seed: u64,
        image: String,
        cost: CostTally,
    }
    let mut records = Vec::new();
    for (prompt, seed) in cfg.cases() {
        let mut scfg = cfg.sampler_config(seed);
        scfg.record_observations = false;
        let result = sample(weights, &scfg, &prompt, &strategy, cfg.reuse_config())?;
        let name = format!("{prompt}_{seed}.ppm");
        let mut f = BufWriter::new(File::create(out.join(&name))?);
        write_ppm(&result.image, &mut f)?;
        f.flush()?;
        records.push(Record { prompt: prompt.to_string(), seed, image: name, cost: result.cost });
    }
    #[derive(Serialize)]
    struct Summary {
        strategy: StrategyVector,
        samples: Vec<Record>,
    }
    write_json(&out.join("cost.json"), &Summary { strategy, samples: records })
}

fn similarity(cfg: &RunConfig, weights: &ModelWeights, out: &Path) -> Result<()> {
    let curve = similarity_curve(weights, &cfg.sampler_config(0), &cfg.cases())?;
    write_similarity_csv(&curve, File::create(out.join("similarity.csv"))?)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        cases: usize,
        mean_self: f64,
        mean_cross: f64,
        curve: &'a SimilarityCurve,
    }
    let n = curve.points.len() as f64;
    write_json(
        &out.join("similarity.json"),
        &Summary {
            cases: cfg.cases().len(),
            mean_self: curve.points.iter().map(|p| p.self_mean).sum::<f64>() / n,
            mean_cross: curve.points.iter().map(|p| p.cross_mean).sum::<f64>() / n,
            curve: &curve,
        },
    )
}

fn perturb(cfg: &RunConfig, weights: &ModelWeights, out: &Path) -> Result<()> {
    let window = cfg.window.unwrap_or_else(|| default_window(cfg.steps));
    let report = perturbation_sweep(weights, &cfg.sampler_config(0), &cfg.cases(), cfg.eta, window)?;
    write_sweep_csv(&report, File::create(out.join("perturb.csv"))?)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        eta: f32,
        window: (usize, usize),
        fit: Option<ExponentialFit>,
        fit_error: &'a Option<String>,
        decays: bool,
    }
    write_json(
        &out.join("perturb_fit.json"),
        &Summary { eta: report.eta, window, fit: report.fit, fit_error: &report.fit_error, decays: report.decays() },
    )?;
    if let Some(e) = &report.fit_error {
        eprintln!("warning: exponential fit failed: {e}");
    }
    Ok(())
}

fn search(cfg: &RunConfig, weights: &ModelWeights, out: &Path) -> Result<()> {
    let mut utility = ModelUtility::new(weights, &cfg.sampler_config(0), cfg.reuse_config(), cfg.cases())?;
    let report = phast_search(&cfg.search_config(), &mut utility)?;
    write_log(&out.join("search_log.jsonl"), &report.log)?;
    write_json(&out.join("search.json"), &report)?;
    println!("best {} at {:.3} dB (hurry {:.3} dB)", report.best, report.best_utility, report.hurry_utility);
    Ok(())
}

fn exhaustive(cfg: &RunConfig, weights: &ModelWeights, out: &Path) -> Result<()> {
    let mut utility = ModelUtility::new(weights, &cfg.sampler_config(0), cfg.reuse_config(), cfg.cases())?;
    let ranked = exhaustive_search(cfg.steps, cfg.reuse_steps, &mut utility, cfg.budget)?;
    write_ranked_csv(&ranked, File::create(out.join("ranked.csv"))?)?;
    #[derive(Serialize)]
    struct Summary {
        strategies: usize,
        best: StrategyVector,
        best_utility: f64,
        median_utility: f64,
    }
    write_json(
        &out.join("exhaustive.json"),
        &Summary {
            strategies: ranked.len(),
            best: ranked[0].strategy.clone(),
            best_utility: ranked[0].utility_db,
            median_utility: median_utility(&ranked),
        },
    )
}

fn compare_cmd(cfg: &RunConfig, weights: &ModelWeights, out: &Path) -> Result<()> {
    let report = compare(
        weights,
        &cfg.sampler_config(0),
        cfg.reuse_config(),
        &cfg.cases(),
        &cfg.search_config(),
        cfg.reduced_steps,
    )?;
    write_log(&out.join("search_log.jsonl"), &report.search.log)?;
    write_json(&out.join("compare.json"), &report)?;
    for row in &report.rows {
        println!("{:<10} N={:<3} {:>8.1} ms {:>8.3} dB", row.name, row.steps, row.latency_ms, row.psnr_db);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_after_defaults() {
        let cli = Cli::parse_from(["reuselab", "--seed", "4", "--set", "steps=8", "--set", "reuse_steps=3", "sample"]);
        let cfg = load_config(&cli).unwrap();
        assert_eq!((cfg.steps, cfg.reuse_steps, cfg.seeds.clone()), (8, 3, vec![4]));
        let bad = Cli::parse_from(["reuselab", "--set", "steps", "sample"]);
        assert_eq!(exit_code(&load_config(&bad).unwrap_err()), 2);
    }

    #[test]
    fn io_errors_map_by_kind() {
        let missing = Error::Io(std::io::Error::from(std::io::ErrorKind::NotFound));
        let denied = Error::Io(std::io::Error::from(std::io::ErrorKind::PermissionDenied));
        assert_eq!((exit_code(&missing), exit_code(&denied)), (3, 1));
        assert_eq!(exit_code(&Error::Budget("x".into())), 4);
    }
}
