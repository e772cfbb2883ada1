//! Command-line surface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baseline::run_sgp_chain;
use crate::chain::{ChainOutput, ChainRecord, ChainSample, LevelSample};
use crate::config::{ModelKind, RunConfig};
use crate::error::{Error, Result};
use crate::experiment::{run_compare, summarize_compare, write_compare_summary, write_compare_table};
use crate::io;
use crate::metrics::score;
use crate::model::{build_mean_design, Granule, MeanDesign};
use crate::predict::{predict_recursive, predict_single_level, slice_targets, PredictiveSummary, Target};
use crate::sampler::run_chain;
use crate::simulate::{make_holdout, simulate_granule};

#[derive(Debug, Parser)]
#[command(name = "lvcs", version, about = "Co-kriging of quality-flagged gridded retrievals")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Overrides every seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draws a synthetic granule.
    Simulate {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Where to write held-out test cells (defaults to `<output>.truth.csv`).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Runs the sampler and writes the chain plus a diagnostics table.
    Fit {
        granule: PathBuf,
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Skip the latent-field sidecar. The chain can then not be used for prediction.
        #[arg(long)]
        no_latent: bool,
    },
    /// Predicts the high-fidelity field at targets from a fitted chain.
    Predict {
        chain: PathBuf,
        granule: PathBuf,
        config: PathBuf,
        /// A targets file, or `level=<hPa>` for every location at one pressure.
        #[arg(long)]
        targets: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Scores predictions against a truth file.
    Evaluate {
        predictions: PathBuf,
        truth: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compares both models on replicated simulations.
    Compare {
        config: PathBuf,
        /// Short chains for quick checks.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        replicates: Option<usize>,
        /// Per-replicate table; the summary always goes to stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    e.exit_code()
                }
                _ => {
                    let text = e.to_string();
                    let first = text.lines().next().unwrap_or("invalid arguments");
                    eprintln!("{}", single_line(first.trim_start_matches("error: ")));
                    2
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", single_line(&e.to_string()));
            1
        }
    }
}

fn single_line(msg: &str) -> String {
    format!("error: {}", msg.split_whitespace().collect::<Vec<_>>().join(" "))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_granule(path: &Path) -> Result<Granule> {
    let loaded = io::load_granule(path)?;
    if !loaded.dropped_levels.is_empty() {
        eprintln!("note: dropped all-undefined levels {:?}", loaded.dropped_levels);
    }
    Ok(loaded.granule)
}

fn designs(granule: &Granule, cfg: &RunConfig) -> Result<(MeanDesign, MeanDesign)> {
    Ok((
        build_mean_design(granule, cfg.model.degree_low, cfg.model.spatial_basis)?,
        build_mean_design(granule, cfg.model.degree_high, cfg.model.spatial_basis)?,
    ))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, output, truth } => simulate(&load_config(&config, cli.seed)?, &output, truth),
        Command::Fit {
            granule,
            config,
            output,
            no_latent,
        } => fit(&load_granule(&granule)?, &load_config(&config, cli.seed)?, &output, !no_latent),
        Command::Predict {
            chain,
            granule,
            config,
            targets,
            output,
        } => {
            let granule = load_granule(&granule)?;
            let cfg = load_config(&config, cli.seed)?;
            let targets = parse_targets(&targets, &granule)?;
            let summary = predict(&chain, &granule, &cfg, targets)?;
            io::write_predictions(&output, &summary)
        }
        Command::Evaluate {
            predictions,
            truth,
            output,
        } => evaluate(&predictions, &truth, &output),
        Command::Compare {
            config,
            desk,
            replicates,
            output,
        } => {
            let mut cfg = load_config(&config, cli.seed)?;
            if let Some(r) = replicates {
                cfg.compare.replicates = r;
                cfg.validate()?;
            }
            compare(&cfg, desk, output.as_deref())
        }
    }
}

fn simulate(cfg: &RunConfig, output: &Path, truth: Option<PathBuf>) -> Result<()> {
    let sim = simulate_granule(&cfg.simulation)?;
    let Some(rule) = &cfg.simulation.holdout else {
        return io::write_granule(output, &sim.granule);
    };
    let (train, tests) = make_holdout(&sim.granule, &sim.y_high, rule)?;
    io::write_granule(output, &train)?;
    let records: Vec<io::TargetRecord> = tests
        .iter()
        .enumerate()
        .map(|(k, t)| io::TargetRecord {
            target: k,
            location: Target {
                lon: t.lon,
                lat: t.lat,
                pressure_hpa: t.pressure_hpa,
            },
            truth: Some(t.truth),
        })
        .collect();
    let mut default = output.as_os_str().to_owned();
    default.push(".truth.csv");
    io::write_targets(&truth.unwrap_or_else(|| default.into()), &records)
}

fn diagnostics_path(chain: &Path) -> PathBuf {
    let mut s = chain.as_os_str().to_owned();
    s.push(".diagnostics.csv");
    s.into()
}

fn save_chain<S: ChainRecord>(output: &Path, chain: &ChainOutput<S>, with_latent: bool) -> Result<()> {
    io::write_chain(output, chain, with_latent)?;
    io::write_diagnostics(&diagnostics_path(output), chain)
}

fn fit(granule: &Granule, cfg: &RunConfig, output: &Path, with_latent: bool) -> Result<()> {
    let (dl, dh) = designs(granule, cfg)?;
    match cfg.model.kind {
        ModelKind::Lvcs => save_chain(output, &run_chain(granule, &dl, &dh, &cfg.priors, &cfg.chain)?, with_latent),
        ModelKind::Sgp => save_chain(
            output,
            &run_sgp_chain(&granule.pooled(), &dl, &cfg.priors, &cfg.chain)?,
            with_latent,
        ),
    }
}

fn parse_targets(spec: &str, granule: &Granule) -> Result<Vec<Target>> {
    if let Some(p) = spec.strip_prefix("level=") {
        let p: f64 = p
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad pressure in --targets {spec:?}")))?;
        return Ok(slice_targets(granule, p));
    }
    Ok(io::read_targets(Path::new(spec))?
        .into_iter()
        .map(|r| r.location)
        .collect())
}

fn predict(chain_path: &Path, granule: &Granule, cfg: &RunConfig, targets: Vec<Target>) -> Result<PredictiveSummary> {
    let (dl, dh) = designs(granule, cfg)?;
    let request = cfg.prediction.request(targets);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.prediction.seed);
    let model = io::chain_model(chain_path)?;
    let no_latent = || Error::InvalidArgument("chain was written without latent fields".into());
    if model == ChainSample::MODEL {
        let chain = io::read_chain::<ChainSample>(chain_path)?;
        if chain.samples.iter().any(|s| s.w_low.is_empty()) {
            return Err(no_latent());
        }
        predict_recursive(&chain, granule, &dl, &dh, &request, &mut rng)
    } else if model == LevelSample::MODEL {
        let chain = io::read_chain::<LevelSample>(chain_path)?;
        if chain.samples.iter().any(|s| s.w.is_empty()) {
            return Err(no_latent());
        }
        predict_single_level(&chain, &granule.pooled(), &dl, &request, &mut rng)
    } else {
        Err(Error::Format(format!("unknown chain model {model:?}")))
    }
}

fn evaluate(pred_path: &Path, truth_path: &Path, output: &Path) -> Result<()> {
    let pred = io::read_predictions(pred_path)?;
    let truth = io::read_targets(truth_path)?;
    if truth.len() != pred.len() {
        return Err(Error::Dimension {
            context: "truth rows vs predictions",
            expected: pred.len(),
            actual: truth.len(),
        });
    }
    let mut values = Vec::with_capacity(truth.len());
    for (k, (r, t)) in truth.iter().zip(&pred.targets).enumerate() {
        if r.location != *t {
            return Err(Error::InvalidArgument(format!(
                "truth row {k} is at {:?} but prediction {k} is at {t:?}",
                r.location
            )));
        }
        values.push(
            r.truth
                .ok_or_else(|| Error::InvalidArgument(format!("truth row {k} (target {}) has no value", r.target)))?,
        );
    }
    io::write_metrics(output, &score(&pred, &values)?)
}

fn compare(cfg: &RunConfig, desk: bool, output: Option<&Path>) -> Result<()> {
    let results = run_compare(cfg, desk)?;
    if let Some(path) = output {
        io::write_atomic(path, |w| Ok(write_compare_table(w, &results)?))?;
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if output.is_none() {
        write_compare_table(&mut out, &results)?;
        writeln!(out)?;
    }
    write_compare_summary(&mut out, &summarize_compare(&results))?;
    Ok(())
}
