//! Replicated LVCS vs. single-level comparisons on simulated granules.

use std::io::Write;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baseline::sgp_fit_predict;
use crate::config::RunConfig;
use crate::error::Result;
use crate::metrics::{score, Metrics, MetricsReport};
use crate::model::build_mean_design;
use crate::par;
use crate::predict::{predict_recursive, Target};
use crate::sampler::run_chain;
use crate::simulate::{make_holdout, simulate_granule};

/// Seeds used by one replicate, all derived from its base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicateSeeds {
    pub simulation: u64,
    pub chain_lvcs: u64,
    pub chain_sgp: u64,
    pub prediction: u64,
}

impl ReplicateSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            simulation: rng.next_u64(),
            chain_lvcs: rng.next_u64(),
            chain_sgp: rng.next_u64(),
            prediction: rng.next_u64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRun {
    pub report: MetricsReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub n_test: usize,
    pub lvcs: ModelRun,
    pub sgp: ModelRun,
    /// Posterior samples of the two-level chain, for recovery checks.
    pub lvcs_chain: crate::chain::ChainOutput,
}

/// Simulates one granule, withholds the configured block and scores both
/// models on it. `iterations` is `(n_iter, n_burn)`.
pub fn run_replicate(cfg: &RunConfig, replicate: usize, iterations: (usize, usize)) -> Result<ReplicateResult> {
    let seed = cfg.compare.base_seed.wrapping_add(replicate as u64);
    let seeds = ReplicateSeeds::derive(seed);
    let mut sim_cfg = cfg.simulation.clone();
    sim_cfg.seed = seeds.simulation;
    let sim = simulate_granule(&sim_cfg)?;
    let (train, tests) = make_holdout(&sim.granule, &sim.y_high, &cfg.compare.holdout)?;
    let targets: Vec<Target> = tests
        .iter()
        .map(|t| Target {
            lon: t.lon,
            lat: t.lat,
            pressure_hpa: t.pressure_hpa,
        })
        .collect();
    let truth: Vec<f64> = tests.iter().map(|t| t.truth).collect();
    let request = cfg.prediction.request(targets);

    let mut chain_cfg = cfg.chain.clone();
    (chain_cfg.n_iter, chain_cfg.n_burn) = iterations;

    let dl = build_mean_design(&train, cfg.model.degree_low, cfg.model.spatial_basis)?;
    let dh = build_mean_design(&train, cfg.model.degree_high, cfg.model.spatial_basis)?;

    let start = Instant::now();
    chain_cfg.seed = seeds.chain_lvcs;
    let chain = run_chain(&train, &dl, &dh, &cfg.priors, &chain_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.prediction);
    let pred = predict_recursive(&chain, &train, &dl, &dh, &request, &mut rng)?;
    let lvcs = ModelRun {
        report: score(&pred, &truth)?,
        seconds: start.elapsed().as_secs_f64(),
    };

    let start = Instant::now();
    chain_cfg.seed = seeds.chain_sgp;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.prediction);
    let (_, pred) = sgp_fit_predict(&train, &dl, &cfg.priors, &chain_cfg, &request, &mut rng)?;
    let sgp = ModelRun {
        report: score(&pred, &truth)?,
        seconds: start.elapsed().as_secs_f64(),
    };

    Ok(ReplicateResult {
        replicate,
        seed,
        n_test: tests.len(),
        lvcs,
        sgp,
        lvcs_chain: chain,
    })
}

/// Runs every replicate, concurrently when the compare execution mode allows.
pub fn run_compare(cfg: &RunConfig, desk: bool) -> Result<Vec<ReplicateResult>> {
    let iterations = if desk {
        cfg.compare.desk_iterations
    } else {
        cfg.compare.full_iterations
    };
    par::map_indexed(cfg.compare.replicates, cfg.compare.execution, |r| run_replicate(cfg, r, iterations))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSummary {
    pub median_mspe: f64,
    pub mean_crps: f64,
    /// Coverage pooled over every test cell of every replicate.
    pub pooled_cvg: f64,
    pub mean_alci: f64,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareSummary {
    pub replicates: usize,
    pub lvcs: ModelSummary,
    pub sgp: ModelSummary,
    /// Median over replicates of LVCS MSPE / SGP MSPE.
    pub median_mspe_ratio: f64,
    /// Replicates where LVCS has strictly lower MSPE.
    pub lvcs_wins: usize,
}

fn median(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

fn model_summary(results: &[ReplicateResult], pick: impl Fn(&ReplicateResult) -> &ModelRun) -> ModelSummary {
    let n = results.len() as f64;
    let pooled = |r: &ReplicateResult| pick(r).report.pooled;
    let total: usize = results.iter().map(|r| pooled(r).n).sum();
    ModelSummary {
        median_mspe: median(results.iter().map(|r| pooled(r).mspe).collect()),
        mean_crps: results.iter().map(|r| pooled(r).crps).sum::<f64>() / n,
        pooled_cvg: results.iter().map(|r| pooled(r).cvg * pooled(r).n as f64).sum::<f64>() / total as f64,
        mean_alci: results.iter().map(|r| pooled(r).alci).sum::<f64>() / n,
        mean_seconds: results.iter().map(|r| pick(r).seconds).sum::<f64>() / n,
    }
}

pub fn summarize_compare(results: &[ReplicateResult]) -> CompareSummary {
    CompareSummary {
        replicates: results.len(),
        lvcs: model_summary(results, |r| &r.lvcs),
        sgp: model_summary(results, |r| &r.sgp),
        median_mspe_ratio: median(
            results
                .iter()
                .map(|r| r.lvcs.report.pooled.mspe / r.sgp.report.pooled.mspe)
                .collect(),
        ),
        lvcs_wins: results
            .iter()
            .filter(|r| r.lvcs.report.pooled.mspe < r.sgp.report.pooled.mspe)
            .count(),
    }
}

pub const COMPARE_HEADER: &str = "replicate,seed,model,n_test,mspe,crps,cvg,alci,wall_time_s";

/// One row per model per replicate.
pub fn write_compare_table(w: &mut impl Write, results: &[ReplicateResult]) -> std::io::Result<()> {
    writeln!(w, "{COMPARE_HEADER}")?;
    for r in results {
        for (name, run) in [("lvcs", &r.lvcs), ("sgp", &r.sgp)] {
            let m: &Metrics = &run.report.pooled;
            writeln!(
                w,
                "{},{},{name},{},{:.6},{:.6},{:.4},{:.6},{:.3}",
                r.replicate, r.seed, m.n, m.mspe, m.crps, m.cvg, m.alci, run.seconds
            )?;
        }
    }
    Ok(())
}

/// Model-level summary in the spirit of a results table.
pub fn write_compare_summary(w: &mut impl Write, s: &CompareSummary) -> std::io::Result<()> {
    writeln!(w, "model,median_mspe,mean_crps,pooled_cvg,mean_alci,mean_wall_time_s")?;
    for (name, m) in [("lvcs", &s.lvcs), ("sgp", &s.sgp)] {
        writeln!(
            w,
            "{name},{:.6},{:.6},{:.4},{:.6},{:.3}",
            m.median_mspe, m.mean_crps, m.pooled_cvg, m.mean_alci, m.mean_seconds
        )?;
    }
    writeln!(w, "# median_mspe_ratio={:.4}", s.median_mspe_ratio)?;
    writeln!(w, "# lvcs_wins={}/{}", s.lvcs_wins, s.replicates)
}
