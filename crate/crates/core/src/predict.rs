//! Posterior predictive inference from a fitted chain.
//!
//! For each retained sample the low level is predicted first with a
//! universal-kriging Student-T law on the complete grid, then the high level
//! is predicted using the drawn low-level value as an extra regressor.

use faer::Mat;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::chain::{ChainOutput, ChainSample, LevelSample};
use crate::dense::{dot, SpdFactor};
use crate::error::{Error, Result};
use crate::kernels::{factor_pair, GridGeometry, SeparableKernelParams, COINCIDENCE_TOL};
use crate::kron::KroneckerFactorPair;
use crate::model::{partition_granule, Granule, MeanDesign};
use crate::par::{self, Execution};

/// A prediction location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub lon: f64,
    pub lat: f64,
    pub pressure_hpa: f64,
}

/// How the mean surface enters each per-sample predictive law.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanTreatment {
    /// Coefficients and scale re-estimated per sample (Student-T law).
    #[default]
    Estimated,
    /// Sampled coefficients and variances plugged in (Gaussian law).
    PlugIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub targets: Vec<Target>,
    pub n_draws_per_sample: usize,
    pub interval_level: f64,
    pub keep_draws: bool,
    pub mean_treatment: MeanTreatment,
    pub execution: Execution,
}

impl PredictionRequest {
    pub fn new(targets: Vec<Target>) -> Self {
        Self {
            targets,
            n_draws_per_sample: 1,
            interval_level: 0.95,
            keep_draws: true,
            mean_treatment: MeanTreatment::Estimated,
            execution: Execution::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::InvalidArgument("target list is empty".into()));
        }
        if self.n_draws_per_sample == 0 {
            return Err(Error::InvalidArgument("n_draws_per_sample must be >= 1".into()));
        }
        if !(self.interval_level > 0.0 && self.interval_level < 1.0) {
            return Err(Error::InvalidArgument("interval_level must lie in (0, 1)".into()));
        }
        for t in &self.targets {
            if !(t.lon.is_finite() && t.lat.is_finite() && t.pressure_hpa > 0.0 && t.pressure_hpa.is_finite()) {
                return Err(Error::InvalidArgument(format!("invalid target {t:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub targets: Vec<Target>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub interval_level: f64,
    /// True where the target pressure lies outside the granule's levels.
    pub extrapolated: Vec<bool>,
    /// Pooled draws per target, ordered by sample index then draw index.
    pub draws: Option<Vec<Vec<f64>>>,
}

impl PredictiveSummary {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Posterior mean and spread of `y_H` at grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub cells: Vec<usize>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Averages the per-sample conditional means `ρ ỹ_L + H_H β_H + w_H` over the
/// chain. `cells` defaults to `d_miss ∪ d_low`.
pub fn rao_blackwell_reconstruct(
    chain: &ChainOutput<ChainSample>,
    granule: &Granule,
    design_low: &MeanDesign,
    design_high: &MeanDesign,
    cells: Option<&[usize]>,
) -> Result<Reconstruction> {
    chain.require_samples()?;
    let cells: Vec<usize> = match cells {
        Some(c) => c.to_vec(),
        None => {
            let s = partition_granule(granule);
            let mut c: Vec<usize> = s.d_miss.iter().chain(&s.d_low).copied().collect();
            c.sort_unstable();
            c
        }
    };
    if let Some(&bad) = cells.iter().find(|&&c| c >= granule.len()) {
        return Err(Error::InvalidArgument(format!("cell {bad} outside the grid")));
    }
    let per_sample: Vec<Vec<f64>> = chain
        .samples
        .iter()
        .map(|s| {
            let ml = design_low.apply(&s.params.low.beta);
            let mh = design_high.apply(&s.params.high.beta);
            cells
                .iter()
                .map(|&c| s.params.rho * (ml[c] + s.w_low[c]) + mh[c] + s.w_high[c])
                .collect()
        })
        .collect();
    let n = per_sample.len() as f64;
    let mut mean = vec![0.0; cells.len()];
    for v in &per_sample {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n;
        }
    }
    let sd = (0..cells.len())
        .map(|k| {
            if per_sample.len() < 2 {
                0.0
            } else {
                let ss: f64 = per_sample.iter().map(|v| (v[k] - mean[k]).powi(2)).sum();
                (ss / (n - 1.0)).sqrt()
            }
        })
        .collect();
    Ok(Reconstruction { cells, mean, sd })
}

/// `R⁻¹ r` and `rᵀ R⁻¹ r` for one factor's cross-correlation vector.
#[derive(Debug, Clone)]
struct FactorSolve {
    solved: Vec<f64>,
    quad: f64,
}

fn factor_solve(eig: &crate::kron::SymEig, r: &[f64], coincident: Option<usize>, diag: f64) -> FactorSolve {
    match coincident {
        // r is then exactly column k of the factor.
        Some(k) => {
            let mut solved = vec![0.0; r.len()];
            solved[k] = 1.0;
            FactorSolve { solved, quad: diag }
        }
        None => FactorSolve {
            quad: eig.quadform_vec(r),
            solved: eig.solve_vec(r),
        },
    }
}

/// Target coordinates snapped onto coincident grid coordinates.
#[derive(Debug, Clone)]
struct TargetGeometry {
    loc: (f64, f64),
    logp: f64,
    loc_index: Option<usize>,
    /// Index into the list of unique target pressures.
    pressure_slot: usize,
}

#[derive(Debug, Clone)]
struct PressureSlot {
    logp: f64,
    level_index: Option<usize>,
}

fn target_geometry(targets: &[Target], grid: &GridGeometry) -> (Vec<TargetGeometry>, Vec<PressureSlot>) {
    let mut slots: Vec<PressureSlot> = Vec::new();
    let geo = targets
        .iter()
        .map(|t| {
            let loc_index = grid.locs.iter().position(|l| {
                (l.0 - t.lon).abs() <= COINCIDENCE_TOL && (l.1 - t.lat).abs() <= COINCIDENCE_TOL
            });
            let lp = t.pressure_hpa.ln();
            let level_index = grid.logp.iter().position(|g| (g - lp).abs() <= COINCIDENCE_TOL);
            let logp = level_index.map_or(lp, |j| grid.logp[j]);
            let pressure_slot = match slots.iter().position(|s| s.logp == logp) {
                Some(k) => k,
                None => {
                    slots.push(PressureSlot { logp, level_index });
                    slots.len() - 1
                }
            };
            TargetGeometry {
                loc: loc_index.map_or((t.lon, t.lat), |k| grid.locs[k]),
                logp,
                loc_index,
                pressure_slot,
            }
        })
        .collect();
    (geo, slots)
}

/// One level's per-sample predictive ingredients on the complete grid.
struct Stage<'a> {
    pair: &'a KroneckerFactorPair,
    theta: SeparableKernelParams,
    /// Regressor columns on the grid.
    columns: Vec<Vec<f64>>,
    /// Coefficients: estimated `γ̂` or the sampled values.
    gamma: Vec<f64>,
    /// Residual on the grid: `ỹ - F γ`.
    resid: Vec<f64>,
    /// Scale factor: `σ̂²` or the sampled `σ²`.
    scale2: f64,
    /// `(Fᵀ R⁻¹ F)⁻¹` for the estimated treatment.
    a_hat: Option<Mat<f64>>,
}

impl<'a> Stage<'a> {
    fn new(
        pair: &'a KroneckerFactorPair,
        theta: SeparableKernelParams,
        columns: Vec<Vec<f64>>,
        y: &[f64],
        plug_in: Option<(Vec<f64>, f64)>,
    ) -> Result<Self> {
        let n = y.len();
        let q = columns.len();
        let fitted = |gamma: &[f64]| -> Vec<f64> {
            (0..n)
                .map(|c| y[c] - columns.iter().zip(gamma).map(|(col, g)| col[c] * g).sum::<f64>())
                .collect()
        };
        match plug_in {
            Some((gamma, sigma2)) => {
                let resid = fitted(&gamma);
                Ok(Self {
                    pair,
                    theta,
                    columns,
                    gamma,
                    resid,
                    scale2: sigma2,
                    a_hat: None,
                })
            }
            None => {
                if n <= q {
                    return Err(Error::RankDeficient(format!("{q} regressors on {n} grid cells")));
                }
                let rif: Vec<Vec<f64>> = columns.iter().map(|c| pair.solve(c)).collect::<Result<_>>()?;
                let gram = Mat::from_fn(q, q, |i, j| dot(&columns[i], &rif[j]));
                let fty: Vec<f64> = rif.iter().map(|r| dot(r, y)).collect();
                let factor = SpdFactor::new(gram.as_ref(), "predictive regressor gram")
                    .map_err(|_| Error::RankDeficient("predictive regressors are collinear".into()))?;
                let gamma = factor.solve_vec(&fty);
                let resid = fitted(&gamma);
                let quad = dot(&resid, &pair.solve(&resid)?);
                Ok(Self {
                    pair,
                    theta,
                    columns,
                    gamma,
                    resid,
                    scale2: quad / (n - q) as f64,
                    a_hat: Some(factor.inverse()),
                })
            }
        }
    }

    /// Per-pressure projections `mat(v) · R_p⁻¹ r_p` for the residual and every column.
    fn pressure_projections(&self, slots: &[PressureSlot], grid: &GridGeometry) -> Vec<SlotProjection> {
        let n_s = grid.n_spatial();
        let n_p = grid.n_pressure();
        slots
            .iter()
            .map(|slot| {
                let r: Vec<f64> = grid.logp.iter().map(|&g| self.theta.pressure(slot.logp, g)).collect();
                let fs = factor_solve(self.pair.pressure(), &r, slot.level_index, 1.0 + self.theta.g2_p);
                let project = |v: &[f64]| -> Vec<f64> {
                    (0..n_s)
                        .map(|i| (0..n_p).map(|j| v[i * n_p + j] * fs.solved[j]).sum())
                        .collect()
                };
                SlotProjection {
                    quad: fs.quad,
                    resid: project(&self.resid),
                    columns: self.columns.iter().map(|c| project(c)).collect(),
                }
            })
            .collect()
    }

    /// Location and squared scale at one target. `f_star` is the target's
    /// regressor row.
    fn moments(&self, f_star: &[f64], spatial: &FactorSolve, proj: &SlotProjection) -> (f64, f64) {
        let quad = spatial.quad * proj.quad;
        let c_star = (1.0 + self.theta.g2_s) * (1.0 + self.theta.g2_p);
        let loc = dot(f_star, &self.gamma) + dot(&spatial.solved, &proj.resid);
        let mut var = c_star - quad;
        if let Some(a) = &self.a_hat {
            let u: Vec<f64> = f_star
                .iter()
                .zip(&proj.columns)
                .map(|(f, col)| f - dot(&spatial.solved, col))
                .collect();
            let q = u.len();
            let mut uau = 0.0;
            for i in 0..q {
                for j in 0..q {
                    uau += u[i] * a[(i, j)] * u[j];
                }
            }
            var += uau;
        }
        (loc, (self.scale2 * var).max(0.0))
    }

    fn spatial_solve(&self, tg: &TargetGeometry, grid: &GridGeometry) -> FactorSolve {
        let r: Vec<f64> = grid.locs.iter().map(|&l| self.theta.spatial(tg.loc, l)).collect();
        factor_solve(self.pair.spatial(), &r, tg.loc_index, 1.0 + self.theta.g2_s)
    }
}

struct SlotProjection {
    quad: f64,
    resid: Vec<f64>,
    columns: Vec<Vec<f64>>,
}

fn degrees_of_freedom(n: usize) -> f64 {
    1.0 + n as f64
}

fn draw_standardized<R: rand::Rng + ?Sized>(t: &Option<StudentT<f64>>, rng: &mut R) -> f64 {
    match t {
        Some(t) => t.sample(rng),
        None => StandardNormal.sample(rng),
    }
}

/// Factor pairs for each distinct kernel parameter value, in first-seen order.
fn unique_pairs(
    thetas: &[SeparableKernelParams],
    grid: &GridGeometry,
    exec: Execution,
) -> Result<(Vec<usize>, Vec<KroneckerFactorPair>)> {
    let mut uniq: Vec<SeparableKernelParams> = Vec::new();
    let index = thetas
        .iter()
        .map(|t| match uniq.iter().position(|u| u == t) {
            Some(k) => k,
            None => {
                uniq.push(*t);
                uniq.len() - 1
            }
        })
        .collect();
    let pairs = par::map_indexed(uniq.len(), exec, |k| factor_pair(grid, &uniq[k]));
    Ok((index, pairs.into_iter().collect::<Result<_>>()?))
}

fn design_columns(design: &MeanDesign) -> Vec<Vec<f64>> {
    (0..design.n_coef()).map(|c| design.column(c)).collect()
}

struct SampleDraws {
    rb_mean: Vec<f64>,
    draws: Vec<Vec<f64>>,
}

/// Two-stage recursive prediction of `y_H` at arbitrary targets.
pub fn predict_recursive<R: RngCore>(
    chain: &ChainOutput<ChainSample>,
    granule: &Granule,
    design_low: &MeanDesign,
    design_high: &MeanDesign,
    request: &PredictionRequest,
    rng: &mut R,
) -> Result<PredictiveSummary> {
    request.validate()?;
    chain.require_samples()?;
    let grid = granule.geometry();
    let n = grid.len();
    let (geo, slots) = target_geometry(&request.targets, &grid);
    let rows_low: Vec<Vec<f64>> = geo.iter().map(|g| design_low.row(g.loc, g.logp)).collect();
    let rows_high: Vec<Vec<f64>> = geo.iter().map(|g| design_high.row(g.loc, g.logp)).collect();
    let cols_low = design_columns(design_low);
    let cols_high = design_columns(design_high);
    let exec = request.execution;
    let (idx_l, pairs_l) = unique_pairs(
        &chain.samples.iter().map(|s| s.params.low.theta).collect::<Vec<_>>(),
        &grid,
        exec,
    )?;
    let (idx_h, pairs_h) = unique_pairs(
        &chain.samples.iter().map(|s| s.params.high.theta).collect::<Vec<_>>(),
        &grid,
        exec,
    )?;
    let estimated = request.mean_treatment == MeanTreatment::Estimated;
    let t_law = if estimated {
        Some(StudentT::new(degrees_of_freedom(n)).map_err(|e| Error::Numerical(e.to_string()))?)
    } else {
        None
    };
    let base_seed = rng.next_u64();

    let per_sample = par::map_indexed(chain.len(), exec, |j| -> Result<SampleDraws> {
        let s = &chain.samples[j];
        let p = &s.params;
        let ml = design_low.apply(&p.low.beta);
        let yl: Vec<f64> = ml.iter().zip(&s.w_low).map(|(a, b)| a + b).collect();
        let mh = design_high.apply(&p.high.beta);
        let yh: Vec<f64> = (0..n).map(|c| p.rho * yl[c] + mh[c] + s.w_high[c]).collect();

        let stage_l = Stage::new(
            &pairs_l[idx_l[j]],
            p.low.theta,
            cols_low.clone(),
            &yl,
            (!estimated).then(|| (p.low.beta.clone(), p.low.sigma2)),
        )?;
        let mut cols_h = cols_high.clone();
        cols_h.push(yl.clone());
        let plug_h = (!estimated).then(|| {
            let mut g = p.high.beta.clone();
            g.push(p.rho);
            (g, p.high.sigma2)
        });
        let stage_h = Stage::new(&pairs_h[idx_h[j]], p.high.theta, cols_h, &yh, plug_h)?;

        let proj_l = stage_l.pressure_projections(&slots, &grid);
        let proj_h = stage_h.pressure_projections(&slots, &grid);
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(j as u64);
        let mut rb_mean = Vec::with_capacity(geo.len());
        let mut draws = Vec::with_capacity(geo.len());
        for (k, tg) in geo.iter().enumerate() {
            let sl = stage_l.spatial_solve(tg, &grid);
            let sh = stage_h.spatial_solve(tg, &grid);
            let (loc_l, var_l) = stage_l.moments(&rows_low[k], &sl, &proj_l[tg.pressure_slot]);
            let mut f_h = rows_high[k].clone();
            f_h.push(loc_l);
            rb_mean.push(stage_h.moments(&f_h, &sh, &proj_h[tg.pressure_slot]).0);
            let mut target_draws = Vec::with_capacity(request.n_draws_per_sample);
            for _ in 0..request.n_draws_per_sample {
                let y_l = loc_l + var_l.sqrt() * draw_standardized(&t_law, &mut rng);
                *f_h.last_mut().expect("regressor row is non-empty") = y_l;
                let (loc_h, var_h) = stage_h.moments(&f_h, &sh, &proj_h[tg.pressure_slot]);
                target_draws.push(loc_h + var_h.sqrt() * draw_standardized(&t_law, &mut rng));
            }
            draws.push(target_draws);
        }
        Ok(SampleDraws { rb_mean, draws })
    });
    let per_sample: Vec<SampleDraws> = per_sample.into_iter().collect::<Result<_>>()?;
    Ok(summarize(request, &grid, per_sample))
}

/// Single-level prediction from a one-level chain (the baseline model).
pub fn predict_single_level<R: RngCore>(
    chain: &ChainOutput<LevelSample>,
    granule: &Granule,
    design: &MeanDesign,
    request: &PredictionRequest,
    rng: &mut R,
) -> Result<PredictiveSummary> {
    request.validate()?;
    chain.require_samples()?;
    let grid = granule.geometry();
    let (geo, slots) = target_geometry(&request.targets, &grid);
    let rows: Vec<Vec<f64>> = geo.iter().map(|g| design.row(g.loc, g.logp)).collect();
    let cols = design_columns(design);
    let exec = request.execution;
    let (idx, pairs) = unique_pairs(
        &chain.samples.iter().map(|s| s.params.theta).collect::<Vec<_>>(),
        &grid,
        exec,
    )?;
    let estimated = request.mean_treatment == MeanTreatment::Estimated;
    let t_law = if estimated {
        Some(StudentT::new(degrees_of_freedom(grid.len())).map_err(|e| Error::Numerical(e.to_string()))?)
    } else {
        None
    };
    let base_seed = rng.next_u64();
    let per_sample = par::map_indexed(chain.len(), exec, |j| -> Result<SampleDraws> {
        let s = &chain.samples[j];
        let m = design.apply(&s.params.beta);
        let y: Vec<f64> = m.iter().zip(&s.w).map(|(a, b)| a + b).collect();
        let stage = Stage::new(
            &pairs[idx[j]],
            s.params.theta,
            cols.clone(),
            &y,
            (!estimated).then(|| (s.params.beta.clone(), s.params.sigma2)),
        )?;
        let proj = stage.pressure_projections(&slots, &grid);
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(j as u64);
        let mut rb_mean = Vec::with_capacity(geo.len());
        let mut draws = Vec::with_capacity(geo.len());
        for (k, tg) in geo.iter().enumerate() {
            let sv = stage.spatial_solve(tg, &grid);
            let (loc, var) = stage.moments(&rows[k], &sv, &proj[tg.pressure_slot]);
            rb_mean.push(loc);
            draws.push(
                (0..request.n_draws_per_sample)
                    .map(|_| loc + var.sqrt() * draw_standardized(&t_law, &mut rng))
                    .collect(),
            );
        }
        Ok(SampleDraws { rb_mean, draws })
    });
    let per_sample: Vec<SampleDraws> = per_sample.into_iter().collect::<Result<_>>()?;
    Ok(summarize(request, &grid, per_sample))
}

fn summarize(request: &PredictionRequest, grid: &GridGeometry, per_sample: Vec<SampleDraws>) -> PredictiveSummary {
    let m = request.targets.len();
    let n_samples = per_sample.len() as f64;
    let (lo_lp, hi_lp) = grid
        .logp
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut summary = PredictiveSummary {
        targets: request.targets.clone(),
        mean: Vec::with_capacity(m),
        sd: Vec::with_capacity(m),
        lower: Vec::with_capacity(m),
        upper: Vec::with_capacity(m),
        interval_level: request.interval_level,
        extrapolated: request
            .targets
            .iter()
            .map(|t| {
                let lp = t.pressure_hpa.ln();
                lp < lo_lp - COINCIDENCE_TOL || lp > hi_lp + COINCIDENCE_TOL
            })
            .collect(),
        draws: None,
    };
    let mut all_draws = Vec::with_capacity(m);
    for k in 0..m {
        let pooled: Vec<f64> = per_sample.iter().flat_map(|s| s.draws[k].iter().copied()).collect();
        let mean = per_sample.iter().map(|s| s.rb_mean[k]).sum::<f64>() / n_samples;
        let (lower, upper) = equal_tail_interval(&pooled, request.interval_level);
        let dm = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let sd = if pooled.len() > 1 {
            (pooled.iter().map(|x| (x - dm).powi(2)).sum::<f64>() / (pooled.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        summary.mean.push(mean);
        summary.sd.push(sd);
        summary.lower.push(lower);
        summary.upper.push(upper);
        all_draws.push(pooled);
    }
    if request.keep_draws {
        summary.draws = Some(all_draws);
    }
    summary
}

/// Order-statistic bounds: the `⌊N·α/2⌋`-th smallest and largest draws, `α = 1 − level`.
pub fn equal_tail_interval(draws: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = ((n as f64) * (1.0 - level) / 2.0).floor() as usize;
    let k = k.min((n - 1) / 2);
    (sorted[k], sorted[n - 1 - k])
}

/// Predicts at every spatial location of the granule at one pressure.
pub fn predict_level_slice<R: RngCore>(
    chain: &ChainOutput<ChainSample>,
    granule: &Granule,
    design_low: &MeanDesign,
    design_high: &MeanDesign,
    pressure_hpa: f64,
    template: &PredictionRequest,
    rng: &mut R,
) -> Result<PredictiveSummary> {
    let request = PredictionRequest {
        targets: slice_targets(granule, pressure_hpa),
        ..template.clone()
    };
    predict_recursive(chain, granule, design_low, design_high, &request, rng)
}

pub fn slice_targets(granule: &Granule, pressure_hpa: f64) -> Vec<Target> {
    granule
        .locations()
        .into_iter()
        .map(|(lon, lat)| Target { lon, lat, pressure_hpa })
        .collect()
}
