//! Reference models: the single-fidelity separable GP that pools flags 0 and
//! 1, and a dense direct-inference model of the two-level data for small grids.

use faer::Mat;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chain::{ChainOutput, ChainSample, LevelSample};
use crate::dense::{dot, mat_t_vec, SpdFactor};
use crate::error::{Error, Result};
use crate::kernels::{factor_pair, GridGeometry, SeparableKernelParams};
use crate::kron::{kron_quadform, KroneckerFactorPair};
use crate::model::{check_level, Granule, LevelParams, MeanDesign, ModelParams, NuggetMode, Priors};
use crate::predict::{predict_single_level, PredictionRequest, PredictiveSummary};
use crate::sampler::{
    adapt_scale, level_sigma2_conditional, level_tau2_conditional, level_w_conditional, ols,
    regression_conditional, theta_log_jacobian, theta_mh, ChainConfig, InvGammaConditional,
    Level, LatentConditional, ModelData, NormalConditional,
};

/// Inputs of the single-level model: every observed cell counts as data.
#[derive(Debug, Clone)]
pub struct SgpData {
    geometry: GridGeometry,
    z_obs: Vec<f64>,
    observed: Vec<bool>,
    design: MeanDesign,
}

impl SgpData {
    /// Pools flags 0 and 1 of `granule` as observations of one process.
    pub fn new(granule: &Granule, design: MeanDesign) -> Result<Self> {
        if design.full().nrows() != granule.len() {
            return Err(Error::Dimension {
                context: "mean design rows",
                expected: granule.len(),
                actual: design.full().nrows(),
            });
        }
        Ok(Self {
            geometry: granule.geometry(),
            z_obs: granule.temperature().to_vec(),
            observed: granule.flags().iter().map(|f| f.is_observed()).collect(),
            design,
        })
    }

    pub fn len(&self) -> usize {
        self.z_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_obs.is_empty()
    }

    pub fn design(&self) -> &MeanDesign {
        &self.design
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }
}

#[derive(Debug, Clone)]
pub struct SgpState {
    pub params: LevelParams,
    pub w: Vec<f64>,
    /// Complete data: observed where available, imputed elsewhere.
    pub z: Vec<f64>,
    pair: KroneckerFactorPair,
}

impl SgpState {
    pub fn new(params: LevelParams, w: Vec<f64>, mut z: Vec<f64>, data: &SgpData) -> Result<Self> {
        let n = data.len();
        if w.len() != n || z.len() != n {
            return Err(Error::Dimension {
                context: "sgp state",
                expected: n,
                actual: w.len().min(z.len()),
            });
        }
        for c in 0..n {
            if data.observed[c] {
                z[c] = data.z_obs[c];
            }
        }
        let pair = factor_pair(&data.geometry, &params.theta)?;
        Ok(Self { params, w, z, pair })
    }

    pub fn pair(&self) -> &KroneckerFactorPair {
        &self.pair
    }

    fn mean_surface(&self, data: &SgpData) -> Vec<f64> {
        data.design.apply(&self.params.beta)
    }
}

pub fn sgp_w_conditional(state: &SgpState, data: &SgpData) -> LatentConditional {
    let m = state.mean_surface(data);
    let resid: Vec<f64> = state.z.iter().zip(&m).map(|(z, m)| z - m).collect();
    level_w_conditional(&state.params, &resid)
}

pub fn sgp_beta_conditional(state: &SgpState, data: &SgpData, priors: &Priors) -> Result<NormalConditional> {
    let target: Vec<f64> = state.z.iter().zip(&state.w).map(|(z, w)| z - w).collect();
    regression_conditional(
        &data.design.gram(),
        &data.design.apply_transpose(&target),
        state.params.tau2,
        priors.beta_var,
        "mean design",
    )
}

pub fn sgp_sigma2_conditional(state: &SgpState, priors: &Priors) -> Result<InvGammaConditional> {
    Ok(level_sigma2_conditional(state.w.len(), kron_quadform(&state.pair, &state.w)?, priors))
}

pub fn sgp_tau2_conditional(state: &SgpState, data: &SgpData, priors: &Priors) -> InvGammaConditional {
    let m = state.mean_surface(data);
    let resid: Vec<f64> = (0..data.len()).map(|c| state.z[c] - m[c] - state.w[c]).collect();
    level_tau2_conditional(&resid, priors)
}

/// Cells to impute and their means; the common variance is `τ²`.
pub fn sgp_imputation_moments(state: &SgpState, data: &SgpData) -> (Vec<usize>, Vec<f64>) {
    let m = state.mean_surface(data);
    let cells: Vec<usize> = (0..data.len()).filter(|&c| !data.observed[c]).collect();
    let means = cells.iter().map(|&c| m[c] + state.w[c]).collect();
    (cells, means)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SgpBlock {
    Impute,
    W,
    Beta,
    Sigma2,
    Tau2,
    Theta,
}

impl SgpBlock {
    const ALL: [SgpBlock; 6] = [
        SgpBlock::Impute,
        SgpBlock::W,
        SgpBlock::Beta,
        SgpBlock::Sigma2,
        SgpBlock::Tau2,
        SgpBlock::Theta,
    ];

    fn name(self) -> &'static str {
        match self {
            SgpBlock::Impute => "impute_missing",
            SgpBlock::W => "update_w",
            SgpBlock::Beta => "update_beta",
            SgpBlock::Sigma2 => "update_sigma2",
            SgpBlock::Tau2 => "update_tau2",
            SgpBlock::Theta => "update_theta",
        }
    }
}

/// One random-scan sweep of the single-level sampler. Returns the θ step's
/// `(accepted, alpha)`.
pub fn sgp_sweep<R: RngCore>(
    state: &mut SgpState,
    data: &SgpData,
    priors: &Priors,
    nugget: NuggetMode,
    rw_step: &[f64; 5],
    scale: f64,
    rng: &mut R,
) -> Result<(bool, f64)> {
    let mut order = SgpBlock::ALL;
    order.shuffle(rng);
    let mut report = (false, 0.0);
    for block in order {
        let r: Result<()> = match block {
            SgpBlock::Impute => {
                let (cells, means) = sgp_imputation_moments(state, data);
                let sd = state.params.tau2.sqrt();
                for (&c, m) in cells.iter().zip(&means) {
                    let e: f64 = StandardNormal.sample(rng);
                    state.z[c] = m + sd * e;
                }
                Ok(())
            }
            SgpBlock::W => sgp_w_conditional(state, data)
                .draw(&state.pair, rng)
                .map(|w| state.w = w),
            SgpBlock::Beta => sgp_beta_conditional(state, data, priors)
                .and_then(|c| c.draw(rng))
                .map(|b| state.params.beta = b),
            SgpBlock::Sigma2 => sgp_sigma2_conditional(state, priors)
                .and_then(|c| c.draw(rng))
                .map(|v| state.params.sigma2 = v),
            SgpBlock::Tau2 => sgp_tau2_conditional(state, data, priors)
                .draw(rng)
                .map(|v| state.params.tau2 = v),
            SgpBlock::Theta => {
                let mut r = ChaCha8Rng::seed_from_u64(rng.next_u64());
                theta_mh(
                    &state.params.theta,
                    &state.pair,
                    &state.w,
                    state.params.sigma2,
                    &data.geometry,
                    priors,
                    nugget,
                    rw_step,
                    scale,
                    &mut r,
                )
                .map(|step| {
                    state.params.theta = step.theta;
                    if let Some(p) = step.pair {
                        state.pair = p;
                    }
                    report = (step.accepted, step.alpha);
                })
            }
        };
        r.map_err(|e| e.in_block(block.name()))?;
    }
    Ok(report)
}

/// Runs the single-level chain on `granule` with flags 0 and 1 pooled. The
/// level uses `config.nugget_high`; `fix_rho` and `nugget_low` are ignored.
pub fn run_sgp_chain(
    granule: &Granule,
    design: &MeanDesign,
    priors: &Priors,
    config: &ChainConfig,
) -> Result<ChainOutput<LevelSample>> {
    config.validate()?;
    priors.validate().map_err(|v| Error::Config(v.join("; ")))?;
    let data = SgpData::new(granule, design.clone())?;
    let nugget = config.nugget_high;
    let params = match &config.initial {
        Some(p) => p.high.clone(),
        None => {
            let cells: Vec<usize> = (0..data.len()).filter(|&c| data.observed[c]).collect();
            let (beta, v) = ols(design, &data.z_obs, &cells)?;
            let half = (0.5 * v).max(1e-6);
            LevelParams {
                beta,
                sigma2: half,
                tau2: half,
                theta: priors.theta_median(nugget),
            }
        }
    };
    let mut violations = Vec::new();
    check_level(&mut violations, "S", &params, priors);
    if !violations.is_empty() {
        return Err(Error::Config(format!("initial parameters: {}", violations.join("; "))));
    }
    let n = data.len();
    let m = design.apply(&params.beta);
    let mut state = SgpState::new(params, vec![0.0; n], m, &data)?;
    state.w = sgp_w_conditional(&state, &data).mean(&state.pair)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scale = 1.0;
    let mut accepted = 0usize;
    let mut samples = Vec::with_capacity(config.n_samples());
    for t in 0..config.n_iter {
        let (acc, alpha) = sgp_sweep(&mut state, &data, priors, nugget, &config.rw_step, scale, &mut rng)
            .map_err(|e| Error::Iteration {
                iteration: t,
                source: Box::new(e),
            })?;
        if t < config.n_burn {
            if config.adapt {
                scale = adapt_scale(scale, alpha, config.target_acceptance, t);
            }
            continue;
        }
        accepted += acc as usize;
        if (t - config.n_burn + 1) % config.thin == 0 {
            samples.push(LevelSample {
                params: state.params.clone(),
                w: state.w.clone(),
            });
        }
    }
    let rate = accepted as f64 / (config.n_iter - config.n_burn) as f64;
    Ok(ChainOutput::new(samples, vec![("theta_S".to_string(), rate)]))
}

/// Fits the pooled single-level model and predicts at the requested targets.
pub fn sgp_fit_predict<R: RngCore>(
    granule: &Granule,
    design: &MeanDesign,
    priors: &Priors,
    config: &ChainConfig,
    request: &PredictionRequest,
    rng: &mut R,
) -> Result<(ChainOutput<LevelSample>, PredictiveSummary)> {
    let pooled = granule.pooled();
    let chain = run_sgp_chain(&pooled, design, priors, config)?;
    let summary = predict_single_level(&chain, &pooled, design, request, rng)?;
    Ok((chain, summary))
}

/// Observed data of the two-level model in dense form: high-fidelity cells
/// first, then low-fidelity cells, each in grid order.
#[derive(Debug, Clone)]
pub struct DenseData {
    model: ModelData,
    cells_high: Vec<usize>,
    cells_low: Vec<usize>,
    z: Vec<f64>,
}

pub const DEFAULT_SIZE_CAP: usize = 512;

impl DenseData {
    pub fn new(granule: &Granule, design_low: MeanDesign, design_high: MeanDesign, cap: usize) -> Result<Self> {
        let model = ModelData::new(granule, design_low, design_high)?;
        let cells_high = model.sets().d_high.clone();
        let cells_low = model.sets().d_low.clone();
        let observed = cells_high.len() + cells_low.len();
        if observed > cap {
            return Err(Error::SizeCap { observed, cap });
        }
        if observed == 0 {
            return Err(Error::InvalidArgument("no observed cells".into()));
        }
        let z = cells_high.iter().chain(&cells_low).map(|&c| model.z_obs()[c]).collect();
        Ok(Self {
            model,
            cells_high,
            cells_low,
            z,
        })
    }

    pub fn model(&self) -> &ModelData {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn cells_high(&self) -> &[usize] {
        &self.cells_high
    }

    pub fn cells_low(&self) -> &[usize] {
        &self.cells_low
    }
}

/// Assembled mean design and covariance of the observed data.
#[derive(Debug, Clone)]
pub struct DenseJointModel {
    /// `N × (m_L + m_H)`: rows `[ρ H_L, H_H]` for high cells, `[H_L, 0]` for low cells.
    pub h: Mat<f64>,
    pub v: Mat<f64>,
    pub z: Vec<f64>,
}

fn cell_corr(theta: &SeparableKernelParams, geometry: &GridGeometry, a: usize, b: usize) -> f64 {
    let n_p = geometry.n_pressure();
    theta.spatial(geometry.locs[a / n_p], geometry.locs[b / n_p]) * theta.pressure(geometry.logp[a % n_p], geometry.logp[b % n_p])
}

impl DenseJointModel {
    pub fn assemble(data: &DenseData, params: &ModelParams) -> Self {
        let g = data.model.geometry();
        let hl = data.model.design(Level::Low).full();
        let hh = data.model.design(Level::High).full();
        let (ml, mh) = (hl.ncols(), hh.ncols());
        let nh = data.cells_high.len();
        let cells: Vec<usize> = data.cells_high.iter().chain(&data.cells_low).copied().collect();
        let n = cells.len();
        let rho = params.rho;
        let h = Mat::from_fn(n, ml + mh, |r, k| {
            let c = cells[r];
            let high = r < nh;
            match (high, k < ml) {
                (true, true) => rho * hl[(c, k)],
                (true, false) => hh[(c, k - ml)],
                (false, true) => hl[(c, k)],
                (false, false) => 0.0,
            }
        });
        let (lo, hi) = (&params.low, &params.high);
        let v = Mat::from_fn(n, n, |r, s| {
            let (a, b) = (cells[r], cells[s]);
            let rl = lo.sigma2 * cell_corr(&lo.theta, g, a, b);
            let same = r == s;
            match (r < nh, s < nh) {
                (true, true) => {
                    rho * rho * rl
                        + hi.sigma2 * cell_corr(&hi.theta, g, a, b)
                        + if same { hi.tau2 } else { 0.0 }
                }
                (true, false) | (false, true) => rho * rl,
                (false, false) => rl + if same { lo.tau2 } else { 0.0 },
            }
        });
        Self {
            h,
            v,
            z: data.z.clone(),
        }
    }

    /// `log N(z; H β, V)`.
    pub fn log_density_given_beta(&self, beta: &[f64]) -> Result<f64> {
        let f = SpdFactor::new(self.v.as_ref(), "joint covariance V(Z)")?;
        let resid: Vec<f64> = (0..self.z.len())
            .map(|r| self.z[r] - (0..beta.len()).map(|k| self.h[(r, k)] * beta[k]).sum::<f64>())
            .collect();
        let n = self.z.len() as f64;
        Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + f.logdet() + dot(&resid, &f.solve_vec(&resid))))
    }
}

/// Prior on the stacked mean coefficients when integrating them out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaPrior {
    Gaussian { var: f64 },
    Flat,
}

struct Integrated {
    loglik: f64,
    beta_hat: Vec<f64>,
    w: Mat<f64>,
}

fn integrate_beta(model: &DenseJointModel, prior: BetaPrior) -> Result<Integrated> {
    let f = SpdFactor::new(model.v.as_ref(), "joint covariance V(Z)")?;
    let n = model.z.len();
    let m = model.h.ncols();
    let vi_h = f.solve_mat(model.h.as_ref());
    let vi_z = f.solve_vec(&model.z);
    let htvh = model.h.transpose() * &vi_h;
    let (prec, log_prior_det, n_eff) = match prior {
        BetaPrior::Gaussian { var } => (
            Mat::from_fn(m, m, |i, j| htvh[(i, j)] + if i == j { 1.0 / var } else { 0.0 }),
            m as f64 * var.ln(),
            n as f64,
        ),
        BetaPrior::Flat => (htvh, 0.0, (n - m) as f64),
    };
    let pf = SpdFactor::new(prec.as_ref(), "integrated coefficient precision")
        .map_err(|_| Error::RankDeficient("dense mean design is not of full column rank".into()))?;
    let htvz = mat_t_vec(model.h.as_ref(), &vi_z);
    let beta_hat = pf.solve_vec(&htvz);
    let loglik = -0.5
        * (n_eff * (2.0 * std::f64::consts::PI).ln() + f.logdet() + log_prior_det + pf.logdet() + dot(&model.z, &vi_z)
            - dot(&beta_hat, &htvz));
    Ok(Integrated {
        loglik,
        beta_hat,
        w: pf.inverse(),
    })
}

/// Log prior of the non-coefficient parameters.
pub fn log_prior(params: &ModelParams, priors: &Priors, nugget: [NuggetMode; 2], fix_rho: Option<f64>) -> f64 {
    let mut lp = 0.0;
    for (level, mode) in [(&params.low, nugget[0]), (&params.high, nugget[1])] {
        lp += priors.sigma2.log_density(level.sigma2) + priors.tau2.log_density(level.tau2);
        lp += priors.log_theta(&level.theta, mode);
    }
    match fix_rho {
        Some(r) if r == params.rho => lp,
        Some(_) => f64::NEG_INFINITY,
        None => lp - 0.5 * params.rho * params.rho / priors.beta_var,
    }
}

/// Log posterior of `(θ, σ², τ², ρ)` with the mean coefficients integrated out.
pub fn dense_loglik(
    params: &ModelParams,
    data: &DenseData,
    priors: &Priors,
    nugget: [NuggetMode; 2],
    fix_rho: Option<f64>,
    beta_prior: BetaPrior,
) -> Result<f64> {
    let lp = log_prior(params, priors, nugget, fix_rho);
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    let model = DenseJointModel::assemble(data, params);
    Ok(integrate_beta(&model, beta_prior)?.loglik + lp)
}

/// Conditional of the stacked coefficients `(β_L, β_H)` given the other parameters.
pub fn dense_beta_conditional(params: &ModelParams, data: &DenseData, beta_prior: BetaPrior) -> Result<NormalConditional> {
    let model = DenseJointModel::assemble(data, params);
    let it = integrate_beta(&model, beta_prior)?;
    let precision = SpdFactor::new(it.w.as_ref(), "coefficient covariance")?.inverse();
    Ok(NormalConditional {
        mean: it.beta_hat,
        precision,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseChainConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    /// Initial random-walk standard deviation of every unconstrained coordinate.
    pub step: f64,
    pub adapt: bool,
    pub nugget_low: NuggetMode,
    pub nugget_high: NuggetMode,
    pub fix_rho: Option<f64>,
    pub size_cap: usize,
    pub initial: Option<ModelParams>,
}

impl Default for DenseChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 10_000,
            n_burn: 2_000,
            thin: 1,
            seed: 0,
            step: 0.3,
            adapt: true,
            nugget_low: NuggetMode::default(),
            nugget_high: NuggetMode::default(),
            fix_rho: None,
            size_cap: DEFAULT_SIZE_CAP,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Coord {
    Sigma2(Level),
    Tau2(Level),
    Rho,
    Theta(Level, usize),
}

fn level_mut(p: &mut ModelParams, l: Level) -> &mut LevelParams {
    match l {
        Level::Low => &mut p.low,
        Level::High => &mut p.high,
    }
}

fn theta_component(t: &mut SeparableKernelParams, k: usize) -> &mut f64 {
    match k {
        0 => &mut t.phi_lon,
        1 => &mut t.phi_lat,
        2 => &mut t.g2_s,
        3 => &mut t.phi_p,
        _ => &mut t.g2_p,
    }
}

/// Applies a random-walk move to one coordinate in its unconstrained space
/// and returns the log Jacobian difference.
fn perturb(p: &mut ModelParams, coord: Coord, delta: f64, upper: f64, nugget: [NuggetMode; 2]) -> f64 {
    match coord {
        Coord::Sigma2(l) => {
            let x = &mut level_mut(p, l).sigma2;
            *x *= delta.exp();
            delta
        }
        Coord::Tau2(l) => {
            let x = &mut level_mut(p, l).tau2;
            *x *= delta.exp();
            delta
        }
        Coord::Rho => {
            p.rho += delta;
            0.0
        }
        Coord::Theta(l, k) => {
            let mode = nugget[if l == Level::Low { 0 } else { 1 }];
            let theta = &mut level_mut(p, l).theta;
            let before = theta_log_jacobian(theta, mode, upper);
            let x = theta_component(theta, k);
            if k == 2 || k == 4 {
                let u = (*x / upper).ln() - (1.0 - *x / upper).ln() + delta;
                *x = upper / (1.0 + (-u).exp());
            } else {
                *x *= delta.exp();
            }
            theta_log_jacobian(theta, mode, upper) - before
        }
    }
}

/// Component-wise random-walk Metropolis over `(σ², τ², ρ, θ)` on the dense
/// integrated posterior, with the coefficients drawn from their conditional
/// after each iteration. Samples carry no latent fields.
pub fn dense_reference_chain(
    granule: &Granule,
    design_low: &MeanDesign,
    design_high: &MeanDesign,
    priors: &Priors,
    config: &DenseChainConfig,
) -> Result<ChainOutput<ChainSample>> {
    if config.n_burn >= config.n_iter || config.thin == 0 || !(config.step > 0.0) {
        return Err(Error::Config("dense chain needs n_burn < n_iter, thin >= 1, step > 0".into()));
    }
    let data = DenseData::new(granule, design_low.clone(), design_high.clone(), config.size_cap)?;
    let nugget = [config.nugget_low, config.nugget_high];
    let beta_prior = BetaPrior::Gaussian { var: priors.beta_var };
    let mut params = match &config.initial {
        Some(p) => p.clone(),
        None => {
            let chain_config = ChainConfig {
                nugget_low: config.nugget_low,
                nugget_high: config.nugget_high,
                fix_rho: config.fix_rho,
                ..ChainConfig::default()
            };
            crate::sampler::initial_params(data.model(), priors, &chain_config)?
        }
    };
    if let Some(r) = config.fix_rho {
        params.rho = r;
    }
    let mut coords = Vec::new();
    for l in [Level::Low, Level::High] {
        coords.push(Coord::Sigma2(l));
        coords.push(Coord::Tau2(l));
        let mode = nugget[if l == Level::Low { 0 } else { 1 }];
        for k in 0..5 {
            if (k == 2 || k == 4) && mode != NuggetMode::Random {
                continue;
            }
            coords.push(Coord::Theta(l, k));
        }
    }
    if config.fix_rho.is_none() {
        coords.push(Coord::Rho);
    }
    let upper = priors.nugget.upper;
    let mut current = dense_loglik(&params, &data, priors, nugget, config.fix_rho, beta_prior)?;
    if current == f64::NEG_INFINITY {
        return Err(Error::Config("initial parameters outside prior support".into()));
    }
    let mut steps = vec![config.step; coords.len()];
    let mut accepted = vec![0usize; coords.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::new();
    for t in 0..config.n_iter {
        for (i, &coord) in coords.iter().enumerate() {
            let mut proposal = params.clone();
            let e: f64 = StandardNormal.sample(&mut rng);
            let jac = perturb(&mut proposal, coord, steps[i] * e, upper, nugget);
            let lp = dense_loglik(&proposal, &data, priors, nugget, config.fix_rho, beta_prior)
                .map_err(|err| Error::Iteration {
                    iteration: t,
                    source: Box::new(err),
                })?;
            let log_ratio = if lp == f64::NEG_INFINITY { f64::NEG_INFINITY } else { lp - current + jac };
            let u: f64 = rng.random();
            let ok = u.ln() < log_ratio;
            if ok {
                params = proposal;
                current = lp;
            }
            if t < config.n_burn {
                if config.adapt {
                    steps[i] = adapt_scale(steps[i], log_ratio.min(0.0).exp(), 0.44, t);
                }
            } else {
                accepted[i] += ok as usize;
            }
        }
        if t >= config.n_burn && (t - config.n_burn + 1) % config.thin == 0 {
            let beta = dense_beta_conditional(&params, &data, beta_prior)?.draw(&mut rng)?;
            let ml = params.low.beta.len();
            let mut p = params.clone();
            p.low.beta = beta[..ml].to_vec();
            p.high.beta = beta[ml..].to_vec();
            samples.push(ChainSample {
                params: p,
                w_low: Vec::new(),
                w_high: Vec::new(),
            });
        }
    }
    let kept = (config.n_iter - config.n_burn) as f64;
    let total: usize = accepted.iter().sum();
    let acceptance = vec![("dense_mh".to_string(), total as f64 / (kept * coords.len() as f64))];
    Ok(ChainOutput::new(samples, acceptance))
}
