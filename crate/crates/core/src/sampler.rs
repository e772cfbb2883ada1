//! Metropolis-within-Gibbs sampler for the two-level augmented posterior.
//!
//! The state carries the latent fields `w_L`, `w_H` and complete data vectors
//! `z̃_L`, `z̃_H` on every grid cell, so each conditional keeps the Kronecker
//! structure of the complete grid. Conditionals are exposed as plain structs
//! (`*_conditional`) so they can be inspected independently of the draws.

use faer::Mat;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chain::{ChainOutput, ChainSample};
use crate::dense::{dot, SpdFactor};
use crate::error::{Error, Result};
use crate::kernels::{factor_pair, GridGeometry, SeparableKernelParams};
use crate::kron::{
    diag_plus_invkron_covariance, kron_logdet, kron_quadform, sample_diag_plus_invkron_gaussian,
    KroneckerFactorPair,
};
use crate::model::{
    partition_granule, validate_params, Flag, Granule, IndexSets, LevelParams, MeanDesign, ModelParams,
    NuggetMode, Priors,
};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Low,
    High,
}

impl Level {
    pub fn tag(self) -> &'static str {
        match self {
            Level::Low => "L",
            Level::High => "H",
        }
    }
}

/// Fixed inputs of one chain: grid geometry, flag partition, observations and designs.
#[derive(Debug, Clone)]
pub struct ModelData {
    geometry: GridGeometry,
    sets: IndexSets,
    z_obs: Vec<f64>,
    flags: Vec<Flag>,
    design_low: MeanDesign,
    design_high: MeanDesign,
}

impl ModelData {
    pub fn new(granule: &Granule, design_low: MeanDesign, design_high: MeanDesign) -> Result<Self> {
        for d in [&design_low, &design_high] {
            if d.full().nrows() != granule.len() {
                return Err(Error::Dimension {
                    context: "mean design rows",
                    expected: granule.len(),
                    actual: d.full().nrows(),
                });
            }
        }
        Ok(Self {
            geometry: granule.geometry(),
            sets: partition_granule(granule),
            z_obs: granule.temperature().to_vec(),
            flags: granule.flags().to_vec(),
            design_low,
            design_high,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn sets(&self) -> &IndexSets {
        &self.sets
    }

    pub fn len(&self) -> usize {
        self.z_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_obs.is_empty()
    }

    pub fn design(&self, level: Level) -> &MeanDesign {
        match level {
            Level::Low => &self.design_low,
            Level::High => &self.design_high,
        }
    }

    pub fn observed(&self, level: Level, cell: usize) -> bool {
        match level {
            Level::Low => self.flags[cell] == Flag::Low,
            Level::High => self.flags[cell] == Flag::High,
        }
    }

    /// Cells of the complete grid whose `level` value is imputed.
    pub fn missing_cells(&self, level: Level) -> Vec<usize> {
        (0..self.len()).filter(|&c| !self.observed(level, c)).collect()
    }

    pub fn z_obs(&self) -> &[f64] {
        &self.z_obs
    }
}

/// Current values of every sampled quantity plus cached factorizations.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub params: ModelParams,
    pub w_low: Vec<f64>,
    pub w_high: Vec<f64>,
    /// Complete low-fidelity data: observed on `d_low`, imputed elsewhere.
    pub z_low: Vec<f64>,
    /// Complete high-fidelity data: observed on `d_high`, imputed elsewhere.
    pub z_high: Vec<f64>,
    pair_low: KroneckerFactorPair,
    pair_high: KroneckerFactorPair,
}

impl ChainState {
    /// Builds a state, overwriting observed cells of `z_low`/`z_high` with the data.
    pub fn new(
        params: ModelParams,
        w_low: Vec<f64>,
        w_high: Vec<f64>,
        mut z_low: Vec<f64>,
        mut z_high: Vec<f64>,
        data: &ModelData,
    ) -> Result<Self> {
        let n = data.len();
        for (what, len) in [
            ("state w_low", w_low.len()),
            ("state w_high", w_high.len()),
            ("state z_low", z_low.len()),
            ("state z_high", z_high.len()),
        ] {
            if len != n {
                return Err(Error::Dimension {
                    context: what,
                    expected: n,
                    actual: len,
                });
            }
        }
        for c in 0..n {
            if data.observed(Level::Low, c) {
                z_low[c] = data.z_obs[c];
            }
            if data.observed(Level::High, c) {
                z_high[c] = data.z_obs[c];
            }
        }
        let pair_low = factor_pair(&data.geometry, &params.low.theta)?;
        let pair_high = factor_pair(&data.geometry, &params.high.theta)?;
        Ok(Self {
            params,
            w_low,
            w_high,
            z_low,
            z_high,
            pair_low,
            pair_high,
        })
    }

    pub fn pair(&self, level: Level) -> &KroneckerFactorPair {
        match level {
            Level::Low => &self.pair_low,
            Level::High => &self.pair_high,
        }
    }

    /// Recomputes both cached factor pairs from the current kernel parameters.
    pub fn refresh_factors(&mut self, data: &ModelData) -> Result<()> {
        self.pair_low = factor_pair(&data.geometry, &self.params.low.theta)?;
        self.pair_high = factor_pair(&data.geometry, &self.params.high.theta)?;
        Ok(())
    }

    pub fn level(&self, level: Level) -> &LevelParams {
        match level {
            Level::Low => &self.params.low,
            Level::High => &self.params.high,
        }
    }

    pub fn w(&self, level: Level) -> &[f64] {
        match level {
            Level::Low => &self.w_low,
            Level::High => &self.w_high,
        }
    }

    /// `ỹ_L = H_L β_L + w_L` on the complete grid.
    pub fn y_low(&self, data: &ModelData) -> Vec<f64> {
        let m = data.design_low.apply(&self.params.low.beta);
        m.iter().zip(&self.w_low).map(|(a, b)| a + b).collect()
    }

    /// `ỹ_H = ρ ỹ_L + H_H β_H + w_H` on the complete grid.
    pub fn y_high(&self, data: &ModelData) -> Vec<f64> {
        let yl = self.y_low(data);
        let mh = data.design_high.apply(&self.params.high.beta);
        (0..data.len())
            .map(|c| self.params.rho * yl[c] + mh[c] + self.w_high[c])
            .collect()
    }

    /// Imputed low-fidelity values on cells outside `d_low`.
    pub fn z_miss_low(&self, data: &ModelData) -> Vec<f64> {
        data.missing_cells(Level::Low).iter().map(|&c| self.z_low[c]).collect()
    }

    /// Imputed high-fidelity values on cells outside `d_high`.
    pub fn z_miss_high(&self, data: &ModelData) -> Vec<f64> {
        data.missing_cells(Level::High).iter().map(|&c| self.z_high[c]).collect()
    }
}

/// Gaussian with precision `a·I + c·(R_s⁻¹ ⊗ R_p⁻¹)` and canonical mean `rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentConditional {
    pub a: f64,
    pub c: f64,
    pub rhs: Vec<f64>,
}

impl LatentConditional {
    pub fn mean(&self, pair: &KroneckerFactorPair) -> Result<Vec<f64>> {
        let zero = vec![0.0; self.rhs.len()];
        Ok(sample_diag_plus_invkron_gaussian(self.a, self.c, pair, &self.rhs, &zero)?.mean)
    }

    /// Dense covariance; small grids only.
    pub fn covariance(&self, pair: &KroneckerFactorPair) -> Result<Mat<f64>> {
        diag_plus_invkron_covariance(self.a, self.c, pair)
    }

    pub fn draw<R: Rng + ?Sized>(&self, pair: &KroneckerFactorPair, rng: &mut R) -> Result<Vec<f64>> {
        let noise = standard_normals(self.rhs.len(), rng);
        Ok(sample_diag_plus_invkron_gaussian(self.a, self.c, pair, &self.rhs, &noise)?.sample)
    }
}

/// Gaussian given by its mean and precision matrix.
#[derive(Debug, Clone)]
pub struct NormalConditional {
    pub mean: Vec<f64>,
    pub precision: Mat<f64>,
}

impl NormalConditional {
    /// Builds `N(Q⁻¹ b, Q⁻¹)`.
    pub fn from_canonical(precision: Mat<f64>, b: &[f64]) -> Result<Self> {
        let f = SpdFactor::new(precision.as_ref(), "conditional precision")?;
        Ok(Self {
            mean: f.solve_vec(b),
            precision,
        })
    }

    pub fn covariance(&self) -> Result<Mat<f64>> {
        Ok(SpdFactor::new(self.precision.as_ref(), "conditional precision")?.inverse())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let f = SpdFactor::new(self.precision.as_ref(), "conditional precision")?;
        let z = standard_normals(self.mean.len(), rng);
        let e = f.lower_transpose_solve(&z);
        Ok(self.mean.iter().zip(&e).map(|(m, e)| m + e).collect())
    }
}

/// Inverse-gamma with density proportional to `x^{-(shape+1)} exp(-scale/x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGammaConditional {
    pub shape: f64,
    pub scale: f64,
}

impl InvGammaConditional {
    pub fn mean(&self) -> f64 {
        if self.shape > 1.0 {
            self.scale / (self.shape - 1.0)
        } else {
            f64::INFINITY
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let g = Gamma::new(self.shape, 1.0)
            .map_err(|e| Error::Numerical(format!("inverse-gamma shape {}: {e}", self.shape)))?;
        Ok(self.scale / g.sample(rng))
    }
}

/// Means and common variance of the independent imputation draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationMoments {
    pub low_cells: Vec<usize>,
    pub low_mean: Vec<f64>,
    pub low_var: f64,
    pub high_cells: Vec<usize>,
    pub high_mean: Vec<f64>,
    pub high_var: f64,
}

pub(crate) fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Conditional of `w_L` given everything else.
pub fn w_low_conditional(state: &ChainState, data: &ModelData) -> LatentConditional {
    let p = &state.params;
    let (tl, th, rho) = (p.low.tau2, p.high.tau2, p.rho);
    let m_l = data.design_low.apply(&p.low.beta);
    let m_h = data.design_high.apply(&p.high.beta);
    let rhs = (0..data.len())
        .map(|c| {
            (state.z_low[c] - m_l[c]) / tl
                + rho * (state.z_high[c] - m_h[c] - state.w_high[c] - rho * m_l[c]) / th
        })
        .collect();
    LatentConditional {
        a: 1.0 / tl + rho * rho / th,
        c: 1.0 / p.low.sigma2,
        rhs,
    }
}

/// Conditional of `w_H` given everything else.
pub fn w_high_conditional(state: &ChainState, data: &ModelData) -> LatentConditional {
    let p = &state.params;
    let yl = state.y_low(data);
    let m_h = data.design_high.apply(&p.high.beta);
    let resid: Vec<f64> = (0..data.len())
        .map(|c| state.z_high[c] - m_h[c] - p.rho * yl[c])
        .collect();
    level_w_conditional(&p.high, &resid)
}

/// `w` conditional of a single level observed as `resid = w + ε`.
pub(crate) fn level_w_conditional(level: &LevelParams, resid: &[f64]) -> LatentConditional {
    LatentConditional {
        a: 1.0 / level.tau2,
        c: 1.0 / level.sigma2,
        rhs: resid.iter().map(|r| r / level.tau2).collect(),
    }
}

/// Conditional of `β_L`.
pub fn beta_low_conditional(state: &ChainState, data: &ModelData, priors: &Priors) -> Result<NormalConditional> {
    let p = &state.params;
    let (tl, th, rho) = (p.low.tau2, p.high.tau2, p.rho);
    let d = &data.design_low;
    let m_h = data.design_high.apply(&p.high.beta);
    let v: Vec<f64> = (0..data.len())
        .map(|c| {
            (state.z_low[c] - state.w_low[c]) / tl
                + rho * (state.z_high[c] - m_h[c] - state.w_high[c] - rho * state.w_low[c]) / th
        })
        .collect();
    let b = d.apply_transpose(&v);
    let weight = 1.0 / tl + rho * rho / th;
    let gram = d.gram();
    let q = Mat::from_fn(gram.nrows(), gram.ncols(), |i, j| {
        weight * gram[(i, j)] + if i == j { 1.0 / priors.beta_var } else { 0.0 }
    });
    NormalConditional::from_canonical(q, &b)
}

/// Gaussian conditional of the coefficients of `y = X γ + e`, `e ~ N(0, noise·I)`,
/// `γ ~ N(0, prior_var·I)`, given `XᵀX` and `Xᵀy`.
pub(crate) fn regression_conditional(
    xtx: &Mat<f64>,
    xty: &[f64],
    noise_var: f64,
    prior_var: f64,
    what: &str,
) -> Result<NormalConditional> {
    check_regressor_rank(xtx, what)?;
    let q = Mat::from_fn(xtx.nrows(), xtx.ncols(), |i, j| {
        xtx[(i, j)] / noise_var + if i == j { 1.0 / prior_var } else { 0.0 }
    });
    let b: Vec<f64> = xty.iter().map(|v| v / noise_var).collect();
    NormalConditional::from_canonical(q, &b)
}

fn check_regressor_rank(xtx: &Mat<f64>, what: &str) -> Result<()> {
    let k = xtx.nrows();
    let d: Vec<f64> = (0..k).map(|i| xtx[(i, i)]).collect();
    if d.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::RankDeficient(format!("{what}: a regressor column is identically zero")));
    }
    let scaled = Mat::from_fn(k, k, |i, j| xtx[(i, j)] / (d[i] * d[j]).sqrt());
    let ratio = crate::dense::condition_ratio(scaled.as_ref())?;
    if !(ratio > 1e-12) {
        return Err(Error::RankDeficient(format!(
            "{what}: regressor columns are collinear (condition ratio {ratio:e})"
        )));
    }
    Ok(())
}

/// Joint conditional of `(ρ, β_H)`: ρ first, then `β_H`. With `fix_rho`
/// set, the conditional is over `β_H` alone.
pub fn rho_beta_high_conditional(
    state: &ChainState,
    data: &ModelData,
    priors: &Priors,
    fix_rho: Option<f64>,
) -> Result<NormalConditional> {
    let p = &state.params;
    let dh = &data.design_high;
    let yl = state.y_low(data);
    match fix_rho {
        Some(rho) => {
            let target: Vec<f64> = (0..data.len())
                .map(|c| state.z_high[c] - state.w_high[c] - rho * yl[c])
                .collect();
            regression_conditional(
                &dh.gram(),
                &dh.apply_transpose(&target),
                p.high.tau2,
                priors.beta_var,
                "high-fidelity mean design",
            )
        }
        None => {
            let target = sub(&state.z_high, &state.w_high);
            let m = dh.n_coef();
            let gram = dh.gram();
            let hy = dh.apply_transpose(&yl);
            let xtx = Mat::from_fn(m + 1, m + 1, |i, j| match (i, j) {
                (0, 0) => dot(&yl, &yl),
                (0, j) => hy[j - 1],
                (i, 0) => hy[i - 1],
                (i, j) => gram[(i - 1, j - 1)],
            });
            let mut xty = vec![dot(&yl, &target)];
            xty.extend(dh.apply_transpose(&target));
            regression_conditional(&xtx, &xty, p.high.tau2, priors.beta_var, "regressors (y_L, H_H)")
        }
    }
}

/// Direction of the ρ-shift move: `(ρ, β_H, w_H) → (ρ + δ, β_H − δ c, w_H − δ w_L)`
/// with `c` the least-squares projection of `m_L` onto the high-level design.
/// Returns `c` and the part of `m_L` the projection misses.
pub fn rho_shift_direction(state: &ChainState, data: &ModelData) -> Result<(Vec<f64>, Vec<f64>)> {
    let dh = &data.design_high;
    let m_l = data.design_low.apply(&state.params.low.beta);
    let gram = dh.gram();
    check_regressor_rank(&gram, "high-fidelity mean design")?;
    let c = SpdFactor::new(gram.as_ref(), "high-fidelity design gram")?.solve_vec(&dh.apply_transpose(&m_l));
    let d = sub(&m_l, &dh.apply(&c));
    Ok((c, d))
}

/// Log density, up to a constant, of the shift `δ` along
/// [`rho_shift_direction`] with `σ_H²` integrated out.
pub fn rho_shift_collapsed_log_density(
    state: &ChainState,
    data: &ModelData,
    priors: &Priors,
) -> Result<impl Fn(f64) -> f64> {
    let p = &state.params;
    let (c, d) = rho_shift_direction(state, data)?;
    let e = level_residual(state, Level::High, data);
    let pw = state.pair_high.solve(&state.w_low)?;
    let q0 = kron_quadform(&state.pair_high, &state.w_high)?;
    let (g, h) = (dot(&pw, &state.w_high), dot(&pw, &state.w_low));
    let shape = priors.sigma2.shape + 0.5 * state.w_high.len() as f64;
    let scale = priors.sigma2.scale;
    let (t2, vb, rho) = (p.high.tau2, priors.beta_var, p.rho);
    let (de, dd) = (dot(&d, &e), dot(&d, &d));
    let (cb, cc) = (dot(&c, &p.high.beta), dot(&c, &c));
    Ok(move |x: f64| {
        let q = (q0 - 2.0 * x * g + x * x * h).max(0.0);
        -shape * (scale + 0.5 * q).ln() + x * de / t2 - 0.5 * x * x * dd / t2 + x * cb / vb
            - 0.5 * x * x * cc / vb
            - 0.5 * (rho + x).powi(2) / vb
    })
}

/// Shift along [`rho_shift_direction`] drawn with `σ_H²` integrated out,
/// followed by a fresh `σ_H²`.
pub fn update_rho_shift_collapsed<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &ModelData,
    priors: &Priors,
    rng: &mut R,
) -> Result<()> {
    let f = rho_shift_collapsed_log_density(state, data, priors)?;
    let delta = slice_sample(f, 0.05, rng);
    let (c, _) = rho_shift_direction(state, data)?;
    state.params.rho += delta;
    for (b, ci) in state.params.high.beta.iter_mut().zip(&c) {
        *b -= delta * ci;
    }
    for (w, wl) in state.w_high.iter_mut().zip(&state.w_low) {
        *w -= delta * wl;
    }
    update_sigma2(state, Level::High, priors, rng)
}

/// Log density, up to a constant, of the scale move
/// `(ρ, w_L, σ_L²) → (ρ e^{−s}, e^s w_L, e^{2s} σ_L²)`. `β_H` absorbs the change
/// in `ρ m_L` as in the shift move, and imputed low-fidelity values move
/// with `w_L`, so only observed cells and the priors constrain `s`.
pub fn rho_scale_log_density(state: &ChainState, data: &ModelData, priors: &Priors) -> Result<impl Fn(f64) -> f64> {
    let p = &state.params;
    let (c, d) = rho_shift_direction(state, data)?;
    let e = level_residual(state, Level::High, data);
    let r = level_residual(state, Level::Low, data);
    let (mut rw, mut ww) = (0.0, 0.0);
    for &cell in &data.sets.d_low {
        rw += r[cell] * state.w_low[cell];
        ww += state.w_low[cell].powi(2);
    }
    let (tl, th, vb, rho, s2) = (p.low.tau2, p.high.tau2, priors.beta_var, p.rho, p.low.sigma2);
    let (de, dd) = (dot(&d, &e), dot(&d, &d));
    let (cb, cc) = (dot(&c, &p.high.beta), dot(&c, &c));
    let (a, b) = (priors.sigma2.shape, priors.sigma2.scale);
    Ok(move |s: f64| {
        let k = s.exp() - 1.0;
        let dr = rho * ((-s).exp() - 1.0);
        -(2.0 * a + 1.0) * s - b * (-2.0 * s).exp() / s2 + (2.0 * k * rw - k * k * ww) / (2.0 * tl)
            + (2.0 * dr * de - dr * dr * dd) / (2.0 * th)
            + dr * cb / vb
            - 0.5 * dr * dr * cc / vb
            - 0.5 * (rho + dr).powi(2) / vb
    })
}

pub fn apply_rho_scale(state: &mut ChainState, data: &ModelData, c: &[f64], s: f64) {
    let k = s.exp() - 1.0;
    let dr = state.params.rho * ((-s).exp() - 1.0);
    state.params.rho += dr;
    for (b, ci) in state.params.high.beta.iter_mut().zip(c) {
        *b -= dr * ci;
    }
    for cell in 0..data.len() {
        if !data.observed(Level::Low, cell) {
            state.z_low[cell] += k * state.w_low[cell];
        }
        state.w_low[cell] *= s.exp();
    }
    state.params.low.sigma2 *= (2.0 * s).exp();
}

pub fn update_rho_scale<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &ModelData,
    priors: &Priors,
    rng: &mut R,
) -> Result<()> {
    let f = rho_scale_log_density(state, data, priors)?;
    let s = slice_sample(f, 0.05, rng);
    let (c, _) = rho_shift_direction(state, data)?;
    apply_rho_scale(state, data, &c, s);
    Ok(())
}

/// One slice-sampling step from 0 on a one-dimensional log density, with
/// stepping out and shrinkage.
pub fn slice_sample<R: Rng + ?Sized>(logf: impl Fn(f64) -> f64, width: f64, rng: &mut R) -> f64 {
    const MAX_STEPS: usize = 64;
    let u: f64 = Exp1.sample(rng);
    let level = logf(0.0) - u;
    let mut lo = -width * rng.random::<f64>();
    let mut hi = lo + width;
    for _ in 0..MAX_STEPS {
        if logf(lo) <= level {
            break;
        }
        lo -= width;
    }
    for _ in 0..MAX_STEPS {
        if logf(hi) <= level {
            break;
        }
        hi += width;
    }
    loop {
        let x = lo + (hi - lo) * rng.random::<f64>();
        if logf(x) > level {
            return x;
        }
        if x < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo < 1e-14 {
            return 0.0;
        }
    }
}

/// Conditional of a level's coefficients given its centred field
/// `η = H β + w`, with `w ~ N(0, σ² R)`. Drawing from it and resetting
/// `w = η − H β` is the centred counterpart of the ordinary β update.
pub fn beta_centered_conditional(
    state: &ChainState,
    level: Level,
    data: &ModelData,
    priors: &Priors,
) -> Result<NormalConditional> {
    let design = data.design(level);
    let lp = state.level(level);
    let pair = state.pair(level);
    let m = design.n_coef();
    let h = design.full();
    let eta: Vec<f64> = design.apply(&lp.beta).iter().zip(state.w(level)).map(|(a, b)| a + b).collect();
    let solved: Vec<Vec<f64>> = (0..m)
        .map(|j| pair.solve(&(0..h.nrows()).map(|i| h[(i, j)]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let q = Mat::from_fn(m, m, |i, j| {
        let g: f64 = (0..h.nrows()).map(|r| h[(r, i)] * solved[j][r]).sum();
        g / lp.sigma2 + if i == j { 1.0 / priors.beta_var } else { 0.0 }
    });
    let b: Vec<f64> = solved.iter().map(|s| dot(s, &eta) / lp.sigma2).collect();
    NormalConditional::from_canonical(q, &b)
}

pub fn update_beta_centered<R: Rng + ?Sized>(
    state: &mut ChainState,
    level: Level,
    data: &ModelData,
    priors: &Priors,
    rng: &mut R,
) -> Result<()> {
    let beta = beta_centered_conditional(state, level, data, priors)?.draw(rng)?;
    let design = data.design(level);
    let old = design.apply(&state.level(level).beta);
    let new = design.apply(&beta);
    let (w, params) = match level {
        Level::Low => (&mut state.w_low, &mut state.params.low),
        Level::High => (&mut state.w_high, &mut state.params.high),
    };
    for ((w, o), n) in w.iter_mut().zip(&old).zip(&new) {
        *w += o - n;
    }
    params.beta = beta;
    Ok(())
}

/// Conditional of a level's process variance.
pub fn sigma2_conditional(state: &ChainState, level: Level, priors: &Priors) -> Result<InvGammaConditional> {
    let q = kron_quadform(state.pair(level), state.w(level))?;
    Ok(level_sigma2_conditional(state.w(level).len(), q, priors))
}

pub(crate) fn level_sigma2_conditional(n: usize, quadform: f64, priors: &Priors) -> InvGammaConditional {
    InvGammaConditional {
        shape: priors.sigma2.shape + 0.5 * n as f64,
        scale: priors.sigma2.scale + 0.5 * quadform,
    }
}

pub(crate) fn level_tau2_conditional(resid: &[f64], priors: &Priors) -> InvGammaConditional {
    InvGammaConditional {
        shape: priors.tau2.shape + 0.5 * resid.len() as f64,
        scale: priors.tau2.scale + 0.5 * dot(resid, resid),
    }
}

/// Residual of the complete data at one level given the latent fields.
pub fn level_residual(state: &ChainState, level: Level, data: &ModelData) -> Vec<f64> {
    match level {
        Level::Low => sub(&state.z_low, &state.y_low(data)),
        Level::High => sub(&state.z_high, &state.y_high(data)),
    }
}

/// Conditional of a level's noise variance on the complete grid.
pub fn tau2_conditional(state: &ChainState, level: Level, data: &ModelData, priors: &Priors) -> InvGammaConditional {
    level_tau2_conditional(&level_residual(state, level, data), priors)
}

/// Moments of the missing-value imputation draws.
pub fn imputation_moments(state: &ChainState, data: &ModelData) -> ImputationMoments {
    let yl = state.y_low(data);
    let yh = state.y_high(data);
    let low_cells = data.missing_cells(Level::Low);
    let high_cells = data.missing_cells(Level::High);
    ImputationMoments {
        low_mean: low_cells.iter().map(|&c| yl[c]).collect(),
        high_mean: high_cells.iter().map(|&c| yh[c]).collect(),
        low_cells,
        high_cells,
        low_var: state.params.low.tau2,
        high_var: state.params.high.tau2,
    }
}

pub fn impute_missing<R: Rng + ?Sized>(state: &mut ChainState, data: &ModelData, rng: &mut R) {
    let m = imputation_moments(state, data);
    let (sl, sh) = (m.low_var.sqrt(), m.high_var.sqrt());
    for (&c, mu) in m.low_cells.iter().zip(&m.low_mean) {
        let e: f64 = StandardNormal.sample(rng);
        state.z_low[c] = mu + sl * e;
    }
    for (&c, mu) in m.high_cells.iter().zip(&m.high_mean) {
        let e: f64 = StandardNormal.sample(rng);
        state.z_high[c] = mu + sh * e;
    }
}

pub fn update_w_low<R: Rng + ?Sized>(state: &mut ChainState, data: &ModelData, rng: &mut R) -> Result<()> {
    state.w_low = w_low_conditional(state, data).draw(&state.pair_low, rng)?;
    Ok(())
}

pub fn update_w_high<R: Rng + ?Sized>(state: &mut ChainState, data: &ModelData, rng: &mut R) -> Result<()> {
    state.w_high = w_high_conditional(state, data).draw(&state.pair_high, rng)?;
    Ok(())
}

pub fn update_beta_low<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &ModelData,
    priors: &Priors,
    rng: &mut R,
) -> Result<()> {
    state.params.low.beta = beta_low_conditional(state, data, priors)?.draw(rng)?;
    Ok(())
}

pub fn update_rho_beta_high<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &ModelData,
    priors: &Priors,
    fix_rho: Option<f64>,
    rng: &mut R,
) -> Result<()> {
    let draw = rho_beta_high_conditional(state, data, priors, fix_rho)?.draw(rng)?;
    match fix_rho {
        Some(rho) => {
            state.params.rho = rho;
            state.params.high.beta = draw;
        }
        None => {
            state.params.rho = draw[0];
            state.params.high.beta = draw[1..].to_vec();
        }
    }
    Ok(())
}

pub fn update_sigma2<R: Rng + ?Sized>(
    state: &mut ChainState,
    level: Level,
    priors: &Priors,
    rng: &mut R,
) -> Result<()> {
    let v = sigma2_conditional(state, level, priors)?.draw(rng)?;
    match level {
        Level::Low => state.params.low.sigma2 = v,
        Level::High => state.params.high.sigma2 = v,
    }
    Ok(())
}

pub fn update_tau2<R: Rng + ?Sized>(
    state: &mut ChainState,
    level: Level,
    data: &ModelData,
    priors: &Priors,
    rng: &mut R,
) -> Result<()> {
    let v = tau2_conditional(state, level, data, priors).draw(rng)?;
    match level {
        Level::Low => state.params.low.tau2 = v,
        Level::High => state.params.high.tau2 = v,
    }
    Ok(())
}

/// Log of `π(θ) · N(w; 0, σ² R_s ⊗ R_p)` for a factorized θ.
pub fn theta_log_target_with_pair(
    theta: &SeparableKernelParams,
    pair: &KroneckerFactorPair,
    w: &[f64],
    sigma2: f64,
    priors: &Priors,
    nugget: NuggetMode,
) -> Result<f64> {
    let prior = priors.log_theta(theta, nugget);
    if prior == f64::NEG_INFINITY {
        return Ok(prior);
    }
    let n = w.len() as f64;
    let logdet = kron_logdet(pair)?;
    let quad = kron_quadform(pair, w)?;
    Ok(prior - 0.5 * (n * (2.0 * std::f64::consts::PI * sigma2).ln() + logdet + quad / sigma2))
}

/// [`theta_log_target_with_pair`] building the factorization for `theta`.
/// Returns `None` for the pair when θ lies outside the prior support.
pub fn theta_log_target(
    theta: &SeparableKernelParams,
    geometry: &GridGeometry,
    w: &[f64],
    sigma2: f64,
    priors: &Priors,
    nugget: NuggetMode,
) -> Result<(f64, Option<KroneckerFactorPair>)> {
    if priors.log_theta(theta, nugget) == f64::NEG_INFINITY {
        return Ok((f64::NEG_INFINITY, None));
    }
    let pair = factor_pair(geometry, theta)?;
    let lt = theta_log_target_with_pair(theta, &pair, w, sigma2, priors, nugget)?;
    Ok((lt, Some(pair)))
}

/// Log Jacobian of the map from the unconstrained proposal space to θ:
/// log scale for lengthscales, logit of `g/upper` for random nuggets.
pub fn theta_log_jacobian(theta: &SeparableKernelParams, nugget: NuggetMode, upper: f64) -> f64 {
    let mut j = theta.phi_lon.ln() + theta.phi_lat.ln() + theta.phi_p.ln();
    if nugget == NuggetMode::Random {
        for g in [theta.g2_s, theta.g2_p] {
            j += (g * (upper - g)).ln();
        }
    }
    j
}

/// Random-walk proposal in the unconstrained space. `steps` follows the
/// order `(phi_lon, phi_lat, g2_s, phi_p, g2_p)`.
pub fn propose_theta<R: Rng + ?Sized>(
    theta: &SeparableKernelParams,
    steps: &[f64; 5],
    scale: f64,
    nugget: NuggetMode,
    upper: f64,
    rng: &mut R,
) -> SeparableKernelParams {
    let mut z = || -> f64 { StandardNormal.sample(rng) };
    let log_walk = |x: f64, s: f64, e: f64| x * (scale * s * e).exp();
    let mut next = *theta;
    next.phi_lon = log_walk(theta.phi_lon, steps[0], z());
    next.phi_lat = log_walk(theta.phi_lat, steps[1], z());
    let e_gs = z();
    next.phi_p = log_walk(theta.phi_p, steps[3], z());
    let e_gp = z();
    if nugget == NuggetMode::Random {
        let logit_walk = |g: f64, s: f64, e: f64| {
            let u = (g / upper).ln() - (1.0 - g / upper).ln() + scale * s * e;
            upper / (1.0 + (-u).exp())
        };
        next.g2_s = logit_walk(theta.g2_s, steps[2], e_gs);
        next.g2_p = logit_walk(theta.g2_p, steps[4], e_gp);
    }
    next
}

/// Outcome of one θ Metropolis–Hastings step.
#[derive(Debug, Clone)]
pub struct ThetaStep {
    pub theta: SeparableKernelParams,
    /// New factor pair when the proposal was accepted.
    pub pair: Option<KroneckerFactorPair>,
    pub accepted: bool,
    /// `min(1, ratio)`, used for step-size adaptation.
    pub alpha: f64,
}

/// Log acceptance ratio of moving from `current` to `proposed`, including
/// the Jacobian of the unconstrained parameterization.
#[allow(clippy::too_many_arguments)]
pub fn theta_log_acceptance(
    current: (&SeparableKernelParams, f64),
    proposed: (&SeparableKernelParams, f64),
    nugget: NuggetMode,
    upper: f64,
) -> f64 {
    let (tc, lc) = current;
    let (tp, lp) = proposed;
    if lp == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    lp - lc + theta_log_jacobian(tp, nugget, upper) - theta_log_jacobian(tc, nugget, upper)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn theta_mh<R: Rng + ?Sized>(
    theta: &SeparableKernelParams,
    pair: &KroneckerFactorPair,
    w: &[f64],
    sigma2: f64,
    geometry: &GridGeometry,
    priors: &Priors,
    nugget: NuggetMode,
    steps: &[f64; 5],
    scale: f64,
    rng: &mut R,
) -> Result<ThetaStep> {
    let upper = priors.nugget.upper;
    let proposal = propose_theta(theta, steps, scale, nugget, upper, rng);
    let u: f64 = rng.random();
    let current = theta_log_target_with_pair(theta, pair, w, sigma2, priors, nugget)?;
    let (lp, new_pair) = theta_log_target(&proposal, geometry, w, sigma2, priors, nugget)?;
    let log_ratio = theta_log_acceptance((theta, current), (&proposal, lp), nugget, upper);
    let alpha = log_ratio.min(0.0).exp();
    if u.ln() < log_ratio {
        Ok(ThetaStep {
            theta: proposal,
            pair: new_pair,
            accepted: true,
            alpha,
        })
    } else {
        Ok(ThetaStep {
            theta: *theta,
            pair: None,
            accepted: false,
            alpha,
        })
    }
}

/// Settings shared by every sweep of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub nugget: [NuggetMode; 2],
    pub fix_rho: Option<f64>,
    pub rw_step: [f64; 5],
    pub execution: Execution,
}

/// Acceptance information from the θ block of one sweep, low level first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepReport {
    pub accepted: [bool; 2],
    pub alpha: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Impute,
    WLow,
    WHigh,
    BetaLow,
    RhoBetaHigh,
    RhoShift,
    RhoScale,
    BetaLowCentered,
    BetaHighCentered,
    Sigma2Low,
    Sigma2High,
    Tau2Low,
    Tau2High,
    Theta,
}

impl Block {
    const ALL: [Block; 14] = [
        Block::Impute,
        Block::WLow,
        Block::WHigh,
        Block::BetaLow,
        Block::RhoBetaHigh,
        Block::RhoShift,
        Block::RhoScale,
        Block::BetaLowCentered,
        Block::BetaHighCentered,
        Block::Sigma2Low,
        Block::Sigma2High,
        Block::Tau2Low,
        Block::Tau2High,
        Block::Theta,
    ];

    fn name(self) -> &'static str {
        match self {
            Block::Impute => "impute_missing",
            Block::WLow => "update_w_L",
            Block::WHigh => "update_w_H",
            Block::BetaLow => "update_beta_L",
            Block::RhoBetaHigh => "update_rho_beta_H",
            Block::RhoShift => "update_rho_shift",
            Block::RhoScale => "update_rho_scale",
            Block::BetaLowCentered => "update_beta_L_centered",
            Block::BetaHighCentered => "update_beta_H_centered",
            Block::Sigma2Low => "update_sigma2_L",
            Block::Sigma2High => "update_sigma2_H",
            Block::Tau2Low => "update_tau2_L",
            Block::Tau2High => "update_tau2_H",
            Block::Theta => "update_theta",
        }
    }
}

/// Runs every block once in a freshly drawn random order.
///
/// Both θ steps run as one block; each level gets its own generator seeded
/// from `rng`, so the result does not depend on whether they ran concurrently.
pub fn gibbs_sweep<R: RngCore>(
    state: &mut ChainState,
    data: &ModelData,
    priors: &Priors,
    settings: &SweepSettings,
    scales: [f64; 2],
    rng: &mut R,
) -> Result<SweepReport> {
    let mut order = Block::ALL;
    order.shuffle(rng);
    let mut report = SweepReport {
        accepted: [false; 2],
        alpha: [0.0; 2],
    };
    for block in order {
        let r = match block {
            Block::Impute => {
                impute_missing(state, data, rng);
                Ok(())
            }
            Block::WLow => update_w_low(state, data, rng),
            Block::WHigh => update_w_high(state, data, rng),
            Block::BetaLow => update_beta_low(state, data, priors, rng),
            Block::RhoBetaHigh => update_rho_beta_high(state, data, priors, settings.fix_rho, rng),
            Block::RhoShift if settings.fix_rho.is_some() => Ok(()),
            Block::RhoShift => update_rho_shift_collapsed(state, data, priors, rng),
            Block::RhoScale if settings.fix_rho.is_some() => Ok(()),
            Block::RhoScale => update_rho_scale(state, data, priors, rng),
            Block::BetaLowCentered => update_beta_centered(state, Level::Low, data, priors, rng),
            Block::BetaHighCentered => update_beta_centered(state, Level::High, data, priors, rng),
            Block::Sigma2Low => update_sigma2(state, Level::Low, priors, rng),
            Block::Sigma2High => update_sigma2(state, Level::High, priors, rng),
            Block::Tau2Low => update_tau2(state, Level::Low, data, priors, rng),
            Block::Tau2High => update_tau2(state, Level::High, data, priors, rng),
            Block::Theta => theta_block(state, data, priors, settings, scales, rng).map(|r| report = r),
        };
        r.map_err(|e| e.in_block(block.name()))?;
    }
    Ok(report)
}

fn theta_block<R: RngCore>(
    state: &mut ChainState,
    data: &ModelData,
    priors: &Priors,
    settings: &SweepSettings,
    scales: [f64; 2],
    rng: &mut R,
) -> Result<SweepReport> {
    let seeds = [rng.next_u64(), rng.next_u64()];
    let geometry = &data.geometry;
    let step = |level: Level, idx: usize| {
        let lp = state.level(level);
        let mut r = ChaCha8Rng::seed_from_u64(seeds[idx]);
        theta_mh(
            &lp.theta,
            state.pair(level),
            state.w(level),
            lp.sigma2,
            geometry,
            priors,
            settings.nugget[idx],
            &settings.rw_step,
            scales[idx],
            &mut r,
        )
    };
    let (low, high) = par::join(settings.execution, || step(Level::Low, 0), || step(Level::High, 1));
    let (low, high) = (low?, high?);
    let report = SweepReport {
        accepted: [low.accepted, high.accepted],
        alpha: [low.alpha, high.alpha],
    };
    state.params.low.theta = low.theta;
    if let Some(p) = low.pair {
        state.pair_low = p;
    }
    state.params.high.theta = high.theta;
    if let Some(p) = high.pair {
        state.pair_high = p;
    }
    Ok(report)
}

/// Chain length, tuning and model switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    /// Random-walk standard deviations in the unconstrained θ space,
    /// ordered `(phi_lon, phi_lat, g2_s, phi_p, g2_p)`.
    pub rw_step: [f64; 5],
    pub seed: u64,
    /// Robbins–Monro step scaling during burn-in.
    pub adapt: bool,
    pub target_acceptance: f64,
    pub nugget_low: NuggetMode,
    pub nugget_high: NuggetMode,
    pub fix_rho: Option<f64>,
    pub initial: Option<ModelParams>,
    pub execution: Execution,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 5000,
            n_burn: 1000,
            thin: 1,
            rw_step: [0.1; 5],
            seed: 0,
            adapt: true,
            target_acceptance: 0.3,
            nugget_low: NuggetMode::default(),
            nugget_high: NuggetMode::default(),
            fix_rho: None,
            initial: None,
            execution: Execution::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burn >= self.n_iter {
            return Err(Error::Config(format!(
                "n_burn ({}) must be < n_iter ({})",
                self.n_burn, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be >= 1".into()));
        }
        if self.rw_step.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("rw_step entries must be > 0".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::Config("target_acceptance must lie in (0, 1)".into()));
        }
        for (name, mode) in [("nugget_low", self.nugget_low), ("nugget_high", self.nugget_high)] {
            if let NuggetMode::Fixed { value } = mode {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(Error::Config(format!("{name} value must be >= 0")));
                }
            }
        }
        Ok(())
    }

    pub fn sweep_settings(&self) -> SweepSettings {
        SweepSettings {
            nugget: [self.nugget_low, self.nugget_high],
            fix_rho: self.fix_rho,
            rw_step: self.rw_step,
            execution: self.execution,
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.n_iter - self.n_burn) / self.thin
    }
}

/// Robbins–Monro update of a log step scale toward the target acceptance.
pub(crate) fn adapt_scale(scale: f64, alpha: f64, target: f64, iteration: usize) -> f64 {
    let gain = 1.0 / (iteration as f64 + 1.0).powf(0.6);
    (scale.ln() + gain * (alpha - target)).exp().clamp(1e-4, 1e2)
}

fn pooled_observed(data: &ModelData) -> Vec<usize> {
    let mut cells: Vec<usize> = data.sets.d_high.iter().chain(&data.sets.d_low).copied().collect();
    cells.sort_unstable();
    cells
}

/// Ordinary least squares of `z` on design rows over `cells`. Returns the
/// coefficients and the residual variance.
pub(crate) fn ols(design: &MeanDesign, z: &[f64], cells: &[usize]) -> Result<(Vec<f64>, f64)> {
    let m = design.n_coef();
    if cells.len() <= m {
        return Err(Error::RankDeficient(format!(
            "{} observed cells cannot initialize {m} mean coefficients",
            cells.len()
        )));
    }
    let h = design.full();
    let xtx = Mat::from_fn(m, m, |i, j| cells.iter().map(|&c| h[(c, i)] * h[(c, j)]).sum());
    let xty: Vec<f64> = (0..m).map(|i| cells.iter().map(|&c| h[(c, i)] * z[c]).sum()).collect();
    check_regressor_rank(&xtx, "mean design on observed cells")?;
    let beta = SpdFactor::new(xtx.as_ref(), "observed design gram")?.solve_vec(&xty);
    let rss: f64 = cells
        .iter()
        .map(|&c| {
            let fit: f64 = (0..m).map(|i| h[(c, i)] * beta[i]).sum();
            (z[c] - fit).powi(2)
        })
        .sum();
    Ok((beta, rss / (cells.len() - m) as f64))
}

/// Lag correlations of `resid` (zero outside `cells`) between first and
/// second neighbours along one axis. `lines` lists cells in axis order with
/// their coordinate. Returns `(h1, r1, h2, r2)`.
fn lag_correlations(lines: &[Vec<(usize, f64)>], resid: &[f64], observed: &[bool], var: f64) -> Option<[f64; 4]> {
    let mut acc = [[0.0; 3]; 2];
    for line in lines {
        for (lag, a) in acc.iter_mut().enumerate() {
            for pair in line.windows(lag + 2) {
                let ((c1, x1), (c2, x2)) = (pair[0], pair[lag + 1]);
                if observed[c1] && observed[c2] {
                    a[0] += (x2 - x1).abs();
                    a[1] += resid[c1] * resid[c2];
                    a[2] += 1.0;
                }
            }
        }
    }
    if acc.iter().any(|a| a[2] < 20.0) {
        return None;
    }
    let [l1, l2] = acc.map(|a| (a[0] / a[2], a[1] / (a[2] * var)));
    Some([l1.0, l1.1, l2.0, l2.1])
}

/// Exponential correlogram fit through two lags: returns the lengthscale and
/// the fraction of variance that is spatially structured.
fn exp_fit([h1, r1, h2, r2]: [f64; 4]) -> Option<(f64, f64)> {
    if !(r1 > r2 && r2 > 0.0 && h2 > h1) {
        return None;
    }
    let decay = (r1.ln() - r2.ln()) / (h2 - h1);
    let phi = 1.0 / decay;
    Some((phi, r1 * (h1 * decay).exp()))
}

/// Moment estimates of the kernel lengthscales and the structured variance
/// fraction from the residuals of one level. Axes without enough neighbour
/// pairs keep the prior median.
fn moment_theta(
    geometry: &GridGeometry,
    resid: &[f64],
    observed: &[bool],
    priors: &Priors,
    nugget: NuggetMode,
) -> (SeparableKernelParams, f64) {
    let mut theta = priors.theta_median(nugget);
    let n_p = geometry.n_pressure();
    let var = resid
        .iter()
        .zip(observed)
        .filter(|(_, &o)| o)
        .map(|(r, _)| r * r)
        .sum::<f64>()
        / observed.iter().filter(|&&o| o).count().max(1) as f64;
    if !(var > 0.0) {
        return (theta, 0.5);
    }
    // Spatial lines: locations sharing the other coordinate, at each level.
    let spatial_lines = |axis: usize| {
        let mut groups: std::collections::BTreeMap<u64, Vec<(usize, f64)>> = Default::default();
        for (i, &(lon, lat)) in geometry.locs.iter().enumerate() {
            let (key, x) = if axis == 0 { (lat, lon) } else { (lon, lat) };
            groups.entry(key.to_bits()).or_default().push((i, x));
        }
        let mut lines = Vec::new();
        for mut g in groups.into_values().filter(|g| g.len() > 2) {
            g.sort_by(|a, b| a.1.total_cmp(&b.1));
            for j in 0..n_p {
                lines.push(g.iter().map(|&(i, x)| (i * n_p + j, x)).collect());
            }
        }
        lines
    };
    let mut levels: Vec<(usize, f64)> = geometry.logp.iter().copied().enumerate().collect();
    levels.sort_by(|a, b| a.1.total_cmp(&b.1));
    let pressure_lines: Vec<Vec<(usize, f64)>> = (0..geometry.n_spatial())
        .map(|i| levels.iter().map(|&(j, x)| (i * n_p + j, x)).collect())
        .collect();
    let fits = [spatial_lines(0), spatial_lines(1), pressure_lines]
        .map(|lines| lag_correlations(&lines, resid, observed, var).and_then(exp_fit));
    let upper = [priors.phi_spatial_max, priors.phi_spatial_max, priors.phi_pressure_max];
    let mut fractions = Vec::new();
    for (k, fit) in fits.iter().enumerate() {
        if let Some((phi, frac)) = *fit {
            let phi = phi.clamp(1e-3 * upper[k], 0.9 * upper[k]);
            match k {
                0 => theta.phi_lon = phi,
                1 => theta.phi_lat = phi,
                _ => theta.phi_p = phi,
            }
            fractions.push(frac);
        }
    }
    let frac = if fractions.is_empty() {
        0.5
    } else {
        fractions.iter().sum::<f64>() / fractions.len() as f64
    };
    (theta, frac.clamp(0.2, 0.95))
}

/// Starting parameters: per-level OLS (β_L on flag-1 cells, β_H on
/// `z − ρ m_L` at flag-0 cells) and ρ = 1. Kernel lengthscales and the split
/// of each level's residual variance into σ² and τ² come from neighbour
/// correlations of the OLS residuals. A level with too few cells falls back
/// to the pooled fit.
pub fn initial_params(data: &ModelData, priors: &Priors, config: &ChainConfig) -> Result<ModelParams> {
    if let Some(p) = &config.initial {
        return Ok(p.clone());
    }
    let pooled = ols(&data.design_low, &data.z_obs, &pooled_observed(data))?;
    let (beta_low, v_low) = ols(&data.design_low, &data.z_obs, &data.sets.d_low).unwrap_or(pooled);
    let rho = config.fix_rho.unwrap_or(1.0);
    let m_low = data.design_low.apply(&beta_low);
    let adjusted: Vec<f64> = data.z_obs.iter().zip(&m_low).map(|(z, m)| z - rho * m).collect();
    let (beta_high, v_high) = ols(&data.design_high, &adjusted, &data.sets.d_high)
        .unwrap_or_else(|_| (vec![0.0; data.design_high.n_coef()], v_low));
    let level = |beta: Vec<f64>, v: f64, z: &[f64], design: &MeanDesign, cells: &[usize], mode| {
        let fit = design.apply(&beta);
        let mut observed = vec![false; data.len()];
        let mut resid = vec![0.0; data.len()];
        for &c in cells {
            observed[c] = true;
            resid[c] = z[c] - fit[c];
        }
        let (theta, frac) = moment_theta(&data.geometry, &resid, &observed, priors, mode);
        LevelParams {
            beta,
            sigma2: (frac * v).max(1e-6),
            tau2: ((1.0 - frac) * v).max(1e-6),
            theta,
        }
    };
    Ok(ModelParams {
        low: level(beta_low, v_low, &data.z_obs, &data.design_low, &data.sets.d_low, config.nugget_low),
        high: level(
            beta_high,
            v_high,
            &adjusted,
            &data.design_high,
            &data.sets.d_high,
            config.nugget_high,
        ),
        rho,
    })
}

/// Initial state: missing data filled with the mean surfaces and the latent
/// fields set to their conditional means.
pub fn initial_state(data: &ModelData, params: ModelParams) -> Result<ChainState> {
    let n = data.len();
    let mut state = ChainState::new(params, vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], data)?;
    let yl = state.y_low(data);
    let yh = state.y_high(data);
    for c in 0..n {
        if !data.observed(Level::Low, c) {
            state.z_low[c] = yl[c];
        }
        if !data.observed(Level::High, c) {
            state.z_high[c] = yh[c];
        }
    }
    state.w_low = w_low_conditional(&state, data).mean(&state.pair_low)?;
    state.w_high = w_high_conditional(&state, data).mean(&state.pair_high)?;
    Ok(state)
}

fn check_fixed_nuggets(params: &ModelParams, config: &ChainConfig) -> Result<()> {
    for (tag, level, mode) in [
        ("L", &params.low, config.nugget_low),
        ("H", &params.high, config.nugget_high),
    ] {
        if let NuggetMode::Fixed { value } = mode {
            if level.theta.g2_s != value || level.theta.g2_p != value {
                return Err(Error::Config(format!(
                    "initial nuggets of level {tag} must equal the fixed value {value}"
                )));
            }
        }
    }
    Ok(())
}

/// Runs a full chain: initialization, burn-in with adaptation, thinning.
pub fn run_chain(
    granule: &Granule,
    design_low: &MeanDesign,
    design_high: &MeanDesign,
    priors: &Priors,
    config: &ChainConfig,
) -> Result<ChainOutput<ChainSample>> {
    config.validate()?;
    priors.validate().map_err(|v| Error::Config(v.join("; ")))?;
    let data = ModelData::new(granule, design_low.clone(), design_high.clone())?;
    let params = initial_params(&data, priors, config)?;
    if let Err(v) = validate_params(&params, priors) {
        return Err(Error::Config(format!("initial parameters: {}", v.join("; "))));
    }
    check_fixed_nuggets(&params, config)?;
    let mut state = initial_state(&data, params)?;
    let settings = config.sweep_settings();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scales = [1.0f64; 2];
    let mut accepted = [0usize; 2];
    let mut samples = Vec::with_capacity(config.n_samples());
    for t in 0..config.n_iter {
        let report = gibbs_sweep(&mut state, &data, priors, &settings, scales, &mut rng).map_err(|e| {
            Error::Iteration {
                iteration: t,
                source: Box::new(e),
            }
        })?;
        if t < config.n_burn {
            if config.adapt {
                for k in 0..2 {
                    scales[k] = adapt_scale(scales[k], report.alpha[k], config.target_acceptance, t);
                }
            }
            continue;
        }
        for k in 0..2 {
            accepted[k] += report.accepted[k] as usize;
        }
        if (t - config.n_burn + 1) % config.thin == 0 {
            samples.push(ChainSample {
                params: state.params.clone(),
                w_low: state.w_low.clone(),
                w_high: state.w_high.clone(),
            });
        }
    }
    let kept = (config.n_iter - config.n_burn) as f64;
    let acceptance = vec![
        ("theta_L".to_string(), accepted[0] as f64 / kept),
        ("theta_H".to_string(), accepted[1] as f64 / kept),
    ];
    Ok(ChainOutput::new(samples, acceptance))
}
