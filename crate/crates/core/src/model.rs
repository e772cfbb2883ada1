//! Granules, index bookkeeping, mean designs, parameters and priors.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{GridGeometry, SeparableKernelParams};
use crate::kron::kron_matvec;

/// Per-cell data-quality flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flag {
    /// QF 0: best quality, observation of the high-fidelity process.
    High,
    /// QF 1: acceptable quality, observation of the low-fidelity process.
    Low,
    /// QF 2: unreliable, treated as missing.
    Bad,
    /// Structurally undefined (e.g. below the surface).
    Undefined,
}

impl Flag {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Flag::High),
            1 => Some(Flag::Low),
            2 => Some(Flag::Bad),
            _ => None,
        }
    }

    /// The QF code, or `None` for structurally undefined cells.
    pub fn code(self) -> Option<u8> {
        match self {
            Flag::High => Some(0),
            Flag::Low => Some(1),
            Flag::Bad => Some(2),
            Flag::Undefined => None,
        }
    }

    pub fn is_observed(self) -> bool {
        matches!(self, Flag::High | Flag::Low)
    }
}

/// A tensor grid of spatial locations × pressure levels with one temperature
/// and one flag per cell. Cells are stored spatial-major (`i * n_p + j`).
///
/// Temperatures of flag-2 and undefined cells are stored as NaN.
#[derive(Debug, Clone)]
pub struct Granule {
    lons: Vec<f64>,
    lats: Vec<f64>,
    pressures: Vec<f64>,
    level_index: Vec<u32>,
    temperature: Vec<f64>,
    flag: Vec<Flag>,
}

impl PartialEq for Granule {
    /// Missing temperatures compare equal to each other.
    fn eq(&self, other: &Self) -> bool {
        self.lons == other.lons
            && self.lats == other.lats
            && self.pressures == other.pressures
            && self.level_index == other.level_index
            && self.flag == other.flag
            && self.temperature.len() == other.temperature.len()
            && self
                .temperature
                .iter()
                .zip(&other.temperature)
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }
}

impl Granule {
    /// Builds a validated granule. Levels that are undefined at every location
    /// are rejected; use [`Granule::dropping_undefined_levels`] to remove them.
    pub fn new(
        lons: Vec<f64>,
        lats: Vec<f64>,
        pressures: Vec<f64>,
        level_index: Vec<u32>,
        mut temperature: Vec<f64>,
        flag: Vec<Flag>,
    ) -> Result<Self> {
        let n_s = lons.len();
        let n_p = pressures.len();
        if n_s == 0 || n_p == 0 {
            return Err(Error::Granule("granule needs at least one location and one level".into()));
        }
        if lats.len() != n_s {
            return Err(Error::Granule(format!("{} longitudes but {} latitudes", n_s, lats.len())));
        }
        if level_index.len() != n_p {
            return Err(Error::Granule(format!("{} pressures but {} level indices", n_p, level_index.len())));
        }
        if temperature.len() != n_s * n_p || flag.len() != n_s * n_p {
            return Err(Error::Granule(format!(
                "expected {} cells, got {} temperatures and {} flags",
                n_s * n_p,
                temperature.len(),
                flag.len()
            )));
        }
        if lons.iter().chain(&lats).any(|v| !v.is_finite()) {
            return Err(Error::Granule("non-finite location coordinate".into()));
        }
        if pressures.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Granule("pressures must be positive and finite".into()));
        }
        if pressures.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Granule("pressures must be strictly increasing".into()));
        }
        for (cell, (&f, t)) in flag.iter().zip(temperature.iter_mut()).enumerate() {
            if f.is_observed() {
                if !t.is_finite() {
                    return Err(Error::Granule(format!(
                        "cell {cell} has flag {} but no finite temperature",
                        f.code().unwrap_or(9)
                    )));
                }
            } else {
                *t = f64::NAN;
            }
        }
        for j in 0..n_p {
            if (0..n_s).all(|i| flag[i * n_p + j] == Flag::Undefined) {
                return Err(Error::Granule(format!(
                    "level {} is undefined everywhere and must be dropped",
                    level_index[j]
                )));
            }
        }
        Ok(Self {
            lons,
            lats,
            pressures,
            level_index,
            temperature,
            flag,
        })
    }

    /// Like [`Granule::new`] but first removes levels that are undefined at
    /// every location. Returns the granule and the level indices dropped.
    pub fn dropping_undefined_levels(
        lons: Vec<f64>,
        lats: Vec<f64>,
        pressures: Vec<f64>,
        level_index: Vec<u32>,
        temperature: Vec<f64>,
        flag: Vec<Flag>,
    ) -> Result<(Self, Vec<u32>)> {
        let n_s = lons.len();
        let n_p = pressures.len();
        if temperature.len() != n_s * n_p || flag.len() != n_s * n_p {
            return Err(Error::Granule(format!(
                "expected {} cells, got {} temperatures and {} flags",
                n_s * n_p,
                temperature.len(),
                flag.len()
            )));
        }
        let keep: Vec<usize> = (0..n_p)
            .filter(|&j| (0..n_s).any(|i| flag[i * n_p + j] != Flag::Undefined))
            .collect();
        let dropped = (0..n_p)
            .filter(|j| !keep.contains(j))
            .map(|j| level_index[j])
            .collect();
        let pick = |v: &[f64]| -> Vec<f64> {
            (0..n_s).flat_map(|i| keep.iter().map(move |&j| v[i * n_p + j])).collect()
        };
        let temp = pick(&temperature);
        let flags = (0..n_s)
            .flat_map(|i| keep.iter().map(|&j| flag[i * n_p + j]).collect::<Vec<_>>())
            .collect();
        let pressures = keep.iter().map(|&j| pressures[j]).collect();
        let level_index = keep.iter().map(|&j| level_index[j]).collect();
        let g = Self::new(lons, lats, pressures, level_index, temp, flags)?;
        Ok((g, dropped))
    }

    pub fn n_spatial(&self) -> usize {
        self.lons.len()
    }

    pub fn n_pressure(&self) -> usize {
        self.pressures.len()
    }

    /// Number of cells on the complete grid.
    pub fn len(&self) -> usize {
        self.n_spatial() * self.n_pressure()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }

    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn pressures(&self) -> &[f64] {
        &self.pressures
    }

    pub fn level_index(&self) -> &[u32] {
        &self.level_index
    }

    pub fn temperature(&self) -> &[f64] {
        &self.temperature
    }

    pub fn flags(&self) -> &[Flag] {
        &self.flag
    }

    pub fn cell(&self, spatial: usize, level: usize) -> usize {
        spatial * self.n_pressure() + level
    }

    pub fn locations(&self) -> Vec<(f64, f64)> {
        self.lons.iter().copied().zip(self.lats.iter().copied()).collect()
    }

    pub fn log_pressures(&self) -> Vec<f64> {
        self.pressures.iter().map(|p| p.ln()).collect()
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            locs: self.locations(),
            logp: self.log_pressures(),
        }
    }

    /// A copy with the given cells marked as flag 2 (temperatures withheld).
    pub fn with_cells_withheld(&self, cells: &[usize]) -> Self {
        let mut g = self.clone();
        for &c in cells {
            g.flag[c] = Flag::Bad;
            g.temperature[c] = f64::NAN;
        }
        g
    }

    /// A copy where every observed cell is relabelled as high fidelity.
    /// Used by the single-fidelity baseline, which pools flags 0 and 1.
    pub fn pooled(&self) -> Self {
        let mut g = self.clone();
        for f in g.flag.iter_mut() {
            if *f == Flag::Low {
                *f = Flag::High;
            }
        }
        g
    }
}

/// Disjoint flat-index sets partitioning the complete grid.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSets {
    pub d_high: Vec<usize>,
    pub d_low: Vec<usize>,
    pub d_miss: Vec<usize>,
}

impl IndexSets {
    pub fn len(&self) -> usize {
        self.d_high.len() + self.d_low.len() + self.d_miss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flag 0 → `d_high`, flag 1 → `d_low`, flag 2 and residual undefined → `d_miss`.
pub fn partition_granule(granule: &Granule) -> IndexSets {
    let mut sets = IndexSets::default();
    for (cell, f) in granule.flags().iter().enumerate() {
        match f {
            Flag::High => sets.d_high.push(cell),
            Flag::Low => sets.d_low.push(cell),
            Flag::Bad | Flag::Undefined => sets.d_miss.push(cell),
        }
    }
    sets
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialBasis {
    #[default]
    Constant,
}

/// Affine map of log-pressure onto `[-1, 1]` over the granule's levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PressureScaling {
    pub center: f64,
    pub half_range: f64,
}

impl PressureScaling {
    fn from_logp(logp: &[f64]) -> Self {
        let lo = logp.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let half = 0.5 * (hi - lo);
        Self {
            center: 0.5 * (hi + lo),
            half_range: if half > 0.0 { half } else { 1.0 },
        }
    }

    pub fn scale(&self, logp: f64) -> f64 {
        (logp - self.center) / self.half_range
    }
}

/// Separable mean basis: pressure polynomial ⊗ spatial basis.
#[derive(Debug, Clone)]
pub struct MeanDesign {
    h_p: Mat<f64>,
    h_s: Mat<f64>,
    full: Mat<f64>,
    degree_p: usize,
    spatial_basis: SpatialBasis,
    scaling: PressureScaling,
}

/// Builds `h_p` (powers of scaled log-pressure up to `degree_p`), `h_s`, and
/// the full design `h_s ⊗ h_p` on the granule's complete grid.
pub fn build_mean_design(granule: &Granule, degree_p: usize, spatial_basis: SpatialBasis) -> Result<MeanDesign> {
    MeanDesign::from_geometry(&granule.geometry(), degree_p, spatial_basis)
}

impl MeanDesign {
    pub fn from_geometry(geometry: &GridGeometry, degree_p: usize, spatial_basis: SpatialBasis) -> Result<Self> {
        let scaling = PressureScaling::from_logp(&geometry.logp);
        let h_p = Mat::from_fn(geometry.n_pressure(), degree_p + 1, |j, d| {
            scaling.scale(geometry.logp[j]).powi(d as i32)
        });
        let h_s = match spatial_basis {
            SpatialBasis::Constant => Mat::from_fn(geometry.n_spatial(), 1, |_, _| 1.0),
        };
        check_full_rank(&h_p, &format!("pressure basis (degree {degree_p}, {} levels)", geometry.n_pressure()))?;
        check_full_rank(&h_s, "spatial basis (constant)")?;
        let full = crate::kron::materialize(h_s.as_ref(), h_p.as_ref());
        Ok(Self {
            h_p,
            h_s,
            full,
            degree_p,
            spatial_basis,
            scaling,
        })
    }

    pub fn h_p(&self) -> &Mat<f64> {
        &self.h_p
    }

    pub fn h_s(&self) -> &Mat<f64> {
        &self.h_s
    }

    /// The materialized `(n_s·n_p) × m` design.
    pub fn full(&self) -> &Mat<f64> {
        &self.full
    }

    pub fn degree_p(&self) -> usize {
        self.degree_p
    }

    pub fn n_coef(&self) -> usize {
        self.full.ncols()
    }

    pub fn scaling(&self) -> PressureScaling {
        self.scaling
    }

    /// `H β` on the complete grid.
    pub fn apply(&self, beta: &[f64]) -> Vec<f64> {
        kron_matvec(self.h_s.as_ref(), self.h_p.as_ref(), beta).expect("coefficient length matches design")
    }

    /// `Hᵀ v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        kron_matvec(self.h_s.transpose(), self.h_p.transpose(), v).expect("vector length matches grid")
    }

    /// `Hᵀ H`.
    pub fn gram(&self) -> Mat<f64> {
        self.full.transpose() * &self.full
    }

    /// Column `c` of the full design.
    pub fn column(&self, c: usize) -> Vec<f64> {
        self.full.col_as_slice(c).to_vec()
    }

    pub fn pressure_row(&self, logp: f64) -> Vec<f64> {
        let l = self.scaling.scale(logp);
        (0..=self.degree_p).map(|d| l.powi(d as i32)).collect()
    }

    pub fn spatial_row(&self, _loc: (f64, f64)) -> Vec<f64> {
        match self.spatial_basis {
            SpatialBasis::Constant => vec![1.0],
        }
    }

    /// Design row `h_s(s) ⊗ h_p(p)` at an arbitrary point.
    pub fn row(&self, loc: (f64, f64), logp: f64) -> Vec<f64> {
        let hs = self.spatial_row(loc);
        let hp = self.pressure_row(logp);
        hs.iter().flat_map(|a| hp.iter().map(move |b| a * b)).collect()
    }
}

fn check_full_rank(m: &Mat<f64>, what: &str) -> Result<()> {
    if m.nrows() < m.ncols() {
        return Err(Error::RankDeficient(format!(
            "{what}: {} columns on {} rows",
            m.ncols(),
            m.nrows()
        )));
    }
    let gram = m.transpose() * m;
    let evals = gram
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::Numerical(format!("{e:?}")))?;
    let max = evals.iter().copied().fold(0.0, f64::max);
    let min = evals.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 1e-10 * max.max(1.0)) {
        return Err(Error::RankDeficient(format!("{what} is not of full column rank")));
    }
    Ok(())
}

/// Parameters of one fidelity level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub beta: Vec<f64>,
    /// Process variance (K²).
    pub sigma2: f64,
    /// Measurement-noise variance (K²).
    pub tau2: f64,
    pub theta: SeparableKernelParams,
}

/// Full parameter set Θ of the two-level model
/// `y_L = H_L β_L + w_L`, `y_H = ρ y_L + H_H β_H + w_H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub low: LevelParams,
    pub high: LevelParams,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGammaPrior {
    pub shape: f64,
    pub scale: f64,
}

impl InvGammaPrior {
    /// Unnormalized log density.
    pub fn log_density(&self, x: f64) -> f64 {
        if x > 0.0 {
            -(self.shape + 1.0) * x.ln() - self.scale / x
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Gamma(shape, scale) truncated to `(0, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncGammaPrior {
    pub shape: f64,
    pub scale: f64,
    pub upper: f64,
}

impl TruncGammaPrior {
    /// Unnormalized log density.
    pub fn log_density(&self, x: f64) -> f64 {
        if x > 0.0 && x <= self.upper {
            (self.shape - 1.0) * x.ln() - x / self.scale
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn median(&self) -> f64 {
        use statrs::function::gamma::gamma_lr;
        let cdf = |x: f64| gamma_lr(self.shape, x / self.scale);
        let target = 0.5 * cdf(self.upper);
        let (mut lo, mut hi) = (0.0, self.upper);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// How a level's nugget variances are treated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum NuggetMode {
    /// Both nuggets held at `value`.
    Fixed { value: f64 },
    /// Nuggets sampled in the kernel-parameter Metropolis step.
    Random,
}

impl Default for NuggetMode {
    fn default() -> Self {
        NuggetMode::Fixed { value: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Priors {
    /// Variance of the zero-mean Gaussian prior on each mean coefficient (and ρ).
    pub beta_var: f64,
    pub sigma2: InvGammaPrior,
    pub tau2: InvGammaPrior,
    /// Upper bound of the uniform prior on spatial lengthscales (degrees).
    pub phi_spatial_max: f64,
    /// Upper bound of the uniform prior on the log-pressure lengthscale.
    pub phi_pressure_max: f64,
    pub nugget: TruncGammaPrior,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            beta_var: 1e6,
            sigma2: InvGammaPrior { shape: 2.0, scale: 1.0 },
            tau2: InvGammaPrior { shape: 2.0, scale: 1.0 },
            phi_spatial_max: 100.0,
            phi_pressure_max: 20.0,
            nugget: TruncGammaPrior {
                shape: 1.0,
                scale: 0.01,
                upper: 0.1,
            },
        }
    }
}

impl Priors {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut v = Vec::new();
        let mut positive = |name: &str, x: f64| {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{name} must be > 0"));
            }
        };
        positive("priors.beta_var", self.beta_var);
        positive("priors.sigma2.shape", self.sigma2.shape);
        positive("priors.sigma2.scale", self.sigma2.scale);
        positive("priors.tau2.shape", self.tau2.shape);
        positive("priors.tau2.scale", self.tau2.scale);
        positive("priors.phi_spatial_max", self.phi_spatial_max);
        positive("priors.phi_pressure_max", self.phi_pressure_max);
        positive("priors.nugget.shape", self.nugget.shape);
        positive("priors.nugget.scale", self.nugget.scale);
        positive("priors.nugget.upper", self.nugget.upper);
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    /// Unnormalized log prior of one level's kernel parameters.
    pub fn log_theta(&self, theta: &SeparableKernelParams, nugget: NuggetMode) -> f64 {
        let in_range = |x: f64, max: f64| x > 0.0 && x <= max;
        if !(in_range(theta.phi_lon, self.phi_spatial_max)
            && in_range(theta.phi_lat, self.phi_spatial_max)
            && in_range(theta.phi_p, self.phi_pressure_max))
        {
            return f64::NEG_INFINITY;
        }
        match nugget {
            NuggetMode::Fixed { value } => {
                if theta.g2_s == value && theta.g2_p == value {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            NuggetMode::Random => self.nugget.log_density(theta.g2_s) + self.nugget.log_density(theta.g2_p),
        }
    }

    /// Kernel parameters at their prior medians.
    pub fn theta_median(&self, nugget: NuggetMode) -> SeparableKernelParams {
        let g2 = match nugget {
            NuggetMode::Fixed { value } => value,
            NuggetMode::Random => self.nugget.median(),
        };
        SeparableKernelParams {
            phi_lon: 0.5 * self.phi_spatial_max,
            phi_lat: 0.5 * self.phi_spatial_max,
            g2_s: g2,
            phi_p: 0.5 * self.phi_pressure_max,
            g2_p: g2,
        }
    }
}

impl ModelParams {
    /// A neutral starting point: zero coefficients, ρ = 1, unit variances and
    /// kernel parameters at their prior medians.
    pub fn initial(m_low: usize, m_high: usize, priors: &Priors, nugget: [NuggetMode; 2]) -> Self {
        let level = |m: usize, mode: NuggetMode| LevelParams {
            beta: vec![0.0; m],
            sigma2: 1.0,
            tau2: 1.0,
            theta: priors.theta_median(mode),
        };
        Self {
            low: level(m_low, nugget[0]),
            high: level(m_high, nugget[1]),
            rho: 1.0,
        }
    }
}

/// Lists every invariant or prior-support violation of `params`.
pub fn validate_params(params: &ModelParams, priors: &Priors) -> std::result::Result<(), Vec<String>> {
    let mut v = priors.validate().err().unwrap_or_default();
    if !params.rho.is_finite() {
        v.push("rho must be finite".into());
    }
    for (tag, level) in [("L", &params.low), ("H", &params.high)] {
        check_level(&mut v, tag, level, priors);
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

pub(crate) fn check_level(v: &mut Vec<String>, tag: &str, level: &LevelParams, priors: &Priors) {
    if level.beta.iter().any(|b| !b.is_finite()) {
        v.push(format!("beta_{tag} must be finite"));
    }
    for (name, x) in [("sigma2", level.sigma2), ("tau2", level.tau2)] {
        if !(x > 0.0 && x.is_finite()) {
            v.push(format!("{name}_{tag} must be > 0"));
        }
    }
    let t = &level.theta;
    for (name, x, max) in [
        ("phi_lon", t.phi_lon, priors.phi_spatial_max),
        ("phi_lat", t.phi_lat, priors.phi_spatial_max),
        ("phi_p", t.phi_p, priors.phi_pressure_max),
    ] {
        if !(x > 0.0 && x <= max) {
            v.push(format!("{name}_{tag} = {x} outside prior support (0, {max}]"));
        }
    }
    for (name, x) in [("g2_s", t.g2_s), ("g2_p", t.g2_p)] {
        if !(x >= 0.0 && x <= priors.nugget.upper) {
            v.push(format!("{name}_{tag} = {x} outside prior support [0, {}]", priors.nugget.upper));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn granule(n_s: usize, pressures: Vec<f64>, flags: Vec<Flag>) -> Granule {
        let n_p = pressures.len();
        let temps = flags.iter().map(|f| if f.is_observed() { 250.0 } else { f64::NAN }).collect();
        Granule::new(
            (0..n_s).map(|i| i as f64).collect(),
            vec![0.0; n_s],
            pressures,
            (1..=n_p as u32).collect(),
            temps,
            flags,
        )
        .unwrap()
    }

    #[test]
    fn degree_zero_design_is_ones() {
        let g = granule(3, vec![100.0, 200.0], vec![Flag::High; 6]);
        let d = build_mean_design(&g, 0, SpatialBasis::Constant).unwrap();
        assert_eq!(d.full().ncols(), 1);
        assert!((0..6).all(|r| d.full()[(r, 0)] == 1.0));
    }

    #[test]
    fn degree_one_centered_two_levels() {
        let e = std::f64::consts::E;
        // log-pressures -1 and +1.
        let g = granule(1, vec![1.0 / e, e], vec![Flag::High; 2]);
        let d = build_mean_design(&g, 1, SpatialBasis::Constant).unwrap();
        let hp = d.h_p();
        assert_relative_eq!(hp[(0, 0)], 1.0);
        assert_relative_eq!(hp[(0, 1)], -1.0, epsilon = 1e-12);
        assert_relative_eq!(hp[(1, 0)], 1.0);
        assert_relative_eq!(hp[(1, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn full_scale_design_dimensions() {
        let n_s = 1350;
        let n_p = 96;
        let pressures: Vec<f64> = (0..n_p).map(|j| 0.1 * (1.1f64).powi(j as i32)).collect();
        let g = granule(n_s, pressures, vec![Flag::High; n_s * n_p]);
        let d = build_mean_design(&g, 3, SpatialBasis::Constant).unwrap();
        assert_eq!((d.full().nrows(), d.full().ncols()), (129_600, 4));
    }

    #[test]
    fn rank_deficient_pressure_basis_is_named() {
        let g = granule(2, vec![100.0, 200.0], vec![Flag::High; 4]);
        let err = build_mean_design(&g, 3, SpatialBasis::Constant).unwrap_err();
        assert!(err.to_string().contains("pressure basis"), "{err}");
    }

    #[test]
    fn partition_examples() {
        let g = granule(2, vec![10.0, 20.0], vec![Flag::High; 4]);
        let s = partition_granule(&g);
        assert_eq!(s.d_high, vec![0, 1, 2, 3]);
        assert!(s.d_low.is_empty() && s.d_miss.is_empty());

        let g = granule(3, vec![10.0], vec![Flag::High, Flag::Low, Flag::Bad]);
        let s = partition_granule(&g);
        assert_eq!((s.d_high, s.d_low, s.d_miss), (vec![0], vec![1], vec![2]));
    }

    #[test]
    fn undefined_levels_dropped_and_scattered_na_kept() {
        let flags = vec![
            Flag::High, Flag::Undefined, Flag::Undefined,
            Flag::Low, Flag::Undefined, Flag::Bad,
        ];
        let temps = vec![250.0, f64::NAN, f64::NAN, 251.0, f64::NAN, f64::NAN];
        let (g, dropped) = Granule::dropping_undefined_levels(
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            vec![10.0, 20.0, 30.0],
            vec![1, 2, 3],
            temps,
            flags,
        )
        .unwrap();
        assert_eq!(dropped, vec![2]);
        assert_eq!(g.n_pressure(), 2);
        assert_eq!(g.flags(), &[Flag::High, Flag::Undefined, Flag::Low, Flag::Bad]);
        assert_eq!(partition_granule(&g).d_miss, vec![1, 3]);
    }

    #[test]
    fn granule_rejects_observed_cell_without_temperature() {
        let r = Granule::new(vec![0.0], vec![0.0], vec![10.0], vec![1], vec![f64::NAN], vec![Flag::High]);
        assert!(r.is_err());
    }

    #[test]
    fn validate_defaults_and_violations() {
        let priors = Priors::default();
        let mut p = ModelParams::initial(4, 4, &priors, [NuggetMode::default(); 2]);
        assert!(validate_params(&p, &priors).is_ok());
        p.low.tau2 = 0.0;
        let v = validate_params(&p, &priors).unwrap_err();
        assert_eq!(v, vec!["tau2_L must be > 0".to_string()]);
        p.low.tau2 = 1.0;
        p.low.theta.phi_lon = 150.0;
        let v = validate_params(&p, &priors).unwrap_err();
        assert!(v[0].contains("phi_lon_L") && v[0].contains("outside prior support"), "{v:?}");
    }

    #[test]
    fn nugget_median_matches_closed_form() {
        let prior = Priors::default().nugget;
        // Exponential(scale 0.01) truncated at 0.1.
        let expected = -0.01 * (1.0 - 0.5 * (1.0 - (-10f64).exp())).ln();
        assert_relative_eq!(prior.median(), expected, max_relative = 1e-9);
    }

    proptest! {
        #[test]
        fn partition_is_exact(codes in proptest::collection::vec(0u8..4, 12)) {
            let flags: Vec<Flag> = codes.iter().map(|&c| Flag::from_code(c).unwrap_or(Flag::Undefined)).collect();
            // Keep every level defined somewhere.
            let mut flags = flags;
            flags[0] = Flag::High;
            flags[1] = Flag::High;
            flags[2] = Flag::High;
            let g = granule(4, vec![1.0, 2.0, 3.0], flags);
            let s = partition_granule(&g);
            let mut all: Vec<usize> = s.d_high.iter().chain(&s.d_low).chain(&s.d_miss).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..12).collect::<Vec<_>>());
        }

        #[test]
        fn design_kron_mixed_product(a in -3.0f64..3.0, b in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let g = granule(3, vec![10.0, 30.0, 100.0, 400.0], vec![Flag::High; 12]);
            let d = build_mean_design(&g, 2, SpatialBasis::Constant).unwrap();
            let coef: Vec<f64> = b.iter().map(|x| a * x).collect();
            let lhs = d.apply(&coef);
            let hs_a: Vec<f64> = (0..3).map(|i| d.h_s()[(i, 0)] * a).collect();
            let hp_b: Vec<f64> = (0..4).map(|j| (0..3).map(|k| d.h_p()[(j, k)] * b[k]).sum()).collect();
            for i in 0..3 {
                for j in 0..4 {
                    prop_assert!((lhs[i * 4 + j] - hs_a[i] * hp_b[j]).abs() < 1e-12);
                }
            }
        }
    }
}
