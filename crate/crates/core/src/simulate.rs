//! Synthetic quality-flagged granules drawn from the two-level model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{factor_pair, GridGeometry, SeparableKernelParams};
use crate::model::{Flag, Granule, LevelParams, MeanDesign, ModelParams, SpatialBasis};
use crate::sampler::standard_normals;

/// Block of cells withheld for testing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoldoutRule {
    /// Cells on levels with 1-based position greater than this are eligible.
    pub min_level: usize,
    /// Fractional longitude range of the block, within the granule's extent.
    pub lon_frac: (f64, f64),
    /// Fractional latitude range of the block.
    pub lat_frac: (f64, f64),
}

impl Default for HoldoutRule {
    fn default() -> Self {
        Self {
            min_level: 0,
            lon_frac: (0.0, 1.0),
            lat_frac: (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_lon: usize,
    pub n_lat: usize,
    pub n_p: usize,
    pub lon0: f64,
    pub lat0: f64,
    /// Grid spacing in degrees.
    pub spacing_deg: f64,
    pub pressure_min_hpa: f64,
    pub pressure_max_hpa: f64,
    pub degree_low: usize,
    pub degree_high: usize,
    pub true_params: ModelParams,
    /// Spatial lengthscale (degrees) of the auxiliary field driving flags.
    pub flag_cluster_lengthscale: f64,
    /// Log-pressure lengthscale of the auxiliary field.
    pub flag_pressure_lengthscale: f64,
    pub frac_low: f64,
    pub frac_miss: f64,
    /// Additive offset on the auxiliary field at the highest-pressure level,
    /// growing linearly from zero at the lowest-pressure level.
    pub level_bias: f64,
    pub holdout: Option<HoldoutRule>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let theta = SeparableKernelParams {
            phi_lon: 1.5,
            phi_lat: 1.5,
            g2_s: 1e-6,
            phi_p: 0.8,
            g2_p: 1e-6,
        };
        Self {
            n_lon: 15,
            n_lat: 15,
            n_p: 12,
            lon0: 0.0,
            lat0: 0.0,
            spacing_deg: 0.4,
            pressure_min_hpa: 100.0,
            pressure_max_hpa: 1000.0,
            degree_low: 3,
            degree_high: 3,
            true_params: ModelParams {
                low: LevelParams {
                    beta: vec![250.0, 40.0, -5.0, 3.0],
                    sigma2: 1.5,
                    tau2: 0.5,
                    theta,
                },
                high: LevelParams {
                    beta: vec![2.0, 1.0, 0.0, 0.0],
                    sigma2: 0.5,
                    tau2: 0.05,
                    theta,
                },
                rho: 0.9,
            },
            flag_cluster_lengthscale: 1.5,
            flag_pressure_lengthscale: 1.0,
            frac_low: 0.3,
            frac_miss: 0.1,
            level_bias: 1.0,
            holdout: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lon < 2 || self.n_lat < 2 || self.n_p < 2 {
            return Err(Error::Config("simulation grid dimensions must be >= 2".into()));
        }
        if !(self.frac_low >= 0.0 && self.frac_miss >= 0.0 && self.frac_low + self.frac_miss < 1.0) {
            return Err(Error::Config(format!(
                "infeasible flag fractions: frac_low {} + frac_miss {} must be < 1",
                self.frac_low, self.frac_miss
            )));
        }
        if !(self.pressure_min_hpa > 0.0 && self.pressure_min_hpa < self.pressure_max_hpa) {
            return Err(Error::Config("pressure range must be positive and increasing".into()));
        }
        if !(self.spacing_deg > 0.0 && self.flag_cluster_lengthscale > 0.0 && self.flag_pressure_lengthscale > 0.0) {
            return Err(Error::Config("spacing and flag lengthscales must be > 0".into()));
        }
        let p = &self.true_params;
        if p.low.beta.len() != self.degree_low + 1 || p.high.beta.len() != self.degree_high + 1 {
            return Err(Error::Config("true coefficient lengths must equal degree + 1".into()));
        }
        for l in [&p.low, &p.high] {
            if !(l.sigma2 >= 0.0 && l.tau2 >= 0.0) {
                return Err(Error::Config("true variances must be >= 0".into()));
            }
            l.theta.validate()?;
        }
        Ok(())
    }

    pub fn geometry(&self) -> GridGeometry {
        let locs = (0..self.n_lat)
            .flat_map(|k| {
                (0..self.n_lon).map(move |i| {
                    (
                        self.lon0 + i as f64 * self.spacing_deg,
                        self.lat0 + k as f64 * self.spacing_deg,
                    )
                })
            })
            .collect();
        let (lo, hi) = (self.pressure_min_hpa.ln(), self.pressure_max_hpa.ln());
        let logp = (0..self.n_p)
            .map(|j| lo + (hi - lo) * j as f64 / (self.n_p - 1) as f64)
            .collect();
        GridGeometry { locs, logp }
    }
}

/// A simulated granule together with every latent quantity.
#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Observed granule (before any holdout).
    pub granule: Granule,
    pub y_low: Vec<f64>,
    /// Complete high-fidelity truth.
    pub y_high: Vec<f64>,
    pub z_low: Vec<f64>,
    pub z_high: Vec<f64>,
    pub flags: Vec<Flag>,
}

/// Draws `σ · (R_s ⊗ R_p)^{1/2} z` for a standard-normal `z`.
fn draw_field(grid: &GridGeometry, theta: &SeparableKernelParams, sigma2: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = grid.len();
    let z = standard_normals(n, rng);
    if sigma2 == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let pair = factor_pair(grid, theta)?;
    let scaled: Vec<f64> = pair
        .eigenvalue_products()
        .iter()
        .zip(&z)
        .map(|(l, e)| (sigma2 * l).sqrt() * e)
        .collect();
    pair.from_eigenbasis(&scaled)
}

pub fn simulate_granule(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let grid = config.geometry();
    let n = grid.len();
    let n_p = grid.n_pressure();
    let p = &config.true_params;
    let dl = MeanDesign::from_geometry(&grid, config.degree_low, SpatialBasis::Constant)?;
    let dh = MeanDesign::from_geometry(&grid, config.degree_high, SpatialBasis::Constant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let w_low = draw_field(&grid, &p.low.theta, p.low.sigma2, &mut rng)?;
    let w_high = draw_field(&grid, &p.high.theta, p.high.sigma2, &mut rng)?;
    let ml = dl.apply(&p.low.beta);
    let mh = dh.apply(&p.high.beta);
    let y_low: Vec<f64> = (0..n).map(|c| ml[c] + w_low[c]).collect();
    let y_high: Vec<f64> = (0..n).map(|c| p.rho * y_low[c] + mh[c] + w_high[c]).collect();
    let e_low = standard_normals(n, &mut rng);
    let e_high = standard_normals(n, &mut rng);
    let z_low: Vec<f64> = (0..n).map(|c| y_low[c] + p.low.tau2.sqrt() * e_low[c]).collect();
    let z_high: Vec<f64> = (0..n).map(|c| y_high[c] + p.high.tau2.sqrt() * e_high[c]).collect();

    let aux_theta = SeparableKernelParams {
        phi_lon: config.flag_cluster_lengthscale,
        phi_lat: config.flag_cluster_lengthscale,
        g2_s: 1e-8,
        phi_p: config.flag_pressure_lengthscale,
        g2_p: 1e-8,
    };
    let aux = draw_field(&grid, &aux_theta, 1.0, &mut rng)?;
    let score: Vec<f64> = (0..n)
        .map(|c| aux[c] + config.level_bias * (c % n_p) as f64 / (n_p - 1) as f64)
        .collect();
    let flags = assign_flags(&score, config.frac_low, config.frac_miss);

    let temperature = (0..n)
        .map(|c| match flags[c] {
            Flag::High => z_high[c],
            Flag::Low => z_low[c],
            _ => f64::NAN,
        })
        .collect();
    let granule = Granule::new(
        grid.locs.iter().map(|l| l.0).collect(),
        grid.locs.iter().map(|l| l.1).collect(),
        grid.logp.iter().map(|l| l.exp()).collect(),
        (1..=n_p as u32).collect(),
        temperature,
        flags.clone(),
    )?;
    Ok(SimOutput {
        granule,
        y_low,
        y_high,
        z_low,
        z_high,
        flags,
    })
}

/// Largest scores become flag 2, the next ones flag 1, the rest flag 0.
fn assign_flags(score: &[f64], frac_low: f64, frac_miss: f64) -> Vec<Flag> {
    let n = score.len();
    let n_miss = (frac_miss * n as f64).round() as usize;
    let n_low = (frac_low * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut flags = vec![Flag::High; n];
    for (rank, &c) in order.iter().enumerate() {
        if rank < n_miss {
            flags[c] = Flag::Bad;
        } else if rank < n_miss + n_low {
            flags[c] = Flag::Low;
        }
    }
    flags
}

/// A withheld cell with its true high-fidelity value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub cell: usize,
    pub lon: f64,
    pub lat: f64,
    pub pressure_hpa: f64,
    pub truth: f64,
}

/// Withholds every defined cell inside the rule's block. Test records are the
/// withheld cells that carried flag 0, scored against `truth` (the complete
/// high-fidelity field).
pub fn make_holdout(granule: &Granule, truth: &[f64], rule: &HoldoutRule) -> Result<(Granule, Vec<TestRecord>)> {
    if truth.len() != granule.len() {
        return Err(Error::Dimension {
            context: "holdout truth",
            expected: granule.len(),
            actual: truth.len(),
        });
    }
    let bounds = |v: &[f64], f: (f64, f64)| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo + f.0 * (hi - lo) - 1e-9, lo + f.1 * (hi - lo) + 1e-9)
    };
    let (lon_lo, lon_hi) = bounds(granule.lons(), rule.lon_frac);
    let (lat_lo, lat_hi) = bounds(granule.lats(), rule.lat_frac);
    let n_p = granule.n_pressure();
    let mut withheld = Vec::new();
    let mut tests = Vec::new();
    for i in 0..granule.n_spatial() {
        let (lon, lat) = (granule.lons()[i], granule.lats()[i]);
        if lon < lon_lo || lon > lon_hi || lat < lat_lo || lat > lat_hi {
            continue;
        }
        for j in rule.min_level..n_p {
            let c = granule.cell(i, j);
            let f = granule.flags()[c];
            if f == Flag::Undefined {
                continue;
            }
            withheld.push(c);
            if f == Flag::High {
                tests.push(TestRecord {
                    cell: c,
                    lon,
                    lat,
                    pressure_hpa: granule.pressures()[j],
                    truth: truth[c],
                });
            }
        }
    }
    if tests.is_empty() {
        return Err(Error::InvalidArgument("holdout rule selects no testable cells".into()));
    }
    Ok((granule.with_cells_withheld(&withheld), tests))
}
