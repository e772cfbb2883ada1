//! Separable exponential correlation kernels.
//!
//! The spatial factor is a product exponential over longitude and latitude,
//! the pressure factor an exponential in log-pressure. Each factor carries its
//! own nugget, added only where coordinates coincide.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kron::{KroneckerFactorPair, SymEig};

/// Coordinates closer than this (absolute) count as the same point for the
/// nugget indicator.
pub const COINCIDENCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[default]
    Exponential,
}

/// Kernel hyperparameters of one fidelity level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparableKernelParams {
    /// Longitude lengthscale (degrees).
    pub phi_lon: f64,
    /// Latitude lengthscale (degrees).
    pub phi_lat: f64,
    /// Spatial nugget variance.
    pub g2_s: f64,
    /// Log-pressure lengthscale.
    pub phi_p: f64,
    /// Pressure nugget variance.
    pub g2_p: f64,
}

impl SeparableKernelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("phi_lon", self.phi_lon),
            ("phi_lat", self.phi_lat),
            ("phi_p", self.phi_p),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("g2_s", self.g2_s), ("g2_p", self.g2_p)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Spatial correlation between two locations (nugget included on coincidence).
    pub fn spatial(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        let d = (a.0 - b.0).abs() / self.phi_lon + (a.1 - b.1).abs() / self.phi_lat;
        let same = (a.0 - b.0).abs() <= COINCIDENCE_TOL && (a.1 - b.1).abs() <= COINCIDENCE_TOL;
        (-d).exp() + if same { self.g2_s } else { 0.0 }
    }

    /// Pressure correlation between two log-pressures (nugget included on coincidence).
    pub fn pressure(&self, a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        (-d / self.phi_p).exp() + if d <= COINCIDENCE_TOL { self.g2_p } else { 0.0 }
    }
}

/// Coordinates of a complete tensor grid: spatial locations × log-pressures.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    pub locs: Vec<(f64, f64)>,
    pub logp: Vec<f64>,
}

impl GridGeometry {
    pub fn n_spatial(&self) -> usize {
        self.locs.len()
    }

    pub fn n_pressure(&self) -> usize {
        self.logp.len()
    }

    pub fn len(&self) -> usize {
        self.n_spatial() * self.n_pressure()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_finite<'a>(what: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite {what} coordinate")));
    }
    Ok(())
}

/// `n_s × n_s` spatial correlation matrix.
pub fn spatial_corr_matrix(locs: &[(f64, f64)], params: &SeparableKernelParams) -> Result<Mat<f64>> {
    params.validate()?;
    if locs.is_empty() {
        return Err(Error::InvalidArgument("no spatial locations".into()));
    }
    check_finite("spatial", locs.iter().flat_map(|(a, b)| [a, b]))?;
    Ok(Mat::from_fn(locs.len(), locs.len(), |k, l| params.spatial(locs[k], locs[l])))
}

/// `n_p × n_p` pressure correlation matrix over log-pressure values.
pub fn pressure_corr_matrix(logp: &[f64], params: &SeparableKernelParams) -> Result<Mat<f64>> {
    params.validate()?;
    if logp.is_empty() {
        return Err(Error::InvalidArgument("no pressure levels".into()));
    }
    check_finite("pressure", logp)?;
    Ok(Mat::from_fn(logp.len(), logp.len(), |k, l| params.pressure(logp[k], logp[l])))
}

/// Spatial cross-correlation rows: `m × n_s`.
pub fn spatial_cross(
    targets: &[(f64, f64)],
    locs: &[(f64, f64)],
    params: &SeparableKernelParams,
) -> Mat<f64> {
    Mat::from_fn(targets.len(), locs.len(), |k, l| params.spatial(targets[k], locs[l]))
}

/// Pressure cross-correlation rows: `m × n_p`.
pub fn pressure_cross(targets: &[f64], logp: &[f64], params: &SeparableKernelParams) -> Mat<f64> {
    Mat::from_fn(targets.len(), logp.len(), |k, l| params.pressure(targets[k], logp[l]))
}

/// Cross-correlation between new points `(lon, lat, log-pressure)` and every
/// grid cell, `m × (n_s·n_p)` in spatial-major order.
///
/// Materializes the full block; prediction code uses the factored rows instead.
pub fn cross_corr(
    new_points: &[(f64, f64, f64)],
    grid: &GridGeometry,
    params: &SeparableKernelParams,
) -> Result<Mat<f64>> {
    params.validate()?;
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty grid geometry".into()));
    }
    check_finite("target", new_points.iter().flat_map(|(a, b, c)| [a, b, c]))?;
    let n_p = grid.n_pressure();
    Ok(Mat::from_fn(new_points.len(), grid.len(), |k, cell| {
        let (lon, lat, lp) = new_points[k];
        params.spatial((lon, lat), grid.locs[cell / n_p]) * params.pressure(lp, grid.logp[cell % n_p])
    }))
}

/// Distinct longitudes and latitudes of a location list that enumerates
/// their full product, one axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductAxes {
    pub lons: Vec<f64>,
    pub lats: Vec<f64>,
    /// True when longitude varies fastest (`index = k · n_lon + i`).
    pub lat_major: bool,
}

fn separated(v: &[f64]) -> bool {
    v.iter()
        .enumerate()
        .all(|(a, x)| v[..a].iter().all(|y| (x - y).abs() > COINCIDENCE_TOL))
}

/// Recognizes regular lon × lat location lists.
pub fn product_axes(locs: &[(f64, f64)]) -> Option<ProductAxes> {
    let n = locs.len();
    if n == 0 {
        return None;
    }
    let try_order = |lat_major: bool| -> Option<ProductAxes> {
        let same = |a: &(f64, f64), b: &(f64, f64)| if lat_major { a.1 == b.1 } else { a.0 == b.0 };
        let inner = locs.iter().take_while(|l| same(l, &locs[0])).count();
        if n % inner != 0 {
            return None;
        }
        let outer = n / inner;
        let (lons, lats): (Vec<f64>, Vec<f64>) = if lat_major {
            (locs[..inner].iter().map(|l| l.0).collect(), (0..outer).map(|k| locs[k * inner].1).collect())
        } else {
            ((0..outer).map(|k| locs[k * inner].0).collect(), locs[..inner].iter().map(|l| l.1).collect())
        };
        let fits = (0..outer).all(|k| {
            (0..inner).all(|i| {
                let (lon, lat) = if lat_major { (lons[i], lats[k]) } else { (lons[k], lats[i]) };
                locs[k * inner + i] == (lon, lat)
            })
        });
        (fits && separated(&lons) && separated(&lats)).then_some(ProductAxes { lons, lats, lat_major })
    };
    try_order(true).or_else(|| try_order(false))
}

fn axis_corr(x: &[f64], phi: f64) -> Mat<f64> {
    Mat::from_fn(x.len(), x.len(), |a, b| (-(x[a] - x[b]).abs() / phi).exp())
}

/// Eigendecomposition of the spatial correlation matrix. On a regular
/// lon × lat grid the kernel factors as `R_lat ⊗ R_lon` (or the reverse),
/// and only the two axis matrices are decomposed.
pub fn spatial_eig(locs: &[(f64, f64)], params: &SeparableKernelParams) -> Result<SymEig> {
    params.validate()?;
    check_finite("spatial", locs.iter().flat_map(|(a, b)| [a, b]))?;
    match product_axes(locs) {
        Some(ax) => {
            let lon = SymEig::new(axis_corr(&ax.lons, params.phi_lon).as_ref())?;
            let lat = SymEig::new(axis_corr(&ax.lats, params.phi_lat).as_ref())?;
            let (outer, inner) = if ax.lat_major { (&lat, &lon) } else { (&lon, &lat) };
            SymEig::kron_shifted(outer, inner, params.g2_s)
        }
        None => SymEig::new(spatial_corr_matrix(locs, params)?.as_ref()),
    }
}

/// Eigendecomposed correlation factors of one level on the complete grid.
pub fn factor_pair(grid: &GridGeometry, params: &SeparableKernelParams) -> Result<KroneckerFactorPair> {
    let spatial = spatial_eig(&grid.locs, params)?;
    let rp = pressure_corr_matrix(&grid.logp, params)?;
    Ok(KroneckerFactorPair::new(spatial, SymEig::new(rp.as_ref())?))
}
