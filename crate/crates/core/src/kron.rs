//! Linear algebra for separable (Kronecker-structured) covariance matrices.
//!
//! Vectors on the complete grid are ordered spatial-major, pressure-minor:
//! cell `(i, j)` (spatial index `i`, pressure index `j`) lives at flat index
//! `i * n_p + j`. Under this ordering the implied full matrix of a factor pair
//! is `R_s ⊗ R_p`.
//!
//! Kronecker products are never materialized on the production path. Every
//! solve, log-determinant, quadratic form and Gaussian draw goes through the
//! symmetric eigendecompositions of the two factors, so the cost on an
//! `n_s × n_p` grid is `O(n_s³ + n_p³)` for the decompositions plus
//! `O(n_s·n_p·(n_s + n_p))` per rotation into or out of the joint eigenbasis.

use std::sync::atomic::{AtomicUsize, Ordering};

use faer::{Mat, MatRef, Side};

use crate::error::{Error, Factor, Result};

/// Smallest eigenvalue kept by [`SymEig::new`]; anything below is clamped.
pub const EIGEN_FLOOR: f64 = 1e-12;

static CLAMP_EVENTS: AtomicUsize = AtomicUsize::new(0);

/// Number of eigenvalues clamped to [`EIGEN_FLOOR`] since process start.
///
/// A steadily growing count means the sampler keeps proposing kernel
/// parameters whose correlation matrices are numerically singular.
pub fn clamp_events() -> usize {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// Symmetric eigendecomposition `M = V diag(λ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct SymEig {
    vectors: Mat<f64>,
    values: Vec<f64>,
    clamped: usize,
}

impl SymEig {
    /// Decomposes a symmetric matrix (only the lower triangle is read).
    /// Eigenvalues below [`EIGEN_FLOOR`] are clamped and counted.
    pub fn new(matrix: MatRef<'_, f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Dimension {
                context: "SymEig::new (square matrix)",
                expected: matrix.nrows(),
                actual: matrix.ncols(),
            });
        }
        if matrix.nrows() == 0 {
            return Err(Error::InvalidArgument("cannot decompose an empty matrix".into()));
        }
        let evd = matrix
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e:?}")))?;
        let s = evd.S().column_vector();
        let values: Vec<f64> = (0..matrix.nrows()).map(|i| s[i]).collect();
        Self::clamped_from(evd.U().to_owned(), values)
    }

    /// Decomposition of `A ⊗ B + shift·I` from the decompositions of `A` and `B`,
    /// with the same clamping as [`SymEig::new`].
    pub fn kron_shifted(a: &SymEig, b: &SymEig, shift: f64) -> Result<Self> {
        let (na, nb) = (a.dim(), b.dim());
        let vectors = Mat::from_fn(na * nb, na * nb, |r, c| {
            a.vectors[(r / nb, c / nb)] * b.vectors[(r % nb, c % nb)]
        });
        let values = a
            .values
            .iter()
            .flat_map(|x| b.values.iter().map(move |y| x * y + shift))
            .collect();
        Self::clamped_from(vectors, values)
    }

    fn clamped_from(vectors: Mat<f64>, mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite eigenvalue".into()));
        }
        let mut clamped = 0;
        for v in values.iter_mut() {
            if *v < EIGEN_FLOOR {
                *v = EIGEN_FLOOR;
                clamped += 1;
            }
        }
        if clamped > 0 {
            CLAMP_EVENTS.fetch_add(clamped, Ordering::Relaxed);
        }
        Ok(Self {
            vectors,
            values,
            clamped,
        })
    }

    /// Builds a decomposition from precomputed parts without clamping.
    pub fn from_parts(vectors: Mat<f64>, values: Vec<f64>) -> Result<Self> {
        if vectors.nrows() != vectors.ncols() || vectors.ncols() != values.len() {
            return Err(Error::Dimension {
                context: "SymEig::from_parts",
                expected: vectors.nrows(),
                actual: values.len(),
            });
        }
        Ok(Self {
            vectors,
            values,
            clamped: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vectors(&self) -> MatRef<'_, f64> {
        self.vectors.as_ref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of eigenvalues that were raised to [`EIGEN_FLOOR`].
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// `V diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> Mat<f64> {
        let n = self.dim();
        let scaled = Mat::from_fn(n, n, |i, j| self.vectors[(i, j)] * self.values[j]);
        &scaled * self.vectors.transpose()
    }

    fn check_positive(&self, factor: Factor) -> Result<()> {
        match self.values.iter().position(|&v| !(v > 0.0)) {
            Some(index) => Err(Error::NotPositiveDefinite {
                factor,
                index,
                value: self.values[index],
            }),
            None => Ok(()),
        }
    }

    fn logdet(&self) -> f64 {
        self.values.iter().map(|v| v.ln()).sum()
    }

    /// Solves `M y = x` for one vector.
    pub fn solve_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut rotated = vec![0.0; n];
        for k in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.vectors[(i, k)] * x[i];
            }
            rotated[k] = acc / self.values[k];
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            let r = rotated[k];
            for i in 0..n {
                out[i] += self.vectors[(i, k)] * r;
            }
        }
        out
    }

    /// `xᵀ M⁻¹ x` for one vector.
    pub fn quadform_vec(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        (0..n)
            .map(|k| {
                let c: f64 = (0..n).map(|i| self.vectors[(i, k)] * x[i]).sum();
                c * c / self.values[k]
            })
            .sum()
    }
}

/// Cached eigendecompositions of a spatial factor `R_s` and a pressure factor
/// `R_p`, representing `R_s ⊗ R_p` on the spatial-major grid ordering.
#[derive(Debug, Clone)]
pub struct KroneckerFactorPair {
    spatial: SymEig,
    pressure: SymEig,
}

impl KroneckerFactorPair {
    pub fn new(spatial: SymEig, pressure: SymEig) -> Self {
        Self { spatial, pressure }
    }

    /// Decomposes both factors.
    pub fn from_factors(spatial: MatRef<'_, f64>, pressure: MatRef<'_, f64>) -> Result<Self> {
        Ok(Self::new(SymEig::new(spatial)?, SymEig::new(pressure)?))
    }

    pub fn spatial(&self) -> &SymEig {
        &self.spatial
    }

    pub fn pressure(&self) -> &SymEig {
        &self.pressure
    }

    pub fn n_spatial(&self) -> usize {
        self.spatial.dim()
    }

    pub fn n_pressure(&self) -> usize {
        self.pressure.dim()
    }

    /// Number of grid cells, `n_s · n_p`.
    pub fn len(&self) -> usize {
        self.n_spatial() * self.n_pressure()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_positive(&self) -> Result<()> {
        self.spatial.check_positive(Factor::Spatial)?;
        self.pressure.check_positive(Factor::Pressure)
    }

    fn check_len(&self, context: &'static str, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(Error::Dimension {
                context,
                expected: self.len(),
                actual: len,
            });
        }
        Ok(())
    }

    /// `(U_s ⊗ U_p)ᵀ x`: coordinates of `x` in the joint eigenbasis.
    pub fn to_eigenbasis(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len("KroneckerFactorPair::to_eigenbasis", x.len())?;
        kron_matvec(
            self.spatial.vectors().transpose(),
            self.pressure.vectors().transpose(),
            x,
        )
    }

    /// `(U_s ⊗ U_p) y`: maps joint-eigenbasis coordinates back to the grid.
    pub fn from_eigenbasis(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_len("KroneckerFactorPair::from_eigenbasis", y.len())?;
        kron_matvec(self.spatial.vectors(), self.pressure.vectors(), y)
    }

    /// Eigenvalues of `R_s ⊗ R_p` in flat grid order: `λ_{s,i} · λ_{p,j}`.
    pub fn eigenvalue_products(&self) -> Vec<f64> {
        let ls = self.spatial.values();
        let lp = self.pressure.values();
        ls.iter()
            .flat_map(|&a| lp.iter().map(move |&b| a * b))
            .collect()
    }

    /// `(R_s ⊗ R_p)⁻¹ x`.
    pub fn solve(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_positive()?;
        let mut rotated = self.to_eigenbasis(x)?;
        for (r, l) in rotated.iter_mut().zip(self.eigenvalue_products()) {
            *r /= l;
        }
        self.from_eigenbasis(&rotated)
    }

    /// `(R_s ⊗ R_p) x`, through the factors' reconstructions.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut rotated = self.to_eigenbasis(x)?;
        for (r, l) in rotated.iter_mut().zip(self.eigenvalue_products()) {
            *r *= l;
        }
        self.from_eigenbasis(&rotated)
    }

    /// Materializes `R_s ⊗ R_p`. Only sensible for small grids.
    pub fn to_dense(&self) -> Mat<f64> {
        materialize(
            self.spatial.reconstruct().as_ref(),
            self.pressure.reconstruct().as_ref(),
        )
    }
}

/// `(A ⊗ B) x` via the reshape identity, never forming `A ⊗ B`.
///
/// `A` is `r_a × c_a`, `B` is `r_b × c_b`, and `x` has length `c_a · c_b` in
/// spatial-major order (the `A` index is major). The result has length
/// `r_a · r_b` in the same order. Square factors are the common case, but
/// rectangular ones (e.g. design matrices) are accepted.
pub fn kron_matvec(a: MatRef<'_, f64>, b: MatRef<'_, f64>, x: &[f64]) -> Result<Vec<f64>> {
    let expected = a.ncols() * b.ncols();
    if x.len() != expected {
        return Err(Error::Dimension {
            context: "kron_matvec",
            expected,
            actual: x.len(),
        });
    }
    // Column-major (c_b × c_a) view: entry (j, i) is x[i * c_b + j].
    let y = MatRef::from_column_major_slice(x, b.ncols(), a.ncols());
    let by = b * y;
    let out: Mat<f64> = &by * a.transpose();
    let mut flat = Vec::with_capacity(out.nrows() * out.ncols());
    for j in 0..out.ncols() {
        flat.extend_from_slice(out.col_as_slice(j));
    }
    Ok(flat)
}

/// `log|R_s ⊗ R_p| = n_p·log|R_s| + n_s·log|R_p|`.
pub fn kron_logdet(pair: &KroneckerFactorPair) -> Result<f64> {
    pair.check_positive()?;
    Ok(pair.n_pressure() as f64 * pair.spatial.logdet()
        + pair.n_spatial() as f64 * pair.pressure.logdet())
}

/// `xᵀ (R_s ⊗ R_p)⁻¹ x` computed in rotated coordinates.
pub fn kron_quadform(pair: &KroneckerFactorPair, x: &[f64]) -> Result<f64> {
    pair.check_positive()?;
    let rotated = pair.to_eigenbasis(x)?;
    Ok(rotated
        .iter()
        .zip(pair.eigenvalue_products())
        .map(|(r, l)| r * r / l)
        .sum())
}

/// Result of [`sample_diag_plus_invkron_gaussian`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDraw {
    pub sample: Vec<f64>,
    pub mean: Vec<f64>,
}

fn check_precision_weights(a: f64, c: f64) -> Result<()> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::InvalidArgument(format!("diagonal weight a must be > 0, got {a}")));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "inverse-Kronecker weight c must be > 0, got {c}"
        )));
    }
    Ok(())
}

/// Draws from `N(P⁻¹ rhs, P⁻¹)` for the precision `P = a·I + c·(R_s⁻¹ ⊗ R_p⁻¹)`.
///
/// `P` is diagonal in the joint eigenbasis with entries `a + c / (λ_{s,i} λ_{p,j})`.
/// The returned sample is `mean + P^{-1/2} noise` using the symmetric square
/// root, so the result is a deterministic function of `noise`.
pub fn sample_diag_plus_invkron_gaussian(
    a: f64,
    c: f64,
    pair: &KroneckerFactorPair,
    rhs: &[f64],
    noise: &[f64],
) -> Result<GaussianDraw> {
    check_precision_weights(a, c)?;
    pair.check_positive()?;
    pair.check_len("sample_diag_plus_invkron_gaussian (rhs)", rhs.len())?;
    pair.check_len("sample_diag_plus_invkron_gaussian (noise)", noise.len())?;

    let precision: Vec<f64> = pair
        .eigenvalue_products()
        .into_iter()
        .map(|l| a + c / l)
        .collect();
    let mut rhs_rot = pair.to_eigenbasis(rhs)?;
    let mut noise_rot = pair.to_eigenbasis(noise)?;
    for ((r, n), p) in rhs_rot.iter_mut().zip(noise_rot.iter_mut()).zip(&precision) {
        *r /= p;
        *n /= p.sqrt();
    }
    let mean = pair.from_eigenbasis(&rhs_rot)?;
    let perturbation = pair.from_eigenbasis(&noise_rot)?;
    let sample = mean.iter().zip(&perturbation).map(|(m, e)| m + e).collect();
    Ok(GaussianDraw { sample, mean })
}

/// Materializes `P⁻¹` for `P = a·I + c·(R_s⁻¹ ⊗ R_p⁻¹)`. Small grids only.
pub fn diag_plus_invkron_covariance(a: f64, c: f64, pair: &KroneckerFactorPair) -> Result<Mat<f64>> {
    check_precision_weights(a, c)?;
    pair.check_positive()?;
    let u = materialize(pair.spatial.vectors(), pair.pressure.vectors());
    let d: Vec<f64> = pair
        .eigenvalue_products()
        .into_iter()
        .map(|l| 1.0 / (a + c / l))
        .collect();
    let n = d.len();
    let scaled = Mat::from_fn(n, n, |i, j| u[(i, j)] * d[j]);
    Ok(&scaled * u.transpose())
}

/// Explicit Kronecker product `A ⊗ B`.
pub fn materialize(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let (ra, ca) = (a.nrows(), a.ncols());
    let (rb, cb) = (b.nrows(), b.ncols());
    Mat::from_fn(ra * rb, ca * cb, |r, c| {
        a[(r / rb, c / cb)] * b[(r % rb, c % cb)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(values: &[f64]) -> Mat<f64> {
        Mat::from_fn(values.len(), values.len(), |i, j| if i == j { values[i] } else { 0.0 })
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        let g = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut m = &g * g.transpose();
        for i in 0..n {
            m[(i, i)] += 0.5;
        }
        m
    }

    fn dense_matvec(m: &Mat<f64>, x: &[f64]) -> Vec<f64> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum())
            .collect()
    }

    #[test]
    fn matvec_diagonal_ordering() {
        let a = diag(&[1.0, 2.0]);
        let b = diag(&[1.0, 3.0]);
        let y = kron_matvec(a.as_ref(), b.as_ref(), &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(y, vec![1.0, 3.0, 2.0, 6.0]);
    }

    #[test]
    fn matvec_identity() {
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.7 - 1.0).collect();
        let y = kron_matvec(Mat::<f64>::identity(2, 2).as_ref(), Mat::<f64>::identity(3, 3).as_ref(), &x)
            .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matvec_matches_materialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Mat::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let b = Mat::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = kron_matvec(a.as_ref(), b.as_ref(), &x).unwrap();
        let dense = dense_matvec(&materialize(a.as_ref(), b.as_ref()), &x);
        for (u, v) in y.iter().zip(&dense) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn matvec_rectangular() {
        let a = Mat::from_fn(3, 1, |i, _| i as f64 + 1.0);
        let b = Mat::from_fn(2, 2, |i, j| (i * 2 + j) as f64);
        let x = [1.0, -1.0];
        let y = kron_matvec(a.as_ref(), b.as_ref(), &x).unwrap();
        let dense = dense_matvec(&materialize(a.as_ref(), b.as_ref()), &x);
        assert_eq!(y, dense);
    }

    #[test]
    fn matvec_dimension_error_names_sizes() {
        let err = kron_matvec(Mat::<f64>::identity(2, 2).as_ref(), Mat::<f64>::identity(3, 3).as_ref(), &[0.0; 5])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 6") && msg.contains("got 5"), "{msg}");
    }

    #[test]
    fn logdet_diagonal_and_identity() {
        let pair = KroneckerFactorPair::from_factors(diag(&[2.0, 2.0]).as_ref(), diag(&[3.0]).as_ref()).unwrap();
        assert_relative_eq!(kron_logdet(&pair).unwrap(), 36f64.ln(), epsilon = 1e-12);
        let pair = KroneckerFactorPair::from_factors(
            Mat::<f64>::identity(5, 5).as_ref(),
            Mat::<f64>::identity(7, 7).as_ref(),
        )
        .unwrap();
        assert!(kron_logdet(&pair).unwrap().abs() < 1e-12);
    }

    #[test]
    fn logdet_rejects_nonpositive_factor() {
        let s = SymEig::from_parts(Mat::identity(2, 2), vec![1.0, 1.0]).unwrap();
        let p = SymEig::from_parts(Mat::identity(2, 2), vec![0.5, -0.1]).unwrap();
        let err = kron_logdet(&KroneckerFactorPair::new(s, p)).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { factor: Factor::Pressure, index: 1, .. }));
    }

    #[test]
    fn eigen_clamps_singular_input() {
        let before = clamp_events();
        let ones = Mat::from_fn(3, 3, |_, _| 1.0);
        let e = SymEig::new(ones.as_ref()).unwrap();
        assert_eq!(e.clamped(), 2);
        assert!(e.values().iter().all(|&v| v >= EIGEN_FLOOR));
        assert!(clamp_events() >= before + 2);
    }

    #[test]
    fn eigen_reconstructs_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(6, &mut rng);
        let e = SymEig::new(m.as_ref()).unwrap();
        let vtv = e.vectors().transpose() * e.vectors();
        for i in 0..6 {
            for j in 0..6 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((vtv[(i, j)] - target).abs() < 1e-10);
            }
        }
        let r = e.reconstruct();
        for i in 0..6 {
            for j in 0..6 {
                assert_relative_eq!(r[(i, j)], m[(i, j)], max_relative = 1e-8, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn quadform_identity_and_eigenvector() {
        let pair = KroneckerFactorPair::from_factors(
            Mat::<f64>::identity(2, 2).as_ref(),
            Mat::<f64>::identity(3, 3).as_ref(),
        )
        .unwrap();
        let x = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let norm2: f64 = x.iter().map(|v| v * v).sum();
        assert_relative_eq!(kron_quadform(&pair, &x).unwrap(), norm2, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = KroneckerFactorPair::from_factors(
            random_spd(3, &mut rng).as_ref(),
            random_spd(2, &mut rng).as_ref(),
        )
        .unwrap();
        let us = pair.spatial().vectors().col(0).to_owned();
        let up = pair.pressure().vectors().col(0).to_owned();
        let x: Vec<f64> = (0..3).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| us[i] * up[j]).collect();
        let expected = 1.0 / (pair.spatial().values()[0] * pair.pressure().values()[0]);
        assert_relative_eq!(kron_quadform(&pair, &x).unwrap(), expected, max_relative = 1e-10);
    }

    #[test]
    fn gaussian_identity_case() {
        let pair = KroneckerFactorPair::from_factors(
            Mat::<f64>::identity(2, 2).as_ref(),
            Mat::<f64>::identity(2, 2).as_ref(),
        )
        .unwrap();
        let rhs = [1.0, -2.0, 4.0, 0.5];
        let noise = [0.3, 0.1, -1.0, 2.0];
        let draw = sample_diag_plus_invkron_gaussian(1.0, 1.0, &pair, &rhs, &noise).unwrap();
        for k in 0..4 {
            assert_relative_eq!(draw.mean[k], rhs[k] / 2.0, epsilon = 1e-12);
            assert_relative_eq!(draw.sample[k], rhs[k] / 2.0 + noise[k] / 2f64.sqrt(), epsilon = 1e-12);
        }
        let zero = sample_diag_plus_invkron_gaussian(1.0, 1.0, &pair, &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(zero.sample.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_rejects_bad_weights() {
        let pair = KroneckerFactorPair::from_factors(
            Mat::<f64>::identity(1, 1).as_ref(),
            Mat::<f64>::identity(1, 1).as_ref(),
        )
        .unwrap();
        assert!(sample_diag_plus_invkron_gaussian(0.0, 1.0, &pair, &[1.0], &[0.0]).is_err());
        assert!(sample_diag_plus_invkron_gaussian(1.0, -1.0, &pair, &[1.0], &[0.0]).is_err());
    }
}
