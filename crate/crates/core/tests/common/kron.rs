//! Dense checks of the Kronecker routines on random SPD factor pairs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lvcs::kron::{kron_logdet, kron_matvec, kron_quadform, sample_diag_plus_invkron_gaussian, KroneckerFactorPair};

use super::{rel_err, scalar_rel_err};

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `M Mᵀ / k + δ I` with a random square `M`; condition numbers stay moderate.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let shift = rng.random_range(0.05..1.0);
    &m * m.transpose() / n as f64 + DMatrix::identity(n, n) * shift
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn sym_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| 1.0 / l.sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Errors of matvec, logdet, quadform and the Gaussian draw for one random
/// pair with `n_s, n_p ∈ [2, 8]`.
pub fn kron_errors(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = rng.random_range(2..=8);
    let np = rng.random_range(2..=8);
    let a = random_spd(&mut rng, ns);
    let b = random_spd(&mut rng, np);
    let full = a.kronecker(&b);
    let n = ns * np;
    let pair = KroneckerFactorPair::from_factors(to_faer(&a).as_ref(), to_faer(&b).as_ref()).unwrap();
    let x = normal_vec(&mut rng, n);
    let xv = DVector::from_column_slice(&x);
    let mut out = Vec::new();

    let got = kron_matvec(to_faer(&a).as_ref(), to_faer(&b).as_ref(), &x).unwrap();
    out.push(("matvec".into(), rel_err(&got, (&full * &xv).as_slice())));

    // Rectangular factors, as used with design matrices.
    let (ra, rb) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let ar = DMatrix::from_fn(ra, ns, |_, _| rng.sample::<f64, _>(StandardNormal));
    let br = DMatrix::from_fn(rb, np, |_, _| rng.sample::<f64, _>(StandardNormal));
    let got = kron_matvec(to_faer(&ar).as_ref(), to_faer(&br).as_ref(), &x).unwrap();
    out.push(("rectangular matvec".into(), rel_err(&got, (ar.kronecker(&br) * &xv).as_slice())));

    let chol = full.clone().cholesky().unwrap();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    // Log-determinants near zero are compared on an absolute scale.
    let got = kron_logdet(&pair).unwrap();
    out.push(("logdet".into(), (got - logdet).abs() / logdet.abs().max(1.0)));

    let quad = xv.dot(&chol.solve(&xv));
    out.push(("quadform".into(), scalar_rel_err(kron_quadform(&pair, &x).unwrap(), quad)));

    let (wa, wc) = (rng.random_range(0.1..10.0), rng.random_range(0.1..10.0));
    let precision = DMatrix::identity(n, n) * wa + full.clone().try_inverse().unwrap() * wc;
    let rhs = normal_vec(&mut rng, n);
    let noise = normal_vec(&mut rng, n);
    let draw = sample_diag_plus_invkron_gaussian(wa, wc, &pair, &rhs, &noise).unwrap();
    let mean = precision.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&rhs));
    out.push(("sample mean".into(), rel_err(&draw.mean, mean.as_slice())));
    let sample = &mean + sym_inv_sqrt(&precision) * DVector::from_column_slice(&noise);
    out.push(("sample".into(), rel_err(&draw.sample, sample.as_slice())));
    out
}
