//! Dense reference computations shared by the integration tests.
//!
//! Everything here works on explicitly materialized matrices with nalgebra,
//! so it shares no linear algebra with the library.

#![allow(dead_code)]

pub mod cli;
pub mod kron;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lvcs::baseline::{
    dense_beta_conditional, dense_loglik, log_prior, sgp_beta_conditional, sgp_imputation_moments,
    sgp_sigma2_conditional, sgp_tau2_conditional, sgp_w_conditional, BetaPrior, DenseData, SgpData, SgpState,
};
use lvcs::kernels::{GridGeometry, SeparableKernelParams};
use lvcs::model::{
    build_mean_design, Flag, Granule, InvGammaPrior, LevelParams, MeanDesign, ModelParams, NuggetMode, Priors,
    SpatialBasis,
};
use lvcs::sampler::{
    beta_centered_conditional, beta_low_conditional, imputation_moments, rho_beta_high_conditional,
    rho_scale_log_density, rho_shift_collapsed_log_density, sigma2_conditional, tau2_conditional, theta_log_target, w_high_conditional,
    w_low_conditional, ChainState, Level, ModelData,
};

pub fn faer_to_na(m: &faer::Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Largest absolute difference relative to the largest reference entry.
pub fn rel_err(actual: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    let scale = expected.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    actual
        .iter()
        .zip(expected)
        .fold(0.0f64, |m, (a, e)| m.max((a - e).abs()))
        / scale
}

pub fn rel_err_mat(actual: &DMatrix<f64>, expected: &DMatrix<f64>) -> f64 {
    assert_eq!(actual.shape(), expected.shape());
    rel_err(actual.as_slice(), expected.as_slice())
}

pub fn scalar_rel_err(actual: f64, expected: f64) -> f64 {
    (actual - expected).abs() / expected.abs().max(f64::MIN_POSITIVE)
}

/// Separable exponential correlation on the complete grid, spatial-major.
pub fn dense_corr(g: &GridGeometry, t: &SeparableKernelParams) -> DMatrix<f64> {
    let np = g.logp.len();
    let n = g.locs.len() * np;
    DMatrix::from_fn(n, n, |a, b| {
        let (p, q) = (g.locs[a / np], g.locs[b / np]);
        let (dlon, dlat) = ((p.0 - q.0).abs(), (p.1 - q.1).abs());
        let mut s = (-dlon / t.phi_lon - dlat / t.phi_lat).exp();
        if dlon < 1e-9 && dlat < 1e-9 {
            s += t.g2_s;
        }
        let dp = (g.logp[a % np] - g.logp[b % np]).abs();
        let mut r = (-dp / t.phi_p).exp();
        if dp < 1e-9 {
            r += t.g2_p;
        }
        s * r
    })
}

pub fn sub(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn spd_solve(m: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    match m.clone().cholesky() {
        Some(c) => c.solve(b),
        None => m.clone().lu().solve(b).expect("singular conditioning block"),
    }
}

pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Conditional law of `u[keep]` given the remaining entries of a zero-mean
/// Gaussian vector `u` with covariance `cov`.
pub fn condition(cov: &DMatrix<f64>, u: &DVector<f64>, keep: &[usize]) -> Gaussian {
    let rest: Vec<usize> = (0..u.len()).filter(|i| !keep.contains(i)).collect();
    let s_aa = sub(cov, keep, keep);
    let s_ab = sub(cov, keep, &rest);
    let s_bb = sub(cov, &rest, &rest);
    let u_b = DMatrix::from_fn(rest.len(), 1, |i, _| u[rest[i]]);
    let k = spd_solve(&s_bb, &s_ab.transpose()).transpose();
    let mean = &k * u_b;
    let cov = s_aa - &k * s_ab.transpose();
    Gaussian {
        mean: DVector::from_column_slice(mean.as_slice()),
        cov: 0.5 * (&cov + cov.transpose()),
    }
}

pub fn log_mvn(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let c = cov.clone().cholesky().expect("covariance is not positive definite");
    let logdet: f64 = 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let sol = c.solve(x);
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + x.dot(&sol))
}

fn ig_log_kernel(p: &InvGammaPrior, x: f64) -> f64 {
    -(p.shape + 1.0) * x.ln() - p.scale / x
}

/// Shape and scale of an inverse-gamma density from three log-density values.
pub fn fit_inv_gamma(points: [(f64, f64); 3]) -> (f64, f64) {
    let a = DMatrix::from_fn(3, 3, |i, j| match j {
        0 => 1.0,
        1 => -points[i].0.ln(),
        _ => -1.0 / points[i].0,
    });
    let b = DVector::from_fn(3, |i, _| points[i].1);
    let sol = a.lu().solve(&b).expect("inverse-gamma fit");
    (sol[1] - 1.0, sol[2])
}

/// Mean and variance of a Gaussian from its log density along a line.
pub fn fit_gaussian_1d(f: impl Fn(f64) -> f64, h: f64) -> (f64, f64) {
    let (fm, f0, fp) = (f(-h), f(0.0), f(h));
    let precision = -(fp - 2.0 * f0 + fm) / (h * h);
    let slope = (fp - fm) / (2.0 * h);
    (slope / precision, 1.0 / precision)
}

pub struct Instance {
    pub granule: Granule,
    pub data: ModelData,
    pub priors: Priors,
    pub state: ChainState,
    pub nugget: [NuggetMode; 2],
}

fn random_theta(rng: &mut ChaCha8Rng, nugget: NuggetMode) -> SeparableKernelParams {
    let g = |rng: &mut ChaCha8Rng| match nugget {
        NuggetMode::Fixed { value } => value,
        NuggetMode::Random => rng.random_range(0.005..0.1),
    };
    SeparableKernelParams {
        phi_lon: rng.random_range(0.5..3.0),
        phi_lat: rng.random_range(0.5..3.0),
        g2_s: g(rng),
        phi_p: rng.random_range(0.3..2.0),
        g2_p: g(rng),
    }
}

/// Random grid of at most `max_cells` cells, flags and Θ. Every fourth seed
/// uses a regular 2×2 spatial grid.
pub fn random_instance(seed: u64, max_cells: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regular = seed % 4 == 0;
    let n_s = if regular { 4 } else { rng.random_range(2..=4) };
    let n_p = rng.random_range(2..=(max_cells / n_s).clamp(2, 5));
    let (lons, lats): (Vec<f64>, Vec<f64>) = if regular {
        (vec![0.0, 0.7, 0.0, 0.7], vec![0.0, 0.0, 0.5, 0.5])
    } else {
        (0..n_s).map(|_| (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0))).unzip()
    };
    let mut logp: Vec<f64> = (0..n_p).map(|_| rng.random_range(100f64.ln()..1000f64.ln())).collect();
    logp.sort_by(f64::total_cmp);
    for j in 1..n_p {
        logp[j] = logp[j].max(logp[j - 1] + 0.05);
    }
    let n = n_s * n_p;
    let mut flags: Vec<Flag> = (0..n)
        .map(|_| match rng.random_range(0..20) {
            0..=8 => Flag::High,
            9..=15 => Flag::Low,
            _ => Flag::Bad,
        })
        .collect();
    flags[0] = Flag::High;
    flags[n - 1] = Flag::Low;
    let temperature = (0..n)
        .map(|c| {
            let t = 250.0 + 3.0 * rng.sample::<f64, _>(StandardNormal);
            if flags[c] == Flag::Bad {
                f64::NAN
            } else {
                t
            }
        })
        .collect();
    let granule = Granule::new(
        lons,
        lats,
        logp.iter().map(|l| l.exp()).collect(),
        (1..=n_p as u32).collect(),
        temperature,
        flags,
    )
    .unwrap();
    let max_degree = (n_p - 1).min(2);
    let dl = build_mean_design(&granule, rng.random_range(0..=max_degree), SpatialBasis::Constant).unwrap();
    let dh = build_mean_design(&granule, rng.random_range(0..=max_degree), SpatialBasis::Constant).unwrap();
    let (ml, mh) = (dl.n_coef(), dh.n_coef());
    let data = ModelData::new(&granule, dl, dh).unwrap();
    let ig = |rng: &mut ChaCha8Rng| InvGammaPrior {
        shape: rng.random_range(2.0..4.0),
        scale: rng.random_range(0.5..2.0),
    };
    let priors = Priors {
        beta_var: rng.random_range(2.0..20.0),
        sigma2: ig(&mut rng),
        tau2: ig(&mut rng),
        ..Priors::default()
    };
    let nugget = [0, 1].map(|_| {
        if rng.random_bool(0.5) {
            NuggetMode::Random
        } else {
            NuggetMode::Fixed {
                value: rng.random_range(0.01..0.05),
            }
        }
    });
    let mut level = |m: usize, mode: NuggetMode| LevelParams {
        beta: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
        sigma2: rng.random_range(0.5..2.0),
        tau2: rng.random_range(0.1..1.0),
        theta: random_theta(&mut rng, mode),
    };
    let params = ModelParams {
        low: level(ml, nugget[0]),
        high: level(mh, nugget[1]),
        rho: rng.random_range(-1.5..1.5),
    };
    let mut normals = |k: usize, sd: f64, shift: f64| -> Vec<f64> {
        (0..k).map(|_| shift + sd * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let w_low = normals(n, 1.0, 0.0);
    let w_high = normals(n, 1.0, 0.0);
    let z_low = normals(n, 2.0, 1.0);
    let z_high = normals(n, 2.0, 1.0);
    let state = ChainState::new(params, w_low, w_high, z_low, z_high, &data).unwrap();
    Instance {
        granule,
        data,
        priors,
        state,
        nugget,
    }
}

fn design(data: &ModelData, level: Level) -> DMatrix<f64> {
    faer_to_na(data.design(level).full())
}

/// Augmented two-level model as a linear map of independent Gaussians:
/// `u = [β_L, β_H, w_L, w_H, z_L, z_H] = A x` with
/// `x = [β_L, β_H, w_L, w_H, ε_L, ε_H]`.
pub struct Joint {
    pub cov: DMatrix<f64>,
    pub u: DVector<f64>,
    pub ml: usize,
    pub mh: usize,
    pub n: usize,
}

impl Joint {
    pub fn beta_low(&self) -> Vec<usize> {
        (0..self.ml).collect()
    }
    pub fn beta_high(&self) -> Vec<usize> {
        (self.ml..self.ml + self.mh).collect()
    }
    fn block(&self, k: usize) -> Vec<usize> {
        let start = self.ml + self.mh + k * self.n;
        (start..start + self.n).collect()
    }
    pub fn w_low(&self) -> Vec<usize> {
        self.block(0)
    }
    pub fn w_high(&self) -> Vec<usize> {
        self.block(1)
    }
    pub fn z_low(&self) -> Vec<usize> {
        self.block(2)
    }
    pub fn z_high(&self) -> Vec<usize> {
        self.block(3)
    }
}

/// The map `A` and the block-diagonal prior covariance `D` of `x`.
pub fn joint_factors(data: &ModelData, params: &ModelParams, beta_var: f64) -> (DMatrix<f64>, DMatrix<f64>, usize, usize) {
    let g = data.geometry();
    let hl = design(data, Level::Low);
    let hh = design(data, Level::High);
    let (ml, mh, n) = (hl.ncols(), hh.ncols(), hl.nrows());
    let dim = ml + mh + 4 * n;
    let (bl, bh, wl, wh, zl, zh) = (0, ml, ml + mh, ml + mh + n, ml + mh + 2 * n, ml + mh + 3 * n);
    let rho = params.rho;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        a[(i, i)] = 1.0;
    }
    for c in 0..n {
        for k in 0..ml {
            a[(zl + c, bl + k)] = hl[(c, k)];
            a[(zh + c, bl + k)] = rho * hl[(c, k)];
        }
        for k in 0..mh {
            a[(zh + c, bh + k)] = hh[(c, k)];
        }
        a[(zl + c, wl + c)] = 1.0;
        a[(zh + c, wl + c)] = rho;
        a[(zh + c, wh + c)] = 1.0;
    }
    let mut d = DMatrix::<f64>::zeros(dim, dim);
    for k in 0..ml + mh {
        d[(k, k)] = beta_var;
    }
    let rl = dense_corr(g, &params.low.theta) * params.low.sigma2;
    let rh = dense_corr(g, &params.high.theta) * params.high.sigma2;
    d.view_mut((wl, wl), (n, n)).copy_from(&rl);
    d.view_mut((wh, wh), (n, n)).copy_from(&rh);
    for c in 0..n {
        d[(zl + c, zl + c)] = params.low.tau2;
        d[(zh + c, zh + c)] = params.high.tau2;
    }
    (a, d, ml, mh)
}

pub fn joint_cov(data: &ModelData, params: &ModelParams, beta_var: f64) -> (DMatrix<f64>, usize, usize) {
    let (a, d, ml, mh) = joint_factors(data, params, beta_var);
    let cov = &a * d * a.transpose();
    (0.5 * (&cov + cov.transpose()), ml, mh)
}

pub fn joint(inst: &Instance) -> Joint {
    joint_at(&inst.data, &inst.state, &inst.priors)
}

pub fn joint_at(data: &ModelData, state: &ChainState, priors: &Priors) -> Joint {
    let (cov, ml, mh) = joint_cov(data, &state.params, priors.beta_var);
    let p = &state.params;
    let u: Vec<f64> = p
        .low
        .beta
        .iter()
        .chain(&p.high.beta)
        .chain(&state.w_low)
        .chain(&state.w_high)
        .chain(&state.z_low)
        .chain(&state.z_high)
        .copied()
        .collect();
    Joint {
        cov,
        u: DVector::from_vec(u),
        ml,
        mh,
        n: data.len(),
    }
}

/// Log density of the augmented state, including the ρ prior.
/// `A` has unit determinant, so the density of `u` is that of `x = A⁻¹ u`.
pub fn joint_log_density(data: &ModelData, state: &ChainState, priors: &Priors) -> f64 {
    let j = joint_at(data, state, priors);
    let (a, d, _, _) = joint_factors(data, &state.params, priors.beta_var);
    let x = a.lu().solve(&j.u).expect("joint map is invertible");
    log_mvn(&x, &d) - 0.5 * state.params.rho * state.params.rho / priors.beta_var
}

fn compare_gaussian(
    out: &mut Vec<(String, f64)>,
    name: &str,
    mean: &[f64],
    cov: &DMatrix<f64>,
    expected: &Gaussian,
) {
    out.push((format!("{name} mean"), rel_err(mean, expected.mean.as_slice())));
    out.push((format!("{name} covariance"), rel_err_mat(cov, &expected.cov)));
}

/// Relative errors of every two-level Gibbs block against the dense joint.
pub fn two_level_errors(inst: &Instance) -> Vec<(String, f64)> {
    let (data, state, priors) = (&inst.data, &inst.state, &inst.priors);
    let j = joint(inst);
    let mut out = Vec::new();

    for (name, cond, idx, level) in [
        ("w_L", w_low_conditional(state, data), j.w_low(), Level::Low),
        ("w_H", w_high_conditional(state, data), j.w_high(), Level::High),
    ] {
        let pair = state.pair(level);
        let expected = condition(&j.cov, &j.u, &idx);
        let cov = faer_to_na(&cond.covariance(pair).unwrap());
        compare_gaussian(&mut out, name, &cond.mean(pair).unwrap(), &cov, &expected);
    }

    let bl = beta_low_conditional(state, data, priors).unwrap();
    compare_gaussian(
        &mut out,
        "beta_L",
        &bl.mean,
        &faer_to_na(&bl.covariance().unwrap()),
        &condition(&j.cov, &j.u, &j.beta_low()),
    );

    let bh = rho_beta_high_conditional(state, data, priors, Some(state.params.rho)).unwrap();
    compare_gaussian(
        &mut out,
        "beta_H (rho fixed)",
        &bh.mean,
        &faer_to_na(&bh.covariance().unwrap()),
        &condition(&j.cov, &j.u, &j.beta_high()),
    );

    // (ρ, β_H) enter only through z_H = [ỹ_L, H_H] (ρ, β_H) + w_H + ε_H.
    {
        let hl = design(data, Level::Low);
        let hh = design(data, Level::High);
        let n = data.len();
        let yl = &hl * DVector::from_column_slice(&state.params.low.beta) + DVector::from_column_slice(&state.w_low);
        let x = DMatrix::from_fn(n, hh.ncols() + 1, |r, k| if k == 0 { yl[r] } else { hh[(r, k - 1)] });
        let m = x.ncols();
        let vb = priors.beta_var;
        let mut cov = DMatrix::<f64>::zeros(m + n, m + n);
        cov.view_mut((0, 0), (m, m)).copy_from(&(DMatrix::<f64>::identity(m, m) * vb));
        cov.view_mut((m, 0), (n, m)).copy_from(&(&x * vb));
        cov.view_mut((0, m), (m, n)).copy_from(&(x.transpose() * vb));
        let zz = &x * x.transpose() * vb + DMatrix::<f64>::identity(n, n) * state.params.high.tau2;
        cov.view_mut((m, m), (n, n)).copy_from(&zz);
        let mut u = DVector::<f64>::zeros(m + n);
        for c in 0..n {
            u[m + c] = state.z_high[c] - state.w_high[c];
        }
        let expected = condition(&cov, &u, &(0..m).collect::<Vec<_>>());
        let got = rho_beta_high_conditional(state, data, priors, None).unwrap();
        compare_gaussian(
            &mut out,
            "(rho, beta_H)",
            &got.mean,
            &faer_to_na(&got.covariance().unwrap()),
            &expected,
        );
    }

    {
        let m = imputation_moments(state, data);
        let zl = j.z_low();
        let zh = j.z_high();
        let idx: Vec<usize> = m
            .low_cells
            .iter()
            .map(|&c| zl[c])
            .chain(m.high_cells.iter().map(|&c| zh[c]))
            .collect();
        if !idx.is_empty() {
            let expected = condition(&j.cov, &j.u, &idx);
            let mean: Vec<f64> = m.low_mean.iter().chain(&m.high_mean).copied().collect();
            let nl = m.low_cells.len();
            let cov = DMatrix::from_fn(idx.len(), idx.len(), |a, b| match (a == b, a < nl) {
                (true, true) => m.low_var,
                (true, false) => m.high_var,
                _ => 0.0,
            });
            compare_gaussian(&mut out, "imputation", &mean, &cov, &expected);
        }
    }

    for level in [Level::Low, Level::High] {
        let tag = level.tag();
        let current = state.level(level).clone();
        let with = |f: &dyn Fn(&mut LevelParams)| {
            let mut s = state.clone();
            match level {
                Level::Low => f(&mut s.params.low),
                Level::High => f(&mut s.params.high),
            }
            s
        };
        let sig = |v: f64| {
            let s = with(&|p: &mut LevelParams| p.sigma2 = v);
            ig_log_kernel(&priors.sigma2, v) + joint_log_density(data, &s, priors)
        };
        let pts = [0.5, 1.0, 2.0].map(|k| {
            let v = k * current.sigma2;
            (v, sig(v))
        });
        let (shape, scale) = fit_inv_gamma(pts);
        let got = sigma2_conditional(state, level, priors).unwrap();
        out.push((format!("sigma2_{tag} shape"), scalar_rel_err(got.shape, shape)));
        out.push((format!("sigma2_{tag} scale"), scalar_rel_err(got.scale, scale)));

        let tau = |v: f64| {
            let s = with(&|p: &mut LevelParams| p.tau2 = v);
            ig_log_kernel(&priors.tau2, v) + joint_log_density(data, &s, priors)
        };
        let pts = [0.5, 1.0, 2.0].map(|k| {
            let v = k * current.tau2;
            (v, tau(v))
        });
        let (shape, scale) = fit_inv_gamma(pts);
        let got = tau2_conditional(state, level, data, priors);
        out.push((format!("tau2_{tag} shape"), scalar_rel_err(got.shape, shape)));
        out.push((format!("tau2_{tag} scale"), scalar_rel_err(got.scale, scale)));

        // Centred coefficients: β | η with η = Hβ + w.
        let h = design(data, level);
        let (n, m) = (h.nrows(), h.ncols());
        let vb = priors.beta_var;
        let r = dense_corr(data.geometry(), &current.theta) * current.sigma2;
        let mut cov = DMatrix::<f64>::zeros(m + n, m + n);
        cov.view_mut((0, 0), (m, m)).copy_from(&(DMatrix::<f64>::identity(m, m) * vb));
        cov.view_mut((m, 0), (n, m)).copy_from(&(&h * vb));
        cov.view_mut((0, m), (m, n)).copy_from(&(h.transpose() * vb));
        cov.view_mut((m, m), (n, n)).copy_from(&(&h * h.transpose() * vb + r));
        let eta = &h * DVector::from_column_slice(&current.beta) + DVector::from_column_slice(state.w(level));
        let mut u = DVector::<f64>::zeros(m + n);
        u.rows_mut(m, n).copy_from(&eta);
        let expected = condition(&cov, &u, &(0..m).collect::<Vec<_>>());
        let got = beta_centered_conditional(state, level, data, priors).unwrap();
        compare_gaussian(
            &mut out,
            &format!("centred beta_{tag}"),
            &got.mean,
            &faer_to_na(&got.covariance().unwrap()),
            &expected,
        );
    }

    // Orbit moves. Shift: ρ + δ, β_H − δ c, w_H − δ w_L with c projecting m_L
    // on H_H and σ_H² integrated out. Scale: ρ e^{−s}, e^s w_L, e^{2s} σ_L², with
    // β_H absorbing the change in ρ m_L and imputed z_L following w_L.
    {
        let hl = design(data, Level::Low);
        let hh = design(data, Level::High);
        let ml_vec = &hl * DVector::from_column_slice(&state.params.low.beta);
        let c = (hh.transpose() * &hh).lu().solve(&(hh.transpose() * ml_vec)).unwrap();
        let n = data.len() as f64;
        let (a, b) = (priors.sigma2.shape, priors.sigma2.scale);
        let corr_h = dense_corr(data.geometry(), &state.params.high.theta);
        let move_beta = |s: &mut ChainState, dr: f64| {
            s.params.rho += dr;
            for (bh, ci) in s.params.high.beta.iter_mut().zip(c.iter()) {
                *bh -= dr * ci;
            }
        };
        let shifted = |d: f64| {
            let mut s = state.clone();
            move_beta(&mut s, d);
            for (w, wl) in s.w_high.iter_mut().zip(&state.w_low) {
                *w -= d * wl;
            }
            let w = DVector::from_column_slice(&s.w_high);
            let post_scale = b + 0.5 * (w.transpose() * corr_h.clone().lu().solve(&w).unwrap())[(0, 0)];
            let x = s.params.high.sigma2;
            joint_log_density(data, &s, priors) - (a + 0.5 * n) * post_scale.ln() + post_scale / x
        };
        let scaled = |t: f64| {
            let mut s = state.clone();
            move_beta(&mut s, state.params.rho * ((-t).exp() - 1.0));
            for cell in 0..data.len() {
                if !data.observed(Level::Low, cell) {
                    s.z_low[cell] += (t.exp() - 1.0) * state.w_low[cell];
                }
                s.w_low[cell] *= t.exp();
            }
            s.params.low.sigma2 *= (2.0 * t).exp();
            let x = s.params.low.sigma2;
            joint_log_density(data, &s, priors) - (a + 1.0) * x.ln() - b / x + (n + 1.0) * t
        };
        let shift_lib = rho_shift_collapsed_log_density(state, data, priors).unwrap();
        let scale_lib = rho_scale_log_density(state, data, priors).unwrap();
        let (mut shift_err, mut scale_err) = (0.0f64, 0.0f64);
        for x in [-0.3, -0.05, 0.02, 0.2] {
            let expected = shifted(x) - shifted(0.0);
            let got = shift_lib(x) - shift_lib(0.0);
            shift_err = shift_err.max((got - expected).abs() / expected.abs().max(1.0));
            let expected = scaled(x) - scaled(0.0);
            let got = scale_lib(x) - scale_lib(0.0);
            scale_err = scale_err.max((got - expected).abs() / expected.abs().max(1.0));
        }
        out.push(("collapsed rho shift density".into(), shift_err));
        out.push(("rho scale density".into(), scale_err));
    }

    // θ target differences against the dense Gaussian density of w.
    for (level, k) in [(Level::Low, 0), (Level::High, 1)] {
        let lp = state.level(level);
        let mode = inst.nugget[k];
        let mut other = lp.theta;
        other.phi_lon *= 1.3;
        other.phi_p *= 0.8;
        if mode == NuggetMode::Random {
            other.g2_s *= 0.7;
        }
        let w = DVector::from_column_slice(state.w(level));
        let dense = |t: &SeparableKernelParams| {
            let nug = match mode {
                NuggetMode::Random => {
                    let p = &priors.nugget;
                    (p.shape - 1.0) * (t.g2_s.ln() + t.g2_p.ln()) - (t.g2_s + t.g2_p) / p.scale
                }
                NuggetMode::Fixed { .. } => 0.0,
            };
            log_mvn(&w, &(dense_corr(data.geometry(), t) * lp.sigma2)) + nug
        };
        let lib = |t: &SeparableKernelParams| {
            theta_log_target(t, data.geometry(), state.w(level), lp.sigma2, priors, mode)
                .unwrap()
                .0
        };
        let expected = dense(&lp.theta) - dense(&other);
        let got = lib(&lp.theta) - lib(&other);
        out.push((
            format!("theta_{} target difference", level.tag()),
            (got - expected).abs() / expected.abs().max(1.0),
        ));
    }
    out
}

/// Relative errors of the dense direct-inference model against the
/// marginal of the augmented joint.
pub fn dense_model_errors(inst: &Instance) -> Vec<(String, f64)> {
    let (data, state, priors) = (&inst.data, &inst.state, &inst.priors);
    let dl = inst.data.design(Level::Low).clone();
    let dh = inst.data.design(Level::High).clone();
    let dd = DenseData::new(&inst.granule, dl, dh, 512).unwrap();
    let j = joint(inst);
    let zl = j.z_low();
    let zh = j.z_high();
    let obs: Vec<usize> = dd
        .cells_high()
        .iter()
        .map(|&c| zh[c])
        .chain(dd.cells_low().iter().map(|&c| zl[c]))
        .collect();
    let z = DVector::from_column_slice(dd.z());
    let expected = log_mvn(&z, &sub(&j.cov, &obs, &obs));
    let params = &state.params;
    let prior = BetaPrior::Gaussian { var: priors.beta_var };
    let ll = dense_loglik(params, &dd, priors, inst.nugget, None, prior).unwrap() - log_prior(params, priors, inst.nugget, None);
    let mut out = vec![("dense marginal likelihood".to_string(), scalar_rel_err(ll, expected))];

    let keep: Vec<usize> = j.beta_low().into_iter().chain(j.beta_high()).collect();
    let mut idx = keep.clone();
    idx.extend(&obs);
    let cov = sub(&j.cov, &idx, &idx);
    let mut u = DVector::<f64>::zeros(idx.len());
    u.rows_mut(keep.len(), obs.len()).copy_from(&z);
    let expected = condition(&cov, &u, &(0..keep.len()).collect::<Vec<_>>());
    let got = dense_beta_conditional(params, &dd, prior).unwrap();
    compare_gaussian(&mut out, "dense beta", &got.mean, &faer_to_na(&got.covariance().unwrap()), &expected);
    let _ = data;
    out
}

/// Single-level model `z = H β + w + ε` on the pooled granule.
pub fn single_level_errors(inst: &Instance) -> Vec<(String, f64)> {
    let pooled = inst.granule.pooled();
    let design: MeanDesign = inst.data.design(Level::Low).clone();
    let data = SgpData::new(&pooled, design).unwrap();
    let params = inst.state.params.low.clone();
    let priors = &inst.priors;
    let n = data.len();
    let state = SgpState::new(params.clone(), inst.state.w_low.clone(), inst.state.z_low.clone(), &data).unwrap();
    let h = faer_to_na(data.design().full());
    let m = h.ncols();
    let joint_for = |p: &LevelParams| {
        let dim = m + 2 * n;
        let mut a = DMatrix::<f64>::identity(dim, dim);
        for c in 0..n {
            for k in 0..m {
                a[(m + n + c, k)] = h[(c, k)];
            }
            a[(m + n + c, m + c)] = 1.0;
        }
        let mut d = DMatrix::<f64>::zeros(dim, dim);
        for k in 0..m {
            d[(k, k)] = priors.beta_var;
        }
        d.view_mut((m, m), (n, n))
            .copy_from(&(dense_corr(data.geometry(), &p.theta) * p.sigma2));
        for c in 0..n {
            d[(m + n + c, m + n + c)] = p.tau2;
        }
        (a, d)
    };
    let u: DVector<f64> = DVector::from_iterator(
        m + 2 * n,
        params.beta.iter().chain(&state.w).chain(&state.z).copied(),
    );
    let (a, d) = joint_for(&params);
    let cov = &a * d * a.transpose();
    let cov = 0.5 * (&cov + cov.transpose());
    let mut out = Vec::new();

    let wc = sgp_w_conditional(&state, &data);
    compare_gaussian(
        &mut out,
        "single-level w",
        &wc.mean(state.pair()).unwrap(),
        &faer_to_na(&wc.covariance(state.pair()).unwrap()),
        &condition(&cov, &u, &(m..m + n).collect::<Vec<_>>()),
    );
    let bc = sgp_beta_conditional(&state, &data, priors).unwrap();
    compare_gaussian(
        &mut out,
        "single-level beta",
        &bc.mean,
        &faer_to_na(&bc.covariance().unwrap()),
        &condition(&cov, &u, &(0..m).collect::<Vec<_>>()),
    );
    let (cells, means) = sgp_imputation_moments(&state, &data);
    if !cells.is_empty() {
        let idx: Vec<usize> = cells.iter().map(|c| m + n + c).collect();
        let var = DMatrix::from_fn(cells.len(), cells.len(), |a, b| if a == b { params.tau2 } else { 0.0 });
        compare_gaussian(&mut out, "single-level imputation", &means, &var, &condition(&cov, &u, &idx));
    }
    let density = |p: &LevelParams| {
        let (a, d) = joint_for(p);
        log_mvn(&a.lu().solve(&u).unwrap(), &d)
    };
    let fit = |prior: &InvGammaPrior, set: &dyn Fn(&mut LevelParams, f64), base: f64| {
        fit_inv_gamma([0.5, 1.0, 2.0].map(|k| {
            let v = k * base;
            let mut p = params.clone();
            set(&mut p, v);
            (v, ig_log_kernel(prior, v) + density(&p))
        }))
    };
    let (shape, scale) = fit(&priors.sigma2, &|p, v| p.sigma2 = v, params.sigma2);
    let got = sgp_sigma2_conditional(&state, priors).unwrap();
    out.push(("single-level sigma2 shape".into(), scalar_rel_err(got.shape, shape)));
    out.push(("single-level sigma2 scale".into(), scalar_rel_err(got.scale, scale)));
    let (shape, scale) = fit(&priors.tau2, &|p, v| p.tau2 = v, params.tau2);
    let got = sgp_tau2_conditional(&state, &data, priors);
    out.push(("single-level tau2 shape".into(), scalar_rel_err(got.shape, shape)));
    out.push(("single-level tau2 scale".into(), scalar_rel_err(got.scale, scale)));
    out
}

/// Every oracle comparison for one random instance.
pub fn all_conditional_errors(seed: u64) -> Vec<(String, f64)> {
    let inst = random_instance(seed, 16);
    let mut out = two_level_errors(&inst);
    out.extend(dense_model_errors(&inst));
    out.extend(single_level_errors(&inst));
    out
}
