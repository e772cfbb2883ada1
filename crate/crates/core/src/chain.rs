//! Retained MCMC samples, acceptance rates and trace diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SeparableKernelParams;
use crate::model::{LevelParams, ModelParams};

/// A retained sample that can be flattened into named scalars plus latent fields.
pub trait ChainRecord: Sized + Clone {
    /// Tag written to chain files so readers can reject the wrong model.
    const MODEL: &'static str;

    fn scalar_names(&self) -> Vec<String>;
    fn scalars(&self) -> Vec<f64>;
    fn latent(&self) -> Vec<&[f64]>;
    /// Rebuilds a record from the values produced by the methods above.
    fn from_parts(names: &[String], scalars: &[f64], latent: Vec<Vec<f64>>) -> Result<Self>;
}

/// One retained sample of the two-level model.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSample {
    pub params: ModelParams,
    pub w_low: Vec<f64>,
    pub w_high: Vec<f64>,
}

/// One retained sample of a single-level model.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSample {
    pub params: LevelParams,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub ess: f64,
}

impl TraceSummary {
    /// Monte Carlo standard error of the mean.
    pub fn mcse(&self) -> f64 {
        if self.ess > 0.0 {
            self.sd / self.ess.sqrt()
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput<S = ChainSample> {
    pub samples: Vec<S>,
    /// Post-burn-in Metropolis acceptance rate per block name.
    pub acceptance: Vec<(String, f64)>,
    pub diagnostics: Vec<TraceSummary>,
}

impl<S: ChainRecord> ChainOutput<S> {
    pub fn new(samples: Vec<S>, acceptance: Vec<(String, f64)>) -> Self {
        let diagnostics = summarize(&samples);
        Self {
            samples,
            acceptance,
            diagnostics,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn require_samples(&self) -> Result<()> {
        if self.samples.is_empty() {
            Err(Error::EmptyChain)
        } else {
            Ok(())
        }
    }

    pub fn trace(&self, name: &str) -> Option<Vec<f64>> {
        let first = self.samples.first()?;
        let idx = first.scalar_names().iter().position(|n| n == name)?;
        Some(self.samples.iter().map(|s| s.scalars()[idx]).collect())
    }

    pub fn summary(&self, name: &str) -> Option<&TraceSummary> {
        self.diagnostics.iter().find(|d| d.name == name)
    }
}

/// Per-scalar mean, sd and effective sample size.
pub fn summarize<S: ChainRecord>(samples: &[S]) -> Vec<TraceSummary> {
    let Some(first) = samples.first() else {
        return Vec::new();
    };
    let names = first.scalar_names();
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.scalars()).collect();
    names
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let x: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            let (mean, var) = mean_var(&x);
            TraceSummary {
                name,
                mean,
                sd: var.sqrt(),
                ess: effective_sample_size(&x),
            }
        })
        .collect()
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Effective sample size using Geyer's initial monotone sequence estimator.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let gamma0 = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if gamma0 <= 0.0 {
        return n as f64;
    }
    let autocov = |lag: usize| -> f64 {
        c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64
    };
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while 2 * t + 1 < n {
        let g0 = if t == 0 { gamma0 } else { autocov(2 * t) };
        let pair = g0 + autocov(2 * t + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        t += 1;
    }
    let tau = (2.0 * sum / gamma0 - 1.0).max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64 * (n as f64).log10().max(1.0))
}

const THETA_NAMES: [&str; 5] = ["phi_lon", "phi_lat", "g2_s", "phi_p", "g2_p"];

fn theta_scalars(t: &SeparableKernelParams) -> [f64; 5] {
    [t.phi_lon, t.phi_lat, t.g2_s, t.phi_p, t.g2_p]
}

fn level_names(tag: &str, m: usize, out: &mut Vec<String>) {
    for k in 0..m {
        out.push(format!("beta_{tag}[{k}]"));
    }
    out.push(format!("sigma2_{tag}"));
    out.push(format!("tau2_{tag}"));
    for n in THETA_NAMES {
        out.push(format!("{n}_{tag}"));
    }
}

fn level_scalars(l: &LevelParams, out: &mut Vec<f64>) {
    out.extend_from_slice(&l.beta);
    out.push(l.sigma2);
    out.push(l.tau2);
    out.extend(theta_scalars(&l.theta));
}

fn count_beta(names: &[String], tag: &str) -> usize {
    let prefix = format!("beta_{tag}[");
    names.iter().filter(|n| n.starts_with(&prefix)).count()
}

fn read_level(names: &[String], scalars: &[f64], tag: &str) -> Result<LevelParams> {
    let get = |name: String| -> Result<f64> {
        names
            .iter()
            .position(|n| *n == name)
            .map(|i| scalars[i])
            .ok_or_else(|| Error::Format(format!("missing column {name}")))
    };
    let m = count_beta(names, tag);
    let beta = (0..m).map(|k| get(format!("beta_{tag}[{k}]"))).collect::<Result<_>>()?;
    Ok(LevelParams {
        beta,
        sigma2: get(format!("sigma2_{tag}"))?,
        tau2: get(format!("tau2_{tag}"))?,
        theta: SeparableKernelParams {
            phi_lon: get(format!("phi_lon_{tag}"))?,
            phi_lat: get(format!("phi_lat_{tag}"))?,
            g2_s: get(format!("g2_s_{tag}"))?,
            phi_p: get(format!("phi_p_{tag}"))?,
            g2_p: get(format!("g2_p_{tag}"))?,
        },
    })
}

impl ChainRecord for ChainSample {
    const MODEL: &'static str = "lvcs";

    fn scalar_names(&self) -> Vec<String> {
        let mut v = vec!["rho".to_string()];
        level_names("L", self.params.low.beta.len(), &mut v);
        level_names("H", self.params.high.beta.len(), &mut v);
        v
    }

    fn scalars(&self) -> Vec<f64> {
        let mut v = vec![self.params.rho];
        level_scalars(&self.params.low, &mut v);
        level_scalars(&self.params.high, &mut v);
        v
    }

    fn latent(&self) -> Vec<&[f64]> {
        vec![&self.w_low, &self.w_high]
    }

    fn from_parts(names: &[String], scalars: &[f64], latent: Vec<Vec<f64>>) -> Result<Self> {
        let rho_idx = names
            .iter()
            .position(|n| n == "rho")
            .ok_or_else(|| Error::Format("missing column rho".into()))?;
        let params = ModelParams {
            low: read_level(names, scalars, "L")?,
            high: read_level(names, scalars, "H")?,
            rho: scalars[rho_idx],
        };
        let mut it = latent.into_iter();
        Ok(Self {
            params,
            w_low: it.next().unwrap_or_default(),
            w_high: it.next().unwrap_or_default(),
        })
    }
}

impl ChainRecord for LevelSample {
    const MODEL: &'static str = "sgp";

    fn scalar_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        level_names("S", self.params.beta.len(), &mut v);
        v
    }

    fn scalars(&self) -> Vec<f64> {
        let mut v = Vec::new();
        level_scalars(&self.params, &mut v);
        v
    }

    fn latent(&self) -> Vec<&[f64]> {
        vec![&self.w]
    }

    fn from_parts(names: &[String], scalars: &[f64], latent: Vec<Vec<f64>>) -> Result<Self> {
        Ok(Self {
            params: read_level(names, scalars, "S")?,
            w: latent.into_iter().next().unwrap_or_default(),
        })
    }
}
