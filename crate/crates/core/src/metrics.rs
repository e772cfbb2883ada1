//! Prediction scores: MSPE, empirical CRPS, interval coverage and length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predict::PredictiveSummary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    /// Mean squared prediction error (K²).
    pub mspe: f64,
    /// Continuous ranked probability score (K).
    pub crps: f64,
    /// Fraction of truths inside the credible interval.
    pub cvg: f64,
    /// Average credible-interval length (K).
    pub alci: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub pressure_hpa: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub interval_level: f64,
    pub pooled: Metrics,
    /// Breakdown by target pressure, ascending.
    pub per_level: Vec<LevelMetrics>,
    /// Filled in by callers that time their runs; never set by [`score`].
    pub wall_time_seconds: Option<f64>,
}

/// Empirical CRPS `E|X − y| − ½ E|X − X′|` over the draws.
pub fn crps_empirical(draws: &[f64], truth: f64) -> f64 {
    let m = draws.len() as f64;
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let abs_err = sorted.iter().map(|x| (x - truth).abs()).sum::<f64>() / m;
    // Σ_{i,j} |x_i − x_j| = 2 Σ_i x_(i) (2i − m + 1) with 0-based ranks.
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| x * (2.0 * i as f64 - m + 1.0))
        .sum::<f64>()
        * 2.0;
    abs_err - 0.5 * pair_sum / (m * m)
}

/// Closed-form CRPS of a normal predictive distribution.
pub fn crps_gaussian(mean: f64, sd: f64, truth: f64) -> f64 {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let z = (truth - mean) / sd;
    sd * (z * (2.0 * std.cdf(z) - 1.0) + 2.0 * std.pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

fn metrics_for(summary: &PredictiveSummary, draws: &[Vec<f64>], truth: &[f64], idx: &[usize]) -> Metrics {
    let n = idx.len() as f64;
    let mut m = Metrics {
        n: idx.len(),
        mspe: 0.0,
        crps: 0.0,
        cvg: 0.0,
        alci: 0.0,
    };
    for &k in idx {
        let y = truth[k];
        m.mspe += (summary.mean[k] - y).powi(2) / n;
        m.crps += crps_empirical(&draws[k], y) / n;
        if summary.lower[k] <= y && y <= summary.upper[k] {
            m.cvg += 1.0 / n;
        }
        m.alci += (summary.upper[k] - summary.lower[k]) / n;
    }
    m
}

/// Scores predictions against aligned truths.
pub fn score(summary: &PredictiveSummary, truth: &[f64]) -> Result<MetricsReport> {
    let n = summary.len();
    if truth.len() != n {
        return Err(Error::Dimension {
            context: "score truth",
            expected: n,
            actual: truth.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("nothing to score".into()));
    }
    let draws = summary
        .draws
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("scoring needs retained draws".into()))?;
    if draws.len() != n || draws.iter().any(|d| d.is_empty()) {
        return Err(Error::InvalidArgument("draws are not aligned with targets".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let pooled = metrics_for(summary, draws, truth, &all);
    let mut pressures: Vec<f64> = summary.targets.iter().map(|t| t.pressure_hpa).collect();
    pressures.sort_by(f64::total_cmp);
    pressures.dedup();
    let per_level = pressures
        .into_iter()
        .map(|p| {
            let idx: Vec<usize> = (0..n).filter(|&k| summary.targets[k].pressure_hpa == p).collect();
            LevelMetrics {
                pressure_hpa: p,
                metrics: metrics_for(summary, draws, truth, &idx),
            }
        })
        .collect();
    Ok(MetricsReport {
        interval_level: summary.interval_level,
        pooled,
        per_level,
        wall_time_seconds: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predict::Target;
    use approx::assert_relative_eq;

    fn summary(mean: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>, draws: Vec<Vec<f64>>, p: Vec<f64>) -> PredictiveSummary {
        let n = mean.len();
        PredictiveSummary {
            targets: p
                .into_iter()
                .map(|pressure_hpa| Target { lon: 0.0, lat: 0.0, pressure_hpa })
                .collect(),
            sd: vec![0.0; n],
            mean,
            lower,
            upper,
            interval_level: 0.95,
            extrapolated: vec![false; n],
            draws: Some(draws),
        }
    }

    #[test]
    fn two_point_crps() {
        assert_relative_eq!(crps_empirical(&[0.0, 2.0], 1.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let s = summary(vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0], vec![vec![1.0; 3], vec![2.0; 3]], vec![10.0, 10.0]);
        let r = score(&s, &[1.0, 2.0]).unwrap();
        assert_eq!((r.pooled.mspe, r.pooled.crps, r.pooled.alci, r.pooled.cvg), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn golden_mspe_cvg_alci() {
        let s = summary(
            vec![1.0, 3.0, -1.0, 0.5],
            vec![0.0, 2.5, -3.0, 0.0],
            vec![2.0, 4.0, 1.0, 0.25],
            vec![vec![0.0]; 4],
            vec![10.0, 20.0, 10.0, 20.0],
        );
        let r = score(&s, &[1.5, 5.0, -1.0, 0.5]).unwrap();
        // errors 0.5, 2, 0, 0 → (0.25 + 4) / 4
        assert_eq!(r.pooled.mspe, 1.0625);
        // inside: yes, no, yes, no
        assert_eq!(r.pooled.cvg, 0.5);
        // lengths 2, 1.5, 4, 0.25
        assert_eq!(r.pooled.alci, 1.9375);
        assert_eq!(r.per_level.len(), 2);
        assert_eq!(r.per_level[0].pressure_hpa, 10.0);
        assert_eq!(r.per_level[0].metrics.mspe, 0.125);
        assert_eq!(r.per_level[1].metrics.cvg, 0.0);
    }

    #[test]
    fn gaussian_closed_form_at_zero() {
        let expected = (2.0 / std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt();
        assert_relative_eq!(crps_gaussian(0.0, 1.0, 0.0), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.23375, max_relative = 1e-3);
    }

    #[test]
    fn misaligned_truth_is_rejected() {
        let s = summary(vec![1.0], vec![0.0], vec![2.0], vec![vec![1.0]], vec![1.0]);
        assert!(score(&s, &[1.0, 2.0]).is_err());
    }
}
