//! Monte Carlo checks of the global-entropy estimator on synthetic
//! stationary processes: unbiasedness against the known process mean, and
//! the decay of its variance with the horizon.
//!
//! Replications run in parallel; replication `r` draws from its own
//! `ChaCha8Rng` seeded with `seed + r`, and results are reduced in
//! replication order, so every report is bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::Ewma;

/// Minimum replications for a bias experiment.
pub const MIN_BIAS_REPLICATIONS: usize = 1_000;
/// Minimum replications per horizon for a variance-decay experiment.
pub const MIN_DECAY_REPLICATIONS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {min} replications, got {got}")]
    TooFewReplications { min: usize, got: usize },
    #[error("invalid process: {0}")]
    InvalidProcess(String),
    #[error("horizon grid must span at least 1.5 orders of magnitude")]
    NarrowGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessKind {
    IidUniform {
        lo: f64,
        hi: f64,
    },
    /// `x_t = mean + phi (x_{t−1} − mean) + N(0, noise_sd²)`, clipped to
    /// `[lo, hi]`, started at `mean` and run `burn_in` steps before
    /// observation. Keep `mean` at the midpoint of the clip range so the
    /// clipping stays symmetric and the stationary mean equals `mean`.
    Ar1 {
        phi: f64,
        mean: f64,
        noise_sd: f64,
        lo: f64,
        hi: f64,
        burn_in: usize,
    },
    Constant {
        value: f64,
    },
}

impl ProcessKind {
    pub fn mean(&self) -> f64 {
        match *self {
            Self::IidUniform { lo, hi } => 0.5 * (lo + hi),
            Self::Ar1 { mean, .. } => mean,
            Self::Constant { value } => value,
        }
    }

    /// Marginal variance where it is known in closed form.
    pub fn variance(&self) -> Option<f64> {
        match *self {
            Self::IidUniform { lo, hi } => Some((hi - lo).powi(2) / 12.0),
            Self::Constant { .. } => Some(0.0),
            Self::Ar1 { .. } => None,
        }
    }

    fn validate(&self) -> Result<(), StatsError> {
        let bad = |m: String| Err(StatsError::InvalidProcess(m));
        match *self {
            Self::IidUniform { lo, hi } if !(lo < hi && lo.is_finite() && hi.is_finite()) => bad(
                format!("uniform bounds must satisfy lo < hi, got [{lo}, {hi}]"),
            ),
            Self::Ar1 {
                phi,
                mean,
                noise_sd,
                lo,
                hi,
                ..
            } => {
                if phi.abs() >= 1.0 {
                    bad(format!("|phi| must be < 1 for stationarity, got {phi}"))
                } else if !(noise_sd >= 0.0 && lo < hi && (lo..=hi).contains(&mean)) {
                    bad("AR(1) needs noise_sd ≥ 0 and lo ≤ mean ≤ hi".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    fn path(&self, rng: &mut ChaCha8Rng) -> PathSampler {
        match *self {
            Self::Ar1 {
                mean,
                noise_sd,
                burn_in,
                ..
            } => {
                let mut sampler = PathSampler {
                    kind: self.clone(),
                    state: mean,
                    noise: Normal::new(0.0, noise_sd).ok(),
                };
                for _ in 0..burn_in {
                    sampler.next(rng);
                }
                sampler
            }
            _ => PathSampler {
                kind: self.clone(),
                state: self.mean(),
                noise: None,
            },
        }
    }
}

struct PathSampler {
    kind: ProcessKind,
    state: f64,
    noise: Option<Normal<f64>>,
}

impl PathSampler {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        match self.kind {
            ProcessKind::IidUniform { lo, hi } => rng.random_range(lo..hi),
            ProcessKind::Constant { value } => value,
            ProcessKind::Ar1 {
                phi, mean, lo, hi, ..
            } => {
                let eps = self.noise.map_or(0.0, |n| n.sample(rng));
                self.state = (mean + phi * (self.state - mean) + eps).clamp(lo, hi);
                self.state
            }
        }
    }
}

/// Which estimator the experiments evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Estimator {
    /// The global-entropy EWMA used by the decoder.
    #[default]
    Ewma,
    /// EWMA multiplied by `factor`; a negative control that must fail the
    /// bias check.
    Scaled { factor: f64 },
}

impl Estimator {
    fn finish(&self, value: f64) -> f64 {
        match *self {
            Self::Ewma => value,
            Self::Scaled { factor } => factor * value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub kind: ProcessKind,
    pub horizon: usize,
    pub replications: usize,
    pub lambda: f64,
    pub seed: u64,
    #[serde(default)]
    pub estimator: Estimator,
}

impl ProcessSpec {
    fn validate(&self, min_replications: usize) -> Result<(), StatsError> {
        self.kind.validate()?;
        if self.replications < min_replications {
            return Err(StatsError::TooFewReplications {
                min: min_replications,
                got: self.replications,
            });
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(StatsError::InvalidProcess(format!(
                "lambda must be in (0, 1], got {}",
                self.lambda
            )));
        }
        if self.horizon == 0 {
            return Err(StatsError::InvalidProcess("horizon must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Estimator values at each horizon in `checkpoints` (ascending) for
    /// replication `r`.
    fn replicate(&self, r: usize, checkpoints: &[usize]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(r as u64));
        let mut path = self.kind.path(&mut rng);
        let mut ewma = Ewma::new(self.lambda);
        let mut out = Vec::with_capacity(checkpoints.len());
        let mut next = checkpoints.iter().peekable();
        let last = *checkpoints.last().expect("at least one checkpoint");
        for t in 1..=last {
            let g = ewma.push(path.next(&mut rng));
            if next.peek() == Some(&&t) {
                out.push(self.estimator.finish(g));
                next.next();
            }
        }
        out
    }

    fn simulate(&self, checkpoints: &[usize]) -> Vec<Vec<f64>> {
        (0..self.replications)
            .into_par_iter()
            .map(|r| self.replicate(r, checkpoints))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub empirical_mean: f64,
    pub process_mean: f64,
    pub standard_error: f64,
    /// `(empirical − process) / SE`; zero when both the deviation and SE
    /// vanish.
    pub z_score: f64,
}

/// Welford's running mean and unbiased variance, in iteration order.
fn mean_and_variance(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for x in values {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    (mean, if n > 1.0 { m2 / (n - 1.0) } else { 0.0 })
}

/// Simulates `R` paths of length `T` and compares the mean of
/// `H_glob,T` against the process mean.
pub fn run_bias_experiment(spec: &ProcessSpec) -> Result<BiasReport, StatsError> {
    spec.validate(MIN_BIAS_REPLICATIONS)?;
    let samples = spec.simulate(&[spec.horizon]);
    let (empirical_mean, var) = mean_and_variance(samples.iter().map(|s| s[0]));
    let standard_error = (var / spec.replications as f64).sqrt();
    let process_mean = spec.kind.mean();
    let deviation = empirical_mean - process_mean;
    let z_score = if standard_error > 0.0 {
        deviation / standard_error
    } else if deviation == 0.0 {
        0.0
    } else {
        deviation.signum() * f64::INFINITY
    };
    Ok(BiasReport {
        empirical_mean,
        process_mean,
        standard_error,
        z_score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariancePoint {
    pub horizon: usize,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecayReport {
    pub points: Vec<VariancePoint>,
    /// Least-squares slope of `ln Var` against `ln t`; `None` when a
    /// variance is zero.
    pub slope: Option<f64>,
    /// Limiting variance `σ²(1−λ)/(1+λ)` for `λ < 1` when `σ²` is known.
    pub floor: Option<f64>,
}

impl VarianceDecayReport {
    /// Whether the variance strictly decreases across the grid.
    pub fn is_strictly_decreasing(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].variance < w[0].variance)
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Variance of `H_glob,t` across replications at each horizon in `t_grid`,
/// with the log-log slope. Each replication is one path observed at every
/// horizon.
pub fn run_variance_decay(
    spec: &ProcessSpec,
    t_grid: &[usize],
) -> Result<VarianceDecayReport, StatsError> {
    spec.validate(MIN_DECAY_REPLICATIONS)?;
    let mut grid = t_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    match (grid.first(), grid.last()) {
        (Some(&lo), Some(&hi)) if lo >= 1 && (hi as f64 / lo as f64).log10() >= 1.5 => {}
        _ => return Err(StatsError::NarrowGrid),
    }
    let samples = spec.simulate(&grid);
    let points: Vec<VariancePoint> = grid
        .iter()
        .enumerate()
        .map(|(i, &horizon)| VariancePoint {
            horizon,
            variance: mean_and_variance(samples.iter().map(|s| s[i])).1,
        })
        .collect();
    let slope = points.iter().all(|p| p.variance > 0.0).then(|| {
        let xs: Vec<f64> = points.iter().map(|p| (p.horizon as f64).ln()).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.variance.ln()).collect();
        ls_slope(&xs, &ys)
    });
    let floor = match spec.kind.variance() {
        Some(s2) if spec.lambda < 1.0 => {
            let f = s2 * (1.0 - spec.lambda) / (1.0 + spec.lambda);
            Some(spec.estimator.finish(1.0).powi(2) * f)
        }
        _ => None,
    };
    Ok(VarianceDecayReport {
        points,
        slope,
        floor,
    })
}

/// Exact variance of the normalized EWMA at horizon `t` for an iid process
/// with variance `s2`: `s2 · Σ w_i²` with `w_i = λ^{t−i} / Σ λ^{t−j}`.
pub fn iid_ewma_variance(s2: f64, lambda: f64, t: usize) -> f64 {
    if lambda == 1.0 {
        return s2 / t as f64;
    }
    let t = t as i32;
    let sum_sq = (1.0 - lambda.powi(2 * t)) / (1.0 - lambda * lambda);
    let sum = (1.0 - lambda.powi(t)) / (1.0 - lambda);
    s2 * sum_sq / (sum * sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iid(lambda: f64, horizon: usize, replications: usize) -> ProcessSpec {
        ProcessSpec {
            kind: ProcessKind::IidUniform {
                lo: 0.0,
                hi: 64f64.ln(),
            },
            horizon,
            replications,
            lambda,
            seed: 42,
            estimator: Estimator::Ewma,
        }
    }

    #[test]
    fn iid_uniform_is_unbiased() {
        let r = run_bias_experiment(&iid(0.95, 256, 10_000)).unwrap();
        assert_eq!(r.process_mean, 64f64.ln() / 2.0);
        assert!(r.z_score.abs() <= 3.0, "{r:?}");
    }

    #[test]
    fn constant_process_is_exact() {
        let spec = ProcessSpec {
            kind: ProcessKind::Constant { value: 1.25 },
            ..iid(0.9, 50, 1_000)
        };
        let r = run_bias_experiment(&spec).unwrap();
        assert_eq!(r.empirical_mean, 1.25);
        assert_eq!(r.standard_error, 0.0);
        assert_eq!(r.z_score, 0.0);
        let decay = run_variance_decay(
            &ProcessSpec {
                replications: 10_000,
                ..spec
            },
            &[1, 10, 100],
        )
        .unwrap();
        assert!(decay.points.iter().all(|p| p.variance == 0.0));
        assert_eq!(decay.slope, None);
    }

    #[test]
    fn ar1_is_unbiased_after_burn_in() {
        let v = 64f64.ln();
        let spec = ProcessSpec {
            kind: ProcessKind::Ar1 {
                phi: 0.5,
                mean: v / 2.0,
                noise_sd: 0.5,
                lo: 0.0,
                hi: v,
                burn_in: 100,
            },
            ..iid(0.95, 256, 10_000)
        };
        let r = run_bias_experiment(&spec).unwrap();
        assert!(r.z_score.abs() <= 3.0, "{r:?}");
    }

    #[test]
    fn scaled_estimator_is_caught() {
        let spec = ProcessSpec {
            estimator: Estimator::Scaled { factor: 1.05 },
            ..iid(0.95, 256, 10_000)
        };
        assert!(run_bias_experiment(&spec).unwrap().z_score > 3.0);
    }

    #[test]
    fn validation() {
        assert!(matches!(
            run_bias_experiment(&iid(0.95, 256, 999)),
            Err(StatsError::TooFewReplications {
                min: 1000,
                got: 999
            })
        ));
        assert_eq!(
            run_variance_decay(&iid(1.0, 1, 10_000), &[10, 100]),
            Err(StatsError::NarrowGrid)
        );
        let bad = ProcessSpec {
            kind: ProcessKind::Ar1 {
                phi: 1.0,
                mean: 1.0,
                noise_sd: 0.1,
                lo: 0.0,
                hi: 2.0,
                burn_in: 0,
            },
            ..iid(0.95, 10, 1000)
        };
        assert!(run_bias_experiment(&bad).is_err());
    }

    #[test]
    fn equal_weights_decay_like_one_over_t() {
        let r = run_variance_decay(&iid(1.0, 1, 10_000), &[10, 100, 1000]).unwrap();
        let slope = r.slope.unwrap();
        assert!((slope + 1.0).abs() <= 0.15, "{slope}");
        assert!(r.is_strictly_decreasing());
    }

    #[test]
    fn reproducible() {
        let spec = iid(0.91, 64, 2_000);
        assert_eq!(run_bias_experiment(&spec), run_bias_experiment(&spec));
    }

    #[test]
    fn analytic_variance_limits() {
        let s2 = 2.0;
        assert_eq!(iid_ewma_variance(s2, 1.0, 50), 0.04);
        assert!((iid_ewma_variance(s2, 0.5, 1) - s2).abs() < 1e-12);
        let floor = s2 * 0.05 / 1.95;
        assert!((iid_ewma_variance(s2, 0.95, 2000) - floor).abs() < 1e-12);
    }
}
