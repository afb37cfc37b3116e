//! Distribution specifications shared by graph files and scenario configs.

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal, Poisson, Uniform};
use serde::{Deserialize, Serialize};

/// A sampling distribution as written in graph and scenario files.
///
/// `exponential` and `lognormal` are parameterized by their mean and median
/// respectively so config files read in natural units (milliseconds, tokens).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Constant { value: f64 },
    Poisson { lambda: f64 },
    Exponential { mean: f64 },
    Uniform { low: f64, high: f64 },
    Lognormal { median: f64, sigma: f64 },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DistError {
    #[error("distribution parameter must be positive, got {0}")]
    NonPositive(f64),
    #[error("uniform bounds inverted: low {low} > high {high}")]
    InvertedBounds { low: f64, high: f64 },
}

impl DistributionSpec {
    pub fn validate(&self) -> Result<(), DistError> {
        match *self {
            DistributionSpec::Constant { value } => positive(value),
            DistributionSpec::Poisson { lambda } => positive(lambda),
            DistributionSpec::Exponential { mean } => positive(mean),
            DistributionSpec::Uniform { low, high } => {
                positive(low)?;
                if low > high {
                    return Err(DistError::InvertedBounds { low, high });
                }
                Ok(())
            }
            DistributionSpec::Lognormal { median, sigma } => {
                positive(median)?;
                if sigma < 0.0 {
                    return Err(DistError::NonPositive(sigma));
                }
                Ok(())
            }
        }
    }

    /// Expected value; used for waiting-request token demand estimates.
    pub fn mean(&self) -> f64 {
        match *self {
            DistributionSpec::Constant { value } => value,
            DistributionSpec::Poisson { lambda } => lambda,
            DistributionSpec::Exponential { mean } => mean,
            DistributionSpec::Uniform { low, high } => 0.5 * (low + high),
            DistributionSpec::Lognormal { median, sigma } => median * (0.5 * sigma * sigma).exp(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DistributionSpec::Constant { value } => value,
            DistributionSpec::Poisson { lambda } => {
                Poisson::new(lambda).expect("validated lambda").sample(rng)
            }
            DistributionSpec::Exponential { mean } => {
                Exp::new(1.0 / mean).expect("validated mean").sample(rng)
            }
            DistributionSpec::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    Uniform::new(low, high).sample(rng)
                }
            }
            DistributionSpec::Lognormal { median, sigma } => {
                LogNormal::new(median.ln(), sigma).expect("validated params").sample(rng)
            }
        }
    }

    /// Samples a token count: rounded and clamped to at least one token.
    pub fn sample_tokens<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.sample(rng).round().max(1.0) as u64
    }
}

fn positive(v: f64) -> Result<(), DistError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(DistError::NonPositive(v))
    }
}
