//! Gaussian null datasets of matched shape, Monte-Carlo expectations of the
//! projection content, and the white-noise eigenvalue edge.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::preprocess::{center_samples, standardize_variables};
use crate::svd::{projection_content_of_spectrum, squared_singular_values, IndexSet};

pub const DEFAULT_TRIALS: usize = 20;

/// Preprocessing applied to every null matrix before its spectrum is taken;
/// it should mirror what was applied to the observed data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Raw,
    Centered,
    #[default]
    Standardized,
}

impl Conditioning {
    pub fn apply(self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Conditioning::Raw => Ok(x.clone()),
            Conditioning::Centered => center_samples(x),
            Conditioning::Standardized => Ok(standardize_variables(x)?.values),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NullSpec {
    pub p: usize,
    pub n: usize,
    #[serde(default)]
    pub conditioning: Conditioning,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub seed: u64,
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

impl NullSpec {
    pub fn new(p: usize, n: usize, seed: u64) -> Self {
        NullSpec {
            p,
            n,
            conditioning: Conditioning::default(),
            trials: DEFAULT_TRIALS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 || self.trials == 0 {
            return Err(Error::InvalidParameter(format!(
                "null model needs p, N and trials >= 1, got p={}, N={}, trials={}",
                self.p, self.n, self.trials
            )));
        }
        if self.conditioning != Conditioning::Raw && self.n < 2 {
            return Err(Error::InvalidParameter("centering a null model needs N >= 2".into()));
        }
        Ok(())
    }
}

fn gaussian_matrix(p: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // Column-major fill: sample by sample.
    DMatrix::from_iterator(p, n, (0..p * n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// `p × N` independent standard-normal entries, deterministic in `seed`.
pub fn gaussian_dataset(spec: &NullSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Dataset::from_matrix(gaussian_matrix(spec.p, spec.n, &mut rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullEstimate {
    pub mean: f64,
    /// Sample standard deviation over trials (0 for a single trial).
    pub sd: f64,
    pub trials: usize,
}

/// Monte-Carlo mean and spread of `α₂(S)` over fresh Gaussian matrices.
///
/// Trial `i` uses ChaCha8 stream `i` keyed by the seed, so the estimate is
/// bitwise reproducible regardless of thread count.
pub fn expected_projection_content(spec: &NullSpec, s: &IndexSet) -> Result<NullEstimate> {
    spec.validate()?;
    if s.max() > spec.p.min(spec.n) {
        return Err(Error::IndexOutOfRange {
            index: s.max(),
            rank: spec.p.min(spec.n),
        });
    }
    let contents: Vec<f64> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let x = gaussian_matrix(spec.p, spec.n, &mut trial_rng(spec.seed, trial));
            let x = spec.conditioning.apply(&x)?;
            Ok(projection_content_of_spectrum(&squared_singular_values(&x), s))
        })
        .collect::<Result<_>>()?;
    let t = contents.len() as f64;
    let mean = contents.iter().sum::<f64>() / t;
    let sd = if contents.len() > 1 {
        (contents.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (t - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(NullEstimate {
        mean,
        sd,
        trials: spec.trials,
    })
}

pub fn signal_noise_ratio(observed: f64, null: f64) -> Result<f64> {
    if !(null > 0.0) {
        return Err(Error::InvalidParameter(format!("null projection content must be positive, got {null}")));
    }
    Ok(observed / null)
}

/// Asymptotic largest eigenvalue `(1 + √γ)²` of a white-noise sample
/// covariance with `p/N → γ`.
pub fn largest_eigenvalue_edge(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("aspect ratio must be positive, got {gamma}")));
    }
    let r = 1.0 + gamma.sqrt();
    Ok(r * r)
}

/// Largest eigenvalue of the `p × p` sample covariance `YYᵀ/(N−1)` of the
/// sample-centered rows `Y` of `x`.
pub fn largest_covariance_eigenvalue(x: &DMatrix<f64>) -> Result<f64> {
    let y = center_samples(x)?;
    let top = squared_singular_values(&y).first().copied().unwrap_or(0.0);
    Ok(top / (x.ncols() - 1) as f64)
}

/// Observed projection content set against its null expectation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullComparison {
    pub observed: f64,
    pub null_mean: f64,
    pub null_sd: f64,
    pub ratio: f64,
}

pub fn compare_to_null(observed: f64, spec: &NullSpec, s: &IndexSet) -> Result<NullComparison> {
    let null = expected_projection_content(spec, s)?;
    Ok(NullComparison {
        observed,
        null_mean: null.mean,
        null_sd: null.sd,
        ratio: signal_noise_ratio(observed, null.mean)?,
    })
}
