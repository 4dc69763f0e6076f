//! Monte-Carlo predictive distribution and its split into aleatoric and
//! epistemic variance.
//!
//! With `M` stochastic passes giving per-pixel means `μ̂_i` and variances
//! `σ̃²_i`:
//!
//! ```text
//! mean       = (1/M) Σ μ̂_i
//! aleatoric  = (1/M) Σ σ̃²_i
//! epistemic  = (1/M) Σ μ̂_i² − mean²
//! total      = aleatoric + epistemic
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Tape};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::network::{predict_mask, ForwardMode, SegNet};

/// Default number of Monte-Carlo passes for reports.
pub const DEFAULT_SAMPLES: usize = 20;

/// Space in which the mean/variance pair of each pass is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputSpace {
    /// `μ̂ = sigmoid(logit)`, `σ̃² = exp(log_var_logit) · sigmoid'(logit)²`.
    #[default]
    Probability,
    /// Raw logits and logit variances.
    Logit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSample {
    pub mu_hat: Grid,
    pub var_tilde: Grid,
}

impl PredictiveSample {
    pub fn from_logits(mu_logit: &Grid, log_var_logit: &Grid, space: OutputSpace) -> Result<Self> {
        match space {
            OutputSpace::Probability => Ok(PredictiveSample {
                mu_hat: mu_logit.map(sigmoid),
                var_tilde: mu_logit.zip_map(log_var_logit, |m, lv| {
                    let s = sigmoid(m);
                    let slope = s * (1.0 - s);
                    lv.exp() * slope * slope
                })?,
            }),
            OutputSpace::Logit => Ok(PredictiveSample {
                mu_hat: mu_logit.clone(),
                var_tilde: log_var_logit.map(f64::exp),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub mean_prob: Grid,
    pub aleatoric: Grid,
    pub epistemic: Grid,
    pub total_var: Grid,
    pub mask: Grid,
    pub n_samples: usize,
}

/// Random stream for the `index`-th pass; the first `k` passes do not
/// depend on how many passes are requested in total.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `m` stochastic forward passes, each with fresh weights and latent draws.
pub fn mc_predict(net: &SegNet, x: &Grid, m: usize, seed: u64) -> Result<Vec<PredictiveSample>> {
    mc_predict_in(net, x, m, seed, OutputSpace::Probability)
}

pub fn mc_predict_in(
    net: &SegNet,
    x: &Grid,
    m: usize,
    seed: u64,
    space: OutputSpace,
) -> Result<Vec<PredictiveSample>> {
    if m == 0 {
        return Err(Error::EmptySampleList);
    }
    (0..m)
        .map(|i| {
            let tape = Tape::new();
            let mut rng = sample_rng(seed, i);
            let out = net.forward(&tape, x, ForwardMode::Stochastic, &mut rng)?;
            let mu = out.mu_logit.value();
            let lv = out.log_var_logit.value();
            PredictiveSample::from_logits(&mu, &lv, space)
        })
        .collect()
}

/// Reduces the passes to mean, aleatoric, epistemic and total maps. The
/// mask thresholds the mean probability at 0.5.
pub fn decompose(samples: &[PredictiveSample]) -> Result<UncertaintyReport> {
    decompose_in(samples, OutputSpace::Probability)
}

pub fn decompose_in(samples: &[PredictiveSample], space: OutputSpace) -> Result<UncertaintyReport> {
    let first = samples.first().ok_or(Error::EmptySampleList)?;
    let shape = first.mu_hat.shape().to_vec();
    for s in samples {
        if s.mu_hat.shape() != shape.as_slice() || s.var_tilde.shape() != shape.as_slice() {
            return Err(Error::shape(
                "decompose",
                format!(
                    "sample shapes {:?}/{:?} vs {shape:?}",
                    s.mu_hat.shape(),
                    s.var_tilde.shape()
                ),
            ));
        }
    }
    let m = samples.len() as f64;
    let n = first.mu_hat.len();
    let mut mean = vec![0.0; n];
    let mut alea = vec![0.0; n];
    for s in samples {
        for (j, (&mu, &var)) in s.mu_hat.data().iter().zip(s.var_tilde.data()).enumerate() {
            mean[j] += mu;
            alea[j] += var;
        }
    }
    for j in 0..n {
        mean[j] /= m;
        alea[j] /= m;
    }
    // second pass over deviations: non-negative by construction and exactly
    // zero when every pass agrees
    let mut epi = vec![0.0; n];
    for s in samples {
        for (j, &mu) in s.mu_hat.data().iter().enumerate() {
            let d = mu - mean[j];
            epi[j] += d * d;
        }
    }
    for e in &mut epi {
        *e /= m;
    }
    let total: Vec<f64> = alea.iter().zip(&epi).map(|(a, e)| a + e).collect();
    let mean_prob = Grid::new(&shape, mean)?;
    let mask = match space {
        OutputSpace::Probability => mean_prob.map(|p| if p >= 0.5 { 1.0 } else { 0.0 }),
        OutputSpace::Logit => predict_mask(&mean_prob, 0.5),
    };
    Ok(UncertaintyReport {
        mask,
        mean_prob,
        aleatoric: Grid::new(&shape, alea)?,
        epistemic: Grid::new(&shape, epi)?,
        total_var: Grid::new(&shape, total)?,
        n_samples: samples.len(),
    })
}
