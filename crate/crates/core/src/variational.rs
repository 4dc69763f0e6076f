//! Mean-field Gaussian posteriors over weight tensors and latent vectors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Log-variance every freshly initialised posterior starts at (σ ≈ 0.082).
pub const INIT_LOG_VAR: f64 = -10.0;

/// Fully factorised Gaussian `q(w) = Π N(mean_i, exp(log_var_i))` against an
/// isotropic Gaussian prior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVariational {
    pub mean: Grid,
    pub log_var: Grid,
    pub prior_mean: f64,
    pub prior_var: f64,
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Size of the stochastic latent bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentSpec {
    pub dim: usize,
}

impl Default for LatentSpec {
    fn default() -> Self {
        LatentSpec { dim: 10 }
    }
}

impl LatentSpec {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("latent dimension must be at least 1".into()));
        }
        Ok(LatentSpec { dim })
    }
}

impl GaussianVariational {
    /// Posterior with a standard normal prior.
    pub fn new(mean: Grid, log_var: Grid) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::shape(
                "GaussianVariational",
                format!("mean {:?} vs log_var {:?}", mean.shape(), log_var.shape()),
            ));
        }
        Ok(GaussianVariational {
            mean,
            log_var,
            prior_mean: 0.0,
            prior_var: 1.0,
        })
    }

    /// Fan-in scaled uniform means on `±sqrt(6 / fan_in)`, log-variance
    /// [`INIT_LOG_VAR`].
    pub fn init_fan_in<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        GaussianVariational {
            mean: Grid::uniform(shape, -bound, bound, rng),
            log_var: Grid::full(shape, INIT_LOG_VAR),
            prior_mean: 0.0,
            prior_var: 1.0,
        }
    }

    /// Zero means (used for biases), log-variance [`INIT_LOG_VAR`].
    pub fn init_zero(shape: &[usize]) -> Self {
        GaussianVariational {
            mean: Grid::zeros(shape),
            log_var: Grid::full(shape, INIT_LOG_VAR),
            prior_mean: 0.0,
            prior_var: 1.0,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Reparameterised draw `mean + exp(log_var / 2) ∘ ε`. The noise is
    /// returned so the draw can be replayed as a differentiable function
    /// of the parameters.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Grid, Grid) {
        let eps = Grid::randn(self.shape(), rng);
        (self.sample_with_noise(&eps), eps)
    }

    pub fn sample_with_noise(&self, eps: &Grid) -> Grid {
        let d: Vec<f64> = self
            .mean
            .data()
            .iter()
            .zip(self.log_var.data())
            .zip(eps.data())
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Grid::new(self.shape(), d).expect("shapes agree by construction")
    }

    /// Closed-form `KL(q || p)` summed over every element.
    pub fn kl_to_prior(&self) -> f64 {
        let (m0, v0) = (self.prior_mean, self.prior_var);
        let ln_v0 = v0.ln();
        0.5 * self
            .mean
            .data()
            .iter()
            .zip(self.log_var.data())
            .map(|(&m, &lv)| ln_v0 - lv + (lv.exp() + (m - m0).powi(2)) / v0 - 1.0)
            .sum::<f64>()
    }

    /// Unbiased Monte-Carlo estimate of `E_q[log q(w) - log p(w)]`.
    ///
    /// Each of the `n_samples` draws samples the whole tensor once.
    pub fn kl_monte_carlo<R: Rng + ?Sized>(&self, n_samples: usize, rng: &mut R) -> McEstimate {
        let n = n_samples.max(1);
        let (m0, v0) = (self.prior_mean, self.prior_var);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let mut log_ratio = 0.0;
            for (&m, &lv) in self.mean.data().iter().zip(self.log_var.data()) {
                let e: f64 = StandardNormal.sample(rng);
                let w = m + (0.5 * lv).exp() * e;
                // log q(w) - log p(w); the 2π terms cancel
                let log_q = -0.5 * (lv + e * e);
                let log_p = -0.5 * (v0.ln() + (w - m0).powi(2) / v0);
                log_ratio += log_q - log_p;
            }
            sum += log_ratio;
            sum_sq += log_ratio * log_ratio;
        }
        let mean = sum / n as f64;
        let var = if n > 1 {
            ((sum_sq - n as f64 * mean * mean) / (n as f64 - 1.0)).max(0.0)
        } else {
            0.0
        };
        McEstimate {
            value: mean,
            std_error: (var / n as f64).sqrt(),
        }
    }
}

/// Reparameterised sample recorded on a tape: `mean + exp(0.5·log_var) ∘ eps`.
pub fn sample_on_tape<'t>(mean: Var<'t>, log_var: Var<'t>, eps: &Grid) -> Result<Var<'t>> {
    let noise = mean.tape().leaf(eps.clone());
    log_var.scale(0.5)?.exp()?.mul(noise)?.add(mean)
}

/// Closed-form KL to `N(prior_mean, prior_var)` recorded on a tape, summed
/// over all elements.
pub fn kl_on_tape<'t>(
    mean: Var<'t>,
    log_var: Var<'t>,
    prior_mean: f64,
    prior_var: f64,
) -> Result<Var<'t>> {
    let centred = mean.add_scalar(-prior_mean)?;
    let sq = centred.mul(centred)?;
    log_var
        .exp()?
        .add(sq)?
        .scale(1.0 / prior_var)?
        .sub(log_var)?
        .add_scalar(prior_var.ln() - 1.0)?
        .sum()?
        .scale(0.5)
}
