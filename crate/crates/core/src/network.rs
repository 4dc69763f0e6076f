//! Bayesian U-Net style encoder–decoder with a stochastic latent
//! bottleneck and a two-channel (mean logit, log-variance logit) head.
//!
//! Layout for `depth = d`, channel widths `c_i = base · 2^i`:
//!
//! ```text
//! enc_i:  [conv3x3 → relu → conv3x3 → relu] → maxpool2x2     i = 0..d
//! mid:    conv3x3 → relu → conv3x3 → relu                    (c_d channels)
//! latent: global-avg-pool → affine → (z_mean, z_log_var)
//!         z → affine → broadcast-add onto the bottleneck map
//! dec_i:  convT2x2/s2 (c_{i+1} → c_i) [⊕ skip_i] → block      i = d-1..0
//! head:   conv1x1 → μ̂ logit,  conv1x1 → log σ̃² logit
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::variational::{sample_on_tape, GaussianVariational};

const SAME3: ConvGeom = ConvGeom { stride: 1, pad: 1 };
const POINT: ConvGeom = ConvGeom { stride: 1, pad: 0 };
const UP2: ConvGeom = ConvGeom { stride: 2, pad: 0 };
/// Foreground fraction the mean head's bias is initialised to.
pub const FOREGROUND_PRIOR: f64 = 0.1;
/// Scale applied to the fan-in initialisation of the latent heads.
const LATENT_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of down/up stages.
    pub depth: usize,
    pub latent_dim: usize,
    pub skip_connections: bool,
    pub bayesian_weights: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            latent_dim: 10,
            skip_connections: true,
            bayesian_weights: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Channel width of stage `i` (stage `depth` is the bottleneck).
    pub fn width(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Number of scalar weights (each carrying its own posterior).
    ///
    /// Per stage with `k = 2` when skip connections are on, `1` otherwise:
    ///
    /// ```text
    /// enc_i : 9·c_i·cin_i + c_i + 9·c_i² + c_i          cin_0 = in, cin_i = c_{i-1}
    /// mid   : 9·c_d·c_{d-1} + c_d + 9·c_d² + c_d
    /// latent: 2·(D·c_d + D) + (c_d·D + c_d)
    /// dec_i : 4·c_{i+1}·c_i + c_i + 9·c_i·k·c_i + c_i + 9·c_i² + c_i
    /// head  : 2·(c_0 + 1)
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.depth;
        let dim = self.latent_dim;
        let c = |i: usize| self.width(i);
        let k = if self.skip_connections { 2 } else { 1 };
        let mut total = 0;
        for i in 0..d {
            let cin = if i == 0 { self.in_channels } else { c(i - 1) };
            total += 9 * c(i) * cin + c(i) + 9 * c(i) * c(i) + c(i);
        }
        total += 9 * c(d) * c(d - 1) + c(d) + 9 * c(d) * c(d) + c(d);
        total += 2 * (dim * c(d) + dim) + (c(d) * dim + c(d));
        for i in 0..d {
            total +=
                4 * c(i + 1) * c(i) + c(i) + 9 * c(i) * k * c(i) + c(i) + 9 * c(i) * c(i) + c(i);
        }
        total + 2 * (c(0) + 1)
    }
}

/// Whether weights and latent are sampled or replaced by their means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Stochastic,
    MeanOnly,
}

/// One named parameter tensor and its variational posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub posterior: GaussianVariational,
}

/// Tape handles for one parameter tensor.
#[derive(Clone, Copy)]
pub struct ParamVars<'t> {
    pub mean: Var<'t>,
    /// Present only when the posterior variance is being learned.
    pub log_var: Option<Var<'t>>,
}

/// Everything a forward pass produces, still on the tape.
pub struct ForwardPass<'t> {
    /// N×1×H×W mean logits μ̂.
    pub mu_logit: Var<'t>,
    /// N×1×H×W log-variance logits log σ̃².
    pub log_var_logit: Var<'t>,
    /// N×D latent means.
    pub z_mean: Var<'t>,
    /// N×D latent log-variances.
    pub z_log_var: Var<'t>,
    /// In the same order as [`SegNet::params`].
    pub params: Vec<ParamVars<'t>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    config: NetConfig,
    params: Vec<Param>,
}

struct ParamBuilder<'r> {
    params: Vec<Param>,
    rng: &'r mut ChaCha8Rng,
}

impl ParamBuilder<'_> {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) {
        self.scaled_weight(name, shape, fan_in, 1.0);
    }

    fn scaled_weight(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64) {
        let mut posterior = GaussianVariational::init_fan_in(shape, fan_in, self.rng);
        if gain != 1.0 {
            posterior.mean = posterior.mean.map(|v| v * gain);
        }
        self.params.push(Param { name, posterior });
    }

    fn bias(&mut self, name: String, len: usize) {
        let posterior = GaussianVariational::init_zero(&[len]);
        self.params.push(Param { name, posterior });
    }

    fn conv(&mut self, name: &str, out: usize, cin: usize, k: usize) {
        self.weight(format!("{name}.w"), &[out, cin, k, k], cin * k * k);
        self.bias(format!("{name}.b"), out);
    }

    fn conv_t(&mut self, name: &str, cin: usize, out: usize, k: usize) {
        self.weight(format!("{name}.w"), &[cin, out, k, k], cin * k * k);
        self.bias(format!("{name}.b"), out);
    }

    fn linear(&mut self, name: &str, out: usize, cin: usize, gain: f64) {
        self.scaled_weight(format!("{name}.w"), &[out, cin], cin, gain);
        self.bias(format!("{name}.b"), out);
    }
}

impl SegNet {
    /// Builds a network with freshly initialised posteriors.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let d = config.depth;
        for i in 0..d {
            let cin = if i == 0 {
                config.in_channels
            } else {
                config.width(i - 1)
            };
            b.conv(&format!("enc{i}.conv1"), config.width(i), cin, 3);
            b.conv(
                &format!("enc{i}.conv2"),
                config.width(i),
                config.width(i),
                3,
            );
        }
        b.conv("mid.conv1", config.width(d), config.width(d - 1), 3);
        b.conv("mid.conv2", config.width(d), config.width(d), 3);
        // The latent heads start near zero so that z begins close to its
        // N(0, I) prior instead of drawing from an arbitrary-scale Gaussian.
        b.linear(
            "latent.mean",
            config.latent_dim,
            config.width(d),
            LATENT_GAIN,
        );
        b.linear(
            "latent.log_var",
            config.latent_dim,
            config.width(d),
            LATENT_GAIN,
        );
        b.linear(
            "latent.proj",
            config.width(d),
            config.latent_dim,
            LATENT_GAIN,
        );
        for i in (0..d).rev() {
            let c = config.width(i);
            b.conv_t(&format!("dec{i}.up"), config.width(i + 1), c, 2);
            let cin = if config.skip_connections { 2 * c } else { c };
            b.conv(&format!("dec{i}.conv1"), c, cin, 3);
            b.conv(&format!("dec{i}.conv2"), c, c, 3);
        }
        b.conv("head.mu", 1, config.width(0), 1);
        // start the mean logit at the log-odds of the expected foreground
        // fraction instead of 0.5, which every pixel would first unlearn
        let prior_logit = (FOREGROUND_PRIOR / (1.0 - FOREGROUND_PRIOR)).ln();
        let bias = b.params.last_mut().expect("head.mu bias was just pushed");
        bias.posterior.mean = Grid::full(&[1], prior_logit);
        b.conv("head.log_var", 1, config.width(0), 1);
        let params = b.params;
        Ok(SegNet { config, params })
    }

    /// Reassembles a network from stored parameters, checking every shape
    /// against what `config` requires.
    pub fn from_params(config: NetConfig, params: Vec<Param>) -> Result<Self> {
        let template = SegNet::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::ConfigShapeMismatch(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(&params) {
            if want.name != got.name || want.posterior.shape() != got.posterior.shape() {
                return Err(Error::ConfigShapeMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    want.name,
                    want.posterior.shape(),
                    got.name,
                    got.posterior.shape()
                )));
            }
        }
        Ok(SegNet { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.posterior.len()).sum()
    }

    /// Sum of closed-form KL terms of every weight posterior.
    pub fn kl_to_prior(&self) -> f64 {
        self.params.iter().map(|p| p.posterior.kl_to_prior()).sum()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.spatial_multiple();
        match *shape {
            [_, c, h, w] if c == self.config.in_channels && h % m == 0 && w % m == 0 => Ok(()),
            _ => Err(Error::shape(
                "SegNet::forward",
                format!(
                    "input {shape:?} needs N×{}×H×W with H, W divisible by {m}",
                    self.config.in_channels
                ),
            )),
        }
    }

    /// Runs the network on an N×C×H×W batch.
    ///
    /// In stochastic mode every weight tensor is drawn once (shared across
    /// the batch) in parameter order, then one latent draw per image.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        x: &Grid,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<ForwardPass<'t>> {
        self.check_input(x.shape())?;
        let learn_var = self.config.bayesian_weights;
        let mut handles = Vec::with_capacity(self.params.len());
        let mut weights = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let mean = tape.leaf(p.posterior.mean.clone());
            let log_var = learn_var.then(|| tape.leaf(p.posterior.log_var.clone()));
            let w = match (mode, log_var) {
                (ForwardMode::Stochastic, Some(lv)) => {
                    let eps = Grid::randn(p.posterior.shape(), rng);
                    sample_on_tape(mean, lv, &eps)?
                }
                _ => mean,
            };
            handles.push(ParamVars { mean, log_var });
            weights.push(w);
        }
        let mut next = weights.into_iter();
        let mut take = || next.next().expect("parameter layout is fixed by config");

        let conv = |h: Var<'t>, w: Var<'t>, b: Var<'t>, geom: ConvGeom| -> Result<Var<'t>> {
            h.conv2d(w, geom)?.add_channel_bias(b)
        };

        let d = self.config.depth;
        let mut h = tape.leaf(x.clone());
        let mut skips = Vec::with_capacity(d);
        for _ in 0..d {
            h = conv(h, take(), take(), SAME3)?.relu()?;
            h = conv(h, take(), take(), SAME3)?.relu()?;
            skips.push(h);
            h = h.maxpool2x2()?;
        }
        h = conv(h, take(), take(), SAME3)?.relu()?;
        h = conv(h, take(), take(), SAME3)?.relu()?;

        // latent bottleneck
        let shape = h.shape();
        let (n, c) = (shape[0], shape[1]);
        let pooled = h
            .sum_to(&[n, c, 1, 1])?
            .scale(1.0 / (shape[2] * shape[3]) as f64)?
            .reshape(&[n, c])?;
        let z_mean = pooled.affine(take(), take())?;
        let z_log_var = pooled.affine(take(), take())?;
        let z = match mode {
            ForwardMode::Stochastic => {
                let eps = Grid::randn(&[n, self.config.latent_dim], rng);
                sample_on_tape(z_mean, z_log_var, &eps)?
            }
            ForwardMode::MeanOnly => z_mean,
        };
        let shift = z.affine(take(), take())?.reshape(&[n, c, 1, 1])?;
        h = h.add(shift)?;

        for skip in skips.into_iter().rev() {
            let (w, b) = (take(), take());
            h = h.conv_transpose2d(w, UP2)?.add_channel_bias(b)?;
            if self.config.skip_connections {
                h = h.concat_channels(skip)?;
            }
            h = conv(h, take(), take(), SAME3)?.relu()?;
            h = conv(h, take(), take(), SAME3)?.relu()?;
        }
        let mu_logit = conv(h, take(), take(), POINT)?;
        let log_var_logit = conv(h, take(), take(), POINT)?;
        Ok(ForwardPass {
            mu_logit,
            log_var_logit,
            z_mean,
            z_log_var,
            params: handles,
        })
    }

    /// Mean-only prediction without keeping the tape.
    pub fn predict_logits(&self, x: &Grid) -> Result<(Grid, Grid)> {
        let tape = Tape::new();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&tape, x, ForwardMode::MeanOnly, &mut unused)?;
        let mu = out.mu_logit.value().clone();
        let lv = out.log_var_logit.value().clone();
        Ok((mu, lv))
    }
}

/// Binarises mean logits: a pixel is foreground iff `sigmoid(μ̂) ≥ threshold`.
/// Ties at the threshold count as foreground.
pub fn predict_mask(mu_logit: &Grid, threshold: f64) -> Grid {
    debug_assert!(threshold > 0.0 && threshold < 1.0);
    mu_logit.map(|m| if sigmoid(m) >= threshold { 1.0 } else { 0.0 })
}
