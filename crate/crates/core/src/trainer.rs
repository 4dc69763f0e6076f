//! Minibatch variational training: sample weights and latent by
//! reparameterisation, differentiate the negated ELBO, update the
//! posterior parameters, and schedule the learning rate on validation loss.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::network::{ForwardMode, SegNet};
use crate::objective::{combined_seg_loss, heteroscedastic_nll, total_objective, LossWeights};
use crate::variational::kl_on_tape;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Minimum absolute decrease in validation loss that counts as progress.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    Plateau,
    Cyclical,
    None,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd-momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd-momentum",
        })
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plateau" => Ok(SchedulerKind::Plateau),
            "cyclical" => Ok(SchedulerKind::Cyclical),
            "none" => Ok(SchedulerKind::None),
            _ => Err(Error::Config(format!("unknown scheduler `{s}`"))),
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerKind::Plateau => "plateau",
            SchedulerKind::Cyclical => "cyclical",
            SchedulerKind::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scheduler: SchedulerKind,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub cyclical_gamma: f64,
    pub cyclical_period: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Weight draws averaged per minibatch.
    pub mc_train_samples: usize,
    /// Learning-rate multiplier for the latent heads (1 = shared rate).
    pub latent_lr_multiplier: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            scheduler: SchedulerKind::Plateau,
            plateau_patience: 10,
            plateau_factor: 0.1,
            cyclical_gamma: 0.1,
            cyclical_period: 20,
            max_epochs: 500,
            seed: 0,
            mc_train_samples: 1,
            latent_lr_multiplier: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and ≥ 0".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must lie in (0, 1)".into()));
        }
        if self.mc_train_samples == 0 {
            return Err(Error::Config("mc_train_samples must be ≥ 1".into()));
        }
        if self.cyclical_period == 0 {
            return Err(Error::Config("cyclical_period must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Loss mix and KL weighting. `None` KL weights resolve from the training
/// set size, see [`LossSettings::resolve`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub kl_weight_weights: Option<f64>,
    pub kl_weight_latent: Option<f64>,
    pub use_nll: bool,
    pub n_logit_samples: usize,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            dice_weight: 0.9,
            ce_weight: 0.1,
            kl_weight_weights: None,
            kl_weight_latent: None,
            use_nll: true,
            n_logit_samples: 10,
        }
    }
}

impl LossSettings {
    /// The data term is a per-pixel mean, so the weight KL is spread over
    /// every training pixel (`1 / (n_train · pixels)`) and the per-image
    /// latent KL over the pixels of its image (`1 / pixels`). One epoch then
    /// accumulates each KL exactly once relative to the summed likelihood.
    pub fn resolve(&self, n_train: usize, pixels_per_image: usize) -> LossWeights {
        let px = pixels_per_image.max(1) as f64;
        LossWeights {
            dice_weight: self.dice_weight,
            ce_weight: self.ce_weight,
            kl_weight_weights: self
                .kl_weight_weights
                .unwrap_or(1.0 / (n_train.max(1) as f64 * px)),
            kl_weight_latent: self.kl_weight_latent.unwrap_or(1.0 / px),
        }
    }
}

/// One trainable tensor handed to [`Optimizer::step`].
pub struct ParamSlot<'a> {
    pub value: &'a mut Grid,
    pub grad: &'a Grid,
    pub lr_scale: f64,
    /// Whether weight decay applies (posterior means only).
    pub decay: bool,
}

/// Adam or SGD with momentum; moment buffers are indexed by slot position.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    steps: u64,
    first: Vec<Grid>,
    second: Vec<Grid>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            weight_decay,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.optimizer, cfg.momentum, cfg.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, slots: &mut [ParamSlot<'_>], lr: f64) -> Result<()> {
        if self.first.is_empty() {
            self.first = slots.iter().map(|s| Grid::zeros(s.value.shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != slots.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} slots vs {} buffers", slots.len(), self.first.len()),
            ));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, slot) in slots.iter_mut().enumerate() {
            if slot.grad.shape() != slot.value.shape()
                || self.first[i].shape() != slot.value.shape()
            {
                return Err(Error::shape(
                    "optimizer",
                    format!(
                        "slot {i}: grad {:?} vs param {:?}",
                        slot.grad.shape(),
                        slot.value.shape()
                    ),
                ));
            }
            let wd = if slot.decay { self.weight_decay } else { 0.0 };
            let rate = lr * slot.lr_scale;
            let p = slot.value.data_mut();
            let g = slot.grad.data();
            match self.kind {
                OptimizerKind::Adam => {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for j in 0..p.len() {
                        let gj = g[j] + wd * p[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        p[j] -= rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let vel = self.first[i].data_mut();
                    for j in 0..p.len() {
                        vel[j] = self.momentum * vel[j] - rate * (g[j] + wd * p[j]);
                        p[j] += vel[j];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Plateau or triangular cyclical learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub kind: SchedulerKind,
    pub base_lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub gamma: f64,
    pub period: usize,
    lr: f64,
    best: f64,
    bad_epochs: usize,
    epochs_seen: usize,
}

impl Scheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut s = Scheduler {
            kind: cfg.scheduler,
            base_lr: cfg.learning_rate,
            patience: cfg.plateau_patience,
            factor: cfg.plateau_factor,
            gamma: cfg.cyclical_gamma,
            period: cfg.cyclical_period,
            lr: cfg.learning_rate,
            best: f64::INFINITY,
            bad_epochs: 0,
            epochs_seen: 0,
        };
        if s.kind == SchedulerKind::Cyclical {
            s.lr = s.cyclical_lr(0);
        }
        s
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Triangle between `base·gamma` (epoch 0) and `base` (half period).
    pub fn cyclical_lr(&self, epoch: usize) -> f64 {
        let phase = (epoch % self.period) as f64 / self.period as f64;
        let tri = 1.0 - (2.0 * phase - 1.0).abs();
        let lo = self.base_lr * self.gamma;
        lo + (self.base_lr - lo) * tri
    }

    /// Records one epoch's validation loss and returns the rate for the
    /// next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        self.epochs_seen += 1;
        let improved = val_loss < self.best - PLATEAU_THRESHOLD;
        if val_loss < self.best {
            self.best = val_loss;
        }
        match self.kind {
            SchedulerKind::Plateau => {
                if improved {
                    self.bad_epochs = 0;
                } else {
                    self.bad_epochs += 1;
                    if self.bad_epochs >= self.patience {
                        self.lr *= self.factor;
                        self.bad_epochs = 0;
                    }
                }
            }
            SchedulerKind::Cyclical => self.lr = self.cyclical_lr(self.epochs_seen),
            SchedulerKind::None => {}
        }
        self.lr
    }
}

/// Mutable training progress carried between epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub optimizer: Optimizer,
    pub scheduler: Scheduler,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            optimizer: Optimizer::from_config(cfg),
            scheduler: Scheduler::new(cfg),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    pub fn lr(&self) -> f64 {
        self.scheduler.lr()
    }
}

/// Averages over the minibatches of one epoch (KLs unweighted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub seg_loss: f64,
    pub kl_weights: f64,
    pub kl_latent: f64,
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seg_loss: f64,
    pub kl_weights: f64,
    pub kl_latent: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,seg_loss,kl_weights,kl_latent,lr";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.6e}",
            self.epoch,
            self.train_loss,
            self.val_loss,
            self.seg_loss,
            self.kl_weights,
            self.kl_latent,
            self.lr
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Stacks samples into `N×1×H×W` image and mask batches.
pub fn batch_of(samples: &[&Sample]) -> Result<(Grid, Grid)> {
    let lift = |g: &Grid| -> Result<Grid> {
        let s = g.shape();
        g.reshape(&[1, s[0], s[1]])
    };
    let images = samples
        .iter()
        .map(|s| lift(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let masks = samples
        .iter()
        .map(|s| lift(&s.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok((Grid::stack(&images)?, Grid::stack(&masks)?))
}

/// Seed-stable split: the first `floor(0.2·n)` of a shuffled order become
/// the validation set.
pub fn split_train_val(samples: &[Sample], seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b17);
    order.shuffle(&mut rng);
    let n_val = samples.len() / 5;
    let val = order[..n_val].iter().map(|&i| samples[i].clone()).collect();
    let train = order[n_val..].iter().map(|&i| samples[i].clone()).collect();
    (train, val)
}

/// Mean-only `combined_seg_loss` over a set, batch-size weighted.
pub fn evaluate_seg_loss(
    net: &SegNet,
    data: &[Sample],
    batch_size: usize,
    w: &LossWeights,
) -> Result<f64> {
    evaluate_mean_only(net, data, batch_size, |out, y, _| {
        Ok(combined_seg_loss(out.mu_logit, y, w)?.item())
    })
}

/// Mean-only value of the data term the objective trains on: the
/// heteroscedastic NLL (with a fixed noise seed) when `use_nll`, the
/// combined segmentation loss otherwise. This is what the scheduler
/// monitors, so it tracks the quantity being optimised.
pub fn evaluate_data_term(
    net: &SegNet,
    data: &[Sample],
    batch_size: usize,
    loss: &LossSettings,
    w: &LossWeights,
) -> Result<f64> {
    if !loss.use_nll {
        return evaluate_seg_loss(net, data, batch_size, w);
    }
    evaluate_mean_only(net, data, batch_size, |out, y, rng| {
        Ok(heteroscedastic_nll(
            out.mu_logit,
            out.log_var_logit,
            y,
            loss.n_logit_samples,
            rng,
        )?
        .item())
    })
}

fn evaluate_mean_only(
    net: &SegNet,
    data: &[Sample],
    batch_size: usize,
    mut per_batch: impl FnMut(&crate::network::ForwardPass<'_>, &Grid, &mut ChaCha8Rng) -> Result<f64>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = batch_of(&refs)?;
        let tape = Tape::new();
        let out = net.forward(&tape, &x, ForwardMode::MeanOnly, &mut rng)?;
        total += per_batch(&out, &y, &mut rng)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Per-batch outcome before the parameter update.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Value of the minimised objective (negated ELBO estimate).
    pub objective: f64,
    pub seg_loss: f64,
    /// Unweighted KL of the weight posteriors.
    pub kl_weights: f64,
    /// Unweighted batch-mean KL of the latent posteriors.
    pub kl_latent: f64,
    /// Per parameter: gradient for the mean and, when learned, the log-variance.
    pub grads: Vec<(Grid, Option<Grid>)>,
}

/// Samples weights and latents, evaluates the objective on one batch and
/// differentiates it; `mc_train_samples` draws are averaged.
pub fn batch_gradients(
    net: &SegNet,
    x: &Grid,
    y: &Grid,
    cfg: &TrainConfig,
    loss: &LossSettings,
    w: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<BatchOutcome> {
    let tape = Tape::new();
    let k = cfg.mc_train_samples.max(1);
    let bayes = net.config().bayesian_weights;
    let n_images = x.shape()[0] as f64;
    let mut passes = Vec::with_capacity(k);
    let mut objective: Option<Var<'_>> = None;
    let (mut seg_sum, mut klw_sum, mut kll_sum) = (0.0, 0.0, 0.0);
    for _ in 0..k {
        let out = net.forward(&tape, x, ForwardMode::Stochastic, rng)?;
        let seg = combined_seg_loss(out.mu_logit, y, w)?;
        let nll = if loss.use_nll {
            heteroscedastic_nll(
                out.mu_logit,
                out.log_var_logit,
                y,
                loss.n_logit_samples,
                rng,
            )?
        } else {
            seg
        };
        let mut net_kl = tape.scalar(0.0);
        if bayes {
            for (p, h) in net.params().iter().zip(&out.params) {
                let lv = h.log_var.expect("bayesian parameters carry log-variances");
                let kl = kl_on_tape(h.mean, lv, p.posterior.prior_mean, p.posterior.prior_var)?;
                net_kl = net_kl.add(kl)?;
            }
        }
        let latent_kl = kl_on_tape(out.z_mean, out.z_log_var, 0.0, 1.0)?.scale(1.0 / n_images)?;
        let obj = total_objective(net_kl, latent_kl, seg, nll, w, loss.use_nll)?;
        seg_sum += seg.item();
        klw_sum += net_kl.item();
        kll_sum += latent_kl.item();
        objective = Some(match objective {
            Some(acc) => acc.add(obj)?,
            None => obj,
        });
        passes.push(out.params);
    }
    let objective = objective.expect("k ≥ 1").scale(1.0 / k as f64)?;
    let grads = tape.backward(objective)?;
    let mut out = Vec::with_capacity(net.params().len());
    for i in 0..net.params().len() {
        let mut gm = grads.wrt(passes[0][i].mean)?;
        let mut gl = match passes[0][i].log_var {
            Some(v) => Some(grads.wrt(v)?),
            None => None,
        };
        for pass in &passes[1..] {
            gm.add_assign(&grads.wrt(pass[i].mean)?);
            if let (Some(acc), Some(v)) = (gl.as_mut(), pass[i].log_var) {
                acc.add_assign(&grads.wrt(v)?);
            }
        }
        out.push((gm, gl));
    }
    let kf = k as f64;
    Ok(BatchOutcome {
        objective: objective.item(),
        seg_loss: seg_sum / kf,
        kl_weights: klw_sum / kf,
        kl_latent: kll_sum / kf,
        grads: out,
    })
}

/// Applies one optimizer update to every posterior mean (and log-variance
/// when variances are learned).
pub fn optimizer_step(
    net: &mut SegNet,
    grads: &[(Grid, Option<Grid>)],
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<()> {
    let lr = state.lr();
    let mut slots = Vec::with_capacity(2 * grads.len());
    for (p, (gm, gl)) in net.params_mut().iter_mut().zip(grads) {
        let scale = if p.name.starts_with("latent.") {
            cfg.latent_lr_multiplier
        } else {
            1.0
        };
        let post = &mut p.posterior;
        slots.push(ParamSlot {
            value: &mut post.mean,
            grad: gm,
            lr_scale: scale,
            decay: true,
        });
        if let Some(gl) = gl {
            slots.push(ParamSlot {
                value: &mut post.log_var,
                grad: gl,
                lr_scale: scale,
                decay: false,
            });
        }
    }
    state.optimizer.step(&mut slots, lr)
}

/// One shuffled pass over `data` with one update per minibatch.
pub fn train_epoch(
    net: &mut SegNet,
    data: &[Sample],
    cfg: &TrainConfig,
    loss: &LossSettings,
    weights: &LossWeights,
    state: &mut TrainState,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    let mut sums = [0.0; 4];
    let mut batches = 0;
    for idx in order.chunks(cfg.batch_size) {
        let refs: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        let (x, y) = batch_of(&refs)?;
        let outcome = batch_gradients(net, &x, &y, cfg, loss, weights, &mut state.rng).map_err(
            |e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss {
                    epoch: state.epoch,
                    step: state.step,
                },
                other => other,
            },
        )?;
        if !outcome.objective.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch,
                step: state.step,
            });
        }
        optimizer_step(net, &outcome.grads, cfg, state)?;
        state.step += 1;
        batches += 1;
        sums[0] += outcome.objective;
        sums[1] += outcome.seg_loss;
        sums[2] += outcome.kl_weights;
        sums[3] += outcome.kl_latent;
    }
    let b = batches as f64;
    state.epoch += 1;
    Ok(EpochStats {
        train_loss: sums[0] / b,
        seg_loss: sums[1] / b,
        kl_weights: sums[2] / b,
        kl_latent: sums[3] / b,
    })
}

/// Full training run state: configuration, resolved loss weights and
/// the train/validation split.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub loss: LossSettings,
    pub weights: LossWeights,
    pub state: TrainState,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Trainer {
    /// Splits `data` 80/20 and resolves the KL weights for the training part.
    pub fn new(cfg: TrainConfig, loss: LossSettings, data: &[Sample]) -> Result<Self> {
        cfg.validate()?;
        let first = data.first().ok_or(Error::EmptySet)?;
        let (train, val) = split_train_val(data, cfg.seed);
        let weights = loss.resolve(train.len(), first.image.len());
        weights.validate()?;
        Ok(Trainer {
            state: TrainState::new(&cfg),
            cfg,
            loss,
            weights,
            train,
            val,
        })
    }

    /// Trains one epoch, measures the validation data term (on the training
    /// set when the validation split is empty) and steps the scheduler.
    pub fn run_epoch(&mut self, net: &mut SegNet) -> Result<EpochMetrics> {
        let lr = self.state.lr();
        let stats = train_epoch(
            net,
            &self.train,
            &self.cfg,
            &self.loss,
            &self.weights,
            &mut self.state,
        )?;
        let eval_set = if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        };
        let val_loss = evaluate_data_term(
            net,
            eval_set,
            self.cfg.batch_size,
            &self.loss,
            &self.weights,
        )?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.state.epoch,
                step: self.state.step,
            });
        }
        self.state.scheduler.step(val_loss);
        Ok(EpochMetrics {
            epoch: self.state.epoch,
            train_loss: stats.train_loss,
            val_loss,
            seg_loss: stats.seg_loss,
            kl_weights: stats.kl_weights,
            kl_latent: stats.kl_latent,
            lr,
        })
    }

    /// Runs `cfg.max_epochs` epochs, reporting each row to `on_epoch`.
    pub fn fit(
        &mut self,
        net: &mut SegNet,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let mut rows = Vec::with_capacity(self.cfg.max_epochs);
        for _ in 0..self.cfg.max_epochs {
            let m = self.run_epoch(net)?;
            on_epoch(&m);
            rows.push(m);
        }
        Ok(rows)
    }
}
