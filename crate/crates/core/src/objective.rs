//! Segmentation losses and the variational training objective.
//!
//! Pixel losses use mean reduction, so the Dice/BCE mix and the KL weights
//! do not depend on image resolution.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub kl_weight_weights: f64,
    pub kl_weight_latent: f64,
}

impl Default for LossWeights {
    /// 0.9 Dice + 0.1 BCE with KL terms switched off; the trainer fills in
    /// dataset-dependent KL weights.
    fn default() -> Self {
        LossWeights {
            dice_weight: 0.9,
            ce_weight: 0.1,
            kl_weight_weights: 0.0,
            kl_weight_latent: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.dice_weight,
            self.ce_weight,
            self.kl_weight_weights,
            self.kl_weight_latent,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and ≥ 0".into()));
        }
        if self.dice_weight + self.ce_weight <= 0.0 {
            return Err(Error::Config("dice_weight + ce_weight must be > 0".into()));
        }
        Ok(())
    }
}

fn check_target(target: &Grid, like: &[usize]) -> Result<()> {
    if target.shape() != like {
        return Err(Error::shape(
            "loss",
            format!("prediction {like:?} vs target {:?}", target.shape()),
        ));
    }
    if !target.is_binary() {
        return Err(Error::TargetNotBinary);
    }
    Ok(())
}

/// Shape that keeps the leading (batch) axis and collapses the rest.
fn per_image_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() < 2 {
        return vec![1; shape.len()];
    }
    let mut s = vec![1; shape.len()];
    s[0] = shape[0];
    s
}

/// Mean pixelwise binary cross-entropy, evaluated from logits as
/// `softplus(z) - y·z`.
pub fn bce_loss<'t>(logits: Var<'t>, target: &Grid) -> Result<Var<'t>> {
    check_target(target, &logits.shape())?;
    let y = logits.tape().leaf(target.clone());
    logits.softplus()?.sub(logits.mul(y)?)?.mean()
}

/// Mean binary cross-entropy of explicit probabilities (no gradient).
pub fn bce_prob(pred_prob: &Grid, target: &Grid) -> Result<f64> {
    check_target(target, pred_prob.shape())?;
    let total: f64 = pred_prob
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| if y == 1.0 { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    Ok(total / pred_prob.len() as f64)
}

/// Soft Dice loss `1 - (2·TP + s) / (2·TP + FP + FN + s)` per image, with
/// `TP = Σŷy`, `FP = Σŷ(1-y)`, `FN = Σ(1-ŷ)y`, averaged over the batch axis.
pub fn dice_loss<'t>(prob: Var<'t>, target: &Grid, smooth: f64) -> Result<Var<'t>> {
    let shape = prob.shape();
    check_target(target, &shape)?;
    let tape = prob.tape();
    let per = per_image_shape(&shape);
    let y = tape.leaf(target.clone());
    let tp = prob.mul(y)?.sum_to(&per)?;
    // 2TP + FP + FN = Σŷ + Σy
    let y_sum = tape.leaf(crate::autodiff::kernels::sum_to(target, &per)?);
    let denom = prob.sum_to(&per)?.add(y_sum)?.add_scalar(smooth)?;
    let ratio = tp.scale(2.0)?.add_scalar(smooth)?.div(denom)?;
    ratio.mean()?.neg()?.add_scalar(1.0)
}

/// `dice_weight · dice(sigmoid(μ̂)) + ce_weight · bce(μ̂)`.
pub fn combined_seg_loss<'t>(mu_logit: Var<'t>, target: &Grid, w: &LossWeights) -> Result<Var<'t>> {
    let dice = dice_loss(mu_logit.sigmoid()?, target, 1.0)?;
    let bce = bce_loss(mu_logit, target)?;
    dice.scale(w.dice_weight)?.add(bce.scale(w.ce_weight)?)
}

/// Negative log-likelihood under Gaussian logit noise.
///
/// Draws `n_logit_samples` corrupted logits `μ̂ + σ̃·ε`, averages the
/// likelihood of the target over the draws, and returns the pixel mean of
/// `-log` of that average. Noise on a confidently wrong pixel raises the
/// averaged likelihood, so the variance head learns to absorb it.
pub fn heteroscedastic_nll<'t, R: Rng + ?Sized>(
    mu_logit: Var<'t>,
    log_var_logit: Var<'t>,
    target: &Grid,
    n_logit_samples: usize,
    rng: &mut R,
) -> Result<Var<'t>> {
    let shape = mu_logit.shape();
    check_target(target, &shape)?;
    if log_var_logit.shape() != shape {
        return Err(Error::shape(
            "heteroscedastic_nll",
            format!("mean {shape:?} vs log-variance {:?}", log_var_logit.shape()),
        ));
    }
    let tape = mu_logit.tape();
    let t = n_logit_samples.max(1);
    // log p(y | z) = -softplus(-s·z) with s = 2y - 1
    let sign = tape.leaf(target.map(|y| 2.0 * y - 1.0));
    let std = log_var_logit.scale(0.5)?.exp()?;
    let mut log_liks = Vec::with_capacity(t);
    for _ in 0..t {
        let eps = tape.leaf(Grid::randn(&shape, rng));
        let z = mu_logit.add(std.mul(eps)?)?;
        log_liks.push(z.mul(sign)?.neg()?.softplus()?.neg()?);
    }
    // log-mean-exp with a constant shift; the shift's gradient cancels exactly
    let mut peak = log_liks[0].value().clone();
    for l in &log_liks[1..] {
        peak = peak.zip_map(&l.value(), f64::max)?;
    }
    let peak = tape.leaf(peak);
    let mut acc: Option<Var<'t>> = None;
    for l in log_liks {
        let e = l.sub(peak)?.exp()?;
        acc = Some(match acc {
            Some(a) => a.add(e)?,
            None => e,
        });
    }
    let acc = acc.expect("at least one sample");
    acc.scale(1.0 / t as f64)?.log()?.add(peak)?.mean()?.neg()
}

/// Data term plus weighted KL terms: the negated evidence lower bound.
pub fn total_objective<'t>(
    net_kls: Var<'t>,
    latent_kl: Var<'t>,
    seg_loss: Var<'t>,
    nll: Var<'t>,
    w: &LossWeights,
    use_nll: bool,
) -> Result<Var<'t>> {
    let data = if use_nll { nll } else { seg_loss };
    let out = data
        .add(net_kls.scale(w.kl_weight_weights)?)?
        .add(latent_kl.scale(w.kl_weight_latent)?)?;
    if !out.value().all_finite() {
        return Err(Error::NonFinite("total_objective"));
    }
    Ok(out)
}
