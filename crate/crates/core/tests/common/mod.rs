//! Independent reference implementations shared by the integration tests.
//! Nothing here calls the library code it is used to check.
#![allow(dead_code)]

use bayeseg::autodiff::{ConvGeom, Tape, Var};
use bayeseg::objective::{
    bce_loss, combined_seg_loss, dice_loss, heteroscedastic_nll, total_objective, LossWeights,
};
use bayeseg::variational::{kl_on_tape, sample_on_tape};
use bayeseg::{Grid, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_grid(shape: &[usize], rng: &mut ChaCha8Rng) -> Grid {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Grid::new(shape, v).unwrap()
}

pub fn positive_grid(shape: &[usize], rng: &mut ChaCha8Rng) -> Grid {
    let n = shape.iter().product();
    Grid::new(shape, (0..n).map(|_| rng.random_range(0.5..2.5)).collect()).unwrap()
}

pub fn binary_grid(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Grid {
    let n = shape.iter().product();
    Grid::new(
        shape,
        (0..n)
            .map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap()
}

/// Central-difference gradient of `f` with respect to every element of
/// every input.
pub fn numeric_gradients(f: &dyn Fn(&[Grid]) -> f64, inputs: &[Grid]) -> Vec<Vec<f64>> {
    let mut probe = inputs.to_vec();
    inputs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            (0..g.len())
                .map(|j| {
                    let x = inputs[i].data()[j];
                    probe[i].data_mut()[j] = x + FD_STEP;
                    let up = f(&probe);
                    probe[i].data_mut()[j] = x - FD_STEP;
                    let down = f(&probe);
                    probe[i].data_mut()[j] = x;
                    (up - down) / (2.0 * FD_STEP)
                })
                .collect()
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, floor)`: relative error for ordinary
/// gradients, absolute error scaled by `1 / floor` for near-zero ones where
/// finite differences carry no relative precision.
pub fn worst_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&a, &n) in a.iter().zip(n) {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
        }
    }
    worst
}

pub type Builder = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

/// A differentiable function of random inputs, reduced to a scalar by a
/// fixed random contraction.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Grid>,
    pub build: Builder,
}

impl GradCase {
    fn value(&self, inputs: &[Grid]) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|g| tape.leaf(g.clone())).collect();
        (self.build)(&tape, &vars).unwrap().item()
    }

    /// Worst relative error of the tape gradient against central differences.
    pub fn check(&self) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = self.inputs.iter().map(|g| tape.leaf(g.clone())).collect();
        let loss = (self.build)(&tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| grads.wrt(*v).unwrap().into_data())
            .collect();
        let numeric = numeric_gradients(&|x| self.value(x), &self.inputs);
        worst_relative_error(&analytic, &numeric, 1e-3)
    }
}

fn contract<'t>(tape: &'t Tape, out: Var<'t>, weights: &Grid) -> Result<Var<'t>> {
    if out.shape().iter().product::<usize>() == 1 {
        return out.sum();
    }
    out.mul(tape.leaf(weights.reshape(&out.shape())?))?.sum()
}

macro_rules! case {
    ($name:expr, $inputs:expr, $out_len:expr, $rng:expr, |$tape:ident, $v:ident| $body:expr) => {{
        let weights = normal_grid(&[$out_len], $rng);
        GradCase {
            name: $name,
            inputs: $inputs,
            build: Box::new(move |$tape, $v| {
                let out = $body?;
                contract($tape, out, &weights)
            }),
        }
    }};
}

/// One random instance of every primitive and loss under test.
pub fn all_cases(seed: u64) -> Vec<GradCase> {
    let r = &mut rng(seed);
    let same = ConvGeom { stride: 1, pad: 1 };
    let down = ConvGeom { stride: 2, pad: 0 };
    let target = binary_grid(&[2, 1, 3, 3], 0.4, r);
    let small_target = binary_grid(&[1, 1, 2, 2], 0.5, r);
    let noise_seed: u64 = r.random();
    let eps = normal_grid(&[5], r);
    let (t1, t2, t3, t4) = (
        target.clone(),
        target.clone(),
        target.clone(),
        small_target.clone(),
    );
    vec![
        case!(
            "add",
            vec![normal_grid(&[2, 3], r), normal_grid(&[3], r)],
            6,
            r,
            |_t, v| v[0].add(v[1])
        ),
        case!(
            "sub",
            vec![normal_grid(&[2, 3], r), normal_grid(&[2, 1], r)],
            6,
            r,
            |_t, v| v[0].sub(v[1])
        ),
        case!(
            "mul",
            vec![normal_grid(&[2, 1, 4], r), normal_grid(&[3, 1], r)],
            24,
            r,
            |_t, v| v[0].mul(v[1])
        ),
        case!(
            "div",
            vec![normal_grid(&[5], r), positive_grid(&[5], r)],
            5,
            r,
            |_t, v| v[0].div(v[1])
        ),
        case!("neg", vec![normal_grid(&[4], r)], 4, r, |_t, v| v[0].neg()),
        case!("scale", vec![normal_grid(&[4], r)], 4, r, |_t, v| v[0]
            .scale(2.5)),
        case!("add_scalar", vec![normal_grid(&[4], r)], 4, r, |_t, v| v[0]
            .add_scalar(-0.7)),
        case!("exp", vec![normal_grid(&[6], r)], 6, r, |_t, v| v[0].exp()),
        case!("log", vec![positive_grid(&[6], r)], 6, r, |_t, v| v[0]
            .log()),
        case!("sigmoid", vec![normal_grid(&[6], r)], 6, r, |_t, v| v[0]
            .sigmoid()),
        case!("relu", vec![normal_grid(&[6], r)], 6, r, |_t, v| v[0]
            .relu()),
        case!("softplus", vec![normal_grid(&[6], r)], 6, r, |_t, v| v[0]
            .softplus()),
        case!("sum", vec![normal_grid(&[2, 3], r)], 1, r, |_t, v| v[0]
            .sum()),
        case!("mean", vec![normal_grid(&[2, 3], r)], 1, r, |_t, v| v[0]
            .mean()),
        case!(
            "broadcast_to",
            vec![normal_grid(&[3, 1], r)],
            24,
            r,
            |_t, v| v[0].broadcast_to(&[2, 3, 4])
        ),
        case!("sum_to", vec![normal_grid(&[2, 3, 4], r)], 3, r, |_t, v| v
            [0]
        .sum_to(&[3, 1])),
        case!("reshape", vec![normal_grid(&[2, 6], r)], 12, r, |_t, v| v
            [0]
        .reshape(&[4, 3])),
        case!(
            "conv2d",
            vec![normal_grid(&[2, 3, 5, 5], r), normal_grid(&[4, 3, 3, 3], r)],
            200,
            r,
            |_t, v| v[0].conv2d(v[1], same)
        ),
        case!(
            "conv2d stride 2",
            vec![normal_grid(&[1, 2, 6, 6], r), normal_grid(&[3, 2, 2, 2], r)],
            27,
            r,
            |_t, v| v[0].conv2d(v[1], down)
        ),
        case!(
            "conv_transpose2d",
            vec![normal_grid(&[2, 3, 3, 3], r), normal_grid(&[3, 2, 2, 2], r)],
            144,
            r,
            |_t, v| v[0].conv_transpose2d(v[1], down)
        ),
        case!(
            "maxpool2x2",
            vec![normal_grid(&[2, 2, 4, 6], r)],
            24,
            r,
            |_t, v| v[0].maxpool2x2()
        ),
        case!(
            "upsample2x",
            vec![normal_grid(&[1, 2, 3, 2], r)],
            48,
            r,
            |_t, v| v[0].upsample2x()
        ),
        case!(
            "concat_channels",
            vec![normal_grid(&[2, 1, 3, 3], r), normal_grid(&[2, 2, 3, 3], r)],
            54,
            r,
            |_t, v| v[0].concat_channels(v[1])
        ),
        case!(
            "affine",
            vec![
                normal_grid(&[3, 4], r),
                normal_grid(&[2, 4], r),
                normal_grid(&[2], r)
            ],
            6,
            r,
            |_t, v| v[0].affine(v[1], v[2])
        ),
        case!(
            "add_channel_bias",
            vec![normal_grid(&[2, 3, 2, 2], r), normal_grid(&[3], r)],
            24,
            r,
            |_t, v| v[0].add_channel_bias(v[1])
        ),
        case!(
            "bce_loss",
            vec![normal_grid(&[2, 1, 3, 3], r)],
            1,
            r,
            |_t, v| bce_loss(v[0], &t1)
        ),
        case!(
            "dice_loss",
            vec![normal_grid(&[2, 1, 3, 3], r)],
            1,
            r,
            |_t, v| dice_loss(v[0].sigmoid()?, &t2, 1.0)
        ),
        case!(
            "combined_seg_loss",
            vec![normal_grid(&[2, 1, 3, 3], r)],
            1,
            r,
            |_t, v| combined_seg_loss(v[0], &t3, &LossWeights::default())
        ),
        case!(
            "heteroscedastic_nll",
            vec![normal_grid(&[2, 1, 3, 3], r), normal_grid(&[2, 1, 3, 3], r)],
            1,
            r,
            |_t, v| heteroscedastic_nll(v[0], v[1], &target, 10, &mut rng(noise_seed))
        ),
        case!(
            "total_objective",
            vec![
                normal_grid(&[3], r),
                normal_grid(&[3], r),
                normal_grid(&[1, 1, 2, 2], r),
                normal_grid(&[1, 1, 2, 2], r)
            ],
            1,
            r,
            |_t, v| {
                let w = LossWeights {
                    kl_weight_weights: 0.25,
                    kl_weight_latent: 0.5,
                    ..LossWeights::default()
                };
                let kl_w = kl_on_tape(v[0], v[1], 0.0, 1.0)?;
                let kl_z = kl_on_tape(v[1], v[0], 0.0, 1.0)?;
                let seg = combined_seg_loss(v[2], &t4, &w)?;
                let nll = heteroscedastic_nll(v[2], v[3], &t4, 3, &mut rng(noise_seed))?;
                total_objective(kl_w, kl_z, seg, nll, &w, true)
            }
        ),
        case!(
            "kl_on_tape",
            vec![normal_grid(&[5], r), normal_grid(&[5], r)],
            1,
            r,
            |_t, v| kl_on_tape(v[0], v[1], -0.3, 2.0)
        ),
        case!(
            "sample_on_tape",
            vec![normal_grid(&[5], r), normal_grid(&[5], r)],
            5,
            r,
            |_t, v| sample_on_tape(v[0], v[1], &eps)
        ),
    ]
}

/// Direct pixel count: `(dsc, iou)` with both-empty scoring 1.
pub fn brute_force_scores(pred: &[f64], truth: &[f64]) -> (f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for i in 0..pred.len() {
        if pred[i] == 1.0 && truth[i] == 1.0 {
            tp += 1;
        } else if pred[i] == 1.0 {
            fp += 1;
        } else if truth[i] == 1.0 {
            fneg += 1;
        }
    }
    if tp + fp + fneg == 0 {
        return (1.0, 1.0);
    }
    (
        (2 * tp) as f64 / (2 * tp + fp + fneg) as f64,
        tp as f64 / (tp + fp + fneg) as f64,
    )
}

/// Monte-Carlo `E_q[log q − log p]` for a scalar Gaussian against `N(0, 1)`,
/// computed from full Gaussian log-densities.
pub fn kl_monte_carlo_oracle(mean: f64, log_var: f64, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let sd = (0.5 * log_var).exp();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut acc = 0.0;
    for _ in 0..n {
        let e: f64 = StandardNormal.sample(rng);
        let w = mean + sd * e;
        let log_q = -0.5 * (ln2pi + log_var + ((w - mean) / sd).powi(2));
        let log_p = -0.5 * (ln2pi + w * w);
        acc += log_q - log_p;
    }
    acc / n as f64
}

/// Pixels whose 4-neighbourhood contains the other class.
pub fn boundary_pixels(mask: &Grid) -> Vec<bool> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let m = mask.data();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = m[y * w + x];
            let mut differs = false;
            if y > 0 && m[(y - 1) * w + x] != c {
                differs = true;
            }
            if y + 1 < h && m[(y + 1) * w + x] != c {
                differs = true;
            }
            if x > 0 && m[y * w + x - 1] != c {
                differs = true;
            }
            if x + 1 < w && m[y * w + x + 1] != c {
                differs = true;
            }
            out[y * w + x] = differs;
        }
    }
    out
}
