//! Built-in invariant suite: finite-difference gradient checks for every
//! primitive and loss, the Monte-Carlo KL cross-check, the variance
//! decomposition identity and a brute-force metric comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::error::Result;
use crate::grid::Grid;
use crate::metrics::{confusion, dsc, iou};
use crate::objective::{
    bce_loss, combined_seg_loss, dice_loss, heteroscedastic_nll, total_objective, LossWeights,
};
use crate::uncertainty::{decompose, PredictiveSample};
use crate::variational::{kl_on_tape, sample_on_tape, GaussianVariational};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy)]
enum Domain {
    Any,
    Positive,
}

/// Constants shared by the inputs of one random case.
pub struct Aux {
    pub target: Grid,
    pub noise_seed: u64,
}

type Build = for<'t> fn(&[Var<'t>], &Aux) -> Result<Var<'t>>;

struct GradCase {
    name: &'static str,
    inputs: &'static [(&'static [usize], Domain)],
    /// Shape of the binary target handed to losses (empty if unused).
    target: &'static [usize],
    build: Build,
}

const SAME: ConvGeom = ConvGeom { stride: 1, pad: 1 };
const DOWN: ConvGeom = ConvGeom { stride: 2, pad: 0 };

use Domain::{Any, Positive};

fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add (broadcast)",
            inputs: &[(&[2, 3], Any), (&[3], Any)],
            target: &[],
            build: |v, _| v[0].add(v[1]),
        },
        GradCase {
            name: "sub",
            inputs: &[(&[2, 3], Any), (&[2, 3], Any)],
            target: &[],
            build: |v, _| v[0].sub(v[1]),
        },
        GradCase {
            name: "mul (broadcast)",
            inputs: &[(&[2, 1, 4], Any), (&[3, 1], Any)],
            target: &[],
            build: |v, _| v[0].mul(v[1]),
        },
        GradCase {
            name: "div",
            inputs: &[(&[5], Any), (&[5], Positive)],
            target: &[],
            build: |v, _| v[0].div(v[1]),
        },
        GradCase {
            name: "neg",
            inputs: &[(&[4], Any)],
            target: &[],
            build: |v, _| v[0].neg(),
        },
        GradCase {
            name: "scale",
            inputs: &[(&[4], Any)],
            target: &[],
            build: |v, _| v[0].scale(-1.7),
        },
        GradCase {
            name: "add_scalar",
            inputs: &[(&[4], Any)],
            target: &[],
            build: |v, _| v[0].add_scalar(0.3),
        },
        GradCase {
            name: "exp",
            inputs: &[(&[6], Any)],
            target: &[],
            build: |v, _| v[0].exp(),
        },
        GradCase {
            name: "log",
            inputs: &[(&[6], Positive)],
            target: &[],
            build: |v, _| v[0].log(),
        },
        GradCase {
            name: "sigmoid",
            inputs: &[(&[6], Any)],
            target: &[],
            build: |v, _| v[0].sigmoid(),
        },
        GradCase {
            name: "relu",
            inputs: &[(&[6], Any)],
            target: &[],
            build: |v, _| v[0].relu(),
        },
        GradCase {
            name: "softplus",
            inputs: &[(&[6], Any)],
            target: &[],
            build: |v, _| v[0].softplus(),
        },
        GradCase {
            name: "sum",
            inputs: &[(&[2, 3], Any)],
            target: &[],
            build: |v, _| v[0].sum(),
        },
        GradCase {
            name: "mean",
            inputs: &[(&[2, 3], Any)],
            target: &[],
            build: |v, _| v[0].mean(),
        },
        GradCase {
            name: "broadcast_to",
            inputs: &[(&[3, 1], Any)],
            target: &[],
            build: |v, _| v[0].broadcast_to(&[2, 3, 4]),
        },
        GradCase {
            name: "sum_to",
            inputs: &[(&[2, 3, 4], Any)],
            target: &[],
            build: |v, _| v[0].sum_to(&[3, 1]),
        },
        GradCase {
            name: "reshape",
            inputs: &[(&[2, 6], Any)],
            target: &[],
            build: |v, _| v[0].reshape(&[3, 4]),
        },
        GradCase {
            name: "conv2d same",
            inputs: &[(&[2, 3, 5, 5], Any), (&[4, 3, 3, 3], Any)],
            target: &[],
            build: |v, _| v[0].conv2d(v[1], SAME),
        },
        GradCase {
            name: "conv2d stride 2",
            inputs: &[(&[1, 2, 6, 6], Any), (&[3, 2, 2, 2], Any)],
            target: &[],
            build: |v, _| v[0].conv2d(v[1], DOWN),
        },
        GradCase {
            name: "conv_transpose2d",
            inputs: &[(&[2, 3, 3, 3], Any), (&[3, 2, 2, 2], Any)],
            target: &[],
            build: |v, _| v[0].conv_transpose2d(v[1], DOWN),
        },
        GradCase {
            name: "maxpool2x2",
            inputs: &[(&[2, 2, 4, 6], Any)],
            target: &[],
            build: |v, _| v[0].maxpool2x2(),
        },
        GradCase {
            name: "upsample2x",
            inputs: &[(&[1, 2, 3, 2], Any)],
            target: &[],
            build: |v, _| v[0].upsample2x(),
        },
        GradCase {
            name: "concat_channels",
            inputs: &[(&[2, 1, 3, 3], Any), (&[2, 2, 3, 3], Any)],
            target: &[],
            build: |v, _| v[0].concat_channels(v[1]),
        },
        GradCase {
            name: "affine",
            inputs: &[(&[3, 4], Any), (&[2, 4], Any), (&[2], Any)],
            target: &[],
            build: |v, _| v[0].affine(v[1], v[2]),
        },
        GradCase {
            name: "add_channel_bias",
            inputs: &[(&[2, 3, 2, 2], Any), (&[3], Any)],
            target: &[],
            build: |v, _| v[0].add_channel_bias(v[1]),
        },
        GradCase {
            name: "bce_loss",
            inputs: &[(&[2, 1, 3, 3], Any)],
            target: &[2, 1, 3, 3],
            build: |v, a| bce_loss(v[0], &a.target),
        },
        GradCase {
            name: "dice_loss",
            inputs: &[(&[2, 1, 3, 3], Any)],
            target: &[2, 1, 3, 3],
            build: |v, a| dice_loss(v[0].sigmoid()?, &a.target, 1.0),
        },
        GradCase {
            name: "combined_seg_loss",
            inputs: &[(&[2, 1, 3, 3], Any)],
            target: &[2, 1, 3, 3],
            build: |v, a| combined_seg_loss(v[0], &a.target, &LossWeights::default()),
        },
        GradCase {
            name: "heteroscedastic_nll",
            inputs: &[(&[2, 1, 3, 3], Any), (&[2, 1, 3, 3], Any)],
            target: &[2, 1, 3, 3],
            build: |v, a| {
                let mut rng = ChaCha8Rng::seed_from_u64(a.noise_seed);
                heteroscedastic_nll(v[0], v[1], &a.target, 10, &mut rng)
            },
        },
        GradCase {
            name: "total_objective",
            inputs: &[
                (&[3], Any),
                (&[3], Any),
                (&[1, 1, 2, 2], Any),
                (&[1, 1, 2, 2], Any),
            ],
            target: &[1, 1, 2, 2],
            build: |v, a| {
                let w = LossWeights {
                    kl_weight_weights: 0.3,
                    kl_weight_latent: 0.7,
                    ..LossWeights::default()
                };
                let kl_w = kl_on_tape(v[0], v[1], 0.0, 1.0)?;
                let kl_z = kl_on_tape(v[1], v[0], 0.0, 1.0)?;
                let seg = combined_seg_loss(v[2], &a.target, &w)?;
                let mut rng = ChaCha8Rng::seed_from_u64(a.noise_seed);
                let nll = heteroscedastic_nll(v[2], v[3], &a.target, 4, &mut rng)?;
                total_objective(kl_w, kl_z, seg, nll, &w, true)
            },
        },
        GradCase {
            name: "kl_on_tape",
            inputs: &[(&[5], Any), (&[5], Any)],
            target: &[],
            build: |v, _| kl_on_tape(v[0], v[1], 0.2, 1.5),
        },
        GradCase {
            name: "sample_on_tape",
            inputs: &[(&[5], Any), (&[5], Any)],
            target: &[],
            build: |v, a| {
                let mut rng = ChaCha8Rng::seed_from_u64(a.noise_seed);
                sample_on_tape(v[0], v[1], &Grid::randn(&[5], &mut rng))
            },
        },
    ]
}

fn draw(shape: &[usize], domain: Domain, rng: &mut ChaCha8Rng) -> Grid {
    match domain {
        Any => Grid::randn(shape, rng),
        Positive => Grid::uniform(shape, 0.5, 2.5, rng),
    }
}

/// Evaluates `build` contracted with a fixed random weighting so every
/// output element contributes to a scalar.
fn contracted<'t>(
    tape: &'t Tape,
    case: &GradCase,
    vars: &[Var<'t>],
    aux: &Aux,
    seed: u64,
) -> Result<Var<'t>> {
    let out = (case.build)(vars, aux)?;
    if out.shape().iter().product::<usize>() == 1 {
        return out.sum();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let r = tape.leaf(Grid::randn(&out.shape(), &mut rng));
    out.mul(r)?.sum()
}

/// Worst normalised error of one random case: `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
fn grad_case_error(case: &GradCase, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Grid> = case
        .inputs
        .iter()
        .map(|&(s, d)| draw(s, d, &mut rng))
        .collect();
    let aux = Aux {
        target: if case.target.is_empty() {
            Grid::scalar(0.0)
        } else {
            Grid::from_fn(
                case.target,
                |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 },
            )
        },
        noise_seed: rng.random(),
    };
    let eval = |vals: &[Grid]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = vals.iter().map(|g| tape.leaf(g.clone())).collect();
        Ok(contracted(&tape, case, &vars, &aux, seed)?.item())
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|g| tape.leaf(g.clone())).collect();
    let loss = contracted(&tape, case, &vars, &aux, seed)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var)?;
        for j in 0..inputs[i].len() {
            let mut probe = inputs.clone();
            let x = probe[i].data()[j];
            probe[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let scale = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

/// Finite-difference check of every primitive and loss over `seeds`
/// random cases each.
pub fn gradient_checks(seeds: u64) -> Vec<CheckResult> {
    cases()
        .iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            let mut failure = None;
            for seed in 0..seeds {
                match grad_case_error(case, seed) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => {
                        failure = Some(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            CheckResult {
                name: format!("gradient: {}", case.name),
                passed: failure.is_none() && worst <= REL_TOL,
                detail: failure
                    .unwrap_or_else(|| format!("max rel err {worst:.2e} over {seeds} cases")),
            }
        })
        .collect()
}

/// Closed-form KL against a Monte-Carlo estimate on random Gaussians.
pub fn kl_oracle(n_gaussians: usize, n_samples: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_gaussians {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mean = Grid::scalar(sign * rng.random_range(0.5..2.0));
        let log_var = Grid::scalar(rng.random_range(-2.0..1.0));
        let q = GaussianVariational::new(mean, log_var).expect("matching shapes");
        let exact = q.kl_to_prior();
        let mc = q.kl_monte_carlo(n_samples, &mut rng).value;
        worst = worst.max((mc - exact).abs() / exact);
    }
    let at_prior = GaussianVariational::new(Grid::zeros(&[3]), Grid::zeros(&[3]))
        .expect("matching shapes")
        .kl_to_prior();
    let unit_shift = GaussianVariational::new(Grid::scalar(1.0), Grid::scalar(0.0))
        .expect("matching shapes")
        .kl_to_prior();
    CheckResult {
        name: "KL closed form vs Monte Carlo".into(),
        passed: worst <= 0.01 && at_prior == 0.0 && unit_shift == 0.5,
        detail: format!("max rel diff {worst:.2e}; KL at prior {at_prior}; KL(μ=1) {unit_shift}"),
    }
}

/// `total = aleatoric + epistemic`, single-sample epistemic zero and the
/// two-sample hand case.
pub fn decomposition_identity(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut single_ok = true;
    for m in [1usize, 2, 5, 20] {
        let samples: Vec<PredictiveSample> = (0..m)
            .map(|_| PredictiveSample {
                mu_hat: Grid::uniform(&[4, 4], 0.0, 1.0, &mut rng),
                var_tilde: Grid::uniform(&[4, 4], 0.0, 0.25, &mut rng),
            })
            .collect();
        let r = match decompose(&samples) {
            Ok(r) => r,
            Err(e) => {
                return CheckResult {
                    name: "variance decomposition".into(),
                    passed: false,
                    detail: e.to_string(),
                }
            }
        };
        for j in 0..r.total_var.len() {
            let sum = r.aleatoric.data()[j] + r.epistemic.data()[j];
            worst = worst.max((r.total_var.data()[j] - sum).abs());
        }
        if m == 1 {
            single_ok = r.epistemic.data().iter().all(|&e| e == 0.0);
        }
    }
    let pair = [(0.2, 0.01), (0.4, 0.01)].map(|(mu, var)| PredictiveSample {
        mu_hat: Grid::scalar(mu),
        var_tilde: Grid::scalar(var),
    });
    let hand = decompose(&pair).expect("two well-formed samples");
    let hand_err = (hand.mean_prob.item() - 0.3)
        .abs()
        .max((hand.aleatoric.item() - 0.01).abs())
        .max((hand.epistemic.item() - 0.01).abs());
    CheckResult {
        name: "variance decomposition".into(),
        passed: worst <= 1e-12 && single_ok && hand_err <= 1e-15,
        detail: format!("identity err {worst:.1e}; M=1 epistemic zero: {single_ok}; hand case err {hand_err:.1e}"),
    }
}

/// Overlap metrics against a direct count on random mask pairs.
pub fn metric_oracle(pairs: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut identity_err: f64 = 0.0;
    for _ in 0..pairs {
        let n = rng.random_range(1..64);
        let p_fg = rng.random_range(0.0..1.0);
        let mut bern = |_| if rng.random_bool(p_fg) { 1.0 } else { 0.0 };
        let pred = Grid::from_fn(&[n], &mut bern);
        let truth = Grid::from_fn(&[n], &mut bern);
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p > 0.5, t > 0.5) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        let c = confusion(&pred, &truth).expect("binary masks of equal shape");
        let (want_d, want_i) = if tp + fp + fneg == 0.0 {
            (1.0, 1.0)
        } else {
            (2.0 * tp / (2.0 * tp + fp + fneg), tp / (tp + fp + fneg))
        };
        if dsc(&c) != want_d || iou(&c) != want_i {
            mismatches += 1;
        }
        identity_err = identity_err.max((dsc(&c) - 2.0 * iou(&c) / (1.0 + iou(&c))).abs());
    }
    CheckResult {
        name: "overlap metrics vs pixel count".into(),
        passed: mismatches == 0 && identity_err <= 1e-12,
        detail: format!(
            "{mismatches} mismatches in {pairs} pairs; dice/iou identity err {identity_err:.1e}"
        ),
    }
}

/// Full suite as run by the `selftest` command.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = gradient_checks(20);
    out.push(kl_oracle(20, 1_000_000, 11));
    out.push(decomposition_identity(12));
    out.push(metric_oracle(200, 13));
    out
}
