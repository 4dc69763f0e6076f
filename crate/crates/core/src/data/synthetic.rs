//! Procedural "tumour" images: bright ellipses on a smooth textured
//! background with additive Gaussian noise.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;
/// Coarse lattice resolution of the background texture.
const TEXTURE_CELLS: usize = 4;
/// Sub-pixel grid used to anti-alias ellipse edges in the image.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Difficulty {
    #[default]
    Easy,
    Hard,
}

impl Difficulty {
    pub fn noise_sigma(self) -> f64 {
        match self {
            Difficulty::Easy => 0.05,
            Difficulty::Hard => 0.15,
        }
    }
}

impl FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::Config(format!(
                "unknown difficulty `{s}` (easy|hard)"
            ))),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise: random lattice values bilinearly blended with a smoothstep.
fn texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = TEXTURE_CELLS + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.2..0.45)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / (h - 1) as f64 * TEXTURE_CELLS as f64;
        let iy = (fy as usize).min(TEXTURE_CELLS - 1);
        let ty = smoothstep(fy - iy as f64);
        for x in 0..w {
            let fx = x as f64 / (w - 1) as f64 * TEXTURE_CELLS as f64;
            let ix = (fx as usize).min(TEXTURE_CELLS - 1);
            let tx = smoothstep(fx - ix as f64);
            let at = |r: usize, c: usize| lattice[r * n + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn stream(seed: u64, index: usize, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index as u64 + lane);
    rng
}

/// The `index`-th sample of the dataset identified by `seed`. Shapes and
/// texture come from one random stream and pixel noise from another, so
/// the difficulty only changes the noise.
pub fn synthetic_sample(
    h: usize,
    w: usize,
    seed: u64,
    index: usize,
    difficulty: Difficulty,
) -> Result<Sample> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::BadDims(format!(
            "synthetic images must be at least {MIN_SIDE}×{MIN_SIDE}, got {h}×{w}"
        )));
    }
    let mut rng = stream(seed, index, 0);
    let side = h.min(w) as f64;
    let count = rng.random_range(1..=3);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let a = rng.random_range(0.1..=0.2) * side;
            let b = rng.random_range(0.1..=0.2) * side;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            // the bounding circle keeps any rotation inside the frame
            let r = a.max(b) + 0.5;
            let cx = rng.random_range(r..(w as f64 - r));
            let cy = rng.random_range(r..(h as f64 - r));
            Ellipse {
                cx,
                cy,
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
                intensity: rng.random_range(0.6..0.95),
            }
        })
        .collect();
    let background = texture(h, w, &mut rng);

    let mut noise_rng = stream(seed, index, 1);
    let noise = Normal::new(0.0, difficulty.noise_sigma()).expect("positive sigma");
    let mut image = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    let sub = SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = ellipses.iter().any(|e| e.contains(px, py));
            mask.push(if inside { 1.0 } else { 0.0 });
            // partial-volume blend: average over sub-pixel positions
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let qx = x as f64 + (sx as f64 + 0.5) / sub;
                    let qy = y as f64 + (sy as f64 + 0.5) / sub;
                    acc += ellipses
                        .iter()
                        .filter(|e| e.contains(qx, qy))
                        .map(|e| e.intensity)
                        .fold(background[y * w + x], f64::max);
                }
            }
            let clean = acc / (sub * sub);
            image.push((clean + noise.sample(&mut noise_rng)).clamp(0.0, 1.0));
        }
    }
    Ok(Sample {
        id: format!("{index:04}"),
        image: Grid::new(&[h, w], image)?,
        mask: Grid::new(&[h, w], mask)?,
    })
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn generate_synthetic(
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
    difficulty: Difficulty,
) -> Result<Vec<Sample>> {
    generate_range(0..n, h, w, seed, difficulty)
}

/// Samples with indices in `range`, e.g. a test set disjoint from a
/// training set drawn with the same seed.
pub fn generate_range(
    range: std::ops::Range<usize>,
    h: usize,
    w: usize,
    seed: u64,
    difficulty: Difficulty,
) -> Result<Vec<Sample>> {
    if range.is_empty() {
        return Err(Error::BadDims(
            "at least one sample must be requested".into(),
        ));
    }
    range
        .map(|i| synthetic_sample(h, w, seed, i, difficulty))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_index_pure() {
        let a = generate_synthetic(3, 16, 16, 4, Difficulty::Easy).unwrap();
        let b = generate_synthetic(3, 16, 16, 4, Difficulty::Easy).unwrap();
        assert_eq!(a, b);
        let c = generate_range(2..3, 16, 16, 4, Difficulty::Easy).unwrap();
        assert_eq!(c[0].image, a[2].image);
    }

    #[test]
    fn difficulty_changes_only_noise() {
        let e = synthetic_sample(32, 32, 9, 0, Difficulty::Easy).unwrap();
        let h = synthetic_sample(32, 32, 9, 0, Difficulty::Hard).unwrap();
        assert_eq!(e.mask, h.mask);
        assert_ne!(e.image, h.image);
    }

    #[test]
    fn values_in_range_and_mask_binary() {
        for s in generate_synthetic(4, 24, 32, 1, Difficulty::Hard).unwrap() {
            assert_eq!(s.image.shape(), &[24, 32]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.is_binary());
        }
    }

    #[test]
    fn tiny_or_empty_rejected() {
        assert!(matches!(
            synthetic_sample(4, 32, 0, 0, Difficulty::Easy),
            Err(Error::BadDims(_))
        ));
        assert!(matches!(
            generate_synthetic(0, 32, 32, 0, Difficulty::Easy),
            Err(Error::BadDims(_))
        ));
    }
}
