//! Datasets, image files, checkpoints, run configuration and map export.

pub mod checkpoint;
pub mod config;
pub mod pgm;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::uncertainty::UncertaintyReport;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use config::RunConfig;
pub use pgm::{read_image, read_mask, write_image};
pub use synthetic::{generate_range, generate_synthetic, Difficulty};

/// An image and its binary ground-truth mask, both `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Grid,
    pub mask: Grid,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Grid, mask: Grid) -> Result<Self> {
        if image.ndim() != 2 || image.shape() != mask.shape() {
            return Err(Error::shape(
                "Sample",
                format!("image {:?} vs mask {:?}", image.shape(), mask.shape()),
            ));
        }
        if !mask.is_binary() {
            return Err(Error::NotBinary);
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
        })
    }
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes `img_<id>.pgm`, `msk_<id>.pgm` and `manifest.csv` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("id,image,mask\n");
    for s in samples {
        let img = format!("img_{}.pgm", s.id);
        let msk = format!("msk_{}.pgm", s.id);
        write_image(dir.join(&img), &s.image)?;
        write_image(dir.join(&msk), &s.mask)?;
        manifest.push_str(&format!("{},{img},{msk}\n", s.id));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Reads every sample listed in `dir/manifest.csv`; may return an empty list.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, img, msk] = cols[..] else {
            return Err(Error::Config(format!(
                "{}: line {} needs 3 columns",
                path.display(),
                i + 1
            )));
        };
        out.push(Sample::new(
            id,
            read_image(dir.join(img))?,
            read_mask(dir.join(msk))?,
        )?);
    }
    Ok(out)
}

/// Per-image min–max normalisation, inverted so that the most uncertain
/// pixel maps to 0 (dark) and the least uncertain to 1. A constant map
/// becomes all ones.
pub fn normalize_uncertainty(map: &Grid) -> Grid {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    // also catches NaN and the empty map
    if range.is_nan() || range <= 0.0 {
        return Grid::ones(map.shape());
    }
    map.map(|v| 1.0 - (v - lo) / range)
}

/// Drops the leading singleton axes of an `N×1×H×W` (N = 1) map.
fn plane(map: &Grid) -> Result<Grid> {
    let s = map.shape();
    let (h, w) = match s {
        [h, w] => (*h, *w),
        [1, 1, h, w] | [1, h, w] => (*h, *w),
        _ => return Err(Error::BadDims(format!("cannot export map of shape {s:?}"))),
    };
    map.reshape(&[h, w])
}

/// Paths written by [`export_uncertainty_maps`].
#[derive(Debug, Clone)]
pub struct ExportedMaps {
    pub mean_prob: PathBuf,
    pub mask: PathBuf,
    pub aleatoric: PathBuf,
    pub epistemic: PathBuf,
}

/// Writes `mean_prob.pgm`, `mask.pgm`, `aleatoric.pgm` and `epistemic.pgm`.
pub fn export_uncertainty_maps(
    report: &UncertaintyReport,
    dir: impl AsRef<Path>,
) -> Result<ExportedMaps> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ExportedMaps {
        mean_prob: dir.join("mean_prob.pgm"),
        mask: dir.join("mask.pgm"),
        aleatoric: dir.join("aleatoric.pgm"),
        epistemic: dir.join("epistemic.pgm"),
    };
    write_image(&paths.mean_prob, &plane(&report.mean_prob)?)?;
    write_image(&paths.mask, &plane(&report.mask)?)?;
    write_image(
        &paths.aleatoric,
        &normalize_uncertainty(&plane(&report.aleatoric)?),
    )?;
    write_image(
        &paths.epistemic,
        &normalize_uncertainty(&plane(&report.epistemic)?),
    )?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_endpoints() {
        let m = Grid::new(&[1, 3], vec![0.1, 0.5, 0.3]).unwrap();
        let n = normalize_uncertainty(&m);
        assert_eq!(n.data()[0], 1.0);
        assert_eq!(n.data()[1], 0.0);
        assert!((n.data()[2] - 0.5).abs() < 1e-12);
        assert!(normalize_uncertainty(&Grid::zeros(&[2, 2]))
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(3, 16, 16, 2, Difficulty::Easy).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image) <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn sample_validation() {
        assert!(Sample::new("x", Grid::zeros(&[2, 2]), Grid::zeros(&[2, 3])).is_err());
        assert!(matches!(
            Sample::new("x", Grid::zeros(&[2, 2]), Grid::full(&[2, 2], 0.5)),
            Err(Error::NotBinary)
        ));
    }
}
