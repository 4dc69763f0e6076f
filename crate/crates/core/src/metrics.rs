//! Hard-mask overlap metrics: confusion counts, Dice similarity and IoU.

use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Pixel counts for one predicted/true mask pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Score assigned when both masks are empty (all denominators zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmptyScore {
    #[default]
    One,
    Zero,
}

impl EmptyScore {
    fn value(self) -> f64 {
        match self {
            EmptyScore::One => 1.0,
            EmptyScore::Zero => 0.0,
        }
    }
}

pub fn confusion(pred: &Grid, truth: &Grid) -> Result<Confusion> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "confusion",
            format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        ));
    }
    if !pred.is_binary() || !truth.is_binary() {
        return Err(Error::NotBinary);
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == 1.0, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FN + FP)`; both-empty scores 1.
pub fn dsc(c: &Confusion) -> f64 {
    dsc_with(c, EmptyScore::One)
}

pub fn dsc_with(c: &Confusion, empty: EmptyScore) -> f64 {
    let denom = 2 * c.tp + c.fn_ + c.fp;
    if denom == 0 {
        empty.value()
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// `TP / (TP + FN + FP)`; both-empty scores 1.
pub fn iou(c: &Confusion) -> f64 {
    iou_with(c, EmptyScore::One)
}

pub fn iou_with(c: &Confusion, empty: EmptyScore) -> f64 {
    let denom = c.tp + c.fn_ + c.fp;
    if denom == 0 {
        empty.value()
    } else {
        c.tp as f64 / denom as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub confusion: Confusion,
    pub dsc: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetReport {
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub per_image: Vec<ImageScore>,
}

/// Per-image scores and their unweighted means.
pub fn evaluate_set(preds: &[Grid], truths: &[Grid]) -> Result<SetReport> {
    evaluate_set_with(preds, truths, EmptyScore::One)
}

pub fn evaluate_set_with(preds: &[Grid], truths: &[Grid], empty: EmptyScore) -> Result<SetReport> {
    if preds.is_empty() {
        return Err(Error::EmptySet);
    }
    if preds.len() != truths.len() {
        return Err(Error::shape(
            "evaluate_set",
            format!("{} predictions vs {} truths", preds.len(), truths.len()),
        ));
    }
    let per_image = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            let c = confusion(p, t)?;
            Ok(ImageScore {
                confusion: c,
                dsc: dsc_with(&c, empty),
                iou: iou_with(&c, empty),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    Ok(SetReport {
        mean_dsc: per_image.iter().map(|s| s.dsc).sum::<f64>() / n,
        mean_iou: per_image.iter().map(|s| s.iou).sum::<f64>() / n,
        per_image,
    })
}

/// Writes `image_id,dsc,iou` rows followed by a `mean` summary row.
pub fn write_report_csv<W: Write>(
    mut out: W,
    ids: &[String],
    report: &SetReport,
) -> std::io::Result<()> {
    writeln!(out, "image_id,dsc,iou")?;
    for (id, s) in ids.iter().zip(&report.per_image) {
        writeln!(out, "{id},{:.6},{:.6}", s.dsc, s.iou)?;
    }
    writeln!(out, "mean,{:.6},{:.6}", report.mean_dsc, report.mean_iou)
}
