//! Overlap metrics for binary masks.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Score assigned when prediction and ground truth are both empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptyConvention {
    /// Perfect agreement, 1.0.
    #[default]
    One,
    Zero,
}

impl EmptyConvention {
    fn value(self) -> f64 {
        match self {
            EmptyConvention::One => 1.0,
            EmptyConvention::Zero => 0.0,
        }
    }
}

fn counts(pred: &Mask, gt: &Mask) -> Result<(usize, usize, usize)> {
    pred.check_same_shape(gt)?;
    let mut inter = 0;
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a && b) as usize;
    }
    Ok((inter, pred.count(), gt.count()))
}

/// `2|A∩B| / (|A| + |B|)`, 1.0 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    dice_with(pred, gt, EmptyConvention::One)
}

/// `|A∩B| / |A∪B|`, 1.0 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    iou_with(pred, gt, EmptyConvention::One)
}

pub fn dice_with(pred: &Mask, gt: &Mask, empty: EmptyConvention) -> Result<f64> {
    let (inter, a, b) = counts(pred, gt)?;
    if a + b == 0 {
        return Ok(empty.value());
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

pub fn iou_with(pred: &Mask, gt: &Mask, empty: EmptyConvention) -> Result<f64> {
    let (inter, a, b) = counts(pred, gt)?;
    let union = a + b - inter;
    if union == 0 {
        return Ok(empty.value());
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<SampleScore>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub count: usize,
    pub empty_convention: EmptyConvention,
}

impl MetricReport {
    /// Scores `(id, prediction, ground truth)` triples.
    pub fn evaluate<'a, I>(pairs: I, empty: EmptyConvention) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a Mask, &'a Mask)>,
    {
        let mut per_sample = Vec::new();
        for (id, pred, gt) in pairs {
            let ctx = |e: Error| Error::InvalidArgument(format!("sample {id}: {e}"));
            per_sample.push(SampleScore {
                id: id.to_string(),
                dice: dice_with(pred, gt, empty).map_err(ctx)?,
                iou: iou_with(pred, gt, empty).map_err(ctx)?,
            });
        }
        Ok(Self::from_scores(per_sample, empty))
    }

    pub fn from_scores(per_sample: Vec<SampleScore>, empty: EmptyConvention) -> Self {
        let count = per_sample.len();
        let mean = |f: fn(&SampleScore) -> f64| {
            if count == 0 {
                0.0
            } else {
                per_sample.iter().map(f).sum::<f64>() / count as f64
            }
        };
        Self {
            mean_dice: mean(|s| s.dice),
            mean_iou: mean(|s| s.iou),
            count,
            per_sample,
            empty_convention: empty,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// One row per sample followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let wrap = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(wrap)?;
        w.write_record(["id", "dice", "iou"]).map_err(wrap)?;
        for s in &self.per_sample {
            w.write_record([s.id.clone(), s.dice.to_string(), s.iou.to_string()])
                .map_err(wrap)?;
        }
        w.write_record(["mean".to_string(), self.mean_dice.to_string(), self.mean_iou.to_string()])
            .map_err(wrap)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}
