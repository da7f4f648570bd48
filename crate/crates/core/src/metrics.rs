//! Count-error evaluation: MAE/RMSE, occlusion and crowding splits,
//! background/foreground error decomposition and the oracle-masking test.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{apply_mask, count};
use crate::focus::SegMask;
use crate::grid::{Grid, ShapeMismatch};

pub const DEFAULT_OCCLUSION_THRESHOLD: f64 = 1.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    EmptySet,
    #[error("need at least 3 records for a crowding split, got {0}")]
    TooFewRecords(usize),
    #[error(transparent)]
    ShapeMismatch(#[from] ShapeMismatch),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// One evaluated image; the column order is the CSV layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub pred_count: f64,
    pub gt_count: f64,
    pub occlusion_level: f64,
    pub crowding_level: f64,
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>, MetricsError> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(MetricsError::from)).collect()
}

pub fn write_records<W: io::Write>(out: W, records: &[EvalRecord]) -> Result<(), MetricsError> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountErrors {
    pub mae: f64,
    pub rmse: f64,
}

pub fn mae_rmse(records: &[EvalRecord]) -> Result<CountErrors, MetricsError> {
    let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.pred_count, r.gt_count)).collect();
    mae_rmse_pairs(&pairs)
}

/// Same as [`mae_rmse`] over bare `(pred, gt)` pairs.
pub fn mae_rmse_pairs(pairs: &[(f64, f64)]) -> Result<CountErrors, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let n = pairs.len() as f64;
    let (abs, sq) = pairs.iter().fold((0.0, 0.0), |(a, s), &(p, g)| {
        let e = p - g;
        (a + e.abs(), s + e * e)
    });
    Ok(CountErrors {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}

/// `(low, high)` with `low` holding levels strictly below `threshold`.
pub fn occlusion_split(records: &[EvalRecord], threshold: f64) -> (Vec<EvalRecord>, Vec<EvalRecord>) {
    records
        .iter()
        .cloned()
        .partition(|r| r.occlusion_level < threshold)
}

/// Sorted by crowding level and cut into thirds of sizes `ceil(n/3)`,
/// `ceil((n - s)/2)` and the rest. The sort is stable.
pub fn crowding_split(
    records: &[EvalRecord],
) -> Result<(Vec<EvalRecord>, Vec<EvalRecord>, Vec<EvalRecord>), MetricsError> {
    let n = records.len();
    if n < 3 {
        return Err(MetricsError::TooFewRecords(n));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.crowding_level.total_cmp(&b.crowding_level));
    let s = n.div_ceil(3);
    let m = (n - s).div_ceil(2);
    let dense = sorted.split_off(s + m);
    let medium = sorted.split_off(s);
    Ok((sorted, medium, dense))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BgFgError {
    /// `|sum of pred over mask = 0|`
    pub bg_err: f64,
    /// `|sum of pred over mask = 1 - sum of gt|`
    pub fg_err: f64,
}

/// Splits the prediction by the foreground mask. All ground-truth mass,
/// including Gaussian tails outside the mask, is charged to the foreground.
pub fn bg_fg_error(pred: &Grid, gt: &Grid, mask: &SegMask) -> Result<BgFgError, MetricsError> {
    pred.check_same_shape(gt)?;
    pred.check_same_shape(mask)?;
    let (mut bg, mut fg) = (0.0, 0.0);
    for (p, m) in pred.data().iter().zip(mask.data()) {
        if *m == 1.0 {
            fg += p;
        } else {
            bg += p;
        }
    }
    Ok(BgFgError {
        bg_err: bg.abs(),
        fg_err: (fg - count(gt)).abs(),
    })
}

/// Anything that maps an input image to a count.
pub trait CountModel {
    fn predict_count(&self, image: &Grid) -> f64;
}

impl<F: Fn(&Grid) -> f64> CountModel for F {
    fn predict_count(&self, image: &Grid) -> f64 {
        self(image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSample {
    pub image: Grid,
    pub mask: SegMask,
    pub gt_count: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    pub mae_plain: f64,
    pub mae_masked: f64,
}

/// MAE on raw inputs versus inputs pre-multiplied by the ground-truth mask.
pub fn oracle_mask_eval<M: CountModel + ?Sized>(
    model: &M,
    test_set: &[OracleSample],
) -> Result<OracleResult, MetricsError> {
    if test_set.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut plain = Vec::with_capacity(test_set.len());
    let mut masked = Vec::with_capacity(test_set.len());
    for s in test_set {
        plain.push((model.predict_count(&s.image), s.gt_count));
        let blacked = apply_mask(&s.image, &s.mask)?;
        masked.push((model.predict_count(&blacked), s.gt_count));
    }
    Ok(OracleResult {
        mae_plain: mae_rmse_pairs(&plain)?.mae,
        mae_masked: mae_rmse_pairs(&masked)?.mae,
    })
}
