//! Log-likelihood-ratio detection of extreme events and its evaluation:
//! LLR scoring, thresholding, confusion counts, and FNR/FPR threshold
//! sweeps.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::scalar::Scalar;

/// Operating point used throughout the pipeline.
pub const DEFAULT_LLR_THRESHOLD: f64 = 0.5;

/// Confusion counts and rates at one (llr threshold, stress threshold)
/// operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// fn/(fn+tp); 0 when no true extremes were evaluated.
    pub fnr: f64,
    /// fp/(fp+tn); 0 when no true normals were evaluated.
    pub fpr: f64,
    pub llr_threshold: f64,
    pub stress_threshold: f64,
}

impl ClassificationReport {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_json_file(path, self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        crate::read_json_file(path)
    }
}

/// log q(z) − log p(z): how much better the refined density explains the
/// point than the prior does.
pub fn llr<S: Scalar>(
    posterior: &GmmModel<S>,
    prior: &GmmModel<S>,
    z: &DVector<S>,
) -> Result<S> {
    if posterior.d() != prior.d() {
        return Err(Error::validation(format!(
            "posterior dimension {} vs prior dimension {}",
            posterior.d(),
            prior.d()
        )));
    }
    if z.len() != prior.d() {
        return Err(Error::validation(format!(
            "point has dimension {}, models have {}",
            z.len(),
            prior.d()
        )));
    }
    Ok(posterior.log_density(z) - prior.log_density(z))
}

/// LLR for every row of an N x d matrix.
pub fn llr_batch<S: Scalar>(
    posterior: &GmmModel<S>,
    prior: &GmmModel<S>,
    latents: &DMatrix<S>,
) -> Result<DVector<S>> {
    let mut out = DVector::zeros(latents.nrows());
    for i in 0..latents.nrows() {
        out[i] = llr(posterior, prior, &latents.row(i).transpose())?;
    }
    Ok(out)
}

/// Extreme iff the score strictly exceeds the threshold (ties are normal).
pub fn classify<S: Scalar>(llr_value: S, threshold: S) -> bool {
    llr_value > threshold
}

/// Exact confusion counts of predicted vs true labels (`true` = extreme).
pub fn confusion(
    pred: &[bool],
    truth: &[bool],
    llr_threshold: f64,
    stress_threshold: f64,
) -> Result<ClassificationReport> {
    if pred.len() != truth.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let fnr = if fn_ + tp > 0 { fn_ as f64 / (fn_ + tp) as f64 } else { 0.0 };
    let fpr = if fp + tn > 0 { fp as f64 / (fp + tn) as f64 } else { 0.0 };
    Ok(ClassificationReport { tp, fp, tn, fn_, fnr, fpr, llr_threshold, stress_threshold })
}

/// One point of an FNR/FPR-vs-threshold curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub fnr: f64,
    pub fpr: f64,
}

/// FNR and FPR at each threshold of an ascending grid.
pub fn threshold_sweep<S: Scalar>(
    llrs: &[S],
    truth: &[bool],
    thresholds: &[S],
) -> Result<Vec<SweepPoint>> {
    if llrs.len() != truth.len() {
        return Err(Error::validation(format!(
            "{} scores for {} labels",
            llrs.len(),
            truth.len()
        )));
    }
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::validation("thresholds must be sorted ascending"));
    }
    let mut curve = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let pred: Vec<bool> = llrs.iter().map(|&s| classify(s, t)).collect();
        let report = confusion(&pred, truth, t.f64(), f64::NAN)?;
        curve.push(SweepPoint { threshold: t.f64(), fnr: report.fnr, fpr: report.fpr });
    }
    Ok(curve)
}

/// Default sweep grid: 101 evenly spaced thresholds spanning
/// [min score − 0.1, max score + 0.1].
pub fn default_sweep_grid<S: Scalar>(llrs: &[S]) -> Result<Vec<S>> {
    if llrs.is_empty() {
        return Err(Error::validation("cannot build a sweep grid from no scores"));
    }
    let mut lo = llrs[0];
    let mut hi = llrs[0];
    for &v in llrs {
        if !v.is_finite() {
            return Err(Error::validation("non-finite score in sweep grid input"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let lo = lo - S::c(0.1);
    let hi = hi + S::c(0.1);
    let n = 101usize;
    let step = (hi - lo) / S::c((n - 1) as f64);
    Ok((0..n).map(|i| lo + step * S::c(i as f64)).collect())
}

/// Writes a `threshold,fnr,fpr` CSV.
pub fn write_sweep_csv(path: impl AsRef<Path>, curve: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["threshold", "fnr", "fpr"])?;
    for p in curve {
        w.write_record([
            crate::data::format_scalar(p.threshold),
            crate::data::format_scalar(p.fnr),
            crate::data::format_scalar(p.fpr),
        ])?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}
