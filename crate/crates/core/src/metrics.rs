//! Point-tracking evaluation: threshold accuracy, occlusion accuracy,
//! Average Jaccard and per-frame error curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{distance, Trajectory};

/// Pixel thresholds.
pub const THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

fn aligned(pred: &Trajectory, gt: &Trajectory) -> Result<()> {
    if pred.start != gt.start {
        return Err(Error::invalid(
            "start frame",
            format!("prediction starts at {} but ground truth at {}", pred.start, gt.start),
        ));
    }
    if pred.len() != gt.len() {
        return Err(Error::shape("trajectory length", gt.len(), pred.len()));
    }
    Ok(())
}

/// Per-threshold hit counts over ground-truth-visible frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaCounts {
    pub within: [usize; 5],
    pub visible: usize,
}

impl DeltaCounts {
    /// `None` when no frame is visible.
    pub fn fractions(&self) -> Option<[f64; 5]> {
        (self.visible > 0).then(|| self.within.map(|w| w as f64 / self.visible as f64))
    }
}

pub fn delta_counts(pred: &Trajectory, gt: &Trajectory) -> Result<DeltaCounts> {
    aligned(pred, gt)?;
    let mut c = DeltaCounts::default();
    for t in 0..gt.len() {
        if !gt.visibility[t] {
            continue;
        }
        c.visible += 1;
        let e = distance(pred.positions[t], gt.positions[t]);
        for (k, th) in THRESHOLDS.iter().enumerate() {
            if e <= *th {
                c.within[k] += 1;
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub per_threshold: [f64; 5],
    pub avg: f64,
}

/// Threshold accuracy; `Ok(None)` when the ground truth is never visible.
pub fn delta_avg(pred: &Trajectory, gt: &Trajectory) -> Result<Option<Delta>> {
    Ok(delta_counts(pred, gt)?.fractions().map(|per_threshold| Delta {
        per_threshold,
        avg: per_threshold.iter().sum::<f64>() / 5.0,
    }))
}

/// Fraction of frames where the visibility flags agree.
pub fn occlusion_accuracy(pred_vis: &[bool], gt_vis: &[bool]) -> Result<f64> {
    if pred_vis.len() != gt_vis.len() {
        return Err(Error::shape("visibility length", gt_vis.len(), pred_vis.len()));
    }
    if gt_vis.is_empty() {
        return Err(Error::invalid("visibility", "empty track"));
    }
    Ok(pred_vis.iter().zip(gt_vis).filter(|(a, b)| a == b).count() as f64 / gt_vis.len() as f64)
}

/// True/false positive and false negative counts per threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JaccardCounts {
    pub tp: [usize; 5],
    pub fp: [usize; 5],
    pub fn_: [usize; 5],
}

impl JaccardCounts {
    pub fn add(&mut self, o: &JaccardCounts) {
        for k in 0..5 {
            self.tp[k] += o.tp[k];
            self.fp[k] += o.fp[k];
            self.fn_[k] += o.fn_[k];
        }
    }

    /// Jaccard per threshold; an empty denominator counts as 1.
    pub fn jaccards(&self) -> [f64; 5] {
        std::array::from_fn(|k| {
            let den = self.tp[k] + self.fp[k] + self.fn_[k];
            if den == 0 {
                1.0
            } else {
                self.tp[k] as f64 / den as f64
            }
        })
    }

    pub fn aj(&self) -> f64 {
        self.jaccards().iter().sum::<f64>() / 5.0
    }
}

pub fn jaccard_counts(pred: &Trajectory, gt: &Trajectory) -> Result<JaccardCounts> {
    aligned(pred, gt)?;
    let mut c = JaccardCounts::default();
    for t in 0..gt.len() {
        let (pv, gv) = (pred.visibility[t], gt.visibility[t]);
        let e = distance(pred.positions[t], gt.positions[t]);
        for (k, th) in THRESHOLDS.iter().enumerate() {
            let tp = pv && gv && e <= *th;
            if tp {
                c.tp[k] += 1;
            } else {
                c.fp[k] += usize::from(pv);
                c.fn_[k] += usize::from(gv);
            }
        }
    }
    Ok(c)
}

pub fn average_jaccard(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    Ok(jaccard_counts(pred, gt)?.aj())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub start: usize,
    pub errors: Vec<f64>,
    /// True on frames where the ground truth is occluded.
    pub occluded: Vec<bool>,
}

pub fn error_curve(pred: &Trajectory, gt: &Trajectory) -> Result<ErrorCurve> {
    aligned(pred, gt)?;
    Ok(ErrorCurve {
        start: gt.start,
        errors: pred.positions.iter().zip(&gt.positions).map(|(a, b)| distance(*a, *b)).collect(),
        occluded: gt.visibility.iter().map(|v| !v).collect(),
    })
}

/// How threshold accuracy is aggregated over tracks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of per-track values; tracks without visible frames are skipped.
    #[default]
    PerTrack,
    /// One ratio over all visible frames.
    Pooled,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_track" => Ok(Self::PerTrack),
            "pooled" => Ok(Self::Pooled),
            _ => Err(Error::invalid("eval.aggregation", format!("expected per_track or pooled, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub aggregation: Aggregation,
    pub thresholds: [f64; 5],
    pub delta: [f64; 5],
    pub delta_avg: f64,
    pub oa: f64,
    /// Pooled over tracks regardless of `aggregation`.
    pub aj: f64,
    pub jaccard: [f64; 5],
    pub tracks: usize,
    /// Tracks that contributed to `delta` (had a visible frame).
    pub scored_tracks: usize,
    pub visible_frames: usize,
    pub frames: usize,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let fr = self.delta.iter().chain(&self.jaccard).chain([&self.delta_avg, &self.oa, &self.aj]);
        if fr.clone().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("eval report", "fractions must lie in [0, 1]"));
        }
        if (self.delta.iter().sum::<f64>() / 5.0 - self.delta_avg).abs() > 1e-12 {
            return Err(Error::invalid("eval report", "delta_avg is not the mean of the thresholds"));
        }
        Ok(())
    }
}

/// Evaluates aligned `(prediction, ground truth)` pairs.
pub fn evaluate(method: &str, pairs: &[(&Trajectory, &Trajectory)], aggregation: Aggregation) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("eval", "no tracks to evaluate"));
    }
    let mut pooled = DeltaCounts::default();
    let mut sum = [0.0; 5];
    let mut scored = 0;
    let mut jac = JaccardCounts::default();
    let (mut agree, mut frames) = (0usize, 0usize);
    for (pred, gt) in pairs {
        let d = delta_counts(pred, gt)?;
        if let Some(f) = d.fractions() {
            scored += 1;
            for k in 0..5 {
                sum[k] += f[k];
            }
        }
        for k in 0..5 {
            pooled.within[k] += d.within[k];
        }
        pooled.visible += d.visible;
        jac.add(&jaccard_counts(pred, gt)?);
        agree += pred.visibility.iter().zip(&gt.visibility).filter(|(a, b)| a == b).count();
        frames += gt.len();
    }
    let delta = match aggregation {
        Aggregation::PerTrack if scored > 0 => sum.map(|s| s / scored as f64),
        Aggregation::Pooled if pooled.visible > 0 => pooled.fractions().expect("visible frames"),
        _ => return Err(Error::invalid("eval", "no ground-truth-visible frame in any track")),
    };
    let report = EvalReport {
        method: method.to_string(),
        aggregation,
        thresholds: THRESHOLDS,
        delta,
        delta_avg: delta.iter().sum::<f64>() / 5.0,
        oa: agree as f64 / frames.max(1) as f64,
        aj: jac.aj(),
        jaccard: jac.jaccards(),
        tracks: pairs.len(),
        scored_tracks: scored,
        visible_frames: pooled.visible,
        frames,
    };
    report.validate()?;
    Ok(report)
}
