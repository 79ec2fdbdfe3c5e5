//! Core data types: query points, trajectories, candidate sets and
//! per-frame reliability scores.
//!
//! Row `i` of every per-frame array corresponds to frame `start + i`, so a
//! track queried at frame `t0` of a `T`-frame clip has `L = T - t0` rows.
//! Positions are continuous pixel coordinates `[x, y]` at the working
//! resolution and are never clamped here; only feature sampling clamps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D position or displacement in pixels, `[x, y]`.
pub type Point = [f64; 2];

#[inline]
pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

/// The point to track: a frame index and a position in that frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub t0: usize,
    pub pos: Point,
}

impl QueryPoint {
    pub fn new(t0: usize, pos: Point) -> Self {
        Self { t0, pos }
    }

    /// Checks `t0 < frames` and that `pos` lies in `[0, width) x [0, height)`.
    pub fn validate(&self, frames: usize, width: usize, height: usize) -> Result<()> {
        if self.t0 >= frames {
            return Err(Error::FrameOutOfRange {
                frame: self.t0,
                frames,
            });
        }
        let [x, y] = self.pos;
        if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64) {
            return Err(Error::invalid(
                "query.pos",
                format!("({x}, {y}) outside {width}x{height} frame"),
            ));
        }
        Ok(())
    }
}

/// Per-frame positions and visibility of one tracked point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: usize,
    pub positions: Vec<Point>,
    pub visibility: Vec<bool>,
}

impl Trajectory {
    pub fn new(start: usize, positions: Vec<Point>, visibility: Vec<bool>) -> Result<Self> {
        let t = Self {
            start,
            positions,
            visibility,
        };
        t.validate()?;
        Ok(t)
    }

    /// A trajectory that is visible at every frame.
    pub fn visible(start: usize, positions: Vec<Point>) -> Result<Self> {
        let n = positions.len();
        Self::new(start, positions, vec![true; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::invalid("trajectory", "length must be at least 1"));
        }
        if self.visibility.len() != self.positions.len() {
            return Err(Error::shape(
                "trajectory visibility",
                self.positions.len(),
                self.visibility.len(),
            ));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory positions".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn visible_frames(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }
}

/// `M` alternative position hypotheses per frame, shaped `[L][M]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub start: usize,
    pub positions: Vec<Vec<Point>>,
    pub sources: Vec<String>,
    /// Per-candidate visibility predictions `[L][M]`; absent means all visible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<Vec<Vec<bool>>>,
}

impl CandidateSet {
    pub fn new(start: usize, positions: Vec<Vec<Point>>, sources: Vec<String>) -> Result<Self> {
        let c = Self {
            start,
            positions,
            sources,
            visibility: None,
        };
        c.validate()?;
        Ok(c)
    }

    /// Stacks whole candidate trajectories (each of length `L`) along the
    /// candidate axis.
    pub fn from_tracks(start: usize, tracks: &[Vec<Point>], sources: Vec<String>) -> Result<Self> {
        let first = tracks
            .first()
            .ok_or_else(|| Error::invalid("candidates", "at least one candidate required"))?;
        let len = first.len();
        for tr in tracks {
            if tr.len() != len {
                return Err(Error::shape("candidate track length", len, tr.len()));
            }
        }
        let positions = (0..len)
            .map(|t| tracks.iter().map(|tr| tr[t]).collect())
            .collect();
        Self::new(start, positions, sources)
    }

    pub fn with_visibility(mut self, visibility: Vec<Vec<bool>>) -> Result<Self> {
        self.visibility = Some(visibility);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_candidates();
        if self.positions.is_empty() {
            return Err(Error::invalid("candidates", "length must be at least 1"));
        }
        if m == 0 {
            return Err(Error::invalid("candidates", "at least one candidate required"));
        }
        for row in &self.positions {
            if row.len() != m {
                return Err(Error::shape("candidates per frame", m, row.len()));
            }
            if row.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("candidate positions".into()));
            }
        }
        if self.sources.len() != m {
            return Err(Error::shape("candidate sources", m, self.sources.len()));
        }
        if let Some(vis) = &self.visibility {
            if vis.len() != self.positions.len() {
                return Err(Error::shape("candidate visibility frames", self.positions.len(), vis.len()));
            }
            if let Some(row) = vis.iter().find(|r| r.len() != m) {
                return Err(Error::shape("candidate visibility per frame", m, row.len()));
            }
        }
        Ok(())
    }

    /// Number of frames `L`.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Number of candidates `M`.
    pub fn num_candidates(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    pub fn at(&self, t: usize, m: usize) -> Point {
        self.positions[t][m]
    }

    pub fn is_visible(&self, t: usize, m: usize) -> bool {
        self.visibility.as_ref().is_none_or(|v| v[t][m])
    }

    /// The full trajectory of candidate `m`.
    pub fn track(&self, m: usize) -> Vec<Point> {
        self.positions.iter().map(|row| row[m]).collect()
    }

    /// Visibility of candidate `m` at every frame.
    pub fn track_visibility(&self, m: usize) -> Vec<bool> {
        (0..self.len()).map(|t| self.is_visible(t, m)).collect()
    }

    /// Reorders the candidate axis: new candidate `j` is old candidate `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            start: self.start,
            positions: self
                .positions
                .iter()
                .map(|row| perm.iter().map(|&j| row[j]).collect())
                .collect(),
            sources: perm.iter().map(|&j| self.sources[j].clone()).collect(),
            visibility: self
                .visibility
                .as_ref()
                .map(|v| v.iter().map(|row| perm.iter().map(|&j| row[j]).collect()).collect()),
        }
    }
}

/// Per-frame probability distributions over candidates, `[L][M]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityScores {
    pub scores: Vec<Vec<f64>>,
}

impl ReliabilityScores {
    pub const ROW_SUM_TOL: f64 = 1e-5;

    pub fn new(scores: Vec<Vec<f64>>) -> Result<Self> {
        let s = Self { scores };
        s.validate()?;
        Ok(s)
    }

    /// Builds scores from a row-major `L x M` buffer.
    pub fn from_flat(flat: &[f64], m: usize) -> Result<Self> {
        if m == 0 || flat.len() % m != 0 {
            return Err(Error::shape("score buffer", m, flat.len()));
        }
        Self::new(flat.chunks(m).map(<[f64]>::to_vec).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.scores.first().map_or(0, Vec::len);
        for (t, row) in self.scores.iter().enumerate() {
            if row.len() != m {
                return Err(Error::shape("score row", m, row.len()));
            }
            if row.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
                return Err(Error::invalid("scores", format!("row {t} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::invalid("scores", format!("row {t} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Index of the highest score in row `t`; ties go to the lowest index.
    pub fn argmax(&self, t: usize) -> usize {
        argmax(&self.scores[t])
    }
}

/// First index of the maximum element.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// First index of the minimum element.
pub(crate) fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

fn check_aligned(candidates: &CandidateSet, gt: &Trajectory) -> Result<()> {
    if candidates.start != gt.start {
        return Err(Error::invalid(
            "start frame",
            format!("candidates start at {} but ground truth at {}", candidates.start, gt.start),
        ));
    }
    if candidates.len() != gt.len() {
        return Err(Error::shape("trajectory length", gt.len(), candidates.len()));
    }
    Ok(())
}

/// Distance of every candidate to the ground truth, `[L][M]`.
pub fn euclidean_errors(candidates: &CandidateSet, gt: &Trajectory) -> Result<Vec<Vec<f64>>> {
    check_aligned(candidates, gt)?;
    Ok(candidates
        .positions
        .iter()
        .zip(&gt.positions)
        .map(|(row, &p)| row.iter().map(|&c| distance(c, p)).collect())
        .collect())
}

/// Offsets of every candidate from the query position, `[L][M]`.
pub fn displacements(candidates: &CandidateSet, query: &QueryPoint) -> Result<Vec<Vec<Point>>> {
    if candidates.start != query.t0 {
        return Err(Error::invalid(
            "start frame",
            format!("candidates start at {} but query is at frame {}", candidates.start, query.t0),
        ));
    }
    Ok(candidates
        .positions
        .iter()
        .map(|row| row.iter().map(|&c| sub(c, query.pos)).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(start: usize, pts: Vec<Point>) -> CandidateSet {
        CandidateSet::from_tracks(start, &[pts], vec!["a".into()]).unwrap()
    }

    #[test]
    fn errors_three_four_five() {
        let c = single(0, vec![[3.0, 4.0]]);
        let gt = Trajectory::visible(0, vec![[0.0, 0.0]]).unwrap();
        assert_eq!(euclidean_errors(&c, &gt).unwrap(), vec![vec![5.0]]);
    }

    #[test]
    fn errors_identity_and_hypotenuse() {
        let pts = vec![[1.0, 2.0], [5.5, -3.0], [0.0, 0.0]];
        let gt = Trajectory::visible(2, pts.clone()).unwrap();
        let c = single(2, pts);
        assert!(euclidean_errors(&c, &gt).unwrap().iter().flatten().all(|&e| e == 0.0));

        let c = single(0, vec![[1.0, 1.0]]);
        let gt = Trajectory::visible(0, vec![[2.0, 3.0]]).unwrap();
        let e = euclidean_errors(&c, &gt).unwrap()[0][0];
        assert!((e - 5f64.sqrt()).abs() < 1e-12);
        assert!((e - 2.23607).abs() < 1e-5);
    }

    #[test]
    fn errors_reject_mismatched_lengths() {
        let c = single(0, vec![[0.0, 0.0]; 3]);
        let gt = Trajectory::visible(0, vec![[0.0, 0.0]; 4]).unwrap();
        match euclidean_errors(&c, &gt) {
            Err(Error::Shape { expected, found, .. }) => assert_eq!((expected, found), (4, 3)),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn displacement_examples() {
        let q = QueryPoint::new(0, [10.0, 10.0]);
        let c = single(0, vec![[10.0, 10.0], [13.0, 6.0]]);
        let d = displacements(&c, &q).unwrap();
        assert_eq!(d[0][0], [0.0, 0.0]);
        assert_eq!(d[1][0], [3.0, -4.0]);

        let c = CandidateSet::from_tracks(0, &vec![vec![[13.0, 6.0]]; 3], vec!["x".into(); 3]).unwrap();
        let d = displacements(&c, &q).unwrap();
        assert!(d[0].iter().all(|&v| v == [3.0, -4.0]));

        let q = QueryPoint::new(1, [0.0, 0.0]);
        assert!(displacements(&c, &q).is_err());
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(0, vec![], vec![]).is_err());
        assert!(Trajectory::new(0, vec![[0.0, 0.0]], vec![true, false]).is_err());
        assert!(Trajectory::new(0, vec![[f64::NAN, 0.0]], vec![true]).is_err());
    }

    #[test]
    fn query_bounds() {
        assert!(QueryPoint::new(0, [0.0, 0.0]).validate(24, 64, 64).is_ok());
        assert!(QueryPoint::new(24, [0.0, 0.0]).validate(24, 64, 64).is_err());
        assert!(QueryPoint::new(0, [64.0, 0.0]).validate(24, 64, 64).is_err());
    }

    #[test]
    fn score_validation_and_argmax_ties() {
        let s = ReliabilityScores::new(vec![vec![0.1, 0.7, 0.2], vec![0.5, 0.5, 0.0]]).unwrap();
        assert_eq!(s.argmax(0), 1);
        assert_eq!(s.argmax(1), 0);
        assert!(ReliabilityScores::new(vec![vec![0.5, 0.6]]).is_err());
        assert!(ReliabilityScores::new(vec![vec![1.5, -0.5]]).is_err());
    }

    #[test]
    fn candidate_json_layout() {
        let c = CandidateSet::from_tracks(3, &[vec![[1.0, 2.0]], vec![[3.0, 4.0]]], vec!["a".into(), "b".into()])
            .unwrap();
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        assert_eq!(v["start"], 3);
        assert_eq!(v["positions"][0][1][0], 3.0);
        assert_eq!(v["sources"][1], "b");
        assert!(v.get("visibility").is_none());
    }

    proptest! {
        #[test]
        fn errors_translation_invariant(
            pts in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..8),
            gt in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 8),
            shift in (-50.0f64..50.0, -50.0f64..50.0),
        ) {
            // Shifts by dyadic rationals keep the arithmetic exact.
            let sx = (shift.0 * 4.0).round() / 4.0;
            let sy = (shift.1 * 4.0).round() / 4.0;
            let q = |v: f64| (v * 64.0).round() / 64.0;
            let n = pts.len();
            let cand: Vec<Point> = pts.iter().map(|&(x, y)| [q(x), q(y)]).collect();
            let gtp: Vec<Point> = gt[..n].iter().map(|&(x, y)| [q(x), q(y)]).collect();
            let c = single(0, cand.clone());
            let g = Trajectory::visible(0, gtp.clone()).unwrap();
            let c2 = single(0, cand.iter().map(|p| [p[0] + sx, p[1] + sy]).collect());
            let g2 = Trajectory::visible(0, gtp.iter().map(|p| [p[0] + sx, p[1] + sy]).collect()).unwrap();
            prop_assert_eq!(euclidean_errors(&c, &g).unwrap(), euclidean_errors(&c2, &g2).unwrap());
        }
    }
}
