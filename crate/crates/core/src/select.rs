//! Pseudo-label fusion and reference selectors.
//!
//! Every selector turns a [`CandidateSet`] into a [`PseudoLabel`]: one
//! position per frame, a visibility flag per frame and the provenance of
//! each position. Per-frame selectors use a majority vote over candidate
//! visibility; a random teacher keeps the visibility of the teacher it
//! picked.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng, STREAM_TEACHER};
use crate::trajectory::{argmax, argmin, distance, euclidean_errors, CandidateSet, Point, QueryPoint, ReliabilityScores, Trajectory};
use crate::world::{FeatureVolume, GrayFrame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Verifier,
    Oracle,
    RandomTeacher,
    GeometricMedian,
    Agreement,
    KalmanCv,
    MinAcceleration,
}

impl SelectorKind {
    pub const ALL: [SelectorKind; 7] = [
        SelectorKind::Verifier,
        SelectorKind::Oracle,
        SelectorKind::RandomTeacher,
        SelectorKind::GeometricMedian,
        SelectorKind::Agreement,
        SelectorKind::KalmanCv,
        SelectorKind::MinAcceleration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectorKind::Verifier => "verifier",
            SelectorKind::Oracle => "oracle",
            SelectorKind::RandomTeacher => "random_teacher",
            SelectorKind::GeometricMedian => "geometric_median",
            SelectorKind::Agreement => "agreement",
            SelectorKind::KalmanCv => "kalman_cv",
            SelectorKind::MinAcceleration => "min_acceleration",
        }
    }
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("selector", format!("unknown method {s:?}")))
    }
}

/// Where a pseudo-label position came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Copied from this candidate.
    Candidate(usize),
    /// Computed from several candidates (geometric median).
    Synthesized { converged: bool },
}

impl Provenance {
    pub fn candidate(self) -> Option<usize> {
        match self {
            Provenance::Candidate(m) => Some(m),
            Provenance::Synthesized { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub method: SelectorKind,
    pub trajectory: Trajectory,
    pub provenance: Vec<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ReliabilityScores>,
}

/// Tunables of the heuristic selectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub weiszfeld_tol: f64,
    pub weiszfeld_max_iter: usize,
    /// Position gain of the constant-velocity tracker.
    pub kalman_alpha: f64,
    /// Velocity gain of the constant-velocity tracker.
    pub kalman_beta: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            weiszfeld_tol: 1e-6,
            weiszfeld_max_iter: 100,
            kalman_alpha: 0.7,
            kalman_beta: 0.3,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weiszfeld_tol > 0.0) || self.weiszfeld_max_iter == 0 {
            return Err(Error::invalid("selection.weiszfeld_tol", "tolerance and iteration cap must be positive"));
        }
        if !(0.0..=1.0).contains(&self.kalman_alpha) || !(0.0..=1.0).contains(&self.kalman_beta) {
            return Err(Error::invalid("selection.kalman_alpha", "gains must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Visible iff at least `ceil(M/2)` candidates vote visible.
pub fn majority_visible(votes: &[bool]) -> bool {
    let yes = votes.iter().filter(|&&v| v).count();
    yes >= votes.len().div_ceil(2)
}

fn vote_visibility(candidates: &CandidateSet) -> Vec<bool> {
    (0..candidates.len())
        .map(|t| {
            let votes: Vec<bool> = (0..candidates.num_candidates()).map(|m| candidates.is_visible(t, m)).collect();
            majority_visible(&votes)
        })
        .collect()
}

fn from_indices(method: SelectorKind, candidates: &CandidateSet, picks: Vec<usize>, visibility: Vec<bool>) -> PseudoLabel {
    let positions = picks.iter().enumerate().map(|(t, &m)| candidates.at(t, m)).collect();
    PseudoLabel {
        method,
        trajectory: Trajectory {
            start: candidates.start,
            positions,
            visibility,
        },
        provenance: picks.into_iter().map(Provenance::Candidate).collect(),
        scores: None,
    }
}

/// Per-frame argmax of `scores` with majority-vote visibility.
pub fn fuse_pseudo_label(
    candidates: &CandidateSet,
    scores: &ReliabilityScores,
    teacher_visibility: &[Vec<bool>],
) -> Result<PseudoLabel> {
    candidates.validate()?;
    let (l, m) = (candidates.len(), candidates.num_candidates());
    if scores.len() != l {
        return Err(Error::shape("score rows", l, scores.len()));
    }
    if teacher_visibility.len() != l {
        return Err(Error::shape("visibility rows", l, teacher_visibility.len()));
    }
    for (s, v) in scores.scores.iter().zip(teacher_visibility) {
        if s.len() != m {
            return Err(Error::shape("score columns", m, s.len()));
        }
        if v.len() != m {
            return Err(Error::shape("visibility columns", m, v.len()));
        }
    }
    let picks = (0..l).map(|t| scores.argmax(t)).collect();
    let vis = teacher_visibility.iter().map(|v| majority_visible(v)).collect();
    let mut out = from_indices(SelectorKind::Verifier, candidates, picks, vis);
    out.scores = Some(scores.clone());
    Ok(out)
}

/// Candidate visibility `[L][M]`, all visible when the set carries none.
pub fn candidate_visibility(candidates: &CandidateSet) -> Vec<Vec<bool>> {
    (0..candidates.len())
        .map(|t| (0..candidates.num_candidates()).map(|m| candidates.is_visible(t, m)).collect())
        .collect()
}

/// Picks the candidate closest to the ground truth at every frame.
pub fn oracle_select(candidates: &CandidateSet, gt: &Trajectory) -> Result<PseudoLabel> {
    let errors = euclidean_errors(candidates, gt)?;
    let picks = errors.iter().map(|row| argmin(row)).collect();
    Ok(from_indices(SelectorKind::Oracle, candidates, picks, vote_visibility(candidates)))
}

/// Teacher index for each of `n_tracks` tracks: round-robin over a
/// seeded shuffle of `0..m`.
pub fn random_teacher_assignments(n_tracks: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng_from(seed, &[STREAM_TEACHER]));
    (0..n_tracks).map(|i| order[i % m]).collect()
}

/// Copies one whole candidate, including its visibility.
pub fn teacher_select(candidates: &CandidateSet, teacher: usize) -> Result<PseudoLabel> {
    if teacher >= candidates.num_candidates() {
        return Err(Error::invalid("teacher", format!("index {teacher} out of {} candidates", candidates.num_candidates())));
    }
    let l = candidates.len();
    let vis = candidates.track_visibility(teacher);
    Ok(from_indices(SelectorKind::RandomTeacher, candidates, vec![teacher; l], vis))
}

/// Random-teacher pseudo-labels for a list of tracks.
pub fn random_teacher_select(sets: &[CandidateSet], seed: u64) -> Result<Vec<PseudoLabel>> {
    let Some(first) = sets.first() else {
        return Ok(Vec::new());
    };
    let m = first.num_candidates();
    if let Some(bad) = sets.iter().find(|s| s.num_candidates() != m) {
        return Err(Error::shape("teachers per track", m, bad.num_candidates()));
    }
    random_teacher_assignments(sets.len(), m, seed)
        .into_iter()
        .zip(sets)
        .map(|(k, s)| teacher_select(s, k))
        .collect()
}

/// Result of a Weiszfeld run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeiszfeldResult {
    pub point: Point,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the iterate landed on this input point.
    pub coincident: Option<usize>,
}

/// Sum of distances from `x` to `points`.
pub fn weiszfeld_objective(points: &[Point], x: Point) -> f64 {
    points.iter().map(|p| distance(*p, x)).sum()
}

/// One Weiszfeld update, or `Err(i)` when `x` sits on input point `i`.
pub fn weiszfeld_step(points: &[Point], x: Point) -> std::result::Result<Point, usize> {
    let (mut num, mut den) = ([0.0, 0.0], 0.0);
    for (i, p) in points.iter().enumerate() {
        let d = distance(*p, x);
        if d < 1e-9 {
            return Err(i);
        }
        num[0] += p[0] / d;
        num[1] += p[1] / d;
        den += 1.0 / d;
    }
    Ok([num[0] / den, num[1] / den])
}

/// Weiszfeld update with a Newton shortcut: the Newton point is taken only
/// when its objective beats the plain step, so the objective never rises.
/// Plain Weiszfeld crawls when the objective is nearly flat.
pub fn weiszfeld_update(points: &[Point], x: Point) -> std::result::Result<Point, usize> {
    let w = weiszfeld_step(points, x)?;
    // Gradient and Hessian of the summed distances at x.
    let (mut g, mut h) = ([0.0, 0.0], [0.0, 0.0, 0.0]);
    for p in points {
        let d = distance(*p, x);
        let u = [(x[0] - p[0]) / d, (x[1] - p[1]) / d];
        g[0] += u[0];
        g[1] += u[1];
        h[0] += (1.0 - u[0] * u[0]) / d;
        h[1] -= u[0] * u[1] / d;
        h[2] += (1.0 - u[1] * u[1]) / d;
    }
    let det = h[0] * h[2] - h[1] * h[1];
    if !(det > 1e-300) {
        return Ok(w);
    }
    let newton = [
        x[0] - (h[2] * g[0] - h[1] * g[1]) / det,
        x[1] - (h[0] * g[1] - h[1] * g[0]) / det,
    ];
    if newton.iter().all(|v| v.is_finite()) && weiszfeld_objective(points, newton) < weiszfeld_objective(points, w) {
        Ok(newton)
    } else {
        Ok(w)
    }
}

/// Geometric median by Weiszfeld iteration from the centroid.
pub fn weiszfeld(points: &[Point], tol: f64, max_iter: usize) -> WeiszfeldResult {
    // A data point is the median iff the unit pull of the other points does
    // not exceed its multiplicity; iterating towards it would crawl.
    for (i, p) in points.iter().enumerate() {
        let (mut pull, mut mult) = ([0.0, 0.0], 0.0);
        for q in points {
            let d = distance(*p, *q);
            if d < 1e-9 {
                mult += 1.0;
            } else {
                pull[0] += (q[0] - p[0]) / d;
                pull[1] += (q[1] - p[1]) / d;
            }
        }
        if pull[0].hypot(pull[1]) <= mult {
            return WeiszfeldResult {
                point: *p,
                iterations: 0,
                converged: true,
                coincident: Some(i),
            };
        }
    }
    let n = points.len() as f64;
    let mut x = points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    for it in 0..max_iter {
        match weiszfeld_update(points, x) {
            Err(i) => {
                return WeiszfeldResult {
                    point: points[i],
                    iterations: it,
                    converged: true,
                    coincident: Some(i),
                }
            }
            Ok(next) => {
                let moved = distance(next, x);
                x = next;
                if moved < tol {
                    return WeiszfeldResult {
                        point: x,
                        iterations: it + 1,
                        converged: true,
                        coincident: None,
                    };
                }
            }
        }
    }
    WeiszfeldResult {
        point: x,
        iterations: max_iter,
        converged: false,
        coincident: None,
    }
}

/// Per-frame geometric median of the candidates.
pub fn geometric_median_fuse(candidates: &CandidateSet, cfg: &SelectionConfig) -> PseudoLabel {
    let mut positions = Vec::with_capacity(candidates.len());
    let mut provenance = Vec::with_capacity(candidates.len());
    for row in &candidates.positions {
        let r = weiszfeld(row, cfg.weiszfeld_tol, cfg.weiszfeld_max_iter);
        if !r.converged {
            log::warn!("Weiszfeld did not converge in {} iterations", cfg.weiszfeld_max_iter);
        }
        positions.push(r.point);
        provenance.push(match r.coincident {
            Some(i) => Provenance::Candidate(i),
            None => Provenance::Synthesized { converged: r.converged },
        });
    }
    PseudoLabel {
        method: SelectorKind::GeometricMedian,
        trajectory: Trajectory {
            start: candidates.start,
            positions,
            visibility: vote_visibility(candidates),
        },
        provenance,
        scores: None,
    }
}

/// Index minimising the mean distance to the other points; ties go low.
pub fn agreement_index(row: &[Point]) -> usize {
    if row.len() < 2 {
        return 0;
    }
    let costs: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(i, p)| row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| distance(*p, *q)).sum::<f64>() / (row.len() - 1) as f64)
        .collect();
    argmin(&costs)
}

fn nearest(row: &[Point], target: Point) -> usize {
    let d: Vec<f64> = row.iter().map(|p| distance(*p, target)).collect();
    argmin(&d)
}

pub fn agreement_select(candidates: &CandidateSet) -> PseudoLabel {
    let picks = candidates.positions.iter().map(|row| agreement_index(row)).collect();
    from_indices(SelectorKind::Agreement, candidates, picks, vote_visibility(candidates))
}

/// Constant-velocity tracker: the first frame uses the agreement rule with
/// zero velocity; afterwards the candidate nearest the prediction
/// `x + v` is chosen and the state corrected by the innovation
/// `r = c - (x + v)` as `x <- x + v + alpha r`, `v <- v + beta r`.
pub fn kalman_cv_select(candidates: &CandidateSet, cfg: &SelectionConfig) -> PseudoLabel {
    let mut picks = Vec::with_capacity(candidates.len());
    let mut x = [0.0, 0.0];
    let mut v = [0.0, 0.0];
    for (t, row) in candidates.positions.iter().enumerate() {
        if t == 0 {
            let k = agreement_index(row);
            x = row[k];
            picks.push(k);
            continue;
        }
        let pred = [x[0] + v[0], x[1] + v[1]];
        let k = nearest(row, pred);
        let r = [row[k][0] - pred[0], row[k][1] - pred[1]];
        x = [pred[0] + cfg.kalman_alpha * r[0], pred[1] + cfg.kalman_alpha * r[1]];
        v = [v[0] + cfg.kalman_beta * r[0], v[1] + cfg.kalman_beta * r[1]];
        picks.push(k);
    }
    from_indices(SelectorKind::KalmanCv, candidates, picks, vote_visibility(candidates))
}

/// Chooses the candidate closest to `2 s[t-1] - s[t-2]`; the first two
/// frames use the agreement rule.
pub fn min_acceleration_select(candidates: &CandidateSet) -> PseudoLabel {
    let mut picks: Vec<usize> = Vec::with_capacity(candidates.len());
    for (t, row) in candidates.positions.iter().enumerate() {
        let k = if t < 2 {
            agreement_index(row)
        } else {
            let a = candidates.at(t - 1, picks[t - 1]);
            let b = candidates.at(t - 2, picks[t - 2]);
            nearest(row, [2.0 * a[0] - b[0], 2.0 * a[1] - b[1]])
        };
        picks.push(k);
    }
    from_indices(SelectorKind::MinAcceleration, candidates, picks, vote_visibility(candidates))
}

/// Runs any non-learned selector. `gt` is required by the oracle and
/// `teacher` by the random teacher.
pub fn select(
    kind: SelectorKind,
    candidates: &CandidateSet,
    gt: Option<&Trajectory>,
    teacher: Option<usize>,
    cfg: &SelectionConfig,
) -> Result<PseudoLabel> {
    match kind {
        SelectorKind::Oracle => {
            let gt = gt.ok_or_else(|| Error::invalid("gt", "the oracle selector needs ground truth"))?;
            oracle_select(candidates, gt)
        }
        SelectorKind::RandomTeacher => teacher_select(candidates, teacher.unwrap_or(0)),
        SelectorKind::GeometricMedian => Ok(geometric_median_fuse(candidates, cfg)),
        SelectorKind::Agreement => Ok(agreement_select(candidates)),
        SelectorKind::KalmanCv => Ok(kalman_cv_select(candidates, cfg)),
        SelectorKind::MinAcceleration => Ok(min_acceleration_select(candidates)),
        SelectorKind::Verifier => Err(Error::invalid("selector", "the verifier selector needs scores; use fuse_pseudo_label")),
    }
}

/// Detects interest points in a grayscale frame.
pub trait KeypointDetector {
    /// Up to `n` positions, strongest first.
    fn detect(&self, frame: &GrayFrame, n: usize) -> Vec<Point>;
}

/// Harris-style corner score over central-difference gradients summed in
/// a 3x3 window; keeps positive 3x3 local maxima.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCorners {
    pub k: f64,
}

impl Default for GradientCorners {
    fn default() -> Self {
        Self { k: 0.04 }
    }
}

fn box_blur(img: &GrayFrame, radius: usize) -> GrayFrame {
    let (w, h) = (img.width, img.height);
    let mut out = GrayFrame::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
            let mut s = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    s += img.at(xx, yy);
                }
            }
            out.data[y * w + x] = s / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        }
    }
    out
}

/// Positions of strict-ish 3x3 local maxima above `min`, strongest first
/// (ties by raster order).
fn local_maxima(img: &GrayFrame, min: f64, n: usize) -> Vec<Point> {
    let (w, h) = (img.width, img.height);
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = img.at(x, y);
            if v <= min {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if (dx, dy) == (0, 0) || xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    let u = img.at(xx as usize, yy as usize);
                    // Plateaus keep only their first pixel in raster order.
                    let earlier = (yy, xx) < (y as i64, x as i64);
                    if u > v || (u == v && earlier) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((v, y * w + x));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    peaks.into_iter().take(n).map(|(_, i)| [(i % w) as f64, (i / w) as f64]).collect()
}

impl KeypointDetector for GradientCorners {
    fn detect(&self, frame: &GrayFrame, n: usize) -> Vec<Point> {
        let (w, h) = (frame.width, frame.height);
        let px = |x: i64, y: i64| frame.at(x.clamp(0, w as i64 - 1) as usize, y.clamp(0, h as i64 - 1) as usize);
        let mut gxx = GrayFrame::zeros(w, h);
        let mut gyy = GrayFrame::zeros(w, h);
        let mut gxy = GrayFrame::zeros(w, h);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let gx = 0.5 * (px(x + 1, y) - px(x - 1, y));
                let gy = 0.5 * (px(x, y + 1) - px(x, y - 1));
                let i = y as usize * w + x as usize;
                gxx.data[i] = gx * gx;
                gyy.data[i] = gy * gy;
                gxy.data[i] = gx * gy;
            }
        }
        let (sxx, syy, sxy) = (box_blur(&gxx, 1), box_blur(&gyy, 1), box_blur(&gxy, 1));
        let mut score = GrayFrame::zeros(w, h);
        for i in 0..w * h {
            let (a, b, c) = (sxx.data[i], syy.data[i], sxy.data[i]);
            score.data[i] = a * b - c * c - self.k * (a + b) * (a + b);
        }
        local_maxima(&score, 0.0, n)
    }
}

/// Box-blurred absolute difference of two frames.
pub fn motion_map(prev: &GrayFrame, cur: &GrayFrame) -> GrayFrame {
    let diff = GrayFrame {
        width: cur.width,
        height: cur.height,
        data: cur.data.iter().zip(&prev.data).map(|(a, b)| (a - b).abs()).collect(),
    };
    box_blur(&diff, 1)
}

/// `count` frames uniformly spaced over the first half of a `frames`-long
/// clip.
pub fn query_frames(frames: usize, count: usize) -> Vec<usize> {
    let half = (frames / 2).max(1);
    let count = count.clamp(1, half);
    (0..count).map(|i| i * half / count).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    Keypoint,
    Motion,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledQuery {
    pub query: QueryPoint,
    /// The slot the query was drawn for.
    pub slot: QuerySource,
    /// What actually produced it; `Random` when the slot fell back.
    pub source: QuerySource,
}

/// Samples `n` queries over `frames`: `ceil(2n/3)` keypoint slots and the
/// rest motion slots, assigned round-robin to frames. Slots a frame cannot
/// fill are filled with uniform random pixels.
pub fn sample_queries(
    volume: &FeatureVolume,
    n: usize,
    frames: &[usize],
    detector: &dyn KeypointDetector,
    rng: &mut Rng,
) -> Result<Vec<SampledQuery>> {
    use crate::world::FeatureProvider;
    if n == 0 {
        return Err(Error::invalid("queries", "need at least one query"));
    }
    if frames.is_empty() {
        return Err(Error::invalid("query frames", "need at least one frame"));
    }
    let (h, w) = volume.grid_size();
    if n > w * h * frames.len() {
        return Err(Error::invalid("queries", format!("{n} queries exceed the {} available pixels", w * h * frames.len())));
    }
    for &t in frames {
        if t >= volume.num_frames() {
            return Err(Error::FrameOutOfRange {
                frame: t,
                frames: volume.num_frames(),
            });
        }
    }
    let n_key = (2 * n).div_ceil(3);
    let slots: Vec<QuerySource> = (0..n).map(|i| if i < n_key { QuerySource::Keypoint } else { QuerySource::Motion }).collect();
    let mut out = Vec::with_capacity(n);
    for (fi, &t) in frames.iter().enumerate() {
        let mine: Vec<QuerySource> = slots.iter().copied().skip(fi).step_by(frames.len()).collect();
        if mine.is_empty() {
            continue;
        }
        let nk = mine.iter().filter(|s| **s == QuerySource::Keypoint).count();
        let nm = mine.len() - nk;
        let cur = volume.intensity(t);
        let keys = detector.detect(&cur, nk);
        let moving = if nm > 0 {
            let other = if t > 0 { t - 1 } else { (t + 1).min(volume.num_frames() - 1) };
            let map = motion_map(&volume.intensity(other), &cur);
            local_maxima(&map, 1e-9, nm)
        } else {
            Vec::new()
        };
        let mut keys = keys.into_iter();
        let mut moving = moving.into_iter();
        for slot in mine {
            let found = match slot {
                QuerySource::Keypoint => keys.next(),
                _ => moving.next(),
            };
            let (pos, source) = match found {
                Some(p) => (p, slot),
                None => ([rng.random_range(0..w) as f64, rng.random_range(0..h) as f64], QuerySource::Random),
            };
            out.push(SampledQuery {
                query: QueryPoint::new(t, pos),
                slot,
                source,
            });
        }
    }
    Ok(out)
}

/// Highest-scoring index of a raw score row, ties low.
pub fn argmax_row(row: &[f64]) -> usize {
    argmax(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::FeatureGrid;
    use proptest::prelude::*;

    fn set(tracks: &[Vec<Point>]) -> CandidateSet {
        CandidateSet::from_tracks(0, tracks, (0..tracks.len()).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for k in SelectorKind::ALL {
            assert_eq!(k.name().parse::<SelectorKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("nope".parse::<SelectorKind>().is_err());
    }

    #[test]
    fn majority_rule() {
        assert!(majority_visible(&[true, true, true, false, false, false]));
        assert!(!majority_visible(&[true, true, false, false, false, false]));
        assert!(majority_visible(&[true, false, true]));
        assert!(!majority_visible(&[true, false, false]));
        assert!(majority_visible(&[true]));
    }

    #[test]
    fn fuse_examples() {
        let c = set(&[vec![[0.0, 0.0]], vec![[1.0, 1.0]], vec![[2.0, 2.0]]]);
        let s = ReliabilityScores::new(vec![vec![0.1, 0.7, 0.2]]).unwrap();
        let p = fuse_pseudo_label(&c, &s, &[vec![true, false, false]]).unwrap();
        assert_eq!(p.provenance, vec![Provenance::Candidate(1)]);
        assert_eq!(p.trajectory.positions, vec![[1.0, 1.0]]);
        assert_eq!(p.trajectory.visibility, vec![false]);

        let one = set(&[vec![[3.0, 4.0], [5.0, 6.0]]]);
        let s = ReliabilityScores::new(vec![vec![1.0], vec![1.0]]).unwrap();
        let p = fuse_pseudo_label(&one, &s, &[vec![true], vec![false]]).unwrap();
        assert_eq!(p.trajectory.positions, one.track(0));
        assert_eq!(p.trajectory.visibility, vec![true, false]);
        assert!(fuse_pseudo_label(&one, &s, &[vec![true]]).is_err());
    }

    #[test]
    fn oracle_examples() {
        let gt = Trajectory::visible(0, vec![[0.0, 0.0]]).unwrap();
        let c = set(&[vec![[5.0, 0.0]], vec![[0.0, 2.0]], vec![[9.0, 0.0]]]);
        assert_eq!(oracle_select(&c, &gt).unwrap().provenance, vec![Provenance::Candidate(1)]);
        assert!(select(SelectorKind::Oracle, &c, None, None, &SelectionConfig::default()).is_err());
    }

    #[test]
    fn random_teacher_round_robin() {
        assert_eq!(random_teacher_assignments(5, 1, 3), vec![0; 5]);
        let a = random_teacher_assignments(6, 3, 11);
        for k in 0..3 {
            assert_eq!(a.iter().filter(|&&x| x == k).count(), 2);
        }
        assert_eq!(a, random_teacher_assignments(6, 3, 11));
        let c = set(&[vec![[0.0, 0.0]; 4], vec![[1.0, 0.0]; 4]]).with_visibility(vec![vec![true, false]; 4]).unwrap();
        let p = teacher_select(&c, 1).unwrap();
        assert_eq!(p.trajectory.visibility, vec![false; 4]);
        assert!(teacher_select(&c, 2).is_err());
    }

    #[test]
    fn weiszfeld_examples() {
        let s3 = 3f64.sqrt();
        let tri = [[0.0, 0.0], [2.0, 0.0], [1.0, s3]];
        let r = weiszfeld(&tri, 1e-6, 100);
        assert!(distance(r.point, [1.0, s3 / 3.0]) < 1e-9 && r.converged);

        let line = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        let r = weiszfeld(&line, 1e-6, 100);
        assert_eq!(r.point, [1.0, 0.0]);

        let one = weiszfeld(&[[2.0, 3.0]], 1e-6, 100);
        assert_eq!(one.point, [2.0, 3.0]);
        assert_eq!(one.coincident, Some(0));

        let hard = [[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [7.0, -3.0]];
        let r = weiszfeld(&hard, 1e-300, 3);
        assert!(!r.converged);
    }

    #[test]
    fn weiszfeld_objective_never_increases() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [4.0, -2.0], [3.0, 3.0]];
        for step in [weiszfeld_step, weiszfeld_update] {
            let mut x = [6.0, 6.0];
            let mut f = weiszfeld_objective(&pts, x);
            for _ in 0..50 {
                let Ok(nx) = step(&pts, x) else { break };
                let nf = weiszfeld_objective(&pts, nx);
                assert!(nf <= f + 1e-12);
                (x, f) = (nx, nf);
            }
        }
    }

    #[test]
    fn agreement_examples() {
        let row = [[0.0, 0.0], [0.0, 1.0], [10.0, 10.0]];
        assert_eq!(agreement_index(&row), 1);
        assert_eq!(agreement_index(&[[0.0, 0.0], [5.0, 5.0]]), 0);
        assert_eq!(agreement_index(&[[1.0, 1.0]; 4]), 0);
    }

    #[test]
    fn kalman_follows_on_track_candidate() {
        let gt: Vec<Point> = (0..10).map(|i| [i as f64, 0.0]).collect();
        let off: Vec<Point> = gt.iter().map(|p| [p[0] + 5.0, p[1]]).collect();
        let c = set(&[gt, off]);
        let p = kalman_cv_select(&c, &SelectionConfig::default());
        assert!(p.provenance.iter().all(|&q| q == Provenance::Candidate(0)));
        let single = set(&[vec![[0.0, 0.0]], vec![[0.0, 1.0]], vec![[10.0, 10.0]]]);
        assert_eq!(kalman_cv_select(&single, &SelectionConfig::default()).provenance, vec![Provenance::Candidate(1)]);
    }

    #[test]
    fn min_acceleration_prefers_straight_line() {
        let straight: Vec<Point> = (0..6).map(|i| [2.0 * i as f64, 1.0]).collect();
        let mut jumpy = straight.clone();
        for p in jumpy.iter_mut().skip(3) {
            p[1] += 20.0;
        }
        // Frames 0..3 coincide; agreement ties go to index 0.
        let c = set(&[jumpy, straight]);
        let p = min_acceleration_select(&c);
        for t in 3..6 {
            assert_eq!(p.provenance[t], Provenance::Candidate(1));
        }
        let two = set(&[vec![[0.0, 0.0], [1.0, 0.0]], vec![[5.0, 5.0], [1.0, 9.0]]]);
        assert_eq!(min_acceleration_select(&two).provenance, vec![Provenance::Candidate(0); 2]);
    }

    fn blob_volume(frames: usize, path: &[Point]) -> FeatureVolume {
        let grids = (0..frames)
            .map(|t| {
                FeatureGrid::from_fn(32, 32, 1, |x, y, _| {
                    let d2 = (x as f64 - path[t][0]).powi(2) + (y as f64 - path[t][1]).powi(2);
                    (-d2 / 4.0).exp()
                })
            })
            .collect();
        FeatureVolume::new(grids).unwrap()
    }

    #[test]
    fn query_slot_split_and_static_fallback() {
        let path = vec![[10.0, 12.0]; 6];
        let vol = blob_volume(6, &path);
        let q = sample_queries(&vol, 3, &[0], &GradientCorners::default(), &mut rng_from(1, &[])).unwrap();
        assert_eq!(q.iter().filter(|s| s.slot == QuerySource::Keypoint).count(), 2);
        assert_eq!(q.iter().filter(|s| s.slot == QuerySource::Motion).count(), 1);
        let q = sample_queries(&vol, 9, &[1, 2], &GradientCorners::default(), &mut rng_from(1, &[])).unwrap();
        assert_eq!(q.len(), 9);
        for s in q.iter().filter(|s| s.slot == QuerySource::Motion) {
            assert_eq!(s.source, QuerySource::Random);
        }
        assert!(sample_queries(&vol, 32 * 32 + 1, &[0], &GradientCorners::default(), &mut rng_from(1, &[])).is_err());
        assert_eq!(query_frames(24, 4), vec![0, 3, 6, 9]);
    }

    #[test]
    fn motion_queries_follow_the_blob() {
        let path: Vec<Point> = (0..8).map(|t| [6.0 + 2.0 * t as f64, 16.0]).collect();
        let vol = blob_volume(8, &path);
        let frames = [2, 3, 4, 5];
        let q = sample_queries(&vol, 12, &frames, &GradientCorners::default(), &mut rng_from(2, &[])).unwrap();
        let motion: Vec<_> = q.iter().filter(|s| s.source == QuerySource::Motion).collect();
        assert!(!motion.is_empty());
        for s in motion {
            let t = s.query.t0;
            let near = distance(s.query.pos, path[t]).min(distance(s.query.pos, path[t - 1]));
            assert!(near <= 3.0, "motion query {:?} far from blob", s.query);
        }
    }

    #[test]
    fn corner_detector_finds_square_corners() {
        let mut f = GrayFrame::zeros(20, 20);
        for y in 5..15 {
            for x in 5..15 {
                f.data[y * 20 + x] = 1.0;
            }
        }
        let pts = GradientCorners::default().detect(&f, 4);
        assert_eq!(pts.len(), 4);
        for p in pts {
            let c = [[4.5, 4.5], [14.5, 4.5], [4.5, 14.5], [14.5, 14.5]];
            assert!(c.iter().any(|q| distance(p, *q) <= 1.5), "{p:?}");
        }
    }

    fn arb_set() -> impl Strategy<Value = (CandidateSet, Trajectory)> {
        (1usize..6, 1usize..5).prop_flat_map(|(l, m)| {
            (
                proptest::collection::vec(proptest::collection::vec((-50i32..50, -50i32..50), m), l),
                proptest::collection::vec((-50i32..50, -50i32..50), l),
            )
                .prop_map(move |(rows, gt)| {
                    let pos: Vec<Vec<Point>> = rows.iter().map(|r| r.iter().map(|&(x, y)| [x as f64, y as f64]).collect()).collect();
                    let c = CandidateSet::new(0, pos, (0..m).map(|i| i.to_string()).collect()).unwrap();
                    let g = Trajectory::visible(0, gt.iter().map(|&(x, y)| [x as f64, y as f64]).collect()).unwrap();
                    (c, g)
                })
        })
    }

    proptest! {
        #[test]
        fn weiszfeld_reaches_a_stationary_point(pts in prop::collection::vec((0.0..64.0f64, 0.0..64.0f64), 3..9)) {
            let pts: Vec<Point> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let r = weiszfeld(&pts, 1e-6, 100);
            prop_assert!(r.converged);
            if r.coincident.is_none() {
                let f = weiszfeld_objective(&pts, r.point);
                for k in 0..16 {
                    let a = k as f64 * std::f64::consts::PI / 8.0;
                    let y = [r.point[0] + 1e-3 * a.cos(), r.point[1] + 1e-3 * a.sin()];
                    prop_assert!(weiszfeld_objective(&pts, y) >= f - 1e-9);
                }
            }
        }

        #[test]
        fn fused_positions_match_argmax((c, _) in arb_set(), seed in any::<u64>()) {
            let mut rng = rng_from(seed, &[]);
            let m = c.num_candidates();
            let scores: Vec<Vec<f64>> = (0..c.len()).map(|_| {
                let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            }).collect();
            let s = ReliabilityScores::new(scores).unwrap();
            let p = fuse_pseudo_label(&c, &s, &candidate_visibility(&c)).unwrap();
            for t in 0..c.len() {
                let k = p.provenance[t].candidate().unwrap();
                prop_assert_eq!(k, s.argmax(t));
                prop_assert_eq!(p.trajectory.positions[t], c.at(t, k));
            }
        }

        #[test]
        fn oracle_error_is_minimum((c, g) in arb_set()) {
            let p = oracle_select(&c, &g).unwrap();
            let e = euclidean_errors(&c, &g).unwrap();
            for t in 0..c.len() {
                let best = e[t].iter().copied().fold(f64::INFINITY, f64::min);
                prop_assert_eq!(distance(p.trajectory.positions[t], g.positions[t]), best);
            }
        }

        #[test]
        fn selectors_scale_invariant((c, g) in arb_set(), lambda in prop::sample::select(vec![0.5, 2.0, 4.0])) {
            let scale = |s: &CandidateSet| {
                let mut s = s.clone();
                s.positions.iter_mut().flatten().for_each(|p| { p[0] *= lambda; p[1] *= lambda; });
                s
            };
            let gs = Trajectory::visible(0, g.positions.iter().map(|p| [p[0] * lambda, p[1] * lambda]).collect()).unwrap();
            let cfg = SelectionConfig::default();
            let cs = scale(&c);
            for kind in [SelectorKind::Oracle, SelectorKind::Agreement, SelectorKind::KalmanCv, SelectorKind::MinAcceleration] {
                let a = select(kind, &c, Some(&g), None, &cfg).unwrap();
                let b = select(kind, &cs, Some(&gs), None, &cfg).unwrap();
                prop_assert_eq!(a.provenance, b.provenance);
            }
        }
    }
}
