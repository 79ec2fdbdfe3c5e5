//! Synthetic corruption of ground-truth tracks into training candidates.
//!
//! Six perturbation types are each triggered independently with their own
//! probability; all trigger flags are drawn before any magnitude so the
//! trigger statistics do not depend on which types fire. A complete switch
//! replaces the base track first, the remaining types add offsets in a
//! fixed order, and light Gaussian noise is added last.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trajectory::{distance, CandidateSet, Point, Trajectory};

pub const MAX_CANDIDATES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Stable,
    Gradual,
    LongDrift,
    Spike,
    Jump,
    Switch,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::Stable,
        PerturbationKind::Gradual,
        PerturbationKind::LongDrift,
        PerturbationKind::Spike,
        PerturbationKind::Jump,
        PerturbationKind::Switch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Stable => "stable",
            PerturbationKind::Gradual => "gradual",
            PerturbationKind::LongDrift => "long_drift",
            PerturbationKind::Spike => "spike",
            PerturbationKind::Jump => "jump",
            PerturbationKind::Switch => "switch",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Trigger probabilities and magnitude ranges, all in pixels or frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    pub base_noise_std: f64,
    pub stable_p: f64,
    pub stable_min: f64,
    pub stable_max: f64,
    pub stable_window_min: usize,
    pub stable_window_max: usize,
    pub gradual_p: f64,
    pub gradual_min: f64,
    pub gradual_max: f64,
    pub blend_min: f64,
    pub blend_max: f64,
    pub long_drift_p: f64,
    pub long_drift_max: f64,
    pub spike_p: f64,
    pub spike_magnitude: f64,
    pub spike_count_max: usize,
    pub spike_len_max: usize,
    pub jump_p: f64,
    pub jump_max: f64,
    pub switch_p: f64,
    /// Candidates per track.
    pub candidates: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            base_noise_std: 1.0,
            stable_p: 0.5,
            stable_min: 2.0,
            stable_max: 4.0,
            stable_window_min: 3,
            stable_window_max: 5,
            gradual_p: 0.4,
            gradual_min: 16.0,
            gradual_max: 32.0,
            blend_min: 0.3,
            blend_max: 1.0,
            long_drift_p: 0.3,
            long_drift_max: 64.0,
            spike_p: 0.3,
            spike_magnitude: 8.0,
            spike_count_max: 3,
            spike_len_max: 2,
            jump_p: 0.1,
            jump_max: 128.0,
            switch_p: 0.1,
            candidates: 6,
        }
    }
}

impl PerturbationConfig {
    /// Every type disabled and no base noise.
    pub fn off() -> Self {
        Self {
            base_noise_std: 0.0,
            stable_p: 0.0,
            gradual_p: 0.0,
            long_drift_p: 0.0,
            spike_p: 0.0,
            jump_p: 0.0,
            switch_p: 0.0,
            ..Self::default()
        }
    }

    pub fn probability(&self, kind: PerturbationKind) -> f64 {
        match kind {
            PerturbationKind::Stable => self.stable_p,
            PerturbationKind::Gradual => self.gradual_p,
            PerturbationKind::LongDrift => self.long_drift_p,
            PerturbationKind::Spike => self.spike_p,
            PerturbationKind::Jump => self.jump_p,
            PerturbationKind::Switch => self.switch_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in PerturbationKind::ALL {
            let p = self.probability(kind);
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("perturbation.{kind}_p"), "must be in [0, 1]"));
            }
        }
        let ranges = [
            ("stable", self.stable_min, self.stable_max),
            ("gradual", self.gradual_min, self.gradual_max),
            ("blend", self.blend_min, self.blend_max),
        ];
        for (name, lo, hi) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::invalid(format!("perturbation.{name}_min"), "range must be positive and ordered"));
            }
        }
        if self.blend_max > 1.0 {
            return Err(Error::invalid("perturbation.blend_max", "must be at most 1"));
        }
        for (name, v) in [
            ("long_drift_max", self.long_drift_max),
            ("spike_magnitude", self.spike_magnitude),
            ("jump_max", self.jump_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("perturbation.{name}"), "must be positive"));
            }
        }
        if !(self.base_noise_std >= 0.0 && self.base_noise_std.is_finite()) {
            return Err(Error::invalid("perturbation.base_noise_std", "must be non-negative"));
        }
        if self.stable_window_min == 0 || self.stable_window_min > self.stable_window_max {
            return Err(Error::invalid("perturbation.stable_window_min", "window range must be positive and ordered"));
        }
        if self.spike_count_max == 0 || self.spike_len_max == 0 {
            return Err(Error::invalid("perturbation.spike_count_max", "must be positive"));
        }
        if !(1..=MAX_CANDIDATES).contains(&self.candidates) {
            return Err(Error::invalid("perturbation.candidates", format!("must be in [1, {MAX_CANDIDATES}]")));
        }
        Ok(())
    }
}

/// One perturbed copy of a track and the types that fired.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedTrack {
    pub positions: Vec<Point>,
    pub visibility: Vec<bool>,
    pub triggered: Vec<PerturbationKind>,
}

impl PerturbedTrack {
    /// Source label such as `perturbed:stable+spike`, or `perturbed:none`.
    pub fn label(&self) -> String {
        if self.triggered.is_empty() {
            "perturbed:none".into()
        } else {
            let names: Vec<&str> = self.triggered.iter().map(|k| k.name()).collect();
            format!("perturbed:{}", names.join("+"))
        }
    }
}

fn unit(rng: &mut Rng) -> Point {
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    [a.cos(), a.sin()]
}

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn clip_norm(p: Point, max: f64) -> Point {
    let n = p[0].hypot(p[1]);
    if n > max {
        [p[0] * max / n, p[1] * max / n]
    } else {
        p
    }
}

/// Ramp from 0 at `start` to 1 at the last frame.
fn ramp(i: usize, start: usize, len: usize) -> f64 {
    if i < start {
        0.0
    } else if len <= start + 1 {
        1.0
    } else {
        (i - start) as f64 / (len - 1 - start) as f64
    }
}

fn stable_offsets(cfg: &PerturbationConfig, len: usize, rng: &mut Rng) -> Vec<Point> {
    let mag = rng.random_range(cfg.stable_min..=cfg.stable_max);
    let window = rng.random_range(cfg.stable_window_min..=cfg.stable_window_max);
    let raw: Vec<Point> = (0..len).map(|_| [mag * gauss(rng), mag * gauss(rng)]).collect();
    let half = window / 2;
    (0..len)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (lo + window).min(len);
            let n = (hi - lo) as f64;
            let s = raw[lo..hi].iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
            clip_norm([s[0] / n, s[1] / n], mag)
        })
        .collect()
}

/// Draws one perturbed copy of `gt`. Neighbours must cover the same frames.
pub fn perturb_track(
    gt: &Trajectory,
    neighbors: &[Trajectory],
    cfg: &PerturbationConfig,
    rng: &mut Rng,
) -> Result<PerturbedTrack> {
    let len = gt.len();
    if len == 0 {
        return Err(Error::invalid("gt", "empty trajectory"));
    }
    for n in neighbors {
        if n.start != gt.start || n.len() != len {
            return Err(Error::invalid(
                "neighbors",
                format!("neighbour covers frames {}..{}, track covers {}..{}", n.start, n.start + n.len(), gt.start, gt.start + len),
            ));
        }
    }
    let fired: Vec<PerturbationKind> = PerturbationKind::ALL
        .into_iter()
        .filter(|&k| rng.random::<f64>() < cfg.probability(k))
        .collect();
    let on = |k| fired.contains(&k);
    let mut triggered = Vec::new();
    let mut pos = gt.positions.clone();
    let mut vis = gt.visibility.clone();

    // The track the other types corrupt; may be a neighbour after a switch.
    let mut base = gt;
    if on(PerturbationKind::Switch) {
        match neighbors.choose(rng) {
            Some(n) => {
                base = n;
                pos.clone_from(&n.positions);
                vis.clone_from(&n.visibility);
                triggered.push(PerturbationKind::Switch);
            }
            None => log::debug!("switch skipped: no neighbours"),
        }
    }

    if on(PerturbationKind::Stable) {
        for (p, o) in pos.iter_mut().zip(stable_offsets(cfg, len, rng)) {
            p[0] += o[0];
            p[1] += o[1];
        }
        triggered.push(PerturbationKind::Stable);
    }

    if on(PerturbationKind::Gradual) {
        let start = rng.random_range(0..len);
        let close: Vec<&Trajectory> = neighbors
            .iter()
            .filter(|n| {
                let d = distance(n.positions[start], base.positions[start]);
                (cfg.gradual_min..=cfg.gradual_max).contains(&d)
            })
            .collect();
        let blend = !close.is_empty() && rng.random::<bool>();
        if blend {
            let n = close[rng.random_range(0..close.len())];
            let end = rng.random_range(cfg.blend_min..=cfg.blend_max);
            for i in 0..len {
                let w = end * ramp(i, start, len);
                let off = clip_norm(
                    [w * (n.positions[i][0] - base.positions[i][0]), w * (n.positions[i][1] - base.positions[i][1])],
                    cfg.gradual_max,
                );
                pos[i][0] += off[0];
                pos[i][1] += off[1];
            }
        } else {
            let mag = rng.random_range(cfg.gradual_min..=cfg.gradual_max);
            let dir = unit(rng);
            for (i, p) in pos.iter_mut().enumerate() {
                let r = mag * ramp(i, start, len);
                p[0] += r * dir[0];
                p[1] += r * dir[1];
            }
        }
        triggered.push(PerturbationKind::Gradual);
    }

    if on(PerturbationKind::LongDrift) {
        let mag = cfg.long_drift_max * (1.0 - rng.random::<f64>());
        let dir = unit(rng);
        for (i, p) in pos.iter_mut().enumerate() {
            let r = mag * ramp(i, 0, len);
            p[0] += r * dir[0];
            p[1] += r * dir[1];
        }
        triggered.push(PerturbationKind::LongDrift);
    }

    if on(PerturbationKind::Spike) {
        // Spikes overwrite each other rather than stack, so the spike
        // contribution never exceeds one magnitude.
        let mut spike = vec![None::<Point>; len];
        let count = rng.random_range(1..=cfg.spike_count_max);
        for _ in 0..count {
            let at = rng.random_range(0..len);
            let dur = rng.random_range(1..=cfg.spike_len_max);
            let dir = unit(rng);
            for s in spike.iter_mut().skip(at).take(dur) {
                *s = Some([cfg.spike_magnitude * dir[0], cfg.spike_magnitude * dir[1]]);
            }
        }
        for (p, s) in pos.iter_mut().zip(spike) {
            if let Some(s) = s {
                p[0] += s[0];
                p[1] += s[1];
            }
        }
        triggered.push(PerturbationKind::Spike);
    }

    if on(PerturbationKind::Jump) {
        let at = if len > 1 { rng.random_range(1..len) } else { 0 };
        let near: Vec<&Trajectory> = neighbors
            .iter()
            .filter(|n| distance(n.positions[at], base.positions[at]) <= cfg.jump_max)
            .collect();
        if !near.is_empty() && rng.random::<bool>() {
            let n = near[rng.random_range(0..near.len())];
            for i in at..len {
                // Keep the corruption accumulated so far on top of the new identity.
                let off = [pos[i][0] - base.positions[i][0], pos[i][1] - base.positions[i][1]];
                pos[i] = [n.positions[i][0] + off[0], n.positions[i][1] + off[1]];
                vis[i] = n.visibility[i];
            }
        } else {
            let mag = cfg.jump_max * (1.0 - rng.random::<f64>());
            let dir = unit(rng);
            for p in pos.iter_mut().skip(at) {
                p[0] += mag * dir[0];
                p[1] += mag * dir[1];
            }
        }
        triggered.push(PerturbationKind::Jump);
    }

    if cfg.base_noise_std > 0.0 {
        for p in pos.iter_mut() {
            p[0] += cfg.base_noise_std * gauss(rng);
            p[1] += cfg.base_noise_std * gauss(rng);
        }
    }
    Ok(PerturbedTrack {
        positions: pos,
        visibility: vis,
        triggered,
    })
}

/// `cfg.candidates` independent perturbations of `gt`, with per-candidate
/// visibility and source labels.
pub fn generate_candidates(
    gt: &Trajectory,
    neighbors: &[Trajectory],
    cfg: &PerturbationConfig,
    rng: &mut Rng,
) -> Result<CandidateSet> {
    cfg.validate()?;
    let tracks = (0..cfg.candidates)
        .map(|_| perturb_track(gt, neighbors, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    let positions: Vec<Vec<Point>> = tracks.iter().map(|t| t.positions.clone()).collect();
    let labels = tracks.iter().map(PerturbedTrack::label).collect();
    let vis = (0..gt.len()).map(|i| tracks.iter().map(|t| t.visibility[i]).collect()).collect();
    CandidateSet::from_tracks(gt.start, &positions, labels)?.with_visibility(vis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;

    fn line(len: usize, x0: f64) -> Trajectory {
        Trajectory::visible(0, (0..len).map(|i| [x0 + i as f64, 10.0 + 0.5 * i as f64]).collect()).unwrap()
    }

    fn only(kind: PerturbationKind) -> PerturbationConfig {
        let mut c = PerturbationConfig::off();
        match kind {
            PerturbationKind::Stable => c.stable_p = 1.0,
            PerturbationKind::Gradual => c.gradual_p = 1.0,
            PerturbationKind::LongDrift => c.long_drift_p = 1.0,
            PerturbationKind::Spike => c.spike_p = 1.0,
            PerturbationKind::Jump => c.jump_p = 1.0,
            PerturbationKind::Switch => c.switch_p = 1.0,
        }
        c
    }

    fn max_dev(a: &[Point], b: &[Point]) -> f64 {
        a.iter().zip(b).map(|(p, q)| distance(*p, *q)).fold(0.0, f64::max)
    }

    #[test]
    fn all_off_is_identity() {
        let gt = line(24, 5.3);
        let c = generate_candidates(&gt, &[line(24, 40.0)], &PerturbationConfig { candidates: 1, ..PerturbationConfig::off() }, &mut rng_from(1, &[])).unwrap();
        assert_eq!(c.track(0), gt.positions);
        assert_eq!(c.sources, vec!["perturbed:none".to_string()]);
    }

    #[test]
    fn switch_replaces_track() {
        let gt = line(10, 0.0);
        let n = Trajectory::new(0, line(10, 50.0).positions, (0..10).map(|i| i % 2 == 0).collect()).unwrap();
        let out = perturb_track(&gt, std::slice::from_ref(&n), &only(PerturbationKind::Switch), &mut rng_from(2, &[])).unwrap();
        assert_eq!(out.positions, n.positions);
        assert_eq!(out.visibility, n.visibility);
        assert_eq!(out.triggered, vec![PerturbationKind::Switch]);
        // Without neighbours the type is skipped.
        let out = perturb_track(&gt, &[], &only(PerturbationKind::Switch), &mut rng_from(2, &[])).unwrap();
        assert_eq!(out.positions, gt.positions);
        assert!(out.triggered.is_empty());
    }

    #[test]
    fn per_type_bounds() {
        let gt = line(24, 0.0);
        let neighbors = [line(24, 20.0), line(24, 30.0), line(24, 100.0)];
        let caps = [
            (PerturbationKind::Stable, 4.0),
            (PerturbationKind::Gradual, 32.0),
            (PerturbationKind::LongDrift, 64.0),
            (PerturbationKind::Spike, 8.0),
            (PerturbationKind::Jump, 128.0),
        ];
        for (kind, cap) in caps {
            let cfg = only(kind);
            let mut biggest: f64 = 0.0;
            for s in 0..300 {
                let out = perturb_track(&gt, &neighbors, &cfg, &mut rng_from(s, &[kind as u64])).unwrap();
                let d = max_dev(&out.positions, &gt.positions);
                assert!(d <= cap + 1e-9, "{kind}: deviation {d} above {cap}");
                biggest = biggest.max(d);
            }
            assert!(biggest > 0.5 * cap, "{kind}: never came close to its cap ({biggest})");
        }
    }

    #[test]
    fn long_drift_grows_linearly() {
        let gt = line(9, 0.0);
        let out = perturb_track(&gt, &[], &only(PerturbationKind::LongDrift), &mut rng_from(3, &[])).unwrap();
        let d: Vec<f64> = out.positions.iter().zip(&gt.positions).map(|(a, b)| distance(*a, *b)).collect();
        assert!(d[0].abs() < 1e-12);
        for i in 1..9 {
            assert!((d[i] - d[8] * i as f64 / 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jump_is_a_step() {
        let gt = line(12, 0.0);
        for s in 0..20 {
            let out = perturb_track(&gt, &[], &only(PerturbationKind::Jump), &mut rng_from(s, &[9])).unwrap();
            assert_eq!(out.positions[0], gt.positions[0]);
            let offs: Vec<Point> = out.positions.iter().zip(&gt.positions).map(|(a, b)| [a[0] - b[0], a[1] - b[1]]).collect();
            let first = offs.iter().position(|o| o[0] != 0.0 || o[1] != 0.0).unwrap();
            for o in &offs[first..] {
                assert!(distance(*o, offs[first]) < 1e-9);
            }
        }
    }

    #[test]
    fn spikes_recover() {
        let gt = line(24, 0.0);
        let out = perturb_track(&gt, &[], &only(PerturbationKind::Spike), &mut rng_from(4, &[])).unwrap();
        let hit = out.positions.iter().zip(&gt.positions).filter(|(a, b)| distance(**a, **b) > 1e-9).count();
        assert!((1..=6).contains(&hit));
    }

    #[test]
    fn trigger_rate_of_stable_noise() {
        let gt = line(8, 0.0);
        let cfg = PerturbationConfig::default();
        let mut rng = rng_from(5, &[]);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| perturb_track(&gt, &[], &cfg, &mut rng).unwrap().triggered.contains(&PerturbationKind::Stable))
            .count();
        assert!((hits as f64 / n as f64 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn default_candidates_are_distinct_and_labelled() {
        let gt = line(24, 0.0);
        let c = generate_candidates(&gt, &[line(24, 25.0)], &PerturbationConfig::default(), &mut rng_from(6, &[])).unwrap();
        assert_eq!(c.num_candidates(), 6);
        for a in 0..6 {
            assert!(c.sources[a].starts_with("perturbed:"));
            for b in a + 1..6 {
                assert_ne!(c.track(a), c.track(b));
            }
        }
    }

    #[test]
    fn deviations_span_the_quoted_range() {
        let gt = line(24, 0.0);
        let cfg = PerturbationConfig::default();
        let mut rng = rng_from(7, &[]);
        let devs: Vec<f64> = (0..3000)
            .map(|_| max_dev(&perturb_track(&gt, &[], &cfg, &mut rng).unwrap().positions, &gt.positions))
            .collect();
        let lo = devs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = devs.iter().copied().fold(0.0, f64::max);
        assert!(lo < 4.0 && hi > 64.0, "span {lo}..{hi}");
    }

    #[test]
    fn rejects_bad_config_and_neighbors() {
        let gt = line(5, 0.0);
        let mut rng = rng_from(8, &[]);
        for cfg in [
            PerturbationConfig { candidates: 0, ..Default::default() },
            PerturbationConfig { candidates: 65, ..Default::default() },
            PerturbationConfig { jump_p: 1.5, ..Default::default() },
            PerturbationConfig { stable_min: 5.0, ..Default::default() },
        ] {
            assert!(generate_candidates(&gt, &[], &cfg, &mut rng).is_err());
        }
        assert!(perturb_track(&gt, &[line(4, 0.0)], &PerturbationConfig::default(), &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn deterministic_given_seed(seed in any::<u64>(), len in 1usize..30) {
            let gt = line(len, 3.0);
            let nb = [line(len, 20.0), line(len, 60.0)];
            let cfg = PerturbationConfig::default();
            let a = generate_candidates(&gt, &nb, &cfg, &mut rng_from(seed, &[])).unwrap();
            let b = generate_candidates(&gt, &nb, &cfg, &mut rng_from(seed, &[])).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn bounded_without_jump_or_switch(seed in any::<u64>(), len in 1usize..30) {
            let gt = line(len, 0.0);
            let nb = [line(len, 18.0), line(len, 31.0)];
            let cfg = PerturbationConfig { jump_p: 0.0, switch_p: 0.0, base_noise_std: 0.0, ..Default::default() };
            let out = perturb_track(&gt, &nb, &cfg, &mut rng_from(seed, &[])).unwrap();
            let cap = cfg.stable_max + cfg.gradual_max + cfg.long_drift_max + cfg.spike_magnitude;
            prop_assert!(max_dev(&out.positions, &gt.positions) <= cap + 1e-9);
        }
    }
}
