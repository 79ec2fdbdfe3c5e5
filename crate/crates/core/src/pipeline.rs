//! End-to-end orchestration and the JSON interchange records used by the
//! command-line tool.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{error_curve, evaluate, Aggregation, ErrorCurve, EvalReport};
use crate::perturb::PerturbationConfig;
use crate::rng::{rng_from, STREAM_PERTURB};
use crate::select::{candidate_visibility, fuse_pseudo_label, random_teacher_assignments, select, PseudoLabel, SelectionConfig, SelectorKind};
use crate::train::{sample_example, verifier_gradient_check, GradCheck, LogEntry, Trainer};
use crate::trajectory::{CandidateSet, QueryPoint, ReliabilityScores, Trajectory};
use crate::transformer::{verify, ModelConfig, VerifierParams};
use crate::world::{FeatureProvider, FeatureVolume, Manifest, SyntheticVideo, WorldConfig};

/// One query with its candidate trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: usize,
    pub video: String,
    pub query: QueryPoint,
    pub candidates: CandidateSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub id: usize,
    pub video: String,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: usize,
    pub scores: ReliabilityScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: usize,
    pub label: PseudoLabel,
}

/// Rendered videos keyed by manifest id.
pub struct VideoSet {
    pub ids: Vec<String>,
    pub videos: Vec<SyntheticVideo>,
    pub volumes: Vec<FeatureVolume>,
    index: HashMap<String, usize>,
}

impl VideoSet {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let mut set = Self {
            ids: Vec::new(),
            videos: Vec::new(),
            volumes: Vec::new(),
            index: HashMap::new(),
        };
        for spec in &manifest.videos {
            let video = spec.generate()?;
            set.volumes.push(video.render()?);
            set.videos.push(video);
            set.index.insert(spec.id.clone(), set.ids.len());
            set.ids.push(spec.id.clone());
        }
        Ok(set)
    }

    pub fn volume(&self, id: &str) -> Result<&FeatureVolume> {
        self.index
            .get(id)
            .map(|&i| &self.volumes[i])
            .ok_or_else(|| Error::invalid("video", format!("{id:?} is not in the manifest")))
    }
}

/// Draws `n` ground-truth tracks with `m` perturbed candidates each. Track
/// `i` depends only on `(seed, i)`.
pub fn perturb_tracks(
    videos: &VideoSet,
    perturbation: &PerturbationConfig,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<(Vec<TrackRecord>, Vec<GroundTruthRecord>)> {
    let mut tracks = Vec::with_capacity(n);
    let mut gts = Vec::with_capacity(n);
    for id in 0..n {
        let mut rng = rng_from(seed, &[STREAM_PERTURB, id as u64]);
        let ex = sample_example(&videos.videos, perturbation, m, &mut rng)?;
        let video = videos.ids[ex.video].clone();
        tracks.push(TrackRecord {
            id,
            video: video.clone(),
            query: ex.query,
            candidates: ex.candidates,
        });
        gts.push(GroundTruthRecord {
            id,
            video,
            trajectory: ex.gt,
        });
    }
    Ok((tracks, gts))
}

pub fn score_tracks(params: &VerifierParams, videos: &VideoSet, tracks: &[TrackRecord]) -> Result<Vec<ScoreRecord>> {
    tracks
        .iter()
        .map(|t| {
            Ok(ScoreRecord {
                id: t.id,
                scores: verify(videos.volume(&t.video)?, &t.query, &t.candidates, params)?,
            })
        })
        .collect()
}

fn by_id<'a, T>(items: &'a [T], id: impl Fn(&T) -> usize, what: &str) -> Result<HashMap<usize, &'a T>> {
    let mut map = HashMap::with_capacity(items.len());
    for it in items {
        if map.insert(id(it), it).is_some() {
            return Err(Error::invalid(what, format!("duplicate track id {}", id(it))));
        }
    }
    Ok(map)
}

/// Applies one selector to every track.
pub fn select_tracks(
    kind: SelectorKind,
    tracks: &[TrackRecord],
    scores: Option<&[ScoreRecord]>,
    gt: Option<&[GroundTruthRecord]>,
    seed: u64,
    cfg: &SelectionConfig,
) -> Result<Vec<LabelRecord>> {
    let scores = scores.map(|s| by_id(s, |r| r.id, "scores")).transpose()?;
    let gt = gt.map(|g| by_id(g, |r| r.id, "ground truth")).transpose()?;
    match kind {
        SelectorKind::Verifier if scores.is_none() => return Err(Error::invalid("scores", "the verifier selector needs a scores file")),
        SelectorKind::Oracle if gt.is_none() => return Err(Error::invalid("gt", "the oracle selector needs a ground-truth file")),
        _ => {}
    }
    let teachers = match (kind, tracks.first()) {
        (SelectorKind::RandomTeacher, Some(t)) => {
            let m = t.candidates.num_candidates();
            if let Some(bad) = tracks.iter().find(|r| r.candidates.num_candidates() != m) {
                return Err(Error::shape("teachers per track", m, bad.candidates.num_candidates()));
            }
            random_teacher_assignments(tracks.len(), m, seed)
        }
        _ => Vec::new(),
    };
    tracks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let missing = |what: &str| Error::invalid(what, format!("no entry for track {}", t.id));
            let label = if kind == SelectorKind::Verifier {
                let s = scores.as_ref().expect("checked").get(&t.id).ok_or_else(|| missing("scores"))?;
                fuse_pseudo_label(&t.candidates, &s.scores, &candidate_visibility(&t.candidates))?
            } else {
                let g = match &gt {
                    Some(map) if kind == SelectorKind::Oracle => Some(&map.get(&t.id).ok_or_else(|| missing("gt"))?.trajectory),
                    _ => None,
                };
                select(kind, &t.candidates, g, teachers.get(i).copied(), cfg)?
            };
            Ok(LabelRecord { id: t.id, label })
        })
        .collect()
}

fn pairs<'a>(labels: &'a [LabelRecord], gt: &'a [GroundTruthRecord]) -> Result<Vec<(&'a Trajectory, &'a Trajectory)>> {
    let gt = by_id(gt, |r| r.id, "ground truth")?;
    labels
        .iter()
        .map(|l| {
            let g = gt.get(&l.id).ok_or_else(|| Error::invalid("gt", format!("no entry for track {}", l.id)))?;
            Ok((&l.label.trajectory, &g.trajectory))
        })
        .collect()
}

pub fn evaluate_labels(method: &str, labels: &[LabelRecord], gt: &[GroundTruthRecord], aggregation: Aggregation) -> Result<EvalReport> {
    evaluate(method, &pairs(labels, gt)?, aggregation)
}

pub fn error_curves(labels: &[LabelRecord], gt: &[GroundTruthRecord]) -> Result<Vec<ErrorCurve>> {
    pairs(labels, gt)?.into_iter().map(|(p, g)| error_curve(p, g)).collect()
}

/// Everything a full run produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub log: Vec<LogEntry>,
    /// One report per selector, in [`SelectorKind::ALL`] order.
    pub reports: Vec<EvalReport>,
}

impl PipelineOutput {
    pub fn report(&self, kind: SelectorKind) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == kind.name())
    }
}

/// Trains a verifier, perturbs held-out tracks, runs every selector and
/// evaluates it.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.dataset(), cfg.training.clone())?;
    let log = trainer.run(None, |e| log::debug!("step {} loss {:.5} lr {:.3e}", e.step, e.loss, e.lr))?;
    let eval = cfg.eval_dataset();
    let manifest = Manifest::new(&eval.world, eval.videos, eval.seed)?;
    let videos = VideoSet::load(&manifest)?;
    let (tracks, gt) = perturb_tracks(&videos, &cfg.perturbation, cfg.eval.tracks, cfg.eval.candidates, cfg.eval.seed)?;
    let scores = score_tracks(&trainer.params, &videos, &tracks)?;
    let reports = SelectorKind::ALL
        .into_iter()
        .map(|kind| {
            let labels = select_tracks(kind, &tracks, Some(&scores), Some(&gt), cfg.eval.seed, &cfg.selection)?;
            evaluate_labels(kind.name(), &labels, &gt, cfg.eval.aggregation)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineOutput { log, reports })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub width: usize,
    pub frames: usize,
    pub candidates: usize,
    pub epsilon: f64,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Finite-difference check of the full verifier loss on one track of a
/// small world with `width`-dimensional tokens, `frames` frames and
/// `candidates` candidates.
pub fn run_gradient_check(width: usize, frames: usize, candidates: usize, seed: u64, opts: GradCheck) -> Result<GradCheckReport> {
    let world = WorldConfig {
        frames,
        height: 16,
        width: 16,
        feature_dim: 8,
        anchors: 4,
        ..Default::default()
    };
    let model = ModelConfig {
        width,
        ..Default::default()
    };
    let params = VerifierParams::new(model, world.feature_dim, seed)?;
    let videos = VideoSet::load(&Manifest::new(&world, 1, seed)?)?;
    let mut rng = rng_from(seed, &[STREAM_PERTURB]);
    // Anchors are visible at frame 0, so the track spans every frame.
    let ex = sample_example(&videos.videos, &PerturbationConfig::default(), candidates, &mut rng)?;
    let providers: Vec<&dyn FeatureProvider> = vec![&videos.volumes[0]];
    let (max_rel_error, worst) = verifier_gradient_check(&params, &providers, std::slice::from_ref(&ex), 0.3, opts)?;
    Ok(GradCheckReport {
        width,
        frames: ex.candidates.len(),
        candidates,
        epsilon: opts.epsilon,
        parameters: params.store.num_scalars(),
        max_rel_error,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;
    use crate::world::WorldConfig;

    fn tiny() -> RunConfig {
        let mut c = RunConfig {
            world: WorldConfig {
                frames: 6,
                height: 16,
                width: 16,
                feature_dim: 4,
                anchors: 4,
                ..Default::default()
            },
            model: ModelConfig {
                width: 8,
                heads: 2,
                points: 2,
                extractor_layers: 1,
                decoder_layers: 1,
                id_dim: 4,
                embed_freqs: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        c.data.videos = 2;
        c.training.steps = 2;
        c.training.batch_size = 2;
        c.training.min_candidates = 2;
        c.training.max_candidates = 3;
        c.eval.videos = 2;
        c.eval.tracks = 6;
        c.eval.candidates = 3;
        c
    }

    #[test]
    fn pipeline_is_deterministic() {
        let a = run_pipeline(&tiny()).unwrap();
        let b = run_pipeline(&tiny()).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(a.reports.len(), SelectorKind::ALL.len());
        let oracle = a.report(SelectorKind::Oracle).unwrap();
        for r in &a.reports {
            assert!(oracle.delta_avg >= r.delta_avg - 1e-12, "{} beats the oracle", r.method);
        }
    }

    #[test]
    fn selection_preconditions() {
        let cfg = tiny();
        let v = VideoSet::load(&Manifest::new(&cfg.world, 1, 3).unwrap()).unwrap();
        let (tracks, gt) = perturb_tracks(&v, &cfg.perturbation, 3, 2, 5).unwrap();
        let sc = SelectionConfig::default();
        assert!(select_tracks(SelectorKind::Oracle, &tracks, None, None, 0, &sc).is_err());
        assert!(select_tracks(SelectorKind::Verifier, &tracks, None, Some(&gt), 0, &sc).is_err());
        assert!(select_tracks(SelectorKind::Oracle, &tracks, None, Some(&gt[..1]), 0, &sc).is_err());
        let labels = select_tracks(SelectorKind::Oracle, &tracks, None, Some(&gt), 0, &sc).unwrap();
        assert_eq!(labels.len(), 3);
        assert!(v.volume("missing").is_err());
    }

    #[test]
    fn small_gradient_check() {
        let opts = GradCheck {
            per_group: Some(3),
            ..Default::default()
        };
        let r = run_gradient_check(8, 3, 2, 1, opts).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
