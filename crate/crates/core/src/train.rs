//! Supervised training of the verifier on perturbed synthetic tracks.
//!
//! Each step draws a batch of ground-truth tracks queried at their first
//! visible frame, corrupts every track into `M` candidates, and minimises
//! the cross-entropy between the predicted per-frame distribution and a
//! soft target built from candidate distances to the ground truth. Occluded
//! frames are masked out and the batch loss is the mean over visible
//! frames.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{softmax, Grads, ParamStore, Tape, Var};
use crate::perturb::{generate_candidates, PerturbationConfig};
use crate::rng::{rng_from, Rng, STREAM_TRAIN_STEP};
use crate::trajectory::{distance, CandidateSet, Point, QueryPoint, ReliabilityScores, Trajectory};
use crate::transformer::{ModelConfig, VerifierParams};
use crate::world::{ground_truth_tracks, FeatureProvider, FeatureVolume, Manifest, SyntheticVideo, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Target temperature in pixels.
    pub target_tau: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub min_candidates: usize,
    pub max_candidates: usize,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            target_tau: 0.3,
            steps: 2000,
            batch_size: 8,
            lr: 3e-4,
            warmup_frac: 0.01,
            weight_decay: 1e-3,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            min_candidates: 6,
            max_candidates: 12,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_tau > 0.0) {
            return Err(Error::invalid("training.target_tau", "must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("training.clip_norm", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("training.batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid("training.lr", "lr, weight_decay >= 0 and warmup_frac in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("training.beta1", "betas in [0, 1) and adam_eps > 0"));
        }
        if self.min_candidates == 0 || self.min_candidates > self.max_candidates || self.max_candidates > crate::perturb::MAX_CANDIDATES {
            return Err(Error::invalid("training.min_candidates", "need 1 <= min <= max <= 64"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        if self.steps == 0 {
            0
        } else {
            ((self.warmup_frac * self.steps as f64).ceil() as u64).max(1)
        }
    }

    /// Learning rate used at 0-based `step`: linear warmup then cosine decay
    /// to zero at `steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = self.steps.saturating_sub(warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Synthetic training data: a set of videos plus the corruption model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub world: WorldConfig,
    pub videos: usize,
    pub seed: u64,
    pub perturbation: PerturbationConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            videos: 16,
            seed: 1,
            perturbation: PerturbationConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 {
            return Err(Error::invalid("dataset.videos", "dataset must not be empty"));
        }
        self.world.validate()?;
        self.perturbation.validate()
    }

    /// Generates and renders every video.
    pub fn load(&self) -> Result<Vec<(SyntheticVideo, FeatureVolume)>> {
        self.validate()?;
        Manifest::new(&self.world, self.videos, self.seed)?
            .videos
            .iter()
            .map(|v| {
                let video = v.generate()?;
                let vol = video.render()?;
                Ok((video, vol))
            })
            .collect()
    }
}

/// Soft target over candidates: softmax of negative distances to `gt`
/// divided by `tau_s`.
pub fn target_distribution(candidates: &[Point], gt: Point, tau_s: f64) -> Vec<f64> {
    let logits: Vec<f64> = candidates.iter().map(|c| -distance(*c, gt) / tau_s).collect();
    softmax(&logits)
}

/// `sum_t v_t CE(target_t, pred_t)` over visible frames.
pub fn verifier_loss(pred: &ReliabilityScores, targets: &[Vec<f64>], visibility: &[bool]) -> Result<f64> {
    if pred.len() != targets.len() || pred.len() != visibility.len() {
        return Err(Error::shape("loss frames", pred.len(), targets.len().min(visibility.len())));
    }
    let mut loss = 0.0;
    for ((p, s), &v) in pred.scores.iter().zip(targets).zip(visibility) {
        if p.len() != s.len() {
            return Err(Error::shape("loss candidates", p.len(), s.len()));
        }
        if v {
            loss -= p.iter().zip(s).filter(|(_, s)| **s > 0.0).map(|(p, s)| s * p.ln()).sum::<f64>();
        }
    }
    Ok(loss)
}

/// One supervised track.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    /// Index into the provider list the example was drawn from.
    pub video: usize,
    pub query: QueryPoint,
    pub gt: Trajectory,
    pub candidates: CandidateSet,
}

impl TrainExample {
    pub fn targets(&self, tau_s: f64) -> Vec<Vec<f64>> {
        self.candidates
            .positions
            .iter()
            .zip(&self.gt.positions)
            .map(|(row, g)| target_distribution(row, *g, tau_s))
            .collect()
    }

    pub fn visible_frames(&self) -> usize {
        self.gt.visible_frames()
    }
}

/// Draws a track queried at its first visible frame from a random video,
/// with the other anchors visible at that frame as neighbours.
pub fn sample_example(
    videos: &[SyntheticVideo],
    perturb: &PerturbationConfig,
    candidates: usize,
    rng: &mut Rng,
) -> Result<TrainExample> {
    if videos.is_empty() {
        return Err(Error::invalid("dataset", "no videos"));
    }
    let vi = rng.random_range(0..videos.len());
    let video = &videos[vi];
    let ai = rng.random_range(0..video.anchors.len());
    let anchor = &video.anchors[ai];
    // Anchors start visible, so every anchor has a first visible frame.
    let t0 = (0..video.config.frames).find(|&t| anchor.visible_at(t)).unwrap_or(0);
    let tracks = ground_truth_tracks(video, t0);
    let me = tracks.iter().position(|t| t.anchor == ai);
    let (gt, query) = match me {
        Some(i) => (tracks[i].trajectory.clone(), tracks[i].query),
        None => {
            let positions = anchor.path[t0..].to_vec();
            let visibility = (t0..video.config.frames).map(|t| anchor.visible_at(t)).collect();
            (Trajectory::new(t0, positions, visibility)?, QueryPoint::new(t0, anchor.path[t0]))
        }
    };
    let neighbors: Vec<Trajectory> = tracks.into_iter().filter(|t| t.anchor != ai).map(|t| t.trajectory).collect();
    let cfg = PerturbationConfig {
        candidates,
        ..perturb.clone()
    };
    let candidates = generate_candidates(&gt, &neighbors, &cfg, rng)?;
    Ok(TrainExample {
        video: vi,
        query,
        gt,
        candidates,
    })
}

/// Records the weighted loss of one example on `tape`.
pub fn example_loss<'a>(
    params: &'a VerifierParams,
    tape: &mut Tape<'a>,
    provider: &'a dyn FeatureProvider,
    example: &TrainExample,
    tau_s: f64,
    frame_weight: f64,
    dropout_rng: Option<&mut Rng>,
) -> Result<Var> {
    let logits = params.forward(tape, provider, &example.query, &example.candidates, dropout_rng)?;
    let targets = example.targets(tau_s).concat();
    let weights = example
        .gt
        .visibility
        .iter()
        .map(|&v| if v { frame_weight } else { 0.0 })
        .collect();
    Ok(tape.softmax_cross_entropy(logits, targets, weights))
}

/// Mean loss over visible frames of `batch` and its gradient.
pub fn batch_loss_and_grad(
    params: &VerifierParams,
    providers: &[&dyn FeatureProvider],
    batch: &[TrainExample],
    tau_s: f64,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(f64, Grads)> {
    let visible: usize = batch.iter().map(TrainExample::visible_frames).sum();
    let mut grads = Grads::zeros_like(&params.store);
    if visible == 0 {
        return Ok((0.0, grads));
    }
    let w = 1.0 / visible as f64;
    let mut total = 0.0;
    for ex in batch {
        let mut tape = Tape::new(&params.store);
        let loss = example_loss(params, &mut tape, providers[ex.video], ex, tau_s, w, dropout_rng.as_deref_mut())?;
        total += tape.value(loss)[0];
        grads.add_assign(&tape.backward(loss), 1.0);
    }
    Ok((total, grads))
}

/// First and second moment estimates of AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Grads,
    pub v: Grads,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: Grads::zeros_like(store),
            v: Grads::zeros_like(store),
            t: 0,
        }
    }

    /// One AdamW update with decoupled weight decay on `decay` parameters.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64, cfg: &TrainingConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (k, p) in store.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m.data[k], &mut self.v.data[k], &grads.data[k]);
            let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
            for i in 0..p.value.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= decay * p.value[i];
                p.value[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Rescales `grads` to norm at most `max`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max: f64) -> f64 {
    let n = grads.norm();
    if n > max {
        grads.scale(max / n);
    }
    n
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Training state: parameters, optimiser, data and step counter.
pub struct Trainer {
    pub params: VerifierParams,
    pub adam: AdamState,
    pub config: TrainingConfig,
    pub dataset: DatasetSpec,
    /// Steps completed.
    pub step: u64,
    videos: Vec<SyntheticVideo>,
    volumes: Vec<FeatureVolume>,
    last_checkpoint: Option<String>,
}

impl Trainer {
    pub fn new(model: ModelConfig, dataset: DatasetSpec, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let params = VerifierParams::new(model, dataset.world.feature_dim, config.seed)?;
        Self::with_params(params, dataset, config)
    }

    pub fn with_params(params: VerifierParams, dataset: DatasetSpec, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        if params.raw_dim != dataset.world.feature_dim {
            return Err(Error::shape("feature dimension", params.raw_dim, dataset.world.feature_dim));
        }
        let (videos, volumes) = dataset.load()?.into_iter().unzip();
        Ok(Self {
            adam: AdamState::new(&params.store),
            params,
            config,
            dataset,
            step: 0,
            videos,
            volumes,
            last_checkpoint: None,
        })
    }

    /// Restores a trainer; continuing reproduces the uninterrupted run.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Self::with_params(ck.params, ck.dataset, ck.training)?;
        t.adam = ck.adam;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            training: self.config.clone(),
            dataset: self.dataset.clone(),
            step: self.step,
        }
    }

    pub fn videos(&self) -> &[SyntheticVideo] {
        &self.videos
    }

    pub fn volumes(&self) -> &[FeatureVolume] {
        &self.volumes
    }

    /// The batch for 0-based `step`, and the stream that drives its dropout.
    pub fn batch_at(&self, step: u64) -> Result<(Vec<TrainExample>, Rng)> {
        let mut rng = rng_from(self.config.seed, &[STREAM_TRAIN_STEP, step]);
        let batch = (0..self.config.batch_size)
            .map(|_| {
                let m = rng.random_range(self.config.min_candidates..=self.config.max_candidates);
                sample_example(&self.videos, &self.dataset.perturbation, m, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok((batch, rng))
    }

    /// Runs one optimisation step.
    pub fn step(&mut self) -> Result<LogEntry> {
        let step = self.step;
        let (batch, mut rng) = self.batch_at(step)?;
        let providers: Vec<&dyn FeatureProvider> = self.volumes.iter().map(|v| v as &dyn FeatureProvider).collect();
        let diverged = |last: &Option<String>| Error::Diverged {
            step,
            last_good: last.clone().unwrap_or_else(|| "none written (in-memory state before this step is intact)".into()),
        };
        let (loss, mut grads) = match batch_loss_and_grad(&self.params, &providers, &batch, self.config.target_tau, Some(&mut rng)) {
            Ok(x) => x,
            Err(Error::NonFinite(_)) => return Err(diverged(&self.last_checkpoint)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(diverged(&self.last_checkpoint));
        }
        clip_grad_norm(&mut grads, self.config.clip_norm);
        let lr = self.config.lr_at(step);
        self.adam.update(&mut self.params.store, &grads, lr, &self.config);
        if self.params.store.check_finite().is_err() {
            return Err(diverged(&self.last_checkpoint));
        }
        self.step += 1;
        Ok(LogEntry { step, loss, lr })
    }

    /// Trains until `config.steps` steps are done, writing periodic
    /// checkpoints into `checkpoint_dir` when given.
    pub fn run(&mut self, checkpoint_dir: Option<&std::path::Path>, mut on_step: impl FnMut(&LogEntry)) -> Result<Vec<LogEntry>> {
        let mut log = Vec::new();
        while self.step < self.config.steps {
            let entry = self.step()?;
            on_step(&entry);
            log.push(entry);
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    std::fs::create_dir_all(dir)?;
                    let path = dir.join(format!("step_{:06}.ckpt", self.step));
                    self.checkpoint().save(&path)?;
                    self.last_checkpoint = Some(path.display().to_string());
                }
            }
        }
        Ok(log)
    }
}

/// Trains a fresh verifier; returns the final checkpoint and the log.
pub fn train(model: ModelConfig, dataset: DatasetSpec, config: TrainingConfig) -> Result<(Checkpoint, Vec<LogEntry>)> {
    let mut t = Trainer::new(model, dataset, config)?;
    let log = t.run(None, |e| log::debug!("step {} loss {:.5} lr {:.3e}", e.step, e.loss, e.lr))?;
    Ok((t.checkpoint(), log))
}

/// Options of [`gradient_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Entries checked per parameter array; `None` checks all.
    pub per_group: Option<usize>,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            per_group: None,
            floor: 1e-6,
        }
    }
}

/// Largest relative error between `analytic` gradients and central finite
/// differences of `loss` over the entries of `store`, together with the
/// name of the worst parameter array.
pub fn gradient_check(
    store: &ParamStore,
    analytic: &Grads,
    opts: GradCheck,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<(f64, String)> {
    if !(opts.epsilon > 0.0) {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    let mut probe = store.clone();
    let mut worst = (0.0, String::new());
    for (id, p) in store.iter() {
        let n = p.value.len();
        let picks: Vec<usize> = match opts.per_group {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = p.value[i];
            probe.get_mut(id).value[i] = orig + opts.epsilon;
            let up = loss(&probe)?;
            probe.get_mut(id).value[i] = orig - opts.epsilon;
            let down = loss(&probe)?;
            probe.get_mut(id).value[i] = orig;
            let fd = (up - down) / (2.0 * opts.epsilon);
            let an = analytic.get(id)[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(opts.floor);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]", p.name));
            }
        }
    }
    Ok(worst)
}

/// Gradient check of the full verifier loss on `batch` (dropout off).
pub fn verifier_gradient_check(
    params: &VerifierParams,
    providers: &[&dyn FeatureProvider],
    batch: &[TrainExample],
    tau_s: f64,
    opts: GradCheck,
) -> Result<(f64, String)> {
    let (_, grads) = batch_loss_and_grad(params, providers, batch, tau_s, None)?;
    let mut probe = params.clone();
    gradient_check(&params.store, &grads, opts, |store| {
        probe.store.clone_from(store);
        Ok(batch_loss_and_grad_value(&probe, providers, batch, tau_s)?)
    })
}

fn batch_loss_and_grad_value(
    params: &VerifierParams,
    providers: &[&dyn FeatureProvider],
    batch: &[TrainExample],
    tau_s: f64,
) -> Result<f64> {
    let visible: usize = batch.iter().map(TrainExample::visible_frames).sum();
    if visible == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in batch {
        let mut tape = Tape::new(&params.store);
        let loss = example_loss(params, &mut tape, providers[ex.video], ex, tau_s, 1.0 / visible as f64, None)?;
        total += tape.value(loss)[0];
    }
    Ok(total)
}
