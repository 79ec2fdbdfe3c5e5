//! Synthetic labelled videos made of appearance fields.
//!
//! Instead of RGB frames and a pretrained encoder, a video is a set of
//! anchors, each carrying a unit appearance vector that is splatted onto
//! the feature grid with a Gaussian kernel around the anchor's current
//! position. Matching the query appearance along the true path is therefore
//! learnable, and the ground-truth tracks are the anchor paths.
//!
//! The [`FeatureProvider`] trait is the boundary a real dense encoder would
//! implement.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::trajectory::{Point, QueryPoint, Trajectory};

/// A dense `height x width x dim` feature map, row-major with channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn from_fn(height: usize, width: usize, dim: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut g = Self::zeros(height, width, dim);
        for y in 0..height {
            for x in 0..width {
                for c in 0..dim {
                    g.data[(y * width + x) * dim + c] = f(x, y, c);
                }
            }
        }
        g
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.dim;
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.dim;
        &mut self.data[o..o + self.dim]
    }
}

/// Source of per-frame dense features.
pub trait FeatureProvider {
    fn num_frames(&self) -> usize;
    /// `(height, width)` of every grid.
    fn grid_size(&self) -> (usize, usize);
    fn feature_dim(&self) -> usize;
    fn features(&self, t: usize) -> Result<&FeatureGrid>;
}

/// An in-memory stack of feature grids.
#[derive(Clone, Debug)]
pub struct FeatureVolume {
    frames: Vec<FeatureGrid>,
}

impl FeatureVolume {
    pub fn new(frames: Vec<FeatureGrid>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("feature volume", "needs at least one frame"))?;
        let dims = (first.height, first.width, first.dim);
        for (t, f) in frames.iter().enumerate() {
            if (f.height, f.width, f.dim) != dims {
                return Err(Error::invalid("feature volume", format!("frame {t} has mismatched dimensions")));
            }
            if f.data.len() != f.height * f.width * f.dim {
                return Err(Error::shape("feature grid buffer", f.height * f.width * f.dim, f.data.len()));
            }
            if f.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of frame {t}")));
            }
        }
        Ok(Self { frames })
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut FeatureGrid {
        &mut self.frames[t]
    }

    /// Per-pixel feature magnitude, a grayscale stand-in for the frame.
    pub fn intensity(&self, t: usize) -> GrayFrame {
        let g = &self.frames[t];
        let mut data = Vec::with_capacity(g.height * g.width);
        for y in 0..g.height {
            for x in 0..g.width {
                data.push(g.at(x, y).iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
        GrayFrame {
            width: g.width,
            height: g.height,
            data,
        }
    }
}

impl FeatureProvider for FeatureVolume {
    fn num_frames(&self) -> usize {
        self.frames.len()
    }

    fn grid_size(&self) -> (usize, usize) {
        (self.frames[0].height, self.frames[0].width)
    }

    fn feature_dim(&self) -> usize {
        self.frames[0].dim
    }

    fn features(&self, t: usize) -> Result<&FeatureGrid> {
        self.frames.get(t).ok_or(Error::FrameOutOfRange {
            frame: t,
            frames: self.frames.len(),
        })
    }
}

/// A single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Parameters of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub anchors: usize,
    /// Gaussian splat bandwidth in pixels.
    pub sigma_app: f64,
    pub noise_std: f64,
    /// Long-run fraction of occluded frames per anchor.
    pub occlusion_rate: f64,
    /// Mean length of an occlusion interval, in frames.
    pub occlusion_mean_length: f64,
    /// Mean reversion of the Ornstein-Uhlenbeck velocity.
    pub ou_theta: f64,
    /// Velocity noise in pixels per frame.
    pub ou_sigma: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 24,
            height: 64,
            width: 64,
            feature_dim: 32,
            anchors: 12,
            sigma_app: 2.0,
            noise_std: 0.02,
            occlusion_rate: 0.15,
            occlusion_mean_length: 4.0,
            ou_theta: 0.3,
            ou_sigma: 1.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid("world.frames", "must be at least 2"));
        }
        if self.anchors == 0 {
            return Err(Error::invalid("world.anchors", "must be at least 1"));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::invalid("world.width/height", "grid must be at least 2x2"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("world.feature_dim", "must be positive"));
        }
        if !(self.sigma_app > 0.0) {
            return Err(Error::invalid("world.sigma_app", "must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("world.noise_std", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return Err(Error::invalid("world.occlusion_rate", "must lie in [0, 1)"));
        }
        if !(self.occlusion_mean_length >= 1.0) {
            return Err(Error::invalid("world.occlusion_mean_length", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ou_theta) || !(self.ou_sigma >= 0.0) {
            return Err(Error::invalid("world.ou_theta/ou_sigma", "theta in [0, 1], sigma >= 0"));
        }
        Ok(())
    }
}

/// One moving appearance source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceAnchor {
    pub appearance: Vec<f64>,
    pub path: Vec<Point>,
    /// Half-open `[start, end)` frame ranges in which the anchor is hidden.
    pub occlusion_intervals: Vec<(usize, usize)>,
    pub sigma_app: f64,
}

impl AppearanceAnchor {
    pub fn visible_at(&self, t: usize) -> bool {
        !self.occlusion_intervals.iter().any(|&(a, b)| (a..b).contains(&t))
    }
}

/// A generated video: its config, seed and anchors. Features are rendered
/// on demand from these.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub config: WorldConfig,
    pub seed: u64,
    pub anchors: Vec<AppearanceAnchor>,
}

fn reflect(mut p: f64, mut v: f64, hi: f64) -> (f64, f64) {
    // Bounce between 0 and hi until inside.
    for _ in 0..8 {
        if p < 0.0 {
            p = -p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
    (p.clamp(0.0, hi), v)
}

fn sample_anchor(cfg: &WorldConfig, rng: &mut Rng) -> AppearanceAnchor {
    let mut appearance: Vec<f64> = (0..cfg.feature_dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = appearance.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    appearance.iter_mut().for_each(|v| *v /= norm);

    let (xmax, ymax) = ((cfg.width - 1) as f64, (cfg.height - 1) as f64);
    let margin = 2.0 * cfg.sigma_app;
    let mut p = [
        rng.random_range(margin.min(xmax / 2.0)..=(xmax - margin).max(xmax / 2.0)),
        rng.random_range(margin.min(ymax / 2.0)..=(ymax - margin).max(ymax / 2.0)),
    ];
    let mut v = [
        cfg.ou_sigma * Distribution::<f64>::sample(&StandardNormal, rng),
        cfg.ou_sigma * Distribution::<f64>::sample(&StandardNormal, rng),
    ];
    let mut path = Vec::with_capacity(cfg.frames);
    path.push(p);
    for _ in 1..cfg.frames {
        for (axis, hi) in [(0, xmax), (1, ymax)] {
            let noise: f64 = StandardNormal.sample(rng);
            v[axis] = (1.0 - cfg.ou_theta) * v[axis] + cfg.ou_sigma * noise;
            let (np, nv) = reflect(p[axis] + v[axis], v[axis], hi);
            p[axis] = np;
            v[axis] = nv;
        }
        path.push(p);
    }

    // Two-state Markov chain over frames, starting visible.
    let leave = 1.0 / cfg.occlusion_mean_length;
    let enter = (cfg.occlusion_rate * leave / (1.0 - cfg.occlusion_rate)).min(1.0);
    let mut intervals = Vec::new();
    let mut occluded_since: Option<usize> = None;
    for t in 1..cfg.frames {
        let u: f64 = rng.random();
        match occluded_since {
            None if u < enter => occluded_since = Some(t),
            Some(s) if u < leave => {
                intervals.push((s, t));
                occluded_since = None;
            }
            _ => {}
        }
    }
    if let Some(s) = occluded_since {
        intervals.push((s, cfg.frames));
    }

    AppearanceAnchor {
        appearance,
        path,
        occlusion_intervals: intervals,
        sigma_app: cfg.sigma_app,
    }
}

/// Generates a video deterministically from `(config, seed)`.
pub fn generate_video(config: &WorldConfig, seed: u64) -> Result<SyntheticVideo> {
    config.validate()?;
    let anchors = (0..config.anchors)
        .map(|i| sample_anchor(config, &mut rng::rng_from(seed, &[rng::STREAM_VIDEO, i as u64])))
        .collect();
    Ok(SyntheticVideo {
        config: config.clone(),
        seed,
        anchors,
    })
}

/// Kernel support radius in units of the bandwidth; beyond it the splat is
/// below 1.6e-8 and is dropped.
const KERNEL_RADIUS_SIGMAS: f64 = 6.0;

/// Renders frame `t`: the sum of Gaussian splats of visible anchors plus
/// seeded i.i.d. Gaussian noise.
pub fn render_features(video: &SyntheticVideo, t: usize) -> Result<FeatureGrid> {
    let cfg = &video.config;
    if t >= cfg.frames {
        return Err(Error::FrameOutOfRange {
            frame: t,
            frames: cfg.frames,
        });
    }
    let mut grid = FeatureGrid::zeros(cfg.height, cfg.width, cfg.feature_dim);
    for anchor in video.anchors.iter().filter(|a| a.visible_at(t)) {
        let [px, py] = anchor.path[t];
        let s = anchor.sigma_app;
        let r = KERNEL_RADIUS_SIGMAS * s;
        let x0 = (px - r).floor().max(0.0) as usize;
        let x1 = ((px + r).ceil() as usize).min(cfg.width - 1);
        let y0 = (py - r).floor().max(0.0) as usize;
        let y1 = ((py + r).ceil() as usize).min(cfg.height - 1);
        let inv = 1.0 / (2.0 * s * s);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                let k = (-d2 * inv).exp();
                for (g, a) in grid.at_mut(x, y).iter_mut().zip(&anchor.appearance) {
                    *g += k * a;
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let mut rng = rng::rng_from(video.seed, &[rng::STREAM_FRAME_NOISE, t as u64]);
        for v in grid.data.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += cfg.noise_std * n;
        }
    }
    Ok(grid)
}

impl SyntheticVideo {
    /// Renders every frame into an in-memory provider.
    pub fn render(&self) -> Result<FeatureVolume> {
        let frames = (0..self.config.frames)
            .map(|t| render_features(self, t))
            .collect::<Result<Vec<_>>>()?;
        FeatureVolume::new(frames)
    }
}

/// A ground-truth track paired with the anchor it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTrack {
    pub anchor: usize,
    pub query: QueryPoint,
    pub trajectory: Trajectory,
}

/// Tracks of every anchor visible at `t0`, covering frames `t0..T`.
pub fn ground_truth_tracks(video: &SyntheticVideo, t0: usize) -> Vec<GroundTruthTrack> {
    let frames = video.config.frames;
    if t0 >= frames {
        return Vec::new();
    }
    video
        .anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| a.visible_at(t0))
        .map(|(i, a)| GroundTruthTrack {
            anchor: i,
            query: QueryPoint::new(t0, a.path[t0]),
            trajectory: Trajectory {
                start: t0,
                positions: a.path[t0..].to_vec(),
                visibility: (t0..frames).map(|t| a.visible_at(t)).collect(),
            },
        })
        .collect()
}

/// Per-video entry of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub id: String,
    pub seed: u64,
    pub config: WorldConfig,
}

impl VideoSpec {
    pub fn generate(&self) -> Result<SyntheticVideo> {
        generate_video(&self.config, self.seed)
    }
}

/// A dataset: video ids and seeds derived from one master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub videos: Vec<VideoSpec>,
}

impl Manifest {
    pub fn new(config: &WorldConfig, count: usize, master_seed: u64) -> Result<Self> {
        config.validate()?;
        let videos = (0..count)
            .map(|i| VideoSpec {
                id: format!("video_{i:05}"),
                seed: rng::derive_seed(master_seed, &[rng::STREAM_VIDEO, i as u64]),
                config: config.clone(),
            })
            .collect();
        Ok(Self { master_seed, videos })
    }

    /// Writes `manifest.json` plus one `<id>.json` per video into `dir`.
    pub fn write_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        for v in &self.videos {
            std::fs::write(dir.join(format!("{}.json", v.id)), serde_json::to_string_pretty(v)?)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn find(&self, id: &str) -> Option<&VideoSpec> {
        self.videos.iter().find(|v| v.id == id)
    }
}
