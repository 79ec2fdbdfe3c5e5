//! Localized feature extraction.
//!
//! Turns per-frame feature grids plus the query and candidate coordinates
//! into the descriptors consumed by the candidate transformer:
//!
//! 1. bilinearly sample the query-frame grid at the query position and
//!    project it to the model width, giving the reference vector;
//! 2. run a stack of deformable attention layers, conditioned on the
//!    reference, centred at the query (on the query frame) and at every
//!    candidate position (on that candidate's frame);
//! 3. append a sinusoidal embedding of the displacement from the query, the
//!    raw displacement and a query/candidate identity embedding, normalise,
//!    and project to the model width.
//!
//! Nothing mixes information across candidates or frames here, so the
//! descriptor of candidate `m` at frame `t` depends only on that frame's
//! grid, that candidate's position and the query.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm, Linear, ParamId, ParamStore, Tape, Var};
use crate::rng::Rng;
use crate::trajectory::{CandidateSet, Point, QueryPoint};
use crate::world::{FeatureGrid, FeatureProvider};

/// Bilinear sample of `grid` at `pos`, with `pos` clamped into the grid.
pub fn bilinear_sample(grid: &FeatureGrid, pos: Point) -> Vec<f64> {
    let mut out = vec![0.0; grid.dim];
    nn::sample_bilinear(grid, pos, &mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Channel count of the provider's grids.
    pub raw_dim: usize,
    /// Model width.
    pub width: usize,
    pub heads: usize,
    pub points: usize,
    pub layers: usize,
    pub id_dim: usize,
    /// Frequencies per axis of the displacement embedding; the embedding
    /// has `4 * embed_freqs` entries.
    pub embed_freqs: usize,
    pub embed_scale_init: f64,
    /// Displacements are divided by this before embedding (the grid width
    /// at desk scale).
    pub coord_norm: f64,
    /// Radius step, in pixels, of the initial sampling ring.
    pub offset_ring_step: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            raw_dim: 32,
            width: 64,
            heads: 4,
            points: 4,
            layers: 3,
            id_dim: 16,
            embed_freqs: 8,
            embed_scale_init: 16.0,
            coord_norm: 64.0,
            offset_ring_step: 0.5,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid("model.width", "must be a positive multiple of model.heads"));
        }
        if self.raw_dim == 0 || self.points == 0 || self.layers == 0 || self.id_dim == 0 || self.embed_freqs == 0 {
            return Err(Error::invalid("model", "extractor sizes must be positive"));
        }
        if !(self.embed_scale_init > 0.0) || !(self.coord_norm > 0.0) {
            return Err(Error::invalid("model.embed_scale_init", "must be positive"));
        }
        Ok(())
    }

    pub fn embed_width(&self) -> usize {
        4 * self.embed_freqs
    }

    fn freqs(&self) -> Vec<f64> {
        (0..self.embed_freqs)
            .map(|k| 100f64.powf(-(k as f64) / self.embed_freqs as f64))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DeformLayer {
    offsets: Linear,
    weights: Linear,
    /// Per-head value projection `[heads * raw_dim, width / heads]`.
    value: ParamId,
    value_bias: ParamId,
    out: Linear,
    norm: LayerNorm,
}

/// Parameter handles of the feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub config: ExtractorConfig,
    input_proj: Linear,
    layers: Vec<DeformLayer>,
    embed_scale: ParamId,
    identity: ParamId,
    embed_norm: LayerNorm,
    proj: Linear,
}

/// Query/candidate identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Query,
    Candidate,
}

impl TokenKind {
    fn row(self) -> usize {
        match self {
            TokenKind::Query => 0,
            TokenKind::Candidate => 1,
        }
    }
}

/// Descriptors of one track: the query row replicated over `L` frames and
/// one row per (frame, candidate).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDescriptors {
    pub len: usize,
    pub candidates_per_frame: usize,
    pub width: usize,
    /// `[L, D]`, row-major.
    pub query: Vec<f64>,
    /// `[L * M, D]`, frame-major.
    pub candidates: Vec<f64>,
}

impl LocalDescriptors {
    pub fn query_row(&self, t: usize) -> &[f64] {
        &self.query[t * self.width..(t + 1) * self.width]
    }

    pub fn candidate_row(&self, t: usize, m: usize) -> &[f64] {
        let r = t * self.candidates_per_frame + m;
        &self.candidates[r * self.width..(r + 1) * self.width]
    }
}

/// Tape handles of descriptors.
#[derive(Clone, Copy, Debug)]
pub struct DescriptorVars {
    pub query: Var,
    pub candidates: Var,
    /// Visual part `h` of every token before embedding, `[1 + L*M, D]`;
    /// row 0 is the query.
    pub visual: Var,
}

impl Extractor {
    pub fn new(store: &mut ParamStore, config: ExtractorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let hp = c.heads * c.points;
        let dh = c.width / c.heads;
        let input_proj = Linear::new(store, "extractor.input_proj", c.raw_dim, c.width, true, rng);
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let name = format!("extractor.deform{l}");
            let offsets = Linear::zeros(store, &format!("{name}.offsets"), c.width, hp * 2);
            // Ring of initial sampling points so the points of a head start
            // apart; with a zero weight the predicted offsets are constant.
            let bias = store.get_mut(offsets.bias.expect("offset bias"));
            for h in 0..c.heads {
                for p in 0..c.points {
                    let k = h * c.points + p;
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / hp as f64;
                    let radius = c.offset_ring_step * (p + 1) as f64;
                    bias.value[2 * k] = radius * angle.cos();
                    bias.value[2 * k + 1] = radius * angle.sin();
                }
            }
            let weights = Linear::zeros(store, &format!("{name}.weights"), c.width, hp);
            let value = store.add_weight(format!("{name}.value.weight"), c.heads * c.raw_dim, dh, rng);
            let value_bias = store.add_const(format!("{name}.value.bias"), 1, c.width, 0.0, false);
            let out = Linear::new(store, &format!("{name}.out"), c.width, c.width, true, rng);
            let norm = LayerNorm::new(store, &format!("{name}.norm"), c.width);
            layers.push(DeformLayer {
                offsets,
                weights,
                value,
                value_bias,
                out,
                norm,
            });
        }
        let embed_scale = store.add_const("extractor.embed_scale", 1, 1, c.embed_scale_init, false);
        let identity = {
            use rand_distr::{Distribution, StandardNormal};
            let v = (0..2 * c.id_dim)
                .map(|_| StandardNormal.sample(&mut *rng))
                .collect::<Vec<f64>>();
            store.add("extractor.identity", 2, c.id_dim, v, false)
        };
        let cat = c.width + c.embed_width() + 2 + c.id_dim;
        let embed_norm = LayerNorm::new(store, "extractor.embed_norm", cat);
        let proj = Linear::new(store, "extractor.proj", cat, c.width, true, rng);
        Ok(Self {
            config,
            input_proj,
            layers,
            embed_scale,
            identity,
            embed_norm,
            proj,
        })
    }

    /// Projected reference vector of a raw query sample, `[1, D]`.
    pub fn reference<'a>(&self, tape: &mut Tape<'a>, raw_sample: Vec<f64>) -> Var {
        let n = raw_sample.len();
        let q = tape.constant(1, n, raw_sample);
        self.input_proj.forward(tape, q)
    }

    /// Runs the deformable layers for centres `centers[i]` on
    /// `grids[center_grid[i]]`, all conditioned on `reference [1, D]`.
    /// Returns `[N, D]`.
    pub fn deformable<'a>(
        &self,
        tape: &mut Tape<'a>,
        reference: Var,
        grids: &[&'a FeatureGrid],
        centers: &[Point],
        center_grid: &[usize],
    ) -> Var {
        let c = &self.config;
        let n = centers.len();
        let hp = c.heads * c.points;
        let mut x = tape.select_rows(reference, vec![0; n]);
        let mut anchor = Vec::with_capacity(n * hp * 2);
        let mut row_grid = Vec::with_capacity(n * hp);
        for (i, ctr) in centers.iter().enumerate() {
            for _ in 0..hp {
                anchor.extend_from_slice(ctr);
                row_grid.push(center_grid[i]);
            }
        }
        for layer in &self.layers {
            let off = layer.offsets.forward(tape, x);
            let off = tape.reshape(off, n * hp, 2);
            let base = tape.constant(n * hp, 2, anchor.clone());
            let pos = tape.add(off, base);
            let logits = layer.weights.forward(tape, x);
            let w = tape.group_softmax(logits, c.points);
            let samples = tape.bilinear_multi(pos, grids.to_vec(), row_grid.clone());
            let agg = tape.group_weighted_sum(samples, w, c.points);
            let vw = tape.param(layer.value);
            let vals = tape.head_linear(agg, vw, c.heads);
            let vb = tape.param(layer.value_bias);
            let vals = tape.add_row(vals, vb);
            let out = layer.out.forward(tape, vals);
            let sum = tape.add(x, out);
            x = layer.norm.forward(tape, sum);
        }
        x
    }

    /// Appends position and identity embeddings to `h [N, D]` and projects.
    /// `disp` holds one pixel displacement per row.
    pub fn embed<'a>(&self, tape: &mut Tape<'a>, h: Var, disp: &[Point], kinds: &[TokenKind]) -> Var {
        let c = &self.config;
        let n = disp.len();
        let norm: Vec<f64> = disp.iter().flat_map(|d| [d[0] / c.coord_norm, d[1] / c.coord_norm]).collect();
        let scale = tape.param(self.embed_scale);
        let sin = tape.sin_embed(norm.clone(), scale, c.freqs());
        let raw = tape.constant(n, 2, norm);
        let ids = tape.param(self.identity);
        let id = tape.select_rows(ids, kinds.iter().map(|k| k.row()).collect());
        let cat = tape.concat_cols(&[h, sin, raw, id]);
        let cat = self.embed_norm.forward(tape, cat);
        self.proj.forward(tape, cat)
    }

    /// Builds the descriptors of one track on the tape.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        provider: &'a dyn FeatureProvider,
        query: &QueryPoint,
        candidates: &CandidateSet,
    ) -> Result<DescriptorVars> {
        let c = &self.config;
        if provider.feature_dim() != c.raw_dim {
            return Err(Error::shape("provider feature dimension", c.raw_dim, provider.feature_dim()));
        }
        if candidates.start != query.t0 {
            return Err(Error::invalid(
                "start frame",
                format!("candidates start at {} but query is at frame {}", candidates.start, query.t0),
            ));
        }
        candidates.validate()?;
        let (l, m) = (candidates.len(), candidates.num_candidates());
        if query.t0 + l > provider.num_frames() {
            return Err(Error::FrameOutOfRange {
                frame: query.t0 + l - 1,
                frames: provider.num_frames(),
            });
        }
        let grids: Vec<&'a FeatureGrid> = (query.t0..query.t0 + l)
            .map(|t| provider.features(t))
            .collect::<Result<_>>()?;

        let reference = self.reference(tape, bilinear_sample(grids[0], query.pos));
        let mut centers = Vec::with_capacity(1 + l * m);
        let mut center_grid = Vec::with_capacity(1 + l * m);
        let mut disp = Vec::with_capacity(1 + l * m);
        let mut kinds = Vec::with_capacity(1 + l * m);
        centers.push(query.pos);
        center_grid.push(0);
        disp.push([0.0, 0.0]);
        kinds.push(TokenKind::Query);
        for (t, row) in candidates.positions.iter().enumerate() {
            for &p in row {
                centers.push(p);
                center_grid.push(t);
                disp.push([p[0] - query.pos[0], p[1] - query.pos[1]]);
                kinds.push(TokenKind::Candidate);
            }
        }
        let h = self.deformable(tape, reference, &grids, &centers, &center_grid);
        let f = self.embed(tape, h, &disp, &kinds);
        let query_rows = tape.select_rows(f, vec![0; l]);
        let cand_rows = tape.select_rows(f, (1..=l * m).collect());
        Ok(DescriptorVars {
            query: query_rows,
            candidates: cand_rows,
            visual: h,
        })
    }
}

/// Deformable attention outputs at each centre of `grid`, conditioned on a
/// projected `reference` vector (length `D`). Returns one `D`-row per centre.
pub fn deformable_local_attend(
    store: &ParamStore,
    extractor: &Extractor,
    reference: &[f64],
    grid: &FeatureGrid,
    centers: &[Point],
) -> Vec<Vec<f64>> {
    let mut tape = Tape::new(store);
    let r = tape.constant(1, reference.len(), reference.to_vec());
    let out = extractor.deformable(&mut tape, r, &[grid], centers, &vec![0; centers.len()]);
    tape.value(out).chunks(extractor.config.width).map(<[f64]>::to_vec).collect()
}

/// Embedding and projection of visual vectors `h` (one per row) with their
/// displacements from the query.
pub fn embed_and_project(
    store: &ParamStore,
    extractor: &Extractor,
    h: &[Vec<f64>],
    displacement: &[Point],
    kind: TokenKind,
) -> Vec<Vec<f64>> {
    let d = extractor.config.width;
    let mut tape = Tape::new(store);
    let hv = tape.constant(h.len(), d, h.concat());
    let out = extractor.embed(&mut tape, hv, displacement, &vec![kind; h.len()]);
    tape.value(out).chunks(d).map(<[f64]>::to_vec).collect()
}

/// Descriptors of one track.
pub fn build_descriptors(
    store: &ParamStore,
    extractor: &Extractor,
    provider: &dyn FeatureProvider,
    query: &QueryPoint,
    candidates: &CandidateSet,
) -> Result<LocalDescriptors> {
    let mut tape = Tape::new(store);
    let vars = extractor.forward(&mut tape, provider, query, candidates)?;
    let out = LocalDescriptors {
        len: candidates.len(),
        candidates_per_frame: candidates.num_candidates(),
        width: extractor.config.width,
        query: tape.value(vars.query).to_vec(),
        candidates: tape.value(vars.candidates).to_vec(),
    };
    if out.query.iter().chain(&out.candidates).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("descriptors".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::world::{generate_video, ground_truth_tracks, FeatureVolume, WorldConfig};

    fn small(raw: usize) -> (ParamStore, Extractor) {
        let mut store = ParamStore::new();
        let cfg = ExtractorConfig {
            raw_dim: raw,
            width: 16,
            heads: 2,
            points: 2,
            id_dim: 4,
            embed_freqs: 4,
            ..Default::default()
        };
        let ex = Extractor::new(&mut store, cfg, &mut rng_from(1, &[])).unwrap();
        (store, ex)
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        use rand::Rng as _;
        let mut rng = rng_from(seed, &[]);
        for p in store.iter_mut() {
            for v in p.value.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    fn ramp_grid(w: usize, h: usize, dim: usize) -> FeatureGrid {
        FeatureGrid::from_fn(h, w, dim, |x, y, c| ((x * 7 + y * 3 + c * 5) % 11) as f64 * 0.1 + c as f64)
    }

    #[test]
    fn bilinear_integer_and_center() {
        let g = ramp_grid(5, 4, 3);
        assert_eq!(bilinear_sample(&g, [2.0, 1.0]), g.at(2, 1));
        let c = bilinear_sample(&g, [1.5, 2.5]);
        for ch in 0..3 {
            let mean = (g.at(1, 2)[ch] + g.at(2, 2)[ch] + g.at(1, 3)[ch] + g.at(2, 3)[ch]) / 4.0;
            assert!((c[ch] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_quarter_step() {
        let g = FeatureGrid::from_fn(2, 2, 1, |x, _, _| 4.0 * x as f64);
        assert_eq!(bilinear_sample(&g, [0.25, 0.0]), vec![1.0]);
        // Clamped outside the grid.
        assert_eq!(bilinear_sample(&g, [-3.0, 9.0]), vec![0.0]);
        assert_eq!(bilinear_sample(&g, [7.0, 0.5]), vec![4.0]);
    }

    #[test]
    fn degenerate_attention_is_value_of_center_sample() {
        // One head, one point, zero offsets, and an identity-like chain.
        let mut store = ParamStore::new();
        let cfg = ExtractorConfig {
            raw_dim: 3,
            width: 4,
            heads: 1,
            points: 1,
            layers: 1,
            id_dim: 2,
            embed_freqs: 2,
            ..Default::default()
        };
        let ex = Extractor::new(&mut store, cfg, &mut rng_from(5, &[])).unwrap();
        let layer = ex.layers[0].clone();
        store.get_mut(layer.offsets.bias.unwrap()).value.fill(0.0);
        let g = ramp_grid(6, 6, 3);
        let center = [2.3, 3.6];
        let reference = vec![0.2, -0.1, 0.4, 0.3];
        let got = deformable_local_attend(&store, &ex, &reference, &g, &[center]);

        let s = bilinear_sample(&g, center);
        let vw = &store.get(layer.value).value;
        let mut vals = vec![0.0; 4];
        for (j, v) in vals.iter_mut().enumerate() {
            *v = (0..3).map(|i| s[i] * vw[i * 4 + j]).sum();
        }
        let ow = &store.get(layer.out.weight).value;
        let mut pre: Vec<f64> = (0..4).map(|j| reference[j] + (0..4).map(|i| vals[i] * ow[i * 4 + j]).sum::<f64>()).collect();
        let mean = pre.iter().sum::<f64>() / 4.0;
        let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        pre.iter_mut().for_each(|v| *v = (*v - mean) / (var + 1e-5).sqrt());
        for (a, b) in got[0].iter().zip(&pre) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_grid_gives_center_independent_output() {
        let (mut store, ex) = small(3);
        randomize(&mut store, 2);
        let g = FeatureGrid::from_fn(8, 8, 3, |_, _, c| c as f64 - 0.5);
        let r = vec![0.1; 16];
        let out = deformable_local_attend(&store, &ex, &r, &g, &[[1.0, 1.0], [6.5, 2.25], [-4.0, 30.0]]);
        for row in &out[1..] {
            for (a, b) in row.iter().zip(&out[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_centers_identical_rows() {
        let (mut store, ex) = small(3);
        randomize(&mut store, 3);
        let g = ramp_grid(8, 8, 3);
        let out = deformable_local_attend(&store, &ex, &[0.3; 16], &g, &[[3.3, 4.1]; 3]);
        assert_eq!(out[0], out[1]);
        assert_eq!(out[1], out[2]);
    }

    #[test]
    fn embedding_identity_and_determinism() {
        let (mut store, ex) = small(3);
        randomize(&mut store, 4);
        let h = vec![vec![0.5; 16], vec![0.5; 16]];
        let d = [[3.0, -1.0], [3.0, -1.0]];
        let a = embed_and_project(&store, &ex, &h, &d, TokenKind::Candidate);
        assert_eq!(a[0], a[1]);
        let q = embed_and_project(&store, &ex, &h[..1], &[[0.0, 0.0]], TokenKind::Query);
        let c = embed_and_project(&store, &ex, &h[..1], &[[0.0, 0.0]], TokenKind::Candidate);
        assert_ne!(q, c);
        // Swapping the identity rows swaps the outputs.
        let id = store.get(ex.identity).value.clone();
        let k = ex.config.id_dim;
        let swapped = [&id[k..], &id[..k]].concat();
        store.get_mut(ex.identity).value = swapped;
        let q2 = embed_and_project(&store, &ex, &h[..1], &[[0.0, 0.0]], TokenKind::Query);
        assert_eq!(q2, c);
    }

    fn world_track() -> (FeatureVolume, QueryPoint, Vec<Point>, Vec<Point>) {
        let cfg = WorldConfig {
            noise_std: 0.0,
            anchors: 2,
            feature_dim: 8,
            frames: 6,
            ..Default::default()
        };
        let v = generate_video(&cfg, 11).unwrap();
        let tr = ground_truth_tracks(&v, 0);
        (
            v.render().unwrap(),
            tr[0].query,
            tr[0].trajectory.positions.clone(),
            tr[1].trajectory.positions.clone(),
        )
    }

    #[test]
    fn descriptor_shapes_and_errors() {
        let (vol, q, gt, _) = world_track();
        let (store, ex) = small(8);
        let one = CandidateSet::from_tracks(0, &[gt[..1].to_vec()], vec!["gt".into()]).unwrap();
        let d = build_descriptors(&store, &ex, &vol, &q, &one).unwrap();
        assert_eq!((d.query.len(), d.candidates.len()), (16, 16));

        let (store3, ex3) = small(3);
        assert!(matches!(build_descriptors(&store3, &ex3, &vol, &q, &one), Err(Error::Shape { .. })));
        let long = CandidateSet::from_tracks(0, &[vec![[0.0, 0.0]; 7]], vec!["x".into()]).unwrap();
        assert!(build_descriptors(&store, &ex, &vol, &q, &long).is_err());
    }

    #[test]
    fn permutation_equivariance_and_query_replication() {
        let (vol, q, gt, other) = world_track();
        let (mut store, ex) = small(8);
        randomize(&mut store, 9);
        let far: Vec<Point> = gt.iter().map(|p| [p[0] + 200.0, p[1] - 70.0]).collect();
        let c = CandidateSet::from_tracks(0, &[gt.clone(), other, far], vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let d = build_descriptors(&store, &ex, &vol, &q, &c).unwrap();
        for t in 1..d.len {
            assert_eq!(d.query_row(t), d.query_row(0));
        }
        let perm = [2, 0, 1];
        let dp = build_descriptors(&store, &ex, &vol, &q, &c.permuted(&perm)).unwrap();
        for t in 0..d.len {
            for (j, &src) in perm.iter().enumerate() {
                assert_eq!(dp.candidate_row(t, j), d.candidate_row(t, src));
            }
        }
        assert!(d.candidates.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn descriptors_are_frame_local() {
        let (mut vol, q, gt, other) = world_track();
        let (mut store, ex) = small(8);
        randomize(&mut store, 10);
        let c = CandidateSet::from_tracks(0, &[gt, other], vec!["a".into(), "b".into()]).unwrap();
        let before = build_descriptors(&store, &ex, &vol, &q, &c).unwrap();
        let changed = 3;
        vol.frame_mut(changed).data.iter_mut().for_each(|v| *v += 1.0);
        let after = build_descriptors(&store, &ex, &vol, &q, &c).unwrap();
        for t in 0..before.len {
            for m in 0..2 {
                if t == changed {
                    assert_ne!(before.candidate_row(t, m), after.candidate_row(t, m));
                } else {
                    assert_eq!(before.candidate_row(t, m), after.candidate_row(t, m));
                }
            }
        }
    }

    #[test]
    fn gt_candidate_visual_part_matches_query() {
        // Noise-free world: sampling the grid at the true position on a later
        // frame sees the same appearance as the query frame.
        let cfg = WorldConfig {
            noise_std: 0.0,
            occlusion_rate: 0.0,
            anchors: 1,
            feature_dim: 8,
            frames: 6,
            ..Default::default()
        };
        let v = generate_video(&cfg, 4).unwrap();
        let tr = &ground_truth_tracks(&v, 0)[0];
        let vol = v.render().unwrap();
        let (store, ex) = small(8);
        let c = CandidateSet::from_tracks(0, &[tr.trajectory.positions.clone()], vec!["gt".into()]).unwrap();
        let mut tape = Tape::new(&store);
        let vars = ex.forward(&mut tape, &vol, &tr.query, &c).unwrap();
        let h = tape.value(vars.visual);
        let w = ex.config.width;
        for t in 1..c.len() {
            let cos = nn::cosine(&h[..w], &h[(1 + t) * w..(2 + t) * w]);
            assert!(cos >= 0.99, "frame {t}: cos {cos}");
        }
    }

    #[test]
    fn off_frame_candidates_stay_finite() {
        let (vol, q, _, _) = world_track();
        let (mut store, ex) = small(8);
        randomize(&mut store, 12);
        let wild: Vec<Point> = (0..6).map(|i| [1e4 * (i as f64 - 3.0), -5e3]).collect();
        let c = CandidateSet::from_tracks(0, &[wild], vec!["x".into()]).unwrap();
        let d = build_descriptors(&store, &ex, &vol, &q, &c).unwrap();
        assert!(d.candidates.iter().all(|v| v.is_finite()));
    }
}
