//! Reverse-mode automatic differentiation over row-major 2D arrays.
//!
//! Every op computes its value eagerly and records what it needs for the
//! backward pass. Ops are coarse (fused attention, layer norm, bilinear
//! sampling, softmax cross-entropy) so a forward pass of the verifier is a
//! few hundred nodes rather than millions of scalars.

use super::params::{Grads, ParamId, ParamStore};
use crate::world::FeatureGrid;

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

enum Op<'a> {
    Constant,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    SelectRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    Scale(Var, f64),
    MulScalar { x: Var, s: Var },
    Exp(Var),
    Gelu(Var),
    Mask { x: Var, mask: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    GroupSoftmax { x: Var, group: usize },
    Attention { q: Var, k: Var, v: Var, batch: usize, nq: usize, nk: usize, heads: usize, probs: Vec<f64> },
    RowGroupDot { q: Var, c: Var, m: usize },
    Bilinear { pos: Var, grids: Vec<&'a FeatureGrid>, row_grid: Vec<usize> },
    GroupWeightedSum { x: Var, w: Var, p: usize },
    HeadLinear { x: Var, w: Var, heads: usize },
    SinEmbed { disp: Vec<f64>, scale: Var, freqs: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<f64>, weights: Vec<f64>, probs: Vec<f64> },
}

struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op<'a>,
}

/// A recording of one forward computation.
pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node<'a>>,
}

#[inline]
fn gelu(x: f64) -> (f64, f64) {
    // tanh approximation; returns value and derivative.
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (y, dy)
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    softmax_in_place(&mut v);
    v
}

/// Bilinear lookup with clamping; returns the corner indices and weights
/// plus whether each axis was inside the grid.
#[inline]
fn bilinear_corners(grid: &FeatureGrid, px: f64, py: f64) -> ([usize; 4], [f64; 4], f64, f64, bool, bool) {
    let wmax = (grid.width - 1) as f64;
    let hmax = (grid.height - 1) as f64;
    let in_x = (0.0..=wmax).contains(&px);
    let in_y = (0.0..=hmax).contains(&py);
    let x = px.clamp(0.0, wmax);
    let y = py.clamp(0.0, hmax);
    let x0 = (x.floor() as usize).min(grid.width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(grid.height.saturating_sub(2));
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let (x1, y1) = ((x0 + 1).min(grid.width - 1), (y0 + 1).min(grid.height - 1));
    let idx = [
        (y0 * grid.width + x0) * grid.dim,
        (y0 * grid.width + x1) * grid.dim,
        (y1 * grid.width + x0) * grid.dim,
        (y1 * grid.width + x1) * grid.dim,
    ];
    let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    (idx, w, fx, fy, in_x, in_y)
}

/// Bilinear sample of `grid` at a pixel position, coordinates clamped to
/// the grid.
pub fn sample_bilinear(grid: &FeatureGrid, pos: [f64; 2], out: &mut [f64]) {
    let (idx, w, ..) = bilinear_corners(grid, pos[0], pos[1]);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, wi) in idx.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        for (o, g) in out.iter_mut().zip(&grid.data[*i..*i + grid.dim]) {
            *o += wi * g;
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params.get(id).value,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool, op: Op<'a>) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols);
        self.push(rows, cols, value, false, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        let (r, c) = (p.rows, p.cols);
        self.push(r, c, Vec::new(), true, Op::Param(id))
    }

    /// `x [n,k] @ w [k,m] (+ b [1,m])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, k) = self.shape(x);
        let (k2, m) = self.shape(w);
        assert_eq!(k, k2, "linear: inner dimensions differ");
        let mut out = vec![0.0; n * m];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for i in 0..n {
                let orow = &mut out[i * m..(i + 1) * m];
                if let Some(b) = b {
                    orow.copy_from_slice(self.value(b));
                }
                for p in 0..k {
                    let a = xv[i * k + p];
                    if a == 0.0 {
                        continue;
                    }
                    for (o, wv) in orow.iter_mut().zip(&wv[p * m..(p + 1) * m]) {
                        *o += a * wv;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(n, m, out, needs, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.linear(a, b, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(r, c, out, needs, Op::Add(a, b))
    }

    /// Adds a `[1,c]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "add_row: shape mismatch");
        let rv = self.value(row);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(rv).map(|(a, b)| a + b))
            .collect();
        let needs = self.needs(x) || self.needs(row);
        self.push(r, c, out, needs, Op::AddRow { x, row })
    }

    /// Gathers rows of `x` by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < r, "select_rows: index out of range");
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x);
        self.push(idx.len(), c, out, needs, Op::SelectRows { x, idx })
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(r * c, rows * cols, "reshape: size mismatch");
        let out = self.value(x).to_vec();
        let needs = self.needs(x);
        self.push(rows, cols, out, needs, Op::Reshape(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, rows, "concat_cols: row mismatch");
                self.shape(p).1
            })
            .collect();
        let cols: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(rows, cols, out, needs, Op::ConcatCols(parts.to_vec()))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, cols) = self.shape(x);
        let out = self.value(x).iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        self.push(r, cols, out, needs, Op::Scale(x, c))
    }

    /// Multiplies every entry of `x` by the `[1,1]` node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let sv = self.value(s)[0];
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| v * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        self.push(r, c, out, needs, Op::MulScalar { x, s })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::Exp(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| gelu(v).0).collect();
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::Gelu(x))
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(mask.len(), r * c);
        let out = self.value(x).iter().zip(&mask).map(|(a, b)| a * b).collect();
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::Mask { x, mask })
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of shape `[1,c]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            r,
            c,
            out,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scales each row to unit L2 norm; all-zero rows map to zero.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n < NORM_EPS {
                out.extend(std::iter::repeat_n(0.0, c));
            } else {
                out.extend(row.iter().map(|v| v / n));
            }
        }
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::L2Normalize { x, norms })
    }

    /// Softmax over consecutive groups of `group` entries of the flat buffer.
    pub fn group_softmax(&mut self, x: Var, group: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!((r * c) % group, 0);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(group).for_each(softmax_in_place);
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::GroupSoftmax { x, group })
    }

    /// Multi-head scaled dot-product attention, batched.
    ///
    /// `q` is `[batch*nq, d]`, `k` and `v` are `[batch*nk, d]`; query block
    /// `b` only attends to key block `b`. No masking.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, nq: usize, nk: usize, heads: usize) -> Var {
        let d = self.shape(q).1;
        assert_eq!(self.shape(q).0, batch * nq);
        assert_eq!(self.shape(k), (batch * nk, d));
        assert_eq!(self.shape(v), (batch * nk, d));
        assert_eq!(d % heads, 0, "attention: width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * nq * nk];
        let mut out = vec![0.0; batch * nq * d];
        for b in 0..batch {
            for h in 0..heads {
                let o = h * dh;
                for i in 0..nq {
                    let qrow = &qv[(b * nq + i) * d + o..(b * nq + i) * d + o + dh];
                    let pbase = ((b * heads + h) * nq + i) * nk;
                    let prow = &mut probs[pbase..pbase + nk];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kv[(b * nk + j) * d + o..(b * nk + j) * d + o + dh];
                        *p = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(b * nq + i) * d + o..(b * nq + i) * d + o + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vv[(b * nk + j) * d + o..(b * nk + j) * d + o + dh];
                        for (oo, vx) in orow.iter_mut().zip(vrow) {
                            *oo += p * vx;
                        }
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            batch * nq,
            d,
            out,
            needs,
            Op::Attention {
                q,
                k,
                v,
                batch,
                nq,
                nk,
                heads,
                probs,
            },
        )
    }

    /// Attention probabilities recorded by an attention node,
    /// laid out `[batch][head][nq][nk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `out[b, j] = q[b] . c[b*m + j]` for `q [B,d]`, `c [B*m,d]`.
    pub fn row_group_dot(&mut self, q: Var, c: Var, m: usize) -> Var {
        let (b, d) = self.shape(q);
        assert_eq!(self.shape(c), (b * m, d));
        let (qv, cv) = (self.value(q), self.value(c));
        let mut out = Vec::with_capacity(b * m);
        for i in 0..b {
            let qr = &qv[i * d..(i + 1) * d];
            for j in 0..m {
                let cr = &cv[(i * m + j) * d..(i * m + j + 1) * d];
                out.push(qr.iter().zip(cr).map(|(x, y)| x * y).sum());
            }
        }
        let needs = self.needs(q) || self.needs(c);
        self.push(b, m, out, needs, Op::RowGroupDot { q, c, m })
    }

    /// Bilinear samples of `grid` at each `[x, y]` row of `pos`.
    pub fn bilinear(&mut self, pos: Var, grid: &'a FeatureGrid) -> Var {
        let n = self.shape(pos).0;
        self.bilinear_multi(pos, vec![grid], vec![0; n])
    }

    /// Bilinear samples where row `i` of `pos` reads `grids[row_grid[i]]`.
    /// All grids must share the channel count.
    pub fn bilinear_multi(&mut self, pos: Var, grids: Vec<&'a FeatureGrid>, row_grid: Vec<usize>) -> Var {
        let (n, two) = self.shape(pos);
        assert_eq!(two, 2);
        assert_eq!(row_grid.len(), n);
        let dim = grids[0].dim;
        assert!(grids.iter().all(|g| g.dim == dim), "bilinear: channel mismatch");
        let mut out = vec![0.0; n * dim];
        let pv = self.value(pos);
        for i in 0..n {
            let grid = grids[row_grid[i]];
            sample_bilinear(grid, [pv[2 * i], pv[2 * i + 1]], &mut out[i * dim..(i + 1) * dim]);
        }
        let needs = self.needs(pos);
        self.push(n, dim, out, needs, Op::Bilinear { pos, grids, row_grid })
    }

    /// `out[n] = sum_p w[n*p + i] * x[n*p + i]` over groups of `p` rows.
    pub fn group_weighted_sum(&mut self, x: Var, w: Var, p: usize) -> Var {
        let (rows, c) = self.shape(x);
        assert_eq!(rows % p, 0);
        assert_eq!(self.shape(w).0 * self.shape(w).1, rows);
        let n = rows / p;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; n * c];
        for g in 0..n {
            let orow = &mut out[g * c..(g + 1) * c];
            for r in g * p..(g + 1) * p {
                let wr = wv[r];
                for (o, xx) in orow.iter_mut().zip(&xv[r * c..(r + 1) * c]) {
                    *o += wr * xx;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        self.push(n, c, out, needs, Op::GroupWeightedSum { x, w, p })
    }

    /// Per-head projection: `x [n*heads, cin]`, `w [heads*cin, cout]` gives
    /// `[n, heads*cout]` with head `h` using its own `cin x cout` block.
    pub fn head_linear(&mut self, x: Var, w: Var, heads: usize) -> Var {
        let (rows, cin) = self.shape(x);
        let (wr, cout) = self.shape(w);
        assert_eq!(wr, heads * cin);
        assert_eq!(rows % heads, 0);
        let n = rows / heads;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; n * heads * cout];
        for i in 0..n {
            for h in 0..heads {
                let xr = &xv[(i * heads + h) * cin..(i * heads + h + 1) * cin];
                let orow = &mut out[(i * heads + h) * cout..(i * heads + h + 1) * cout];
                for (p, &a) in xr.iter().enumerate() {
                    let wrow = &wv[(h * cin + p) * cout..(h * cin + p + 1) * cout];
                    for (o, ww) in orow.iter_mut().zip(wrow) {
                        *o += a * ww;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        self.push(n, heads * cout, out, needs, Op::HeadLinear { x, w, heads })
    }

    /// Sinusoidal encoding of `scale * disp` for constant displacements
    /// `disp [n,2]`. Columns are `[sin x | cos x | sin y | cos y]`, one
    /// entry per frequency each.
    pub fn sin_embed(&mut self, disp: Vec<f64>, scale: Var, freqs: Vec<f64>) -> Var {
        assert_eq!(disp.len() % 2, 0);
        assert_eq!(self.shape(scale), (1, 1));
        let n = disp.len() / 2;
        let f = freqs.len();
        let s = self.value(scale)[0];
        let mut out = Vec::with_capacity(n * 4 * f);
        for i in 0..n {
            for axis in 0..2 {
                let d = disp[2 * i + axis];
                out.extend(freqs.iter().map(|w| (w * s * d).sin()));
                out.extend(freqs.iter().map(|w| (w * s * d).cos()));
            }
        }
        let needs = self.needs(scale);
        self.push(n, 4 * f, out, needs, Op::SinEmbed { disp, scale, freqs })
    }

    /// `sum_t weights[t] * CE(target_t, softmax(logits_t))` as a `[1,1]` node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<f64>, weights: Vec<f64>) -> Var {
        let (l, m) = self.shape(logits);
        assert_eq!(targets.len(), l * m);
        assert_eq!(weights.len(), l);
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (t, row) in self.value(logits).chunks(m).enumerate() {
            if weights[t] == 0.0 {
                softmax_in_place(&mut probs[t * m..(t + 1) * m]);
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let ce: f64 = row
                .iter()
                .zip(&targets[t * m..(t + 1) * m])
                .map(|(z, s)| if *s == 0.0 { 0.0 } else { -s * (z - lse) })
                .sum();
            loss += weights[t] * ce;
            softmax_in_place(&mut probs[t * m..(t + 1) * m]);
        }
        let needs = self.needs(logits);
        self.push(
            1,
            1,
            vec![loss],
            needs,
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
        )
    }

    /// Gradients of the `[1,1]` node `out` with respect to every parameter.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar");
        let mut pgrads = Grads::zeros_like(self.params);
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut pgrads);
        }
        pgrads
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; r * c]))
    }

    fn backward_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>], pgrads: &mut Grads) {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                for (a, b) in pgrads.data[id.0].iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = self.shape(*x);
                let m = node.cols;
                if let Some(gb) = b.and_then(|b| self.grad_buf(grads, b)) {
                    for row in g.chunks(m) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                let xv = self.value(*x);
                let wv = self.value(*w);
                if let Some(gw) = self.grad_buf(grads, *w) {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let a = xv[i * k + p];
                            if a == 0.0 {
                                continue;
                            }
                            for (gg, gr) in gw[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *gg += a * gr;
                            }
                        }
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let dot: f64 = grow.iter().zip(&wv[p * m..(p + 1) * m]).map(|(a, b)| a * b).sum();
                            gx[i * k + p] += dot;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_buf(grads, v) {
                        for (x, y) in gv.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                if let Some(gr) = self.grad_buf(grads, *row) {
                    for r in g.chunks(node.cols) {
                        for (a, b) in gr.iter_mut().zip(r) {
                            *a += b;
                        }
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                let c = node.cols;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, b) in gx[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if let Some(gp) = self.grad_buf(grads, p) {
                        for i in 0..node.rows {
                            let src = &g[i * node.cols + off..i * node.cols + off + w];
                            for (a, b) in gp[i * w..(i + 1) * w].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += c * b;
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s)[0];
                let xv = self.value(*x);
                if let Some(gs) = self.grad_buf(grads, *s) {
                    gs[0] += xv.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += sv * b;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((a, b), y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *a += b * y;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((a, b), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += b * gelu(v).1;
                    }
                }
            }
            Op::Mask { x, mask } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((a, b), m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += b * m;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.cols;
                let gv = self.value(*gamma);
                if let Some(gg) = self.grad_buf(grads, *gamma) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *beta) {
                    for gr in g.chunks(c) {
                        for (a, b) in gb.iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let mut dh = vec![0.0; c];
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let c = node.cols;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, (gr, yr)) in g.chunks(c).zip(node.value.chunks(c)).enumerate() {
                        let n = norms[r];
                        if n < NORM_EPS {
                            continue;
                        }
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::GroupSoftmax { x, group } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((gxr, gr), yr) in gx.chunks_mut(*group).zip(g.chunks(*group)).zip(node.value.chunks(*group)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..*group {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                nq,
                nk,
                heads,
                probs,
            } => {
                let (batch, nq, nk, heads) = (*batch, *nq, *nk, *heads);
                let d = node.cols;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; batch * nq * d];
                let mut dk = vec![0.0; batch * nk * d];
                let mut dv = vec![0.0; batch * nk * d];
                let mut dp = vec![0.0; nk];
                for b in 0..batch {
                    for h in 0..heads {
                        let o = h * dh;
                        for i in 0..nq {
                            let qi = (b * nq + i) * d + o;
                            let grow = &g[qi..qi + dh];
                            let pbase = ((b * heads + h) * nq + i) * nk;
                            let prow = &probs[pbase..pbase + nk];
                            for j in 0..nk {
                                let vj = (b * nk + j) * d + o;
                                dp[j] = grow.iter().zip(&vv[vj..vj + dh]).map(|(a, b)| a * b).sum();
                                for (a, gg) in dv[vj..vj + dh].iter_mut().zip(grow) {
                                    *a += prow[j] * gg;
                                }
                            }
                            let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for j in 0..nk {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = (b * nk + j) * d + o;
                                for c in 0..dh {
                                    dq[qi + c] += ds * kv[kj + c];
                                    dk[kj + c] += ds * qv[qi + c];
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(gx) = self.grad_buf(grads, var) {
                        for (a, b) in gx.iter_mut().zip(&buf) {
                            *a += b;
                        }
                    }
                }
            }
            Op::RowGroupDot { q, c, m } => {
                let d = self.shape(*q).1;
                let (qv, cv) = (self.value(*q), self.value(*c));
                let b = node.rows;
                if let Some(gq) = self.grad_buf(grads, *q) {
                    for i in 0..b {
                        for j in 0..*m {
                            let gij = g[i * m + j];
                            let cr = &cv[(i * m + j) * d..(i * m + j + 1) * d];
                            for (a, x) in gq[i * d..(i + 1) * d].iter_mut().zip(cr) {
                                *a += gij * x;
                            }
                        }
                    }
                }
                if let Some(gc) = self.grad_buf(grads, *c) {
                    for i in 0..b {
                        let qr = &qv[i * d..(i + 1) * d];
                        for j in 0..*m {
                            let gij = g[i * m + j];
                            for (a, x) in gc[(i * m + j) * d..(i * m + j + 1) * d].iter_mut().zip(qr) {
                                *a += gij * x;
                            }
                        }
                    }
                }
            }
            Op::Bilinear { pos, grids, row_grid } => {
                let dim = grids[0].dim;
                let pv = self.value(*pos);
                if let Some(gp) = self.grad_buf(grads, *pos) {
                    for i in 0..node.rows {
                        let grid = grids[row_grid[i]];
                        let (idx, _, fx, fy, in_x, in_y) = bilinear_corners(grid, pv[2 * i], pv[2 * i + 1]);
                        let gr = &g[i * dim..(i + 1) * dim];
                        let c00 = &grid.data[idx[0]..idx[0] + dim];
                        let c10 = &grid.data[idx[1]..idx[1] + dim];
                        let c01 = &grid.data[idx[2]..idx[2] + dim];
                        let c11 = &grid.data[idx[3]..idx[3] + dim];
                        let (mut dx, mut dy) = (0.0, 0.0);
                        for c in 0..dim {
                            dx += gr[c] * ((1.0 - fy) * (c10[c] - c00[c]) + fy * (c11[c] - c01[c]));
                            dy += gr[c] * ((1.0 - fx) * (c01[c] - c00[c]) + fx * (c11[c] - c10[c]));
                        }
                        if in_x {
                            gp[2 * i] += dx;
                        }
                        if in_y {
                            gp[2 * i + 1] += dy;
                        }
                    }
                }
            }
            Op::GroupWeightedSum { x, w, p } => {
                let c = node.cols;
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gw) = self.grad_buf(grads, *w) {
                    for (r, gwr) in gw.iter_mut().enumerate() {
                        let grow = &g[(r / p) * c..(r / p + 1) * c];
                        *gwr += grow.iter().zip(&xv[r * c..(r + 1) * c]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, &wr) in wv.iter().enumerate() {
                        let grow = &g[(r / p) * c..(r / p + 1) * c];
                        for (a, b) in gx[r * c..(r + 1) * c].iter_mut().zip(grow) {
                            *a += wr * b;
                        }
                    }
                }
            }
            Op::HeadLinear { x, w, heads } => {
                let heads = *heads;
                let cin = self.shape(*x).1;
                let cout = self.shape(*w).1;
                let n = self.shape(*x).0 / heads;
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gw) = self.grad_buf(grads, *w) {
                    for i in 0..n {
                        for h in 0..heads {
                            let xr = &xv[(i * heads + h) * cin..(i * heads + h + 1) * cin];
                            let grow = &g[(i * heads + h) * cout..(i * heads + h + 1) * cout];
                            for (p, &a) in xr.iter().enumerate() {
                                for (gg, b) in gw[(h * cin + p) * cout..(h * cin + p + 1) * cout].iter_mut().zip(grow) {
                                    *gg += a * b;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..n {
                        for h in 0..heads {
                            let grow = &g[(i * heads + h) * cout..(i * heads + h + 1) * cout];
                            for p in 0..cin {
                                let wrow = &wv[(h * cin + p) * cout..(h * cin + p + 1) * cout];
                                gx[(i * heads + h) * cin + p] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::SinEmbed { disp, scale, freqs } => {
                let s = self.value(*scale)[0];
                let f = freqs.len();
                if let Some(gs) = self.grad_buf(grads, *scale) {
                    let mut total = 0.0;
                    for i in 0..node.rows {
                        for axis in 0..2 {
                            let d = disp[2 * i + axis];
                            let base = i * 4 * f + axis * 2 * f;
                            for (kf, w) in freqs.iter().enumerate() {
                                let arg = w * s * d;
                                total += g[base + kf] * w * d * arg.cos();
                                total -= g[base + f + kf] * w * d * arg.sin();
                            }
                        }
                    }
                    gs[0] += total;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let m = self.shape(*logits).1;
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    for (t, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        // The gradient assumes each target row sums to one.
                        for j in 0..m {
                            gl[t * m + j] += g[0] * w * (probs[t * m + j] - targets[t * m + j]);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    fn random(store: &mut ParamStore, name: &str, rows: usize, cols: usize, seed: u64) -> ParamId {
        let mut rng = rng_from(seed, &[]);
        let v = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.add(name, rows, cols, v, true)
    }

    /// Reduces any node to a scalar with fixed pseudo-random weights.
    fn reduce(tape: &mut Tape<'_>, x: Var) -> Var {
        let (r, c) = tape.shape(x);
        let flat = tape.reshape(x, 1, r * c);
        let mut rng = rng_from(99, &[]);
        let w = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = tape.constant(r * c, 1, w);
        tape.matmul(flat, w)
    }

    fn check(store: &ParamStore, f: impl Fn(&mut Tape<'_>) -> Var) {
        let eval = |s: &ParamStore| {
            let mut t = Tape::new(s);
            let out = f(&mut t);
            t.value(out)[0]
        };
        let mut t = Tape::new(store);
        let out = f(&mut t);
        let grads = t.backward(out);
        let mut s = store.clone();
        let h = 1e-6;
        for (id, p) in store.iter() {
            for i in 0..p.value.len() {
                let orig = p.value[i];
                s.get_mut(id).value[i] = orig + h;
                let up = eval(&s);
                s.get_mut(id).value[i] = orig - h;
                let down = eval(&s);
                s.get_mut(id).value[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(id)[i];
                let err = (fd - an).abs() / (1.0f64).max(fd.abs()).max(an.abs());
                assert!(err < 1e-6, "{}[{i}]: analytic {an} vs numeric {fd}", p.name);
            }
        }
    }

    #[test]
    fn grad_linear_add_select_concat() {
        let mut s = ParamStore::new();
        let x = random(&mut s, "x", 3, 4, 1);
        let w = random(&mut s, "w", 4, 5, 2);
        let b = random(&mut s, "b", 1, 5, 3);
        let r = random(&mut s, "r", 3, 5, 4);
        check(&s, |t| {
            let (x, w, b, r) = (t.param(x), t.param(w), t.param(b), t.param(r));
            let y = t.linear(x, w, Some(b));
            let y = t.add(y, r);
            let br = t.select_rows(b, vec![0]);
            let y = t.add_row(y, br);
            let s = t.select_rows(y, vec![2, 0, 2]);
            let c = t.concat_cols(&[s, x]);
            let c = t.scale(c, 0.7);
            reduce(t, c)
        });
    }

    #[test]
    fn grad_pointwise() {
        let mut s = ParamStore::new();
        let x = random(&mut s, "x", 2, 6, 5);
        let k = random(&mut s, "k", 1, 1, 6);
        check(&s, |t| {
            let (x, k) = (t.param(x), t.param(k));
            let a = t.exp(x);
            let b = t.gelu(x);
            let c = t.mul_scalar(b, k);
            let d = t.mask(a, (0..12).map(|i| (i % 3) as f64).collect());
            let e = t.add(c, d);
            reduce(t, e)
        });
    }

    #[test]
    fn grad_norms_and_softmax() {
        let mut s = ParamStore::new();
        let x = random(&mut s, "x", 3, 6, 7);
        let g = random(&mut s, "g", 1, 6, 8);
        let b = random(&mut s, "b", 1, 6, 9);
        check(&s, |t| {
            let (x, g, b) = (t.param(x), t.param(g), t.param(b));
            let ln = t.layer_norm(x, g, b);
            let l2 = t.l2_normalize(x);
            let sm = t.group_softmax(ln, 3);
            let y = t.add(l2, sm);
            reduce(t, y)
        });
    }

    #[test]
    fn l2_zero_row_is_zero_without_nan() {
        let mut s = ParamStore::new();
        let x = s.add("x", 2, 2, vec![0.0, 0.0, 3.0, 4.0], true);
        let mut t = Tape::new(&s);
        let xv = t.param(x);
        let y = t.l2_normalize(xv);
        assert_eq!(t.value(y), &[0.0, 0.0, 0.6, 0.8]);
        let out = reduce(&mut t, y);
        assert!(t.backward(out).is_finite());
    }

    #[test]
    fn grad_attention() {
        let mut s = ParamStore::new();
        let q = random(&mut s, "q", 2 * 3, 4, 10);
        let k = random(&mut s, "k", 2 * 5, 4, 11);
        let v = random(&mut s, "v", 2 * 5, 4, 12);
        check(&s, |t| {
            let (q, k, v) = (t.param(q), t.param(k), t.param(v));
            let a = t.attention(q, k, v, 2, 3, 5, 2);
            reduce(t, a)
        });
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut s = ParamStore::new();
        let q = random(&mut s, "q", 1, 2, 13);
        let k = random(&mut s, "k", 3, 2, 14);
        let v = random(&mut s, "v", 3, 2, 15);
        let mut t = Tape::new(&s);
        let (qv, kv, vv) = (t.param(q), t.param(k), t.param(v));
        let a = t.attention(qv, kv, vv, 1, 1, 3, 1);
        let (qs, ks, vs) = (&s.get(q).value, &s.get(k).value, &s.get(v).value);
        let logits: Vec<f64> = (0..3)
            .map(|j| (qs[0] * ks[2 * j] + qs[1] * ks[2 * j + 1]) / 2f64.sqrt())
            .collect();
        let p = softmax(&logits);
        for c in 0..2 {
            let want: f64 = (0..3).map(|j| p[j] * vs[2 * j + c]).sum();
            assert!((t.value(a)[c] - want).abs() < 1e-12);
        }
        assert!((t.attention_probs(a).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_group_ops() {
        let mut s = ParamStore::new();
        let q = random(&mut s, "q", 2, 3, 16);
        let c = random(&mut s, "c", 2 * 4, 3, 17);
        let w = random(&mut s, "w", 4, 2, 18);
        let hw = random(&mut s, "hw", 2 * 3, 5, 19);
        check(&s, |t| {
            let (q, c, w, hw) = (t.param(q), t.param(c), t.param(w), t.param(hw));
            let d = t.row_group_dot(q, c, 4);
            let ws = t.group_weighted_sum(c, w, 2);
            let h = t.head_linear(ws, hw, 2);
            let a = reduce(t, d);
            let b = reduce(t, h);
            t.add(a, b)
        });
    }

    #[test]
    fn grad_bilinear_and_sin_embed() {
        let grid: &'static FeatureGrid =
            Box::leak(Box::new(FeatureGrid::from_fn(5, 6, 3, |x, y, c| ((x * x + 3 * y + c) as f64 * 0.37).sin())));
        let other: &'static FeatureGrid =
            Box::leak(Box::new(FeatureGrid::from_fn(5, 6, 3, |x, y, c| ((x + y * y + 2 * c) as f64 * 0.21).cos())));
        let mut s = ParamStore::new();
        // Positions away from integer coordinates, where bilinear is smooth.
        let pos = s.add("pos", 3, 2, vec![1.3, 2.6, 4.45, 0.2, 2.7, 3.35], true);
        let sc = s.add("scale", 1, 1, vec![1.7], true);
        check(&s, |t| {
            let p = t.param(pos);
            let b = t.bilinear_multi(p, vec![grid, other], vec![0, 1, 1]);
            let sc = t.param(sc);
            let e = t.sin_embed(vec![0.3, -0.2, 1.1, 0.05], sc, vec![1.0, 0.5, 0.25]);
            let a = reduce(t, b);
            let c = reduce(t, e);
            t.add(a, c)
        });
    }

    #[test]
    fn bilinear_outside_grid_has_zero_position_gradient() {
        let grid = FeatureGrid::from_fn(4, 4, 2, |x, y, c| (x + 2 * y + c) as f64);
        let mut s = ParamStore::new();
        let pos = s.add("pos", 1, 2, vec![-2.0, 7.5], true);
        let mut t = Tape::new(&s);
        let p = t.param(pos);
        let b = t.bilinear(p, &grid);
        assert_eq!(t.value(b), grid.at(0, 3));
        let out = reduce(&mut t, b);
        assert_eq!(t.backward(out).get(pos), &[0.0, 0.0]);
    }

    #[test]
    fn grad_cross_entropy() {
        let mut s = ParamStore::new();
        let z = random(&mut s, "z", 3, 4, 20);
        let targets = vec![0.1, 0.2, 0.3, 0.4, 1.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25];
        check(&s, |t| {
            let z = t.param(z);
            t.softmax_cross_entropy(z, targets.clone(), vec![0.5, 0.0, 0.5])
        });
    }

    #[test]
    fn cross_entropy_value() {
        let mut s = ParamStore::new();
        let z = s.add("z", 1, 2, vec![0.0, 0.0], true);
        let mut t = Tape::new(&s);
        let zv = t.param(z);
        let l = t.softmax_cross_entropy(zv, vec![1.0, 0.0], vec![1.0]);
        assert!((t.value(l)[0] - 2f64.ln()).abs() < 1e-12);
    }
}
