//! Dual-embedding transformer predictor.
//!
//! The (front zero-padded) input is folded into a `c x p` grid. Rows become
//! `c` patch tokens and columns become `p` point tokens; each token stream
//! gets its own embedding, learned position table and pre-norm encoder
//! stack. The two encoded streams are concatenated, flattened and mapped to
//! the horizon by a linear head. Forward and backward passes are written out
//! by hand over a flat parameter vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};

const LN_EPS: f64 = 1e-5;
const POS_INIT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEmbedConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub patch: usize,
    pub input_len: usize,
    pub horizon: usize,
}

impl DualEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("layers", self.layers),
            ("patch", self.patch),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LdmError::param(name, "must be >= 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(LdmError::param(
                "n_heads",
                format!("d_model {} is not divisible by {}", self.d_model, self.n_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LdmError::param("dropout", "must lie in [0, 1)"));
        }
        if self.patch > self.input_len {
            return Err(LdmError::param(
                "patch",
                format!("patch {} exceeds input length {}", self.patch, self.input_len),
            ));
        }
        Ok(())
    }

    /// Number of patch rows `c` after front padding.
    pub fn rows(&self) -> usize {
        self.input_len.div_ceil(self.patch)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Front zero-padding to a multiple of `p`, then a non-overlapping fold into
/// `c` rows of `p` consecutive samples.
pub fn unfold2d(s: &[f64], p: usize) -> Result<Mat> {
    if p == 0 {
        return Err(LdmError::param("patch", "must be >= 1"));
    }
    if s.is_empty() {
        return Err(LdmError::Empty("unfold of an empty sequence".into()));
    }
    let c = s.len().div_ceil(p);
    let mut m = Mat::zeros(c, p);
    let pad = c * p - s.len();
    m.data[pad..].copy_from_slice(s);
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamInit {
    /// Uniform in `+-1/sqrt(fan_in)`.
    Weight {
        fan_in: usize,
    },
    Zeros,
    Ones,
    /// Uniform in `+-0.02`.
    Position,
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: ParamInit,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearAt {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormAt {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockAt {
    ln1: NormAt,
    q: LinearAt,
    k: LinearAt,
    v: LinearAt,
    o: LinearAt,
    ln2: NormAt,
    ff1: LinearAt,
    ff2: LinearAt,
}

#[derive(Debug, Clone)]
struct StreamAt {
    embed: LinearAt,
    pos: usize,
    tokens: usize,
    blocks: Vec<BlockAt>,
}

#[derive(Debug, Clone)]
struct Layout {
    patch: StreamAt,
    point: StreamAt,
    head: LinearAt,
}

#[derive(Default)]
struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    offset: usize,
}

impl LayoutBuilder {
    fn alloc(&mut self, name: String, shape: Vec<usize>, init: ParamInit) -> usize {
        let off = self.offset;
        let e = ParamEntry {
            name,
            shape,
            offset: off,
            init,
        };
        self.offset += e.len();
        self.entries.push(e);
        off
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> LinearAt {
        LinearAt {
            w: self.alloc(
                format!("{name}.weight"),
                vec![out, inp],
                ParamInit::Weight { fan_in: inp },
            ),
            b: self.alloc(format!("{name}.bias"), vec![out], ParamInit::Zeros),
            inp,
            out,
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormAt {
        NormAt {
            g: self.alloc(format!("{name}.gamma"), vec![d], ParamInit::Ones),
            b: self.alloc(format!("{name}.beta"), vec![d], ParamInit::Zeros),
        }
    }

    fn stream(&mut self, name: &str, tokens: usize, token_dim: usize, cfg: &DualEmbedConfig) -> StreamAt {
        let d = cfg.d_model;
        let embed = self.linear(&format!("{name}.embed"), token_dim, d);
        let pos = self.alloc(format!("{name}.pos"), vec![tokens, d], ParamInit::Position);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                BlockAt {
                    ln1: self.norm(&format!("{p}.norm1"), d),
                    q: self.linear(&format!("{p}.attn.q"), d, d),
                    k: self.linear(&format!("{p}.attn.k"), d, d),
                    v: self.linear(&format!("{p}.attn.v"), d, d),
                    o: self.linear(&format!("{p}.attn.out"), d, d),
                    ln2: self.norm(&format!("{p}.norm2"), d),
                    ff1: self.linear(&format!("{p}.ff1"), d, cfg.d_ff),
                    ff2: self.linear(&format!("{p}.ff2"), cfg.d_ff, d),
                }
            })
            .collect();
        StreamAt {
            embed,
            pos,
            tokens,
            blocks,
        }
    }
}

fn build_layout(cfg: &DualEmbedConfig) -> (Layout, Vec<ParamEntry>, usize) {
    let c = cfg.rows();
    let p = cfg.patch;
    let mut b = LayoutBuilder::default();
    let patch = b.stream("patch", c, p, cfg);
    let point = b.stream("point", p, c, cfg);
    let head = b.linear("head", (c + p) * cfg.d_model, cfg.horizon);
    (Layout { patch, point, head }, b.entries, b.offset)
}

/// Configuration plus every trainable tensor, flattened in declaration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualEmbedModel {
    config: DualEmbedConfig,
    entries: Vec<ParamEntry>,
    params: Vec<f64>,
    #[serde(skip)]
    layout: Option<Layout>,
}

impl PartialEq for DualEmbedModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.entries == other.entries && self.params == other.params
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct DualTape {
    patch: StreamTape,
    point: StreamTape,
    flat: Vec<f64>,
}

#[derive(Debug, Clone)]
struct StreamTape {
    tokens: Mat,
    embed_mask: Option<Vec<f64>>,
    blocks: Vec<BlockTape>,
}

#[derive(Debug, Clone)]
struct NormTape {
    xhat: Mat,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockTape {
    ln1: NormTape,
    n1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    heads: Mat,
    attn_mask: Option<Vec<f64>>,
    ln2: NormTape,
    n2: Mat,
    h1: Mat,
    act: Mat,
    ff_mask: Option<Vec<f64>>,
}

impl DualEmbedModel {
    pub fn new(config: DualEmbedConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, entries, total) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; total];
        for e in &entries {
            let slot = &mut params[e.offset..e.offset + e.len()];
            match e.init {
                ParamInit::Weight { fan_in } => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    slot.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
                }
                ParamInit::Position => {
                    slot.iter_mut().for_each(|v| *v = rng.random_range(-POS_INIT..POS_INIT));
                }
                ParamInit::Ones => slot.fill(1.0),
                ParamInit::Zeros => slot.fill(0.0),
            }
        }
        Ok(Self {
            config,
            entries,
            params,
            layout: Some(layout),
        })
    }

    /// Rebuilds a model from a stored config and parameter vector, checking
    /// that the stored tensor table matches the config.
    pub fn from_parts(config: DualEmbedConfig, entries: Vec<ParamEntry>, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layout, expected, total) = build_layout(&config);
        if expected != entries || params.len() != total {
            return Err(LdmError::shape(
                format!("{} tensors / {total} parameters", expected.len()),
                format!("{} tensors / {} parameters", entries.len(), params.len()),
            ));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(LdmError::Diverged("stored parameters are not finite".into()));
        }
        Ok(Self {
            config,
            entries,
            params,
            layout: Some(layout),
        })
    }

    /// Restores the derived offset table after deserialization.
    pub fn rehydrate(self) -> Result<Self> {
        Self::from_parts(self.config, self.entries, self.params)
    }

    pub fn config(&self) -> &DualEmbedConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> &Layout {
        self.layout
            .as_ref()
            .expect("DualEmbedModel used before rehydrate() after deserialization")
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.input_len {
            return Err(LdmError::shape(
                format!("{} inputs", self.config.input_len),
                format!("{} inputs", x.len()),
            ));
        }
        let (out, _) = self.forward(x, None);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(LdmError::Diverged("non-finite activations".into()));
        }
        Ok(out)
    }

    /// Forward pass. Dropout is applied only when `rng` is given and the
    /// configured rate is positive.
    pub fn forward(&self, x: &[f64], rng: Option<&mut ChaCha8Rng>) -> (Vec<f64>, DualTape) {
        let lay = self.layout();
        let grid = unfold2d(x, self.config.patch).expect("input length checked by caller");
        let mut rng = rng.filter(|_| self.config.dropout > 0.0);
        let (a, patch) = self.stream_forward(&lay.patch, grid.clone(), rng.as_deref_mut());
        let (b, point) = self.stream_forward(&lay.point, grid.transpose(), rng);
        let mut flat = a.data;
        flat.extend_from_slice(&b.data);
        let out = linear_vec(&self.params, lay.head, &flat);
        (out, DualTape { patch, point, flat })
    }

    /// Accumulates parameter gradients for `dL/d output = grad_out`.
    pub fn backward(&self, tape: &DualTape, grad_out: &[f64], grads: &mut [f64]) {
        let lay = self.layout();
        let d = self.config.d_model;
        let dflat = linear_vec_backward(&self.params, lay.head, &tape.flat, grad_out, grads);
        let split = lay.patch.tokens * d;
        let da = Mat {
            rows: lay.patch.tokens,
            cols: d,
            data: dflat[..split].to_vec(),
        };
        let db = Mat {
            rows: lay.point.tokens,
            cols: d,
            data: dflat[split..].to_vec(),
        };
        self.stream_backward(&lay.patch, &tape.patch, da, grads);
        self.stream_backward(&lay.point, &tape.point, db, grads);
    }

    fn stream_forward(&self, at: &StreamAt, tokens: Mat, mut rng: Option<&mut ChaCha8Rng>) -> (Mat, StreamTape) {
        let d = self.config.d_model;
        let mut h = linear(&self.params, at.embed, &tokens);
        for (v, p) in h.data.iter_mut().zip(&self.params[at.pos..at.pos + at.tokens * d]) {
            *v += p;
        }
        let embed_mask = dropout(&mut h, self.config.dropout, rng.as_deref_mut());
        let mut blocks = Vec::with_capacity(at.blocks.len());
        for blk in &at.blocks {
            let (out, t) = self.block_forward(blk, h, rng.as_deref_mut());
            blocks.push(t);
            h = out;
        }
        (
            h,
            StreamTape {
                tokens,
                embed_mask,
                blocks,
            },
        )
    }

    fn stream_backward(&self, at: &StreamAt, tape: &StreamTape, mut dh: Mat, grads: &mut [f64]) {
        let d = self.config.d_model;
        for (blk, t) in at.blocks.iter().zip(&tape.blocks).rev() {
            dh = self.block_backward(blk, t, dh, grads);
        }
        if let Some(mask) = &tape.embed_mask {
            dh.data.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        for (g, v) in grads[at.pos..at.pos + at.tokens * d].iter_mut().zip(&dh.data) {
            *g += v;
        }
        linear_backward(&self.params, at.embed, &tape.tokens, &dh, grads);
    }

    fn block_forward(&self, at: &BlockAt, x: Mat, mut rng: Option<&mut ChaCha8Rng>) -> (Mat, BlockTape) {
        let p = &self.params;
        let (n1, ln1) = layer_norm(p, at.ln1, &x);
        let q = linear(p, at.q, &n1);
        let k = linear(p, at.k, &n1);
        let v = linear(p, at.v, &n1);
        let (heads, probs) = attention(&q, &k, &v, self.config.n_heads);
        let mut att = linear(p, at.o, &heads);
        let attn_mask = dropout(&mut att, self.config.dropout, rng.as_deref_mut());
        let mut x1 = x;
        x1.add_assign(&att);

        let (n2, ln2) = layer_norm(p, at.ln2, &x1);
        let h1 = linear(p, at.ff1, &n2);
        let act = Mat {
            rows: h1.rows,
            cols: h1.cols,
            data: h1.data.iter().map(|&u| gelu(u)).collect(),
        };
        let mut ff = linear(p, at.ff2, &act);
        let ff_mask = dropout(&mut ff, self.config.dropout, rng);
        let mut out = x1;
        out.add_assign(&ff);
        (
            out,
            BlockTape {
                ln1,
                n1,
                q,
                k,
                v,
                probs,
                heads,
                attn_mask,
                ln2,
                n2,
                h1,
                act,
                ff_mask,
            },
        )
    }

    fn block_backward(&self, at: &BlockAt, t: &BlockTape, dout: Mat, grads: &mut [f64]) -> Mat {
        let p = &self.params;
        // Feed-forward branch.
        let mut dff = dout.clone();
        if let Some(mask) = &t.ff_mask {
            dff.data.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        let mut dact = linear_backward(p, at.ff2, &t.act, &dff, grads);
        dact.data
            .iter_mut()
            .zip(&t.h1.data)
            .for_each(|(g, &u)| *g *= gelu_grad(u));
        let dn2 = linear_backward(p, at.ff1, &t.n2, &dact, grads);
        let mut dx1 = layer_norm_backward(p, at.ln2, &t.ln2, &dn2, grads);
        dx1.add_assign(&dout);

        // Attention branch.
        let mut datt = dx1.clone();
        if let Some(mask) = &t.attn_mask {
            datt.data.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        let dheads = linear_backward(p, at.o, &t.heads, &datt, grads);
        let (dq, dk, dv) = attention_backward(&t.q, &t.k, &t.v, &t.probs, &dheads, self.config.n_heads);
        let mut dn1 = linear_backward(p, at.q, &t.n1, &dq, grads);
        dn1.add_assign(&linear_backward(p, at.k, &t.n1, &dk, grads));
        dn1.add_assign(&linear_backward(p, at.v, &t.n1, &dv, grads));
        let mut dx = layer_norm_backward(p, at.ln1, &t.ln1, &dn1, grads);
        dx.add_assign(&dx1);
        dx
    }
}

fn dropout(h: &mut Mat, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..h.data.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    h.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    Some(mask)
}

/// `x W^T + b` for each row of `x`.
fn linear(params: &[f64], at: LinearAt, x: &Mat) -> Mat {
    debug_assert_eq!(x.cols, at.inp);
    let w = &params[at.w..at.w + at.inp * at.out];
    let b = &params[at.b..at.b + at.out];
    let mut y = Mat::zeros(x.rows, at.out);
    for i in 0..x.rows {
        let xi = x.row(i);
        for (o, (wr, bo)) in w.chunks_exact(at.inp).zip(b).enumerate() {
            y.data[i * at.out + o] = wr.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + bo;
        }
    }
    y
}

fn linear_vec(params: &[f64], at: LinearAt, x: &[f64]) -> Vec<f64> {
    let m = Mat {
        rows: 1,
        cols: x.len(),
        data: x.to_vec(),
    };
    linear(params, at, &m).data
}

/// Accumulates `dW += dy^T x`, `db += sum_rows dy` and returns `dx = dy W`.
fn linear_backward(params: &[f64], at: LinearAt, x: &Mat, dy: &Mat, grads: &mut [f64]) -> Mat {
    let w = &params[at.w..at.w + at.inp * at.out];
    let mut dx = Mat::zeros(x.rows, at.inp);
    for i in 0..x.rows {
        let xi = x.row(i);
        let dyi = dy.row(i);
        for (o, &g) in dyi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let gw = &mut grads[at.w + o * at.inp..at.w + (o + 1) * at.inp];
            for (a, &v) in gw.iter_mut().zip(xi) {
                *a += g * v;
            }
            grads[at.b + o] += g;
            let wr = &w[o * at.inp..(o + 1) * at.inp];
            for (a, &v) in dx.row_mut(i).iter_mut().zip(wr) {
                *a += g * v;
            }
        }
    }
    dx
}

fn linear_vec_backward(params: &[f64], at: LinearAt, x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
    let xm = Mat {
        rows: 1,
        cols: x.len(),
        data: x.to_vec(),
    };
    let dym = Mat {
        rows: 1,
        cols: dy.len(),
        data: dy.to_vec(),
    };
    linear_backward(params, at, &xm, &dym, grads).data
}

fn layer_norm(params: &[f64], at: NormAt, x: &Mat) -> (Mat, NormTape) {
    let d = x.cols;
    let g = &params[at.g..at.g + d];
    let b = &params[at.b..at.b + d];
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let r = x.row(i);
        let mu = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let xh = (r[j] - mu) * inv;
            xhat.data[i * d + j] = xh;
            y.data[i * d + j] = g[j] * xh + b[j];
        }
    }
    (y, NormTape { xhat, inv_std })
}

fn layer_norm_backward(params: &[f64], at: NormAt, t: &NormTape, dy: &Mat, grads: &mut [f64]) -> Mat {
    let d = dy.cols;
    let dn = d as f64;
    let mut dx = Mat::zeros(dy.rows, d);
    for i in 0..dy.rows {
        let xh = t.xhat.row(i);
        let dyi = dy.row(i);
        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            grads[at.g + j] += dyi[j] * xh[j];
            grads[at.b + j] += dyi[j];
            dxhat[j] = dyi[j] * params[at.g + j];
        }
        let s1: f64 = dxhat.iter().sum();
        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        let inv = t.inv_std[i];
        for j in 0..d {
            dx.data[i * d + j] = inv / dn * (dn * dxhat[j] - s1 - xh[j] * s2);
        }
    }
    dx
}

/// Scaled dot-product attention over `heads` equal slices of the model width.
fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let t = q.rows;
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros(t, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Mat::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            let row = p.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
        }
        for i in 0..t {
            for j in 0..t {
                let pij = p.data[i * t + j];
                let vj = &v.row(j)[cols.clone()];
                let oi = &mut out.data[i * d + h * dh..i * d + (h + 1) * dh];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

fn attention_backward(q: &Mat, k: &Mat, v: &Mat, probs: &[Mat], dout: &Mat, heads: usize) -> (Mat, Mat, Mat) {
    let t = q.rows;
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(t, d);
    let mut dk = Mat::zeros(t, d);
    let mut dv = Mat::zeros(t, d);
    for (h, p) in probs.iter().enumerate() {
        let lo = h * dh;
        let hi = lo + dh;
        for i in 0..t {
            let doi = &dout.row(i)[lo..hi];
            // dP_ij = dO_i . V_j, then the softmax Jacobian.
            let dp: Vec<f64> = (0..t)
                .map(|j| doi.iter().zip(&v.row(j)[lo..hi]).map(|(a, b)| a * b).sum())
                .collect();
            let pi = p.row(i);
            let dot: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..t {
                let pij = pi[j];
                for c in lo..hi {
                    dv.data[j * d + c] += pij * doi[c - lo];
                }
                let ds = pij * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in lo..hi {
                    dq.data[i * d + c] += ds * k.data[j * d + c];
                    dk.data[j * d + c] += ds * q.data[i * d + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x.powi(3));
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}
