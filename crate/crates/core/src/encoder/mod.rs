//! Desk-scale ViT-style image encoder with analytic input gradients.
//!
//! Pre-norm transformer over non-overlapping patches: patch embedding with
//! learned positions, then per block layer-norm, single-head self-attention,
//! layer-norm, and a 2-layer GELU MLP, both with residual connections. The
//! output embedding is the mean-pooled token matrix. Math runs in f64;
//! weights are initialized on (and checkpointed to) the f32 grid.

mod layers;

pub mod downstream;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

use layers::{
    gelu, gelu_deriv, layernorm_backward, layernorm_forward, linear_backward, linear_forward,
    softmax_backward, softmax_inplace, LnStats,
};

/// Architecture hyperparameters; all sizes fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub image_side: usize,
    pub channels: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub mlp_hidden: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            image_side: 32,
            channels: 3,
            patch_side: 4,
            embed_dim: 32,
            num_blocks: 2,
            mlp_hidden: 64,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let any_zero = self.image_side == 0
            || self.channels == 0
            || self.patch_side == 0
            || self.embed_dim == 0
            || self.num_blocks == 0
            || self.mlp_hidden == 0;
        if any_zero {
            return Err(Error::parameter("encoder spec fields must be positive".to_string()));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::parameter(format!(
                "patch side {} must divide image side {}",
                self.patch_side, self.image_side
            )));
        }
        Ok(())
    }

    pub fn tokens_per_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens_per_side() * self.tokens_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.channels, self.image_side, self.image_side]
    }
}

/// Pooled token embedding of length `embed_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn l2_distance(&self, other: &Embedding) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Feature-distance losses between an embedding and an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean absolute difference.
    L1,
    /// Euclidean distance.
    L2,
    /// Negated mean absolute difference (penalty term).
    NegL1,
}

/// Loss value and its gradient with respect to the embedding.
pub(crate) fn embedding_loss(
    kind: LossKind,
    emb: &Embedding,
    anchor: &Embedding,
) -> Result<(f64, Vec<f64>)> {
    if emb.values.len() != anchor.values.len() {
        return Err(Error::shape(format!(
            "anchor dimension {} != embedding dimension {}",
            anchor.values.len(),
            emb.values.len()
        )));
    }
    let n = emb.values.len() as f64;
    match kind {
        LossKind::L1 | LossKind::NegL1 => {
            let sign = if kind == LossKind::L1 { 1.0 } else { -1.0 };
            let mut loss = 0.0;
            let mut grad = vec![0.0; emb.values.len()];
            for (g, (e, a)) in grad.iter_mut().zip(emb.values.iter().zip(&anchor.values)) {
                let d = e - a;
                loss += d.abs();
                // Subgradient at 0 defined as 0.
                *g = sign * d.signum() * f64::from(d != 0.0) / n;
            }
            Ok((sign * loss / n, grad))
        }
        LossKind::L2 => {
            let mut sq = 0.0;
            for (e, a) in emb.values.iter().zip(&anchor.values) {
                let d = e - a;
                sq += d * d;
            }
            let norm = sq.sqrt();
            let grad = if norm == 0.0 {
                vec![0.0; emb.values.len()]
            } else {
                emb.values
                    .iter()
                    .zip(&anchor.values)
                    .map(|(e, a)| (e - a) / norm)
                    .collect()
            };
            Ok((norm, grad))
        }
    }
}

/// One transformer block's parameters; linear weights are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub(crate) ln1_gamma: Vec<f64>,
    pub(crate) ln1_beta: Vec<f64>,
    pub(crate) wq: Vec<f64>,
    pub(crate) bq: Vec<f64>,
    pub(crate) wk: Vec<f64>,
    pub(crate) bk: Vec<f64>,
    pub(crate) wv: Vec<f64>,
    pub(crate) bv: Vec<f64>,
    pub(crate) wo: Vec<f64>,
    pub(crate) bo: Vec<f64>,
    pub(crate) ln2_gamma: Vec<f64>,
    pub(crate) ln2_beta: Vec<f64>,
    pub(crate) w1: Vec<f64>,
    pub(crate) b1: Vec<f64>,
    pub(crate) w2: Vec<f64>,
    pub(crate) b2: Vec<f64>,
}

impl BlockWeights {
    fn zeroed(d: usize, f: usize) -> Self {
        BlockWeights {
            ln1_gamma: vec![0.0; d],
            ln1_beta: vec![0.0; d],
            wq: vec![0.0; d * d],
            bq: vec![0.0; d],
            wk: vec![0.0; d * d],
            bk: vec![0.0; d],
            wv: vec![0.0; d * d],
            bv: vec![0.0; d],
            wo: vec![0.0; d * d],
            bo: vec![0.0; d],
            ln2_gamma: vec![0.0; d],
            ln2_beta: vec![0.0; d],
            w1: vec![0.0; f * d],
            b1: vec![0.0; f],
            w2: vec![0.0; d * f],
            b2: vec![0.0; d],
        }
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Full parameter set; doubles as the gradient accumulator shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    spec: EncoderSpec,
    pub(crate) patch_w: Vec<f64>,
    pub(crate) patch_b: Vec<f64>,
    pub(crate) pos: Vec<f64>,
    pub(crate) blocks: Vec<BlockWeights>,
}

/// Rounds through f32 so fresh weights survive checkpointing exactly.
fn q32(v: f64) -> f64 {
    v as f32 as f64
}

impl EncoderWeights {
    /// Seeded initialization on the f32 grid: scaled normal matrices, unit
    /// norm gains, zero biases, small positional table.
    pub fn init(spec: EncoderSpec, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let f = spec.mlp_hidden;
        let p = spec.patch_dim();
        let t = spec.num_tokens();
        let mut normals = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| q32(rng.normal() * scale)).collect()
        };
        let patch_w = normals(d * p, 1.0 / (p as f64).sqrt());
        let patch_b = vec![0.0; d];
        let pos = normals(t * d, 0.02);
        let mut blocks = Vec::with_capacity(spec.num_blocks);
        for _ in 0..spec.num_blocks {
            let attn_scale = 1.0 / (d as f64).sqrt();
            blocks.push(BlockWeights {
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                wq: normals(d * d, attn_scale),
                bq: vec![0.0; d],
                wk: normals(d * d, attn_scale),
                bk: vec![0.0; d],
                wv: normals(d * d, attn_scale),
                bv: vec![0.0; d],
                wo: normals(d * d, attn_scale),
                bo: vec![0.0; d],
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                w1: normals(f * d, attn_scale),
                b1: vec![0.0; f],
                w2: normals(d * f, 1.0 / (f as f64).sqrt()),
                b2: vec![0.0; d],
            });
        }
        Ok(EncoderWeights {
            spec,
            patch_w,
            patch_b,
            pos,
            blocks,
        })
    }

    /// All-zero parameters; used as a gradient accumulator and in tests.
    pub fn zeroed(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        Ok(EncoderWeights {
            spec,
            patch_w: vec![0.0; d * spec.patch_dim()],
            patch_b: vec![0.0; d],
            pos: vec![0.0; spec.num_tokens() * d],
            blocks: (0..spec.num_blocks)
                .map(|_| BlockWeights::zeroed(d, spec.mlp_hidden))
                .collect(),
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Stable parameter ordering shared by checkpoints and training.
    pub(crate) fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.patch_w, &self.patch_b, &self.pos];
        for b in &self.blocks {
            out.extend(b.param_slices());
        }
        out
    }

    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.patch_w, &mut self.patch_b, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.param_slices_mut());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.spec.image_shape().as_slice() {
            return Err(Error::shape(format!(
                "image shape {:?} does not match encoder input {:?}",
                image.shape(),
                self.spec.image_shape()
            )));
        }
        Ok(())
    }

    /// Flattens the image into per-token patch vectors and applies the
    /// patch embedding plus positional table.
    pub(crate) fn embed_patches(&self, image: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let s = &self.spec;
        let (side, ps, ch, d) = (s.image_side, s.patch_side, s.channels, s.embed_dim);
        let grid = s.tokens_per_side();
        let t = s.num_tokens();
        let p = s.patch_dim();
        let img = image.as_slice();
        let mut patches = vec![0.0; t * p];
        for gy in 0..grid {
            for gx in 0..grid {
                let tok = gy * grid + gx;
                let dst = &mut patches[tok * p..(tok + 1) * p];
                for c in 0..ch {
                    for dy in 0..ps {
                        let row = (gy * ps + dy) * side + gx * ps;
                        for dx in 0..ps {
                            dst[c * ps * ps + dy * ps + dx] = img[c * side * side + row + dx];
                        }
                    }
                }
            }
        }
        let mut emb = vec![0.0; t * d];
        for tok in 0..t {
            linear_forward(
                &self.patch_w,
                &self.patch_b,
                &patches[tok * p..(tok + 1) * p],
                &mut emb[tok * d..(tok + 1) * d],
                p,
                d,
            );
        }
        for (e, q) in emb.iter_mut().zip(&self.pos) {
            *e += q;
        }
        (patches, emb)
    }

    /// One block forward; returns the output tokens and the cache needed
    /// for the backward pass.
    pub(crate) fn block_forward(&self, bi: usize, x: &[f64]) -> (Vec<f64>, BlockCache) {
        let s = &self.spec;
        let (t, d, f) = (s.num_tokens(), s.embed_dim, s.mlp_hidden);
        let bw = &self.blocks[bi];
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        let mut y1 = vec![0.0; t * d];
        let mut ln1 = vec![LnStats::default(); t];
        for tok in 0..t {
            ln1[tok] = layernorm_forward(
                &bw.ln1_gamma,
                &bw.ln1_beta,
                &x[tok * d..(tok + 1) * d],
                &mut y1[tok * d..(tok + 1) * d],
            );
        }
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        for tok in 0..t {
            let yt = &y1[tok * d..(tok + 1) * d];
            linear_forward(&bw.wq, &bw.bq, yt, &mut q[tok * d..(tok + 1) * d], d, d);
            linear_forward(&bw.wk, &bw.bk, yt, &mut k[tok * d..(tok + 1) * d], d, d);
            linear_forward(&bw.wv, &bw.bv, yt, &mut v[tok * d..(tok + 1) * d], d, d);
        }
        let mut attn = vec![0.0; t * t];
        for tok in 0..t {
            let qt = &q[tok * d..(tok + 1) * d];
            let row = &mut attn[tok * t..(tok + 1) * t];
            for u in 0..t {
                let ku = &k[u * d..(u + 1) * d];
                let mut dot = 0.0;
                for (a, b) in qt.iter().zip(ku) {
                    dot += a * b;
                }
                row[u] = dot * inv_sqrt_d;
            }
            softmax_inplace(row);
        }
        let mut att_out = vec![0.0; t * d];
        for tok in 0..t {
            let out = &mut att_out[tok * d..(tok + 1) * d];
            let row = &attn[tok * t..(tok + 1) * t];
            for (u, &w) in row.iter().enumerate() {
                let vu = &v[u * d..(u + 1) * d];
                for (o, val) in out.iter_mut().zip(vu) {
                    *o += w * val;
                }
            }
        }
        let mut res1 = vec![0.0; t * d];
        for tok in 0..t {
            let mut proj = vec![0.0; d];
            linear_forward(&bw.wo, &bw.bo, &att_out[tok * d..(tok + 1) * d], &mut proj, d, d);
            for i in 0..d {
                res1[tok * d + i] = x[tok * d + i] + proj[i];
            }
        }
        let mut y2 = vec![0.0; t * d];
        let mut ln2 = vec![LnStats::default(); t];
        for tok in 0..t {
            ln2[tok] = layernorm_forward(
                &bw.ln2_gamma,
                &bw.ln2_beta,
                &res1[tok * d..(tok + 1) * d],
                &mut y2[tok * d..(tok + 1) * d],
            );
        }
        let mut h = vec![0.0; t * f];
        let mut g = vec![0.0; t * f];
        let mut out = vec![0.0; t * d];
        for tok in 0..t {
            linear_forward(
                &bw.w1,
                &bw.b1,
                &y2[tok * d..(tok + 1) * d],
                &mut h[tok * f..(tok + 1) * f],
                d,
                f,
            );
            for i in 0..f {
                g[tok * f + i] = gelu(h[tok * f + i]);
            }
            let mut m = vec![0.0; d];
            linear_forward(&bw.w2, &bw.b2, &g[tok * f..(tok + 1) * f], &mut m, f, d);
            for i in 0..d {
                out[tok * d + i] = res1[tok * d + i] + m[i];
            }
        }
        let cache = BlockCache {
            x_in: x.to_vec(),
            ln1,
            y1,
            q,
            k,
            v,
            attn,
            att_out,
            res1,
            ln2,
            y2,
            h,
            g,
        };
        (out, cache)
    }

    /// One block backward; returns the gradient with respect to the block
    /// input, optionally accumulating parameter gradients.
    pub(crate) fn block_backward(
        &self,
        bi: usize,
        cache: &BlockCache,
        dout: &[f64],
        mut grads: Option<&mut BlockWeights>,
    ) -> Vec<f64> {
        let s = &self.spec;
        let (t, d, f) = (s.num_tokens(), s.embed_dim, s.mlp_hidden);
        let bw = &self.blocks[bi];
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        // out = res1 + W2 gelu(W1 ln2(res1) + b1) + b2
        let mut dres1 = dout.to_vec();
        let mut dy2 = vec![0.0; t * d];
        for tok in 0..t {
            let dout_t = &dout[tok * d..(tok + 1) * d];
            let mut dg = vec![0.0; f];
            let (dw2, db2) = match grads.as_deref_mut() {
                Some(g) => (Some(&mut g.w2[..]), Some(&mut g.b2[..])),
                None => (None, None),
            };
            linear_backward(
                &bw.w2,
                &cache.g[tok * f..(tok + 1) * f],
                dout_t,
                Some(&mut dg),
                dw2,
                db2,
                f,
                d,
            );
            let mut dh = vec![0.0; f];
            for i in 0..f {
                dh[i] = dg[i] * gelu_deriv(cache.h[tok * f + i]);
            }
            let (dw1, db1) = match grads.as_deref_mut() {
                Some(g) => (Some(&mut g.w1[..]), Some(&mut g.b1[..])),
                None => (None, None),
            };
            linear_backward(
                &bw.w1,
                &cache.y2[tok * d..(tok + 1) * d],
                &dh,
                Some(&mut dy2[tok * d..(tok + 1) * d]),
                dw1,
                db1,
                d,
                f,
            );
        }
        for tok in 0..t {
            let (dg2, db2) = match grads.as_deref_mut() {
                Some(g) => (Some(&mut g.ln2_gamma[..]), Some(&mut g.ln2_beta[..])),
                None => (None, None),
            };
            layernorm_backward(
                &bw.ln2_gamma,
                &cache.res1[tok * d..(tok + 1) * d],
                cache.ln2[tok],
                &dy2[tok * d..(tok + 1) * d],
                &mut dres1[tok * d..(tok + 1) * d],
                dg2,
                db2,
            );
        }

        // res1 = x_in + Wo att_out + bo
        let mut dx = dres1.clone();
        let mut datt_out = vec![0.0; t * d];
        for tok in 0..t {
            let (dwo, dbo) = match grads.as_deref_mut() {
                Some(g) => (Some(&mut g.wo[..]), Some(&mut g.bo[..])),
                None => (None, None),
            };
            linear_backward(
                &bw.wo,
                &cache.att_out[tok * d..(tok + 1) * d],
                &dres1[tok * d..(tok + 1) * d],
                Some(&mut datt_out[tok * d..(tok + 1) * d]),
                dwo,
                dbo,
                d,
                d,
            );
        }

        // att_out[t] = sum_u attn[t,u] v[u]; attn = softmax(q k^T / sqrt(d))
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut da = vec![0.0; t];
        let mut ds = vec![0.0; t];
        for tok in 0..t {
            let dat = &datt_out[tok * d..(tok + 1) * d];
            let row = &cache.attn[tok * t..(tok + 1) * t];
            for u in 0..t {
                let vu = &cache.v[u * d..(u + 1) * d];
                let mut dot = 0.0;
                for (a, b) in dat.iter().zip(vu) {
                    dot += a * b;
                }
                da[u] = dot;
                let w = row[u];
                if w != 0.0 {
                    let dvu = &mut dv[u * d..(u + 1) * d];
                    for (dvi, &di) in dvu.iter_mut().zip(dat) {
                        *dvi += w * di;
                    }
                }
            }
            softmax_backward(row, &da, &mut ds);
            let qt = &cache.q[tok * d..(tok + 1) * d];
            for u in 0..t {
                let g = ds[u] * inv_sqrt_d;
                if g == 0.0 {
                    continue;
                }
                let ku = &cache.k[u * d..(u + 1) * d];
                let dqt = &mut dq[tok * d..(tok + 1) * d];
                for i in 0..d {
                    dqt[i] += g * ku[i];
                }
                let dku = &mut dk[u * d..(u + 1) * d];
                for i in 0..d {
                    dku[i] += g * qt[i];
                }
            }
        }

        let mut dy1 = vec![0.0; t * d];
        for tok in 0..t {
            let yt = &cache.y1[tok * d..(tok + 1) * d];
            let dyt = &mut dy1[tok * d..(tok + 1) * d];
            let (dwq, dbq) = match grads.as_deref_mut() {
                Some(g) => (Some(&mut g.wq[..]), Some(&mut g.bq[..])),
                None => (None, None),
            };
            linear_backward(&bw.wq, yt, &dq[tok * d..(tok + 1) * d], Some(dyt), dwq, dbq, d, d);
            let (dwk, dbk) = match grads.as_deref_mut() {
                Some(g) => (Some(&mut g.wk[..]), Some(&mut g.bk[..])),
                None => (None, None),
            };
            linear_backward(&bw.wk, yt, &dk[tok * d..(tok + 1) * d], Some(dyt), dwk, dbk, d, d);
            let (dwv, dbv) = match grads.as_deref_mut() {
                Some(g) => (Some(&mut g.wv[..]), Some(&mut g.bv[..])),
                None => (None, None),
            };
            linear_backward(&bw.wv, yt, &dv[tok * d..(tok + 1) * d], Some(dyt), dwv, dbv, d, d);
        }
        for tok in 0..t {
            let (dg1, db1) = match grads.as_deref_mut() {
                Some(g) => (Some(&mut g.ln1_gamma[..]), Some(&mut g.ln1_beta[..])),
                None => (None, None),
            };
            layernorm_backward(
                &bw.ln1_gamma,
                &cache.x_in[tok * d..(tok + 1) * d],
                cache.ln1[tok],
                &dy1[tok * d..(tok + 1) * d],
                &mut dx[tok * d..(tok + 1) * d],
                dg1,
                db1,
            );
        }
        dx
    }

    /// Backward through the patch embedding; returns the image gradient.
    pub(crate) fn patch_backward(
        &self,
        patches: &[f64],
        demb: &[f64],
        mut grads: Option<&mut EncoderWeights>,
    ) -> Vec<f64> {
        let s = &self.spec;
        let (side, ps, ch, d) = (s.image_side, s.patch_side, s.channels, s.embed_dim);
        let grid = s.tokens_per_side();
        let t = s.num_tokens();
        let p = s.patch_dim();
        if let Some(g) = grads.as_deref_mut() {
            for (dp, de) in g.pos.iter_mut().zip(demb) {
                *dp += de;
            }
        }
        let mut dpatches = vec![0.0; t * p];
        for tok in 0..t {
            let (dw, db) = match grads.as_deref_mut() {
                Some(g) => (Some(&mut g.patch_w[..]), Some(&mut g.patch_b[..])),
                None => (None, None),
            };
            linear_backward(
                &self.patch_w,
                &patches[tok * p..(tok + 1) * p],
                &demb[tok * d..(tok + 1) * d],
                Some(&mut dpatches[tok * p..(tok + 1) * p]),
                dw,
                db,
                p,
                d,
            );
        }
        let mut dimage = vec![0.0; ch * side * side];
        for gy in 0..grid {
            for gx in 0..grid {
                let tok = gy * grid + gx;
                let src = &dpatches[tok * p..(tok + 1) * p];
                for c in 0..ch {
                    for dy in 0..ps {
                        let row = (gy * ps + dy) * side + gx * ps;
                        for dx in 0..ps {
                            dimage[c * side * side + row + dx] = src[c * ps * ps + dy * ps + dx];
                        }
                    }
                }
            }
        }
        dimage
    }

    /// Deterministic embedding of one image.
    pub fn forward(&self, image: &Tensor) -> Result<Embedding> {
        Ok(self.forward_full(image)?.0)
    }

    /// Forward pass keeping every intermediate needed for backward.
    pub(crate) fn forward_full(&self, image: &Tensor) -> Result<(Embedding, ForwardCache)> {
        self.check_image(image)?;
        let s = &self.spec;
        let (t, d) = (s.num_tokens(), s.embed_dim);
        let (patches, emb0) = self.embed_patches(image);
        let mut x = emb0.clone();
        let mut blocks = Vec::with_capacity(s.num_blocks);
        for bi in 0..s.num_blocks {
            let (next, cache) = self.block_forward(bi, &x);
            blocks.push(cache);
            x = next;
        }
        let mut pooled = vec![0.0; d];
        for tok in 0..t {
            for i in 0..d {
                pooled[i] += x[tok * d + i];
            }
        }
        for v in &mut pooled {
            *v /= t as f64;
        }
        if pooled.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("forward produced non-finite embedding"));
        }
        Ok((
            Embedding { values: pooled },
            ForwardCache {
                patches,
                blocks,
                tokens: x,
            },
        ))
    }

    /// Reverse pass from an embedding gradient down to image pixels.
    /// `grads`, when provided, accumulates parameter gradients.
    pub(crate) fn backward_from_embedding(
        &self,
        cache: &ForwardCache,
        demb: &[f64],
        mut grads: Option<&mut EncoderWeights>,
    ) -> Result<Tensor> {
        let s = &self.spec;
        let (t, d) = (s.num_tokens(), s.embed_dim);
        let mut dtokens = vec![0.0; t * d];
        for tok in 0..t {
            for i in 0..d {
                dtokens[tok * d + i] = demb[i] / t as f64;
            }
        }
        self.backward_from_tokens(cache, dtokens, grads.as_deref_mut())
    }

    /// Reverse pass from per-token gradients down to image pixels.
    pub(crate) fn backward_from_tokens(
        &self,
        cache: &ForwardCache,
        mut dtokens: Vec<f64>,
        mut grads: Option<&mut EncoderWeights>,
    ) -> Result<Tensor> {
        for bi in (0..self.spec.num_blocks).rev() {
            let block_grads = grads.as_deref_mut().map(|g| &mut g.blocks[bi]);
            dtokens = self.block_backward(bi, &cache.blocks[bi], &dtokens, block_grads);
            if dtokens.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "backward produced non-finite gradient in block {bi}"
                )));
            }
        }
        let dimage = self.patch_backward(&cache.patches, &dtokens, grads);
        if dimage.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "backward produced non-finite gradient in patch embedding",
            ));
        }
        Tensor::new(self.spec.image_shape(), dimage)
    }

    /// Loss against an anchor embedding and its exact gradient with respect
    /// to the input pixels.
    pub fn loss_and_input_grad(
        &self,
        image: &Tensor,
        anchor: &Embedding,
        kind: LossKind,
    ) -> Result<(f64, Tensor)> {
        let (emb, cache) = self.forward_full(image)?;
        let (loss, demb) = embedding_loss(kind, &emb, anchor)?;
        let grad = self.backward_from_embedding(&cache, &demb, None)?;
        Ok((loss, grad))
    }

    /// Arithmetic mean of the embeddings of a nonempty reference set.
    pub fn mean_reference_embedding(&self, references: &[Tensor]) -> Result<Embedding> {
        if references.is_empty() {
            return Err(Error::parameter("reference set must be nonempty".to_string()));
        }
        let d = self.spec.embed_dim;
        let mut acc = vec![0.0; d];
        for r in references {
            let e = self.forward(r)?;
            for (a, v) in acc.iter_mut().zip(&e.values) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= references.len() as f64;
        }
        Ok(Embedding { values: acc })
    }
}

/// Per-block forward intermediates.
pub(crate) struct BlockCache {
    pub x_in: Vec<f64>,
    pub ln1: Vec<LnStats>,
    pub y1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub attn: Vec<f64>,
    pub att_out: Vec<f64>,
    pub res1: Vec<f64>,
    pub ln2: Vec<LnStats>,
    pub y2: Vec<f64>,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
}

/// Full forward intermediates for one image.
pub(crate) struct ForwardCache {
    pub patches: Vec<f64>,
    pub blocks: Vec<BlockCache>,
    pub tokens: Vec<f64>,
}

/// Settings for the finite-difference gradient audit.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradCheckSettings {
    /// Number of randomly sampled pixels to probe.
    pub pixels: usize,
    /// Central-difference step in pixel units.
    pub step: f64,
    /// Relative-error pass threshold.
    pub tolerance: f64,
    pub loss: LossKind,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            pixels: 20,
            step: 1e-4,
            tolerance: 1e-3,
            loss: LossKind::L1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckCase {
    pub pixel: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares a supplied gradient against central finite differences of the
/// loss at randomly chosen pixels. Split out from [`grad_check`] so a
/// corrupted gradient can be audited as a negative control.
pub fn grad_check_against(
    weights: &EncoderWeights,
    image: &Tensor,
    anchor: &Embedding,
    grad: &Tensor,
    settings: GradCheckSettings,
    rng: &mut RngState,
) -> Result<GradCheckReport> {
    if !(settings.tolerance > 0.0) {
        return Err(Error::parameter(format!(
            "tolerance must be positive, got {}",
            settings.tolerance
        )));
    }
    if settings.pixels == 0 || !(settings.step > 0.0) {
        return Err(Error::parameter("gradcheck needs pixels >= 1 and step > 0".to_string()));
    }
    let len = image.len();
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    let mut cases = Vec::with_capacity(settings.pixels.min(len));
    let mut max_rel: f64 = 0.0;
    for &pixel in order.iter().take(settings.pixels) {
        let mut plus = image.clone();
        plus.as_mut_slice()[pixel] += settings.step;
        let mut minus = image.clone();
        minus.as_mut_slice()[pixel] -= settings.step;
        let (lp, _) = embedding_loss(settings.loss, &weights.forward(&plus)?, anchor)?;
        let (lm, _) = embedding_loss(settings.loss, &weights.forward(&minus)?, anchor)?;
        let numeric = (lp - lm) / (2.0 * settings.step);
        let analytic = grad.as_slice()[pixel];
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel_err);
        cases.push(GradCheckCase {
            pixel,
            analytic,
            numeric,
            rel_err,
            pass: rel_err <= settings.tolerance,
        });
    }
    let passed = cases.iter().all(|c| c.pass);
    Ok(GradCheckReport {
        cases,
        max_rel_err: max_rel,
        passed,
    })
}

/// Audits the analytic input gradient against finite differences.
pub fn grad_check(
    weights: &EncoderWeights,
    image: &Tensor,
    anchor: &Embedding,
    settings: GradCheckSettings,
    rng: &mut RngState,
) -> Result<GradCheckReport> {
    let (_, grad) = weights.loss_and_input_grad(image, anchor, settings.loss)?;
    grad_check_against(weights, image, anchor, &grad, settings, rng)
}
