//! The point network: a shared dual-branch encoder, local-global
//! cross-attention, and a decoder producing unit-norm per-point embeddings.
//!
//! Encoder: input linear lift to width d, then `n_blocks` pre-norm blocks of
//! windowed multi-head self-attention over consecutive runs of the
//! serialized order, plus a GELU feed-forward, both with residuals. The same
//! encoder parameters process the local and the global branch.
//!
//! Cross-attention: queries from local features, keys/values from global
//! features, full attention (every local row attends over all global rows).
//! The attention logits are unscaled by default; `AttnScaling::InvSqrtD`
//! selects the conventional 1/√(head width) variant.
//!
//! Decoder: the cross-attention output runs through a feed-forward net, is
//! concatenated with the original local features (width 2d), passes
//! `n_blocks` of the same block structure and a linear head to the embedding
//! width C, and is L2-normalized per row. Embeddings exist only for local
//! points; the global branch contributes context through attention alone.
//!
//! Every backward pass here is certified by the finite-difference oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::numcore::{
    concat_cols, gelu_backward, gelu_forward, l2_normalize_rows, l2_normalize_rows_backward,
    layernorm_backward, layernorm_forward, linear_backward, linear_forward, matmul, matmul_nt,
    matmul_tn,
    softmax_in_place, split_cols, LayerNormCache, ParamStore, Tensor,
};
use crate::sampling::LocalGlobalBatch;

/// Attention-logit scaling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttnScaling {
    /// Raw `softmax(QKᵀ)V`.
    #[default]
    None,
    /// Conventional `softmax(QKᵀ/√(d/n_heads))V`.
    InvSqrtD,
}

/// Network hyperparameters. `feature_dim` counts 3 position channels plus
/// the feature schema width.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub attn_scaling: AttnScaling,
    /// Self-attention window over the serialized order.
    pub window: usize,
    /// Ablation switch: when false the cross-attention output is zeroed and
    /// the decoder sees only the local features (plus the FFN bias).
    pub cross_attention: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feature_dim: 6,
            hidden_dim: 64,
            embed_dim: 32,
            n_heads: 4,
            n_blocks: 2,
            attn_scaling: AttnScaling::None,
            window: 64,
            cross_attention: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be ≥ 2".into()));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be ≥ 1".into()));
        }
        if self.feature_dim < 3 {
            return Err(Error::Config("feature_dim must include the 3 position channels".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be ≥ 1".into()));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        match self.attn_scaling {
            AttnScaling::None => 1.0,
            AttnScaling::InvSqrtD => 1.0 / ((self.hidden_dim / self.n_heads) as f64).sqrt(),
        }
    }

    /// Decoder blocks run at the fused width 2d with the same head count.
    fn decoder_scale(&self) -> f64 {
        match self.attn_scaling {
            AttnScaling::None => 1.0,
            AttnScaling::InvSqrtD => 1.0 / ((2 * self.hidden_dim / self.n_heads) as f64).sqrt(),
        }
    }
}

/// Per-point embeddings for the local batch, row-aligned with the local
/// cloud (not the serialized order).
#[derive(Debug, Clone)]
pub struct PointEmbeddings {
    pub values: Tensor,
    pub unit_norm: bool,
}

impl PointEmbeddings {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_parts(shape, data)
}

fn define_linear(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize) -> Result<()> {
    p.define(&format!("{name}.w"), xavier(rng, vec![i, o], i, o))?;
    p.define(&format!("{name}.b"), Tensor::zeros(vec![o]))
}

fn define_block(p: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> Result<()> {
    p.define(&format!("{prefix}.ln1.g"), Tensor::from_parts(vec![d], vec![1.0; d]))?;
    p.define(&format!("{prefix}.ln1.b"), Tensor::zeros(vec![d]))?;
    for proj in ["wq", "wk", "wv", "wo"] {
        p.define(&format!("{prefix}.attn.{proj}"), xavier(rng, vec![d, d], d, d))?;
    }
    // no key bias: a shared key offset shifts every logit of a query row
    // equally, so softmax ignores it and its gradient is identically zero
    for bias in ["bq", "bv", "bo"] {
        p.define(&format!("{prefix}.attn.{bias}"), Tensor::zeros(vec![d]))?;
    }
    p.define(&format!("{prefix}.ln2.g"), Tensor::from_parts(vec![d], vec![1.0; d]))?;
    p.define(&format!("{prefix}.ln2.b"), Tensor::zeros(vec![d]))?;
    define_linear(p, rng, &format!("{prefix}.ffn.l1"), d, 4 * d)?;
    define_linear(p, rng, &format!("{prefix}.ffn.l2"), 4 * d, d)
}

/// Create every learnable parameter: encoder, cross-attention, fusion FFN,
/// decoder, head, and the graph encoder (`graph_layers` message-passing
/// layers at the embedding width).
pub fn init_params(cfg: &EncoderConfig, graph_layers: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.hidden_dim;
    let mut p = ParamStore::new();
    define_linear(&mut p, &mut rng, "enc.lift", cfg.feature_dim, d)?;
    for b in 0..cfg.n_blocks {
        define_block(&mut p, &mut rng, &format!("enc.b{b}"), d)?;
    }
    for proj in ["wq", "wk", "wv", "wo"] {
        p.define(&format!("xattn.{proj}"), xavier(&mut rng, vec![d, d], d, d))?;
    }
    for bias in ["bq", "bv", "bo"] {
        p.define(&format!("xattn.{bias}"), Tensor::zeros(vec![d]))?;
    }
    define_linear(&mut p, &mut rng, "xffn.l1", d, 4 * d)?;
    define_linear(&mut p, &mut rng, "xffn.l2", 4 * d, d)?;
    for b in 0..cfg.n_blocks {
        define_block(&mut p, &mut rng, &format!("dec.b{b}"), 2 * d)?;
    }
    define_linear(&mut p, &mut rng, "dec.head", 2 * d, cfg.embed_dim)?;
    crate::hierarchy::init_graph_params(&mut p, cfg.embed_dim, graph_layers, &mut rng)?;
    Ok(p)
}

fn linear_p(params: &ParamStore, x: &Tensor, name: &str) -> Result<Tensor> {
    linear_forward(x, params.get(&format!("{name}.w"))?, params.get(&format!("{name}.b"))?)
}

fn linear_p_backward(params: &mut ParamStore, x: &Tensor, name: &str, dy: &Tensor) -> Result<Tensor> {
    let w = params.get(&format!("{name}.w"))?.clone();
    let (dx, dw, db) = linear_backward(x, &w, dy)?;
    params.add_grad(&format!("{name}.w"), &dw)?;
    params.add_grad(&format!("{name}.b"), &db)?;
    Ok(dx)
}

fn window_ranges(n: usize, window: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut s = 0;
    while s < n {
        let e = (s + window).min(n);
        out.push((s, e));
        s = e;
    }
    out
}

/// Copy the head-h column block of rows `[s, e)` into a contiguous buffer.
fn head_block(m: &Tensor, s: usize, e: usize, head: usize, hd: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((e - s) * hd);
    for r in s..e {
        let row = m.row(r);
        out.extend_from_slice(&row[head * hd..(head + 1) * hd]);
    }
    out
}

fn add_head_block(m: &mut Tensor, s: usize, head: usize, hd: usize, block: &[f64]) {
    let rows = block.len() / hd;
    for r in 0..rows {
        let dst = &mut m.row_mut(s + r)[head * hd..(head + 1) * hd];
        for (o, &v) in dst.iter_mut().zip(&block[r * hd..(r + 1) * hd]) {
            *o += v;
        }
    }
}

/// attention weights for one (window, head): softmax(scale · q kᵀ) rows.
fn window_attention_weights(q: &[f64], k: &[f64], rows: usize, cols: usize, hd: usize, scale: f64) -> Vec<f64> {
    let mut s = vec![0.0f64; rows * cols];
    for i in 0..rows {
        let qi = &q[i * hd..(i + 1) * hd];
        let srow = &mut s[i * cols..(i + 1) * cols];
        for (j, o) in srow.iter_mut().enumerate() {
            let kj = &k[j * hd..(j + 1) * hd];
            let mut acc = 0.0;
            for (a, b) in qi.iter().zip(kj) {
                acc += a * b;
            }
            *o = acc * scale;
        }
        softmax_in_place(srow);
    }
    s
}

#[derive(Debug, Clone)]
struct AttnCache {
    input: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    ctx: Tensor,
}

/// Windowed multi-head self-attention; attention matrices are recomputed in
/// the backward pass from the cached projections.
fn windowed_mhsa(
    params: &ParamStore,
    x: &Tensor,
    prefix: &str,
    n_heads: usize,
    window: usize,
    scale: f64,
) -> Result<(Tensor, AttnCache)> {
    let (n, d) = x.dims2()?;
    let hd = d / n_heads;
    let q = linear_forward(x, params.get(&format!("{prefix}.wq"))?, params.get(&format!("{prefix}.bq"))?)?;
    let k = matmul(x, params.get(&format!("{prefix}.wk"))?)?;
    let v = linear_forward(x, params.get(&format!("{prefix}.wv"))?, params.get(&format!("{prefix}.bv"))?)?;
    let ranges = window_ranges(n, window);
    let blocks: Vec<Vec<f64>> = exec::map_indexed(ranges.len(), window * d, |wi| {
        let (s, e) = ranges[wi];
        let rows = e - s;
        let mut ctx_block = vec![0.0f64; rows * d];
        for h in 0..n_heads {
            let qb = head_block(&q, s, e, h, hd);
            let kb = head_block(&k, s, e, h, hd);
            let vb = head_block(&v, s, e, h, hd);
            let a = window_attention_weights(&qb, &kb, rows, rows, hd, scale);
            for i in 0..rows {
                let arow = &a[i * rows..(i + 1) * rows];
                let out = &mut ctx_block[i * d + h * hd..i * d + (h + 1) * hd];
                for (j, &aij) in arow.iter().enumerate() {
                    let vj = &vb[j * hd..(j + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += aij * vv;
                    }
                }
            }
        }
        ctx_block
    });
    let mut ctx = Tensor::zeros(vec![n, d]);
    for (wi, (s, e)) in ranges.iter().enumerate() {
        ctx.data_mut()[s * d..e * d].copy_from_slice(&blocks[wi]);
    }
    let out = linear_forward(&ctx, params.get(&format!("{prefix}.wo"))?, params.get(&format!("{prefix}.bo"))?)?;
    Ok((
        out,
        AttnCache {
            input: x.clone(),
            q,
            k,
            v,
            ctx,
        },
    ))
}

fn windowed_mhsa_backward(
    params: &mut ParamStore,
    cache: &AttnCache,
    prefix: &str,
    n_heads: usize,
    window: usize,
    scale: f64,
    dout: &Tensor,
) -> Result<Tensor> {
    let (n, d) = cache.input.dims2()?;
    let hd = d / n_heads;
    // through the output projection
    let wo = params.get(&format!("{prefix}.wo"))?.clone();
    let (dctx, dwo, dbo) = linear_backward(&cache.ctx, &wo, dout)?;
    params.add_grad(&format!("{prefix}.wo"), &dwo)?;
    params.add_grad(&format!("{prefix}.bo"), &dbo)?;

    let ranges = window_ranges(n, window);
    struct WindowGrads {
        dq: Vec<f64>,
        dk: Vec<f64>,
        dv: Vec<f64>,
    }
    let grads: Vec<WindowGrads> = exec::map_indexed(ranges.len(), window * d, |wi| {
        let (s, e) = ranges[wi];
        let rows = e - s;
        let mut dq = vec![0.0f64; rows * d];
        let mut dk = vec![0.0f64; rows * d];
        let mut dv = vec![0.0f64; rows * d];
        for h in 0..n_heads {
            let qb = head_block(&cache.q, s, e, h, hd);
            let kb = head_block(&cache.k, s, e, h, hd);
            let vb = head_block(&cache.v, s, e, h, hd);
            let a = window_attention_weights(&qb, &kb, rows, rows, hd, scale);
            // dctx block for this head
            let mut dctx_b = vec![0.0f64; rows * hd];
            for r in 0..rows {
                dctx_b[r * hd..(r + 1) * hd]
                    .copy_from_slice(&dctx.row(s + r)[h * hd..(h + 1) * hd]);
            }
            // dA = dctx_b · vᵀ ; dV = Aᵀ · dctx_b
            let mut da = vec![0.0f64; rows * rows];
            let mut dvb = vec![0.0f64; rows * hd];
            for i in 0..rows {
                for j in 0..rows {
                    let mut acc = 0.0;
                    for c in 0..hd {
                        acc += dctx_b[i * hd + c] * vb[j * hd + c];
                    }
                    da[i * rows + j] = acc;
                }
            }
            for j in 0..rows {
                for i in 0..rows {
                    let aij = a[i * rows + j];
                    for c in 0..hd {
                        dvb[j * hd + c] += aij * dctx_b[i * hd + c];
                    }
                }
            }
            // dS = A ⊙ (dA − rowsum(dA⊙A)), then · scale
            let mut ds = vec![0.0f64; rows * rows];
            for i in 0..rows {
                let arow = &a[i * rows..(i + 1) * rows];
                let darow = &da[i * rows..(i + 1) * rows];
                let dot: f64 = arow.iter().zip(darow).map(|(x, y)| x * y).sum();
                for j in 0..rows {
                    ds[i * rows + j] = arow[j] * (darow[j] - dot) * scale;
                }
            }
            // dq = dS·k ; dk = dSᵀ·q
            let mut dqb = vec![0.0f64; rows * hd];
            let mut dkb = vec![0.0f64; rows * hd];
            for i in 0..rows {
                for j in 0..rows {
                    let dsij = ds[i * rows + j];
                    for c in 0..hd {
                        dqb[i * hd + c] += dsij * kb[j * hd + c];
                        dkb[j * hd + c] += dsij * qb[i * hd + c];
                    }
                }
            }
            for r in 0..rows {
                dq[r * d + h * hd..r * d + (h + 1) * hd].copy_from_slice(&dqb[r * hd..(r + 1) * hd]);
                dk[r * d + h * hd..r * d + (h + 1) * hd].copy_from_slice(&dkb[r * hd..(r + 1) * hd]);
                dv[r * d + h * hd..r * d + (h + 1) * hd].copy_from_slice(&dvb[r * hd..(r + 1) * hd]);
            }
        }
        WindowGrads { dq, dk, dv }
    });
    let mut dq = Tensor::zeros(vec![n, d]);
    let mut dk = Tensor::zeros(vec![n, d]);
    let mut dv = Tensor::zeros(vec![n, d]);
    for (wi, (s, e)) in ranges.iter().enumerate() {
        dq.data_mut()[s * d..e * d].copy_from_slice(&grads[wi].dq);
        dk.data_mut()[s * d..e * d].copy_from_slice(&grads[wi].dk);
        dv.data_mut()[s * d..e * d].copy_from_slice(&grads[wi].dv);
    }
    // through the q/k/v projections, accumulating into dx
    let mut dx = linear_p_backward_named(params, &cache.input, prefix, "wq", "bq", &dq)?;
    dx.add_assign(&matmul_p_backward_named(params, &cache.input, prefix, "wk", &dk)?)?;
    dx.add_assign(&linear_p_backward_named(params, &cache.input, prefix, "wv", "bv", &dv)?)?;
    Ok(dx)
}

fn linear_p_backward_named(
    params: &mut ParamStore,
    x: &Tensor,
    prefix: &str,
    w: &str,
    b: &str,
    dy: &Tensor,
) -> Result<Tensor> {
    let wt = params.get(&format!("{prefix}.{w}"))?.clone();
    let (dx, dw, db) = linear_backward(x, &wt, dy)?;
    params.add_grad(&format!("{prefix}.{w}"), &dw)?;
    params.add_grad(&format!("{prefix}.{b}"), &db)?;
    Ok(dx)
}

/// Backward of a bias-free projection `y = x·w`.
fn matmul_p_backward_named(
    params: &mut ParamStore,
    x: &Tensor,
    prefix: &str,
    w: &str,
    dy: &Tensor,
) -> Result<Tensor> {
    let wt = params.get(&format!("{prefix}.{w}"))?.clone();
    let dx = matmul_nt(dy, &wt)?;
    let dw = matmul_tn(x, dy)?;
    params.add_grad(&format!("{prefix}.{w}"), &dw)?;
    Ok(dx)
}

#[derive(Debug, Clone)]
struct MlpCache {
    input: Tensor,
    z1: Tensor,
    a1: Tensor,
}

fn mlp_forward(params: &ParamStore, x: &Tensor, prefix: &str) -> Result<(Tensor, MlpCache)> {
    let z1 = linear_p(params, x, &format!("{prefix}.l1"))?;
    let a1 = gelu_forward(&z1);
    let out = linear_p(params, &a1, &format!("{prefix}.l2"))?;
    Ok((
        out,
        MlpCache {
            input: x.clone(),
            z1,
            a1,
        },
    ))
}

fn mlp_backward(params: &mut ParamStore, cache: &MlpCache, prefix: &str, dout: &Tensor) -> Result<Tensor> {
    let da1 = linear_p_backward(params, &cache.a1, &format!("{prefix}.l2"), dout)?;
    let dz1 = gelu_backward(&cache.z1, &da1)?;
    linear_p_backward(params, &cache.input, &format!("{prefix}.l1"), &dz1)
}

#[derive(Debug, Clone)]
struct BlockCache {
    h_in: Tensor,
    ln1: LayerNormCache,
    attn: AttnCache,
    h_mid: Tensor,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

fn block_forward(
    params: &ParamStore,
    h: &Tensor,
    prefix: &str,
    n_heads: usize,
    window: usize,
    scale: f64,
) -> Result<(Tensor, BlockCache)> {
    let g1 = params.get(&format!("{prefix}.ln1.g"))?;
    let b1 = params.get(&format!("{prefix}.ln1.b"))?;
    let (t1, ln1) = layernorm_forward(h, g1, b1)?;
    let (attn_out, attn) = windowed_mhsa(params, &t1, &format!("{prefix}.attn"), n_heads, window, scale)?;
    let mut h_mid = h.clone();
    h_mid.add_assign(&attn_out)?;
    let g2 = params.get(&format!("{prefix}.ln2.g"))?;
    let b2 = params.get(&format!("{prefix}.ln2.b"))?;
    let (t2, ln2) = layernorm_forward(&h_mid, g2, b2)?;
    let (ffn_out, mlp) = mlp_forward(params, &t2, &format!("{prefix}.ffn"))?;
    let mut h_out = h_mid.clone();
    h_out.add_assign(&ffn_out)?;
    Ok((
        h_out,
        BlockCache {
            h_in: h.clone(),
            ln1,
            attn,
            h_mid,
            ln2,
            mlp,
        },
    ))
}

fn block_backward(
    params: &mut ParamStore,
    cache: &BlockCache,
    prefix: &str,
    n_heads: usize,
    window: usize,
    scale: f64,
    dout: &Tensor,
) -> Result<Tensor> {
    // h_out = h_mid + ffn(ln2(h_mid))
    let dffn = mlp_backward(params, &cache.mlp, &format!("{prefix}.ffn"), dout)?;
    let g2 = params.get(&format!("{prefix}.ln2.g"))?.clone();
    let (dh_mid_ln, dg2, db2) = layernorm_backward(&cache.h_mid, &g2, &cache.ln2, &dffn)?;
    params.add_grad(&format!("{prefix}.ln2.g"), &dg2)?;
    params.add_grad(&format!("{prefix}.ln2.b"), &db2)?;
    let mut dh_mid = dout.clone();
    dh_mid.add_assign(&dh_mid_ln)?;
    // h_mid = h_in + attn(ln1(h_in))
    let dattn = windowed_mhsa_backward(
        params,
        &cache.attn,
        &format!("{prefix}.attn"),
        n_heads,
        window,
        scale,
        &dh_mid,
    )?;
    let g1 = params.get(&format!("{prefix}.ln1.g"))?.clone();
    let (dh_in_ln, dg1, db1) = layernorm_backward(&cache.h_in, &g1, &cache.ln1, &dattn)?;
    params.add_grad(&format!("{prefix}.ln1.g"), &dg1)?;
    params.add_grad(&format!("{prefix}.ln1.b"), &db1)?;
    let mut dh_in = dh_mid;
    dh_in.add_assign(&dh_in_ln)?;
    Ok(dh_in)
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    lift_in: Tensor,
    blocks: Vec<BlockCache>,
}

/// Shared encoder producing per-point d-wide features. `x` rows must
/// already be in serialized order; windows are consecutive runs of that
/// order.
pub fn encode(x: &Tensor, params: &ParamStore, cfg: &EncoderConfig) -> Result<(Tensor, EncodeCache)> {
    cfg.validate()?;
    let (_, f) = x.dims2()?;
    if f != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "encode input width {f} vs feature_dim {}",
            cfg.feature_dim
        )));
    }
    let mut h = linear_p(params, x, "enc.lift")?;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let (next, cache) = block_forward(
            params,
            &h,
            &format!("enc.b{b}"),
            cfg.n_heads,
            cfg.window,
            cfg.scale(),
        )?;
        blocks.push(cache);
        h = next;
    }
    h.ensure_finite("encoder output")?;
    Ok((
        h,
        EncodeCache {
            lift_in: x.clone(),
            blocks,
        },
    ))
}

pub fn encode_backward(
    cache: &EncodeCache,
    params: &mut ParamStore,
    cfg: &EncoderConfig,
    dout: &Tensor,
) -> Result<()> {
    let mut d = dout.clone();
    for b in (0..cfg.n_blocks).rev() {
        d = block_backward(
            params,
            &cache.blocks[b],
            &format!("enc.b{b}"),
            cfg.n_heads,
            cfg.window,
            cfg.scale(),
            &d,
        )?;
    }
    linear_p_backward(params, &cache.lift_in, "enc.lift", &d)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CrossAttnCache {
    f_loc: Tensor,
    f_glo: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    ctx: Tensor,
}

/// Full cross-attention: every local row attends over all global rows.
pub fn cross_attention(
    f_loc: &Tensor,
    f_glo: &Tensor,
    params: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<(Tensor, CrossAttnCache)> {
    let (m_l, d) = f_loc.dims2()?;
    let (m_g, dg) = f_glo.dims2()?;
    if d != cfg.hidden_dim || dg != cfg.hidden_dim {
        return Err(Error::Shape(format!(
            "cross_attention widths {d}/{dg} vs hidden_dim {}",
            cfg.hidden_dim
        )));
    }
    if m_g == 0 {
        return Err(Error::EmptyInput("cross_attention with an empty global set".into()));
    }
    let hd = d / cfg.n_heads;
    let scale = cfg.scale();
    let q = linear_forward(f_loc, params.get("xattn.wq")?, params.get("xattn.bq")?)?;
    let k = matmul(f_glo, params.get("xattn.wk")?)?;
    let v = linear_forward(f_glo, params.get("xattn.wv")?, params.get("xattn.bv")?)?;
    let mut ctx = Tensor::zeros(vec![m_l, d]);
    for h in 0..cfg.n_heads {
        let qb = head_block(&q, 0, m_l, h, hd);
        let kb = head_block(&k, 0, m_g, h, hd);
        let vb = head_block(&v, 0, m_g, h, hd);
        // rows of the context block are independent; parallelize over queries
        let ctx_rows: Vec<Vec<f64>> = exec::map_indexed(m_l, m_g * hd, |i| {
            let qi = &qb[i * hd..(i + 1) * hd];
            let mut logits = vec![0.0f64; m_g];
            for (j, o) in logits.iter_mut().enumerate() {
                let kj = &kb[j * hd..(j + 1) * hd];
                let mut acc = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    acc += a * b;
                }
                *o = acc * scale;
            }
            softmax_in_place(&mut logits);
            let mut out = vec![0.0f64; hd];
            for (j, &aij) in logits.iter().enumerate() {
                let vj = &vb[j * hd..(j + 1) * hd];
                for (o, &vv) in out.iter_mut().zip(vj) {
                    *o += aij * vv;
                }
            }
            out
        });
        for (i, row) in ctx_rows.iter().enumerate() {
            add_head_block(&mut ctx, i, h, hd, row);
        }
    }
    let out = linear_forward(&ctx, params.get("xattn.wo")?, params.get("xattn.bo")?)?;
    out.ensure_finite("cross-attention output")?;
    Ok((
        out,
        CrossAttnCache {
            f_loc: f_loc.clone(),
            f_glo: f_glo.clone(),
            q,
            k,
            v,
            ctx,
        },
    ))
}

/// Backward of [`cross_attention`]; returns `(dF_loc, dF_glo)`.
pub fn cross_attention_backward(
    cache: &CrossAttnCache,
    params: &mut ParamStore,
    cfg: &EncoderConfig,
    dout: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (m_l, d) = cache.f_loc.dims2()?;
    let (m_g, _) = cache.f_glo.dims2()?;
    let hd = d / cfg.n_heads;
    let scale = cfg.scale();
    let wo = params.get("xattn.wo")?.clone();
    let (dctx, dwo, dbo) = linear_backward(&cache.ctx, &wo, dout)?;
    params.add_grad("xattn.wo", &dwo)?;
    params.add_grad("xattn.bo", &dbo)?;

    let mut dq = Tensor::zeros(vec![m_l, d]);
    let mut dk = Tensor::zeros(vec![m_g, d]);
    let mut dv = Tensor::zeros(vec![m_g, d]);
    for h in 0..cfg.n_heads {
        let qb = head_block(&cache.q, 0, m_l, h, hd);
        let kb = head_block(&cache.k, 0, m_g, h, hd);
        let vb = head_block(&cache.v, 0, m_g, h, hd);
        // recompute attention row-by-row; accumulate dq rows in parallel and
        // reduce dk/dv over query rows in a fixed ascending order per element.
        let per_query: Vec<(Vec<f64>, Vec<f64>)> = exec::map_indexed(m_l, m_g * hd, |i| {
            let qi = &qb[i * hd..(i + 1) * hd];
            let mut a = vec![0.0f64; m_g];
            for (j, o) in a.iter_mut().enumerate() {
                let kj = &kb[j * hd..(j + 1) * hd];
                let mut acc = 0.0;
                for (x, y) in qi.iter().zip(kj) {
                    acc += x * y;
                }
                *o = acc * scale;
            }
            softmax_in_place(&mut a);
            let dctx_i: Vec<f64> = dctx.row(i)[h * hd..(h + 1) * hd].to_vec();
            // dA_j = dctx_i · v_j ; dS = softmax backward ; dq_i = Σ_j dS_j k_j
            let mut da = vec![0.0f64; m_g];
            for (j, o) in da.iter_mut().enumerate() {
                let vj = &vb[j * hd..(j + 1) * hd];
                let mut acc = 0.0;
                for (x, y) in dctx_i.iter().zip(vj) {
                    acc += x * y;
                }
                *o = acc;
            }
            let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            let ds: Vec<f64> = a.iter().zip(&da).map(|(&av, &dav)| av * (dav - dot) * scale).collect();
            let mut dqi = vec![0.0f64; hd];
            for (j, &dsj) in ds.iter().enumerate() {
                let kj = &kb[j * hd..(j + 1) * hd];
                for (o, &kv) in dqi.iter_mut().zip(kj) {
                    *o += dsj * kv;
                }
            }
            // return dS row and a copy of softmax row is not needed; dk/dv
            // accumulation needs ds and a
            (dqi, ds.iter().zip(&a).flat_map(|(&x, &y)| [x, y]).collect())
        });
        for (i, (dqi, _)) in per_query.iter().enumerate() {
            add_head_block(&mut dq, i, h, hd, dqi);
        }
        // dk_j = Σ_i dS_ij q_i ; dv_j = Σ_i A_ij dctx_i — accumulate i ascending
        let mut dkb = vec![0.0f64; m_g * hd];
        let mut dvb = vec![0.0f64; m_g * hd];
        for (i, (_, ds_a)) in per_query.iter().enumerate() {
            let qi = &qb[i * hd..(i + 1) * hd];
            let dctx_i = &dctx.row(i)[h * hd..(h + 1) * hd];
            for j in 0..m_g {
                let dsij = ds_a[2 * j];
                let aij = ds_a[2 * j + 1];
                let dst_k = &mut dkb[j * hd..(j + 1) * hd];
                for (o, &qv) in dst_k.iter_mut().zip(qi) {
                    *o += dsij * qv;
                }
                let dst_v = &mut dvb[j * hd..(j + 1) * hd];
                for (o, &cv) in dst_v.iter_mut().zip(dctx_i) {
                    *o += aij * cv;
                }
            }
        }
        for j in 0..m_g {
            add_head_block(&mut dk, j, h, hd, &dkb[j * hd..(j + 1) * hd]);
            add_head_block(&mut dv, j, h, hd, &dvb[j * hd..(j + 1) * hd]);
        }
    }

    let d_loc = linear_p_backward_named(params, &cache.f_loc, "xattn", "wq", "bq", &dq)?;
    let mut d_glo = matmul_p_backward_named(params, &cache.f_glo, "xattn", "wk", &dk)?;
    d_glo.add_assign(&linear_p_backward_named(params, &cache.f_glo, "xattn", "wv", "bv", &dv)?)?;
    Ok((d_loc, d_glo))
}

#[derive(Debug, Clone)]
pub struct FuseDecodeCache {
    f_loc: Tensor,
    xffn: MlpCache,
    fused: Tensor,
    blocks: Vec<BlockCache>,
    head_in: Tensor,
    norms: Vec<f64>,
    normalized: Tensor,
}

/// Decoder: `E_p = f_pd(concat(F_loc, FFN(F_attn)))`, rows L2-normalized.
pub fn fuse_decode(
    f_loc: &Tensor,
    f_attn: &Tensor,
    params: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<(PointEmbeddings, FuseDecodeCache)> {
    let (m_l, _) = f_loc.dims2()?;
    let (m_a, _) = f_attn.dims2()?;
    if m_l != m_a {
        return Err(Error::Shape(format!("fuse_decode rows {m_l} vs {m_a}")));
    }
    let (ffn_out, xffn) = mlp_forward(params, f_attn, "xffn")?;
    let fused = concat_cols(f_loc, &ffn_out)?;
    let mut h = fused.clone();
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let (next, cache) = block_forward(
            params,
            &h,
            &format!("dec.b{b}"),
            cfg.n_heads,
            cfg.window,
            cfg.decoder_scale(),
        )?;
        blocks.push(cache);
        h = next;
    }
    let head_in = h;
    let raw = linear_p(params, &head_in, "dec.head")?;
    let (normalized, norms) = l2_normalize_rows(&raw)?;
    normalized.ensure_finite("point embeddings")?;
    Ok((
        PointEmbeddings {
            values: normalized.clone(),
            unit_norm: true,
        },
        FuseDecodeCache {
            f_loc: f_loc.clone(),
            xffn,
            fused,
            blocks,
            head_in,
            norms,
            normalized,
        },
    ))
}

/// Backward of [`fuse_decode`]; returns `(dF_loc, dF_attn)`.
pub fn fuse_decode_backward(
    cache: &FuseDecodeCache,
    params: &mut ParamStore,
    cfg: &EncoderConfig,
    d_embeddings: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let draw = l2_normalize_rows_backward(&cache.normalized, &cache.norms, d_embeddings)?;
    let mut d = linear_p_backward(params, &cache.head_in, "dec.head", &draw)?;
    for b in (0..cfg.n_blocks).rev() {
        d = block_backward(
            params,
            &cache.blocks[b],
            &format!("dec.b{b}"),
            cfg.n_heads,
            cfg.window,
            cfg.decoder_scale(),
            &d,
        )?;
    }
    let dcols = cache.f_loc.dims2()?.1;
    let (d_loc, d_ffn_out) = split_cols(&d, dcols)?;
    let d_attn = mlp_backward(params, &cache.xffn, "xffn", &d_ffn_out)?;
    Ok((d_loc, d_attn))
}

impl FuseDecodeCache {
    /// The concatenated decoder input (M_l × 2d).
    pub fn fused(&self) -> &Tensor {
        &self.fused
    }
}

impl ForwardCache {
    pub fn fused(&self) -> &Tensor {
        self.fuse.fused()
    }
}

/// Everything [`backward`] needs, captured by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    cfg: EncoderConfig,
    local_order: Vec<u32>,
    enc_local: EncodeCache,
    enc_global: EncodeCache,
    xattn: Option<CrossAttnCache>,
    fuse: FuseDecodeCache,
}

/// Build a branch input matrix in serialized order: centered/scaled
/// positions followed by the feature channels.
pub fn branch_input(
    cloud: &crate::pcio::PointCloud,
    order: &[u32],
    center: [f64; 3],
    inv_scale: f64,
) -> Tensor {
    let f = cloud.feature_count();
    let mut data = Vec::with_capacity(order.len() * (3 + f));
    for &idx in order {
        let p = cloud.positions()[idx as usize];
        for a in 0..3 {
            data.push((p[a] as f64 - center[a]) * inv_scale);
        }
        for &v in cloud.feature_row(idx as usize) {
            data.push(v as f64);
        }
    }
    Tensor::from_parts(vec![order.len(), 3 + f], data)
}

/// Full forward pass over a local/global batch. The returned embeddings are
/// row-aligned with `batch.local` (the serialization permutation is applied
/// internally and undone on output).
pub fn forward(
    batch: &LocalGlobalBatch,
    params: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<(PointEmbeddings, ForwardCache)> {
    cfg.validate()?;
    if batch.local.is_empty() {
        return Err(Error::EmptyInput("forward on an empty local batch".into()));
    }
    if batch.global.is_empty() {
        return Err(Error::EmptyInput("forward on an empty global batch".into()));
    }
    let center = batch.local.centroid();
    let mut max_dev = 0.0f64;
    for p in batch.global.positions().iter().chain(batch.local.positions()) {
        for a in 0..3 {
            max_dev = max_dev.max((p[a] as f64 - center[a]).abs());
        }
    }
    let inv_scale = 1.0 / max_dev.max(1e-6);

    let x_loc = branch_input(&batch.local, &batch.local_order, center, inv_scale);
    let x_glo = branch_input(&batch.global, &batch.global_order, center, inv_scale);
    let (f_loc, enc_local) = encode(&x_loc, params, cfg)?;
    let (f_glo, enc_global) = encode(&x_glo, params, cfg)?;

    let (f_attn, xattn) = if cfg.cross_attention {
        let (t, c) = cross_attention(&f_loc, &f_glo, params, cfg)?;
        (t, Some(c))
    } else {
        (Tensor::zeros(vec![f_loc.dims2()?.0, cfg.hidden_dim]), None)
    };

    let (emb_serialized, fuse) = fuse_decode(&f_loc, &f_attn, params, cfg)?;

    // undo the serialization permutation
    let c = cfg.embed_dim;
    let n = batch.local.len();
    let mut values = vec![0.0f64; n * c];
    for (rank, &src) in batch.local_order.iter().enumerate() {
        values[src as usize * c..(src as usize + 1) * c]
            .copy_from_slice(emb_serialized.values.row(rank));
    }
    Ok((
        PointEmbeddings {
            values: Tensor::from_parts(vec![n, c], values),
            unit_norm: true,
        },
        ForwardCache {
            cfg: cfg.clone(),
            local_order: batch.local_order.clone(),
            enc_local,
            enc_global,
            xattn,
            fuse,
        },
    ))
}

/// Backward of [`forward`]: accumulates all parameter gradients for the
/// cotangent `d_embeddings` (row-aligned with the local cloud).
pub fn backward(cache: &ForwardCache, params: &mut ParamStore, d_embeddings: &Tensor) -> Result<()> {
    let cfg = &cache.cfg;
    let (n, c) = d_embeddings.dims2()?;
    if n != cache.local_order.len() {
        return Err(Error::Shape(format!(
            "backward rows {n} vs local batch {}",
            cache.local_order.len()
        )));
    }
    // apply the serialization permutation to the cotangent
    let mut serialized = vec![0.0f64; n * c];
    for (rank, &src) in cache.local_order.iter().enumerate() {
        serialized[rank * c..(rank + 1) * c].copy_from_slice(d_embeddings.row(src as usize));
    }
    let d_serialized = Tensor::from_parts(vec![n, c], serialized);

    let (mut d_floc, d_fattn) = fuse_decode_backward(&cache.fuse, params, cfg, &d_serialized)?;
    if let Some(xc) = &cache.xattn {
        let (d_floc2, d_fglo) = cross_attention_backward(xc, params, cfg, &d_fattn)?;
        d_floc.add_assign(&d_floc2)?;
        encode_backward(&cache.enc_global, params, cfg, &d_fglo)?;
    }
    encode_backward(&cache.enc_local, params, cfg, &d_floc)?;
    Ok(())
}

/// Parameter names for the point network (everything except the graph
/// encoder), in sorted order.
pub fn network_param_names(params: &ParamStore) -> Vec<String> {
    params
        .names()
        .filter(|n| !n.starts_with("graph."))
        .map(str::to_string)
        .collect()
}
