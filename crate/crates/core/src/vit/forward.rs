//! Forward pass with cached activations and input-gradient backprop.
//!
//! Only gradients with respect to additive inputs (token banks, prompt
//! tokens) are produced; base weights are never differentiated.

use ndarray::{s, Array1, Array2, Axis};

use super::params::{BaseParameters, Block};
use super::tokens::LRTokenBank;
use crate::error::{Error, Result};
use crate::image::Image;

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Array2<f64>, cache: &LnCache, g: &Array1<f64>) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = dh.sum() / d;
        let m2 = dh.dot(&xh) / d;
        let inv = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = inv * (dh[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
}

fn attention(h: &Array2<f64>, blk: &Block, heads: usize) -> (Array2<f64>, AttnCache) {
    let (n, d) = h.dim();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = h.dot(&blk.wq) + &blk.bq;
    let k = h.dot(&blk.wk) + &blk.bk;
    let v = h.dot(&blk.wv) + &blk.bv;
    let mut concat = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for head in 0..heads {
        let cols = s![.., head * hd..(head + 1) * hd];
        let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut p);
        concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let out = concat.dot(&blk.wo) + &blk.bo;
    (out, AttnCache { q, k, v, probs })
}

fn attention_backward(dout: &Array2<f64>, cache: &AttnCache, blk: &Block, heads: usize) -> Array2<f64> {
    let (n, d) = dout.dim();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let dconcat = dout.dot(&blk.wo.t());
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for head in 0..heads {
        let cols = s![.., head * hd..(head + 1) * hd];
        let p = &cache.probs[head];
        let dout_h = dconcat.slice(cols);
        let mut ds = dout_h.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        for i in 0..n {
            let inner = ds.row(i).dot(&p.row(i));
            for j in 0..n {
                ds[[i, j]] = p[[i, j]] * (ds[[i, j]] - inner);
            }
        }
        dq.slice_mut(cols).assign(&(ds.dot(&cache.k.slice(cols)) * scale));
        dk.slice_mut(cols).assign(&(ds.t().dot(&cache.q.slice(cols)) * scale));
    }
    dq.dot(&blk.wq.t()) + dk.dot(&blk.wk.t()) + dv.dot(&blk.wv.t())
}

struct MlpCache {
    pre: Array2<f64>,
}

fn mlp(h: &Array2<f64>, blk: &Block) -> (Array2<f64>, MlpCache) {
    let pre = h.dot(&blk.w1) + &blk.b1;
    let act = pre.mapv(gelu);
    (act.dot(&blk.w2) + &blk.b2, MlpCache { pre })
}

fn mlp_backward(dout: &Array2<f64>, cache: &MlpCache, blk: &Block) -> Array2<f64> {
    let dact = dout.dot(&blk.w2.t());
    let dpre = dact * cache.pre.mapv(gelu_grad);
    dpre.dot(&blk.w1.t())
}

struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    mlp: MlpCache,
}

fn block_forward(x: &Array2<f64>, blk: &Block, heads: usize) -> (Array2<f64>, BlockCache) {
    let (h1, ln1) = layer_norm(x, &blk.ln1_g, &blk.ln1_b);
    let (a, attn) = attention(&h1, blk, heads);
    let y = x + &a;
    let (h2, ln2) = layer_norm(&y, &blk.ln2_g, &blk.ln2_b);
    let (m, mlp_cache) = mlp(&h2, blk);
    (
        y + &m,
        BlockCache {
            ln1,
            attn,
            ln2,
            mlp: mlp_cache,
        },
    )
}

fn block_backward(dz: &Array2<f64>, cache: &BlockCache, blk: &Block, heads: usize) -> Array2<f64> {
    let dh2 = mlp_backward(dz, &cache.mlp, blk);
    let dy = dz + &layer_norm_backward(&dh2, &cache.ln2, &blk.ln2_g);
    let dh1 = attention_backward(&dy, &cache.attn, blk, heads);
    &dy + &layer_norm_backward(&dh1, &cache.ln1, &blk.ln1_g)
}

/// Image to `num_patches × patch_dim`, pixels mapped from [0,1] to [-1,1].
/// Patches are row-major over the grid; each patch is row, column, channel.
pub fn patchify(params: &BaseParameters, img: &Image) -> Result<Array2<f64>> {
    let cfg = &params.config;
    if img.height() != cfg.input_res || img.width() != cfg.input_res {
        return Err(Error::validation(format!(
            "image is {}x{}, model expects {}x{}",
            img.height(),
            img.width(),
            cfg.input_res,
            cfg.input_res
        )));
    }
    let p = cfg.patch_size;
    let grid = cfg.grid();
    let mut out = Array2::zeros((cfg.num_patches(), cfg.patch_dim()));
    for gy in 0..grid {
        for gx in 0..grid {
            let mut row = out.row_mut(gy * grid + gx);
            let mut col = 0;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        row[col] = 2.0 * f64::from(img.get(gy * p + py, gx * p + px, c)) - 1.0;
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Result of one forward pass. Keeps the activations needed by
/// [`Forward::backward`].
pub struct Forward {
    /// Projected, L2-normalized class-token feature.
    pub embedding: Vec<f64>,
    /// `depth + 1` mean-pooled spatial features (embedding output, then each
    /// block output), each L2-normalized.
    pub layer_features: Vec<Vec<f64>>,
    num_patches: usize,
    seq_len: usize,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    raw: Array1<f64>,
    raw_norm: f64,
    active: Vec<bool>,
    has_prompts: bool,
}

/// Gradients with respect to the additive inputs of a forward pass.
#[derive(Debug, Clone)]
pub struct InputGrads {
    /// One entry per bank; `None` for banks that were not applied.
    pub banks: Vec<Option<Array2<f64>>>,
    pub prompts: Option<Array2<f64>>,
}

fn normalized(v: &Array1<f64>) -> Vec<f64> {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn spatial_mean(x: &Array2<f64>, num_patches: usize) -> Vec<f64> {
    let mean = x
        .slice(s![1..=num_patches, ..])
        .mean_axis(Axis(0))
        .expect("at least one patch");
    normalized(&mean)
}

/// Standard forward pass, optionally with token banks applied from `start_block`.
pub fn forward(
    params: &BaseParameters,
    tokens: Option<&LRTokenBank>,
    img: &Image,
    start_block: usize,
) -> Result<Forward> {
    let cfg = &params.config;
    if start_block > cfg.depth {
        return Err(Error::validation(format!(
            "start block {start_block} exceeds depth {}",
            cfg.depth
        )));
    }
    if let Some(t) = tokens {
        if t.len() != cfg.num_banks() || t.bank(0).dim() != (cfg.num_patches(), cfg.dim) {
            return Err(Error::validation("token bank does not match model config"));
        }
    }
    run(params, tokens.map(|t| (t, start_block)), None, img)
}

/// Forward pass with prompt tokens appended after the spatial tokens at the
/// input of the first block.
pub fn vpt_forward(params: &BaseParameters, prompts: &Array2<f64>, img: &Image) -> Result<Forward> {
    if prompts.ncols() != params.config.dim {
        return Err(Error::validation(format!(
            "prompt tokens have width {}, model dim is {}",
            prompts.ncols(),
            params.config.dim
        )));
    }
    run(params, None, Some(prompts), img)
}

fn run(
    params: &BaseParameters,
    tokens: Option<(&LRTokenBank, usize)>,
    prompts: Option<&Array2<f64>>,
    img: &Image,
) -> Result<Forward> {
    let cfg = &params.config;
    let np = cfg.num_patches();
    let active: Vec<bool> = match tokens {
        Some((_, start)) => (0..cfg.num_banks()).map(|b| LRTokenBank::is_active(b, start)).collect(),
        None => vec![false; cfg.num_banks()],
    };
    let add_bank = |x: &mut Array2<f64>, b: usize| {
        if let (Some((t, _)), true) = (tokens, active[b]) {
            let mut spatial = x.slice_mut(s![1..=np, ..]);
            spatial += t.bank(b);
        }
    };

    let patches = patchify(params, img)?;
    let embedded = patches.dot(&params.patch_w) + &params.patch_b;
    let mut x = Array2::zeros((np + 1, cfg.dim));
    x.row_mut(0).assign(&params.cls);
    x.slice_mut(s![1.., ..]).assign(&embedded);
    add_bank(&mut x, 0);
    x += &params.pos;

    let mut layer_features = vec![spatial_mean(&x, np)];
    if let Some(p) = prompts {
        x = ndarray::concatenate(Axis(0), &[x.view(), p.view()]).expect("matching widths");
    }
    let seq_len = x.nrows();
    let mut blocks = Vec::with_capacity(cfg.depth);
    for (i, blk) in params.blocks.iter().enumerate() {
        add_bank(&mut x, i + 1);
        let (out, cache) = block_forward(&x, blk, cfg.heads);
        x = out;
        blocks.push(cache);
        layer_features.push(spatial_mean(&x, np));
    }

    let cls = x.slice(s![0..1, ..]).to_owned();
    let (cls_ln, final_ln) = layer_norm(&cls, &params.norm_g, &params.norm_b);
    let raw = cls_ln.row(0).dot(&params.proj) + &params.proj_b;
    let raw_norm = raw.dot(&raw).sqrt();
    if !raw_norm.is_finite() || raw_norm == 0.0 {
        return Err(Error::validation(format!("degenerate embedding norm {raw_norm}")));
    }
    let embedding = raw.iter().map(|v| v / raw_norm).collect();
    Ok(Forward {
        embedding,
        layer_features,
        num_patches: np,
        seq_len,
        blocks,
        final_ln,
        raw,
        raw_norm,
        active,
        has_prompts: prompts.is_some(),
    })
}

impl Forward {
    /// Projected class-token feature before normalization.
    pub fn raw_output(&self) -> Array1<f64> {
        self.raw.clone()
    }

    /// Tokens seen by every block: class, spatial and any prompt tokens.
    pub fn sequence_len(&self) -> usize {
        self.seq_len
    }

    /// Backpropagates `d_embedding` (gradient with respect to the normalized
    /// embedding) to the additive inputs.
    pub fn backward(&self, params: &BaseParameters, d_embedding: &[f64]) -> InputGrads {
        let np = self.num_patches;
        let e: Vec<f64> = self.raw.iter().map(|v| v / self.raw_norm).collect();
        let proj_dot: f64 = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
        let d_raw: Array1<f64> = d_embedding
            .iter()
            .zip(&e)
            .map(|(g, ei)| (g - ei * proj_dot) / self.raw_norm)
            .collect();
        let d_cls_ln = params.proj.dot(&d_raw).insert_axis(Axis(0));
        let d_cls = layer_norm_backward(&d_cls_ln, &self.final_ln, &params.norm_g);

        let mut dx = Array2::zeros((self.seq_len, params.config.dim));
        dx.row_mut(0).assign(&d_cls.row(0));
        let mut banks: Vec<Option<Array2<f64>>> = vec![None; self.active.len()];
        for b in (0..params.blocks.len()).rev() {
            dx = block_backward(&dx, &self.blocks[b], &params.blocks[b], params.config.heads);
            if self.active[b + 1] {
                banks[b + 1] = Some(dx.slice(s![1..=np, ..]).to_owned());
            }
        }
        let prompts = self
            .has_prompts
            .then(|| dx.slice(s![np + 1.., ..]).to_owned());
        if self.active[0] {
            banks[0] = Some(dx.slice(s![1..=np, ..]).to_owned());
        }
        InputGrads { banks, prompts }
    }
}
