//! A small temporally-causal transformer that predicts clean latents.
//!
//! Every frame is a block of `L` tokens. A token embeds its `D`-dim latent,
//! adds a learned embedding of its frame's timestep, and passes through
//! residual attention + tanh-MLP blocks. Attention is full within a frame
//! and causal across frames. Gradients are computed by hand-written reverse
//! mode in `f64`.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::latent::{read_f32s, read_preamble, write_preamble, LatentVideo};
use crate::lattice::TimestepComposition;
use crate::par;
use crate::schedule::NoiseSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"ARDIFF-CHKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Width of the MLP hidden layer.
    pub mlp_hidden: usize,
    /// Predictions are clamped to `[-x0_clamp, x0_clamp]`; `0` disables.
    pub x0_clamp: f64,
    /// Largest timestep `T`; the embedding table has `T + 1` rows.
    pub max_timestep: usize,
}

impl DenoiserConfig {
    pub fn new(frames: usize, tokens: usize, dim: usize, max_timestep: usize) -> Self {
        Self {
            frames,
            tokens,
            dim,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            mlp_hidden: 64,
            x0_clamp: 2.0,
            max_timestep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.tokens == 0 || self.dim == 0 {
            return Err(invalid("denoiser latent dimensions must be positive"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.mlp_hidden == 0 {
            return Err(invalid("denoiser widths must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.x0_clamp >= 0.0) {
            return Err(invalid("x0_clamp must be non-negative"));
        }
        Ok(())
    }

    fn seq_len(&self) -> usize {
        self.frames * self.tokens
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![0.0; n],
        }
    }
}

// Offsets of the tensors inside `DenoiserParams::tensors`.
const IN_W: usize = 0;
const IN_B: usize = 1;
const T_EMBED: usize = 2;
const PER_LAYER: usize = 8;
const WQ: usize = 0;
const WK: usize = 1;
const WV: usize = 2;
const WO: usize = 3;
const W1: usize = 4;
const B1: usize = 5;
const W2: usize = 6;
const B2: usize = 7;

fn layer_base(l: usize) -> usize {
    3 + PER_LAYER * l
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub tensors: Vec<Tensor>,
}

impl DenoiserParams {
    /// All-zero parameters with the layout for `config`.
    pub fn zeros(config: &DenoiserConfig) -> Self {
        let (d, dim, h) = (config.d_model, config.dim, config.mlp_hidden);
        let mut tensors = vec![
            Tensor::zeros("in_w".into(), vec![dim, d]),
            Tensor::zeros("in_b".into(), vec![d]),
            Tensor::zeros("t_embed".into(), vec![config.max_timestep + 1, d]),
        ];
        for l in 0..config.n_layers {
            let shapes = [
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("w1", vec![d, h]),
                ("b1", vec![h]),
                ("w2", vec![h, d]),
                ("b2", vec![d]),
            ];
            for (name, shape) in shapes {
                tensors.push(Tensor::zeros(format!("layer{l}.{name}"), shape));
            }
        }
        tensors.push(Tensor::zeros("out_w".into(), vec![d, dim]));
        tensors.push(Tensor::zeros("out_b".into(), vec![dim]));
        Self { tensors }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero, output projection
    /// zero so the untrained model predicts zeros. Timestep embeddings use
    /// `fan_in = d_model`.
    pub fn init<R: Rng + ?Sized>(config: &DenoiserConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let n = p.tensors.len();
        for (i, t) in p.tensors.iter_mut().enumerate() {
            if t.shape.len() < 2 || i >= n - 2 {
                continue;
            }
            let fan_in = if i == T_EMBED { t.shape[1] } else { t.shape[0] };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in &mut t.data {
                *v = dist.sample(rng);
            }
        }
        p
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn iter_scalars(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn iter_scalars_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn norm(&self) -> f64 {
        self.iter_scalars().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_scalars_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        for (a, b) in self.iter_scalars_mut().zip(other.iter_scalars()) {
            *a += factor * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter_scalars().all(|v| v.is_finite())
    }

    fn t(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    fn t_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].data
    }

    fn check_layout(&self, config: &DenoiserConfig) -> Result<()> {
        let expected = Self::zeros(config);
        let ok = expected.tensors.len() == self.tensors.len()
            && expected
                .tensors
                .iter()
                .zip(&self.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && b.data.len() == a.data.len());
        if ok {
            Ok(())
        } else {
            Err(invalid("parameter layout does not match denoiser config"))
        }
    }
}

/// Allowed attention pairs for `F` frames of `L` tokens: key `k` is visible
/// from query `q` iff `frame(k) <= frame(q)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalMask {
    pub size: usize,
    pub allowed: Vec<bool>,
}

impl CausalMask {
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.size + k]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }
}

pub fn causal_mask(frames: usize, tokens: usize) -> CausalMask {
    let n = frames * tokens;
    let allowed = (0..n * n)
        .map(|i| (i % n) / tokens <= (i / n) / tokens)
        .collect();
    CausalMask { size: n, allowed }
}

// Row-major dense helpers. `a` is n x k, `b` is k x m.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

// a^T b with a: n x k, b: n x m -> k x m, accumulated into `out`.
fn matmul_tn_acc(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * m..(p + 1) * m].iter_mut().zip(&b[i * m..(i + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

// a b^T with a: n x m, b: k x m -> n x k
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let ar = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let br = &b[j * m..(j + 1) * m];
            out[i * k + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn sum_rows_acc(x: &[f64], width: usize, out: &mut [f64]) {
    for row in x.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    // per head, n x n softmax weights
    probs: Vec<Vec<f64>>,
    attn: Vec<f64>,
    mid: Vec<f64>,
    act: Vec<f64>,
}

struct ForwardCache {
    x: Vec<f64>,
    token_t: Vec<usize>,
    layers: Vec<LayerCache>,
    last: Vec<f64>,
    raw_out: Vec<f64>,
}

fn forward_cached(
    params: &DenoiserParams,
    cfg: &DenoiserConfig,
    mask: &CausalMask,
    x: &[f64],
    frame_t: &[usize],
) -> (Vec<f64>, ForwardCache) {
    let n = cfg.seq_len();
    let (dim, d, h, hd) = (cfg.dim, cfg.d_model, cfg.mlp_hidden, cfg.head_dim());
    let token_t: Vec<usize> = (0..n).map(|i| frame_t[i / cfg.tokens]).collect();

    let mut hidden = matmul(x, params.t(IN_W), n, dim, d);
    add_row_bias(&mut hidden, params.t(IN_B));
    let embed = params.t(T_EMBED);
    for (i, &t) in token_t.iter().enumerate() {
        for (v, e) in hidden[i * d..(i + 1) * d].iter_mut().zip(&embed[t * d..(t + 1) * d]) {
            *v += e;
        }
    }

    let scale = 1.0 / (hd as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let base = layer_base(l);
        let q = matmul(&hidden, params.t(base + WQ), n, d, d);
        let k = matmul(&hidden, params.t(base + WK), n, d, d);
        let v = matmul(&hidden, params.t(base + WV), n, d, d);
        let mut attn = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let off = head * hd;
            let mut p = vec![0.0; n * n];
            for qi in 0..n {
                let qrow = &q[qi * d + off..qi * d + off + hd];
                let mut max = f64::NEG_INFINITY;
                for ki in 0..n {
                    if !mask.get(qi, ki) {
                        continue;
                    }
                    let krow = &k[ki * d + off..ki * d + off + hd];
                    let s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    p[qi * n + ki] = s;
                    max = max.max(s);
                }
                let mut denom = 0.0;
                for ki in 0..n {
                    if mask.get(qi, ki) {
                        let e = (p[qi * n + ki] - max).exp();
                        p[qi * n + ki] = e;
                        denom += e;
                    }
                }
                for ki in 0..n {
                    if mask.get(qi, ki) {
                        p[qi * n + ki] /= denom;
                        let w = p[qi * n + ki];
                        for j in 0..hd {
                            attn[qi * d + off + j] += w * v[ki * d + off + j];
                        }
                    }
                }
            }
            probs.push(p);
        }
        let proj = matmul(&attn, params.t(base + WO), n, d, d);
        let mid: Vec<f64> = hidden.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let mut pre = matmul(&mid, params.t(base + W1), n, d, h);
        add_row_bias(&mut pre, params.t(base + B1));
        let act: Vec<f64> = pre.iter().map(|u| u.tanh()).collect();
        let mut mlp = matmul(&act, params.t(base + W2), n, h, d);
        add_row_bias(&mut mlp, params.t(base + B2));
        let next: Vec<f64> = mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        layers.push(LayerCache {
            input: std::mem::replace(&mut hidden, next),
            q,
            k,
            v,
            probs,
            attn,
            mid,
            act,
        });
    }

    let mut raw_out = matmul(&hidden, params.t(params.tensors.len() - 2), n, d, dim);
    add_row_bias(&mut raw_out, params.t(params.tensors.len() - 1));
    let out = if cfg.x0_clamp > 0.0 {
        raw_out.iter().map(|v| v.clamp(-cfg.x0_clamp, cfg.x0_clamp)).collect()
    } else {
        raw_out.clone()
    };
    (
        out,
        ForwardCache {
            x: x.to_vec(),
            token_t,
            layers,
            last: hidden,
            raw_out,
        },
    )
}

fn backward(
    params: &DenoiserParams,
    cfg: &DenoiserConfig,
    mask: &CausalMask,
    cache: &ForwardCache,
    d_out: &[f64],
) -> DenoiserParams {
    let n = cfg.seq_len();
    let (dim, d, h, hd) = (cfg.dim, cfg.d_model, cfg.mlp_hidden, cfg.head_dim());
    let mut grads = DenoiserParams::zeros(cfg);
    let out_w = params.tensors.len() - 2;

    let d_raw: Vec<f64> = if cfg.x0_clamp > 0.0 {
        d_out
            .iter()
            .zip(&cache.raw_out)
            .map(|(g, r)| if r.abs() < cfg.x0_clamp { *g } else { 0.0 })
            .collect()
    } else {
        d_out.to_vec()
    };
    matmul_tn_acc(&cache.last, &d_raw, n, d, dim, grads.t_mut(out_w));
    sum_rows_acc(&d_raw, dim, grads.t_mut(out_w + 1));
    let mut dh = matmul_nt(&d_raw, params.t(out_w), n, dim, d);

    let scale = 1.0 / (hd as f64).sqrt();
    for l in (0..cfg.n_layers).rev() {
        let base = layer_base(l);
        let c = &cache.layers[l];
        // MLP branch: next = mid + tanh(mid W1 + b1) W2 + b2
        matmul_tn_acc(&c.act, &dh, n, h, d, grads.t_mut(base + W2));
        sum_rows_acc(&dh, d, grads.t_mut(base + B2));
        let d_act = matmul_nt(&dh, params.t(base + W2), n, d, h);
        let d_pre: Vec<f64> = d_act.iter().zip(&c.act).map(|(g, a)| g * (1.0 - a * a)).collect();
        matmul_tn_acc(&c.mid, &d_pre, n, d, h, grads.t_mut(base + W1));
        sum_rows_acc(&d_pre, h, grads.t_mut(base + B1));
        let d_mid_mlp = matmul_nt(&d_pre, params.t(base + W1), n, h, d);
        let d_mid: Vec<f64> = dh.iter().zip(&d_mid_mlp).map(|(a, b)| a + b).collect();

        // attention branch: mid = input + attn Wo
        matmul_tn_acc(&c.attn, &d_mid, n, d, d, grads.t_mut(base + WO));
        let d_attn = matmul_nt(&d_mid, params.t(base + WO), n, d, d);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        for head in 0..cfg.n_heads {
            let off = head * hd;
            let p = &c.probs[head];
            for qi in 0..n {
                let d_o = &d_attn[qi * d + off..qi * d + off + hd];
                // dP[qi, ki] = d_o . v[ki]; dS = P * (dP - sum_k P dP)
                let mut dp = vec![0.0; n];
                let mut dot = 0.0;
                for ki in 0..n {
                    if !mask.get(qi, ki) {
                        continue;
                    }
                    let vrow = &c.v[ki * d + off..ki * d + off + hd];
                    dp[ki] = d_o.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    dot += p[qi * n + ki] * dp[ki];
                }
                for ki in 0..n {
                    if !mask.get(qi, ki) {
                        continue;
                    }
                    let w = p[qi * n + ki];
                    for j in 0..hd {
                        dv[ki * d + off + j] += w * d_o[j];
                    }
                    let ds = w * (dp[ki] - dot) * scale;
                    for j in 0..hd {
                        dq[qi * d + off + j] += ds * c.k[ki * d + off + j];
                        dk[ki * d + off + j] += ds * c.q[qi * d + off + j];
                    }
                }
            }
        }
        matmul_tn_acc(&c.input, &dq, n, d, d, grads.t_mut(base + WQ));
        matmul_tn_acc(&c.input, &dk, n, d, d, grads.t_mut(base + WK));
        matmul_tn_acc(&c.input, &dv, n, d, d, grads.t_mut(base + WV));
        let from_q = matmul_nt(&dq, params.t(base + WQ), n, d, d);
        let from_k = matmul_nt(&dk, params.t(base + WK), n, d, d);
        let from_v = matmul_nt(&dv, params.t(base + WV), n, d, d);
        dh = (0..n * d)
            .map(|i| d_mid[i] + from_q[i] + from_k[i] + from_v[i])
            .collect();
    }

    matmul_tn_acc(&cache.x, &dh, n, dim, d, grads.t_mut(IN_W));
    sum_rows_acc(&dh, d, grads.t_mut(IN_B));
    let embed = grads.t_mut(T_EMBED);
    for (i, &t) in cache.token_t.iter().enumerate() {
        for (e, g) in embed[t * d..(t + 1) * d].iter_mut().zip(&dh[i * d..(i + 1) * d]) {
            *e += g;
        }
    }
    grads
}

fn check_inputs(
    params: &DenoiserParams,
    config: &DenoiserConfig,
    latent: &LatentVideo,
    composition: &TimestepComposition,
    sched: &NoiseSchedule,
) -> Result<()> {
    config.validate()?;
    params.check_layout(config)?;
    if latent.shape() != (config.frames, config.tokens, config.dim) {
        return Err(invalid(format!(
            "latent shape {:?} does not match config ({}, {}, {})",
            latent.shape(),
            config.frames,
            config.tokens,
            config.dim
        )));
    }
    if composition.frames() != config.frames {
        return Err(Error::ShapeMismatch {
            expected: config.frames,
            actual: composition.frames(),
        });
    }
    if sched.num_steps() != config.max_timestep {
        return Err(invalid(format!(
            "schedule has {} steps but denoiser embeds {}",
            sched.num_steps(),
            config.max_timestep
        )));
    }
    if let Some(&t) = composition.steps().iter().find(|&&t| t > config.max_timestep) {
        return Err(Error::TimestepOutOfRange {
            t,
            lo: 0,
            hi: config.max_timestep,
        });
    }
    Ok(())
}

/// Predicts clean latents for `z_noisy` under per-frame timesteps.
pub fn forward(
    params: &DenoiserParams,
    config: &DenoiserConfig,
    z_noisy: &LatentVideo,
    composition: &TimestepComposition,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    check_inputs(params, config, z_noisy, composition, sched)?;
    let mask = causal_mask(config.frames, config.tokens);
    let (out, _) = forward_cached(params, config, &mask, z_noisy.data(), composition.steps());
    LatentVideo::new(config.frames, config.tokens, config.dim, out)
}

/// One training example: clean latent, its timestep composition and the
/// noise used to corrupt it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub z0: LatentVideo,
    pub composition: TimestepComposition,
    pub eps: LatentVideo,
}

impl Example {
    /// Per-frame corruption of `z0` at the composition's timesteps.
    pub fn corrupted(&self, sched: &NoiseSchedule) -> Result<LatentVideo> {
        let mut data = Vec::with_capacity(self.z0.data().len());
        for f in 0..self.z0.frames() {
            data.extend(sched.corrupt(self.z0.frame(f), self.composition.get(f + 1), self.eps.frame(f))?);
        }
        let (f, l, d) = self.z0.shape();
        LatentVideo::new(f, l, d, data)
    }
}

fn example_loss_grad(
    params: &DenoiserParams,
    config: &DenoiserConfig,
    mask: &CausalMask,
    ex: &Example,
    sched: &NoiseSchedule,
    want_grad: bool,
) -> Result<(f64, Option<DenoiserParams>)> {
    let noisy = ex.corrupted(sched)?;
    check_inputs(params, config, &noisy, &ex.composition, sched)?;
    let (out, cache) = forward_cached(params, config, mask, noisy.data(), ex.composition.steps());
    let count = out.len() as f64;
    let diff: Vec<f64> = out.iter().zip(ex.z0.data()).map(|(y, z)| y - z).collect();
    let loss = diff.iter().map(|r| r * r).sum::<f64>() / count;
    if !want_grad {
        return Ok((loss, None));
    }
    let d_out: Vec<f64> = diff.iter().map(|r| 2.0 * r / count).collect();
    Ok((loss, Some(backward(params, config, mask, &cache, &d_out))))
}

/// Mean x0-prediction loss over the batch (and over frames, tokens, dims).
pub fn loss(
    params: &DenoiserParams,
    config: &DenoiserConfig,
    batch: &[Example],
    sched: &NoiseSchedule,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mask = causal_mask(config.frames, config.tokens);
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let (l, _) = example_loss_grad(params, config, &mask, ex, sched, false)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { index: i });
        }
        total += l;
    }
    Ok(total / batch.len() as f64)
}

/// Loss and its exact gradient. Per-example work may run in parallel;
/// the reduction is always in batch order.
pub fn loss_and_grad(
    params: &DenoiserParams,
    config: &DenoiserConfig,
    batch: &[Example],
    sched: &NoiseSchedule,
) -> Result<(f64, DenoiserParams)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mask = causal_mask(config.frames, config.tokens);
    let parts = par::map_indices(batch.len(), |i| {
        example_loss_grad(params, config, &mask, &batch[i], sched, true)
    });
    reduce_parts(config, parts, batch.len())
}

/// [`loss_and_grad`] on the calling thread only.
pub fn loss_and_grad_seq(
    params: &DenoiserParams,
    config: &DenoiserConfig,
    batch: &[Example],
    sched: &NoiseSchedule,
) -> Result<(f64, DenoiserParams)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mask = causal_mask(config.frames, config.tokens);
    let parts = par::map_indices_seq(batch.len(), |i| {
        example_loss_grad(params, config, &mask, &batch[i], sched, true)
    });
    reduce_parts(config, parts, batch.len())
}

fn reduce_parts(
    config: &DenoiserConfig,
    parts: Vec<Result<(f64, Option<DenoiserParams>)>>,
    batch_len: usize,
) -> Result<(f64, DenoiserParams)> {
    let mut grads = DenoiserParams::zeros(config);
    let mut total = 0.0;
    for (i, part) in parts.into_iter().enumerate() {
        let (l, g) = part?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { index: i });
        }
        total += l;
        grads.add_scaled(&g.expect("gradient requested"), 1.0);
    }
    let inv = 1.0 / batch_len as f64;
    grads.scale(inv);
    Ok((total * inv, grads))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: DenoiserConfig,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

/// Writes config and tensors; values are stored as little-endian `f32`.
pub fn save_checkpoint<W: Write>(
    mut out: W,
    config: &DenoiserConfig,
    params: &DenoiserParams,
) -> Result<()> {
    params.check_layout(config)?;
    let header = CheckpointHeader {
        config: config.clone(),
        tensors: params
            .tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    write_preamble(&mut out, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &serde_json::to_vec(&header)?)?;
    let mut body = Vec::with_capacity(params.num_scalars() * 4);
    for v in params.iter_scalars() {
        body.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&body)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut input: R) -> Result<(DenoiserConfig, DenoiserParams)> {
    let header: CheckpointHeader =
        serde_json::from_slice(&read_preamble(&mut input, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?)?;
    header.config.validate()?;
    let mut params = DenoiserParams::zeros(&header.config);
    if params.tensors.len() != header.tensors.len() {
        return Err(Error::Format("tensor count does not match config".into()));
    }
    for (t, h) in params.tensors.iter_mut().zip(&header.tensors) {
        if t.name != h.name || t.shape != h.shape {
            return Err(Error::Format(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                h.name, h.shape, t.name, t.shape
            )));
        }
        t.data = read_f32s(&mut input, t.data.len())?;
    }
    Ok((header.config, params))
}
