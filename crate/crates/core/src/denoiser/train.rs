//! Hand-derived backprop for [`ToyVdm`] and a small Adam trainer on the
//! moving-square clips.
//!
//! The trainer keeps an `f64` copy of every parameter and runs its own
//! `f64` forward pass with the same architecture as the inference path.

use std::collections::HashMap;

use rayon::prelude::*;

use super::data::MovingSquare;
use super::{timestep_features, Condition, ModelConfig, ToyVdm, LN_EPS};
use crate::attention::{latent_to_tokens, AttentionMode, VideoDims};
use crate::error::{Error, Result};
use crate::numcore::{gaussian, SeededRng, Tensor};
use crate::sampler::NoiseSchedule;

/// One denoising example: predict `eps` from `(x_t, t, cond)`.
#[derive(Clone, Debug)]
pub struct Example {
    pub x_t: Tensor,
    pub t: usize,
    pub cond: Condition,
    pub eps: Tensor,
}

/// Draws a clip, a timestep and a noise sample, and forms
/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`. The prompt is dropped to `φ` with
/// probability `dropout`.
pub fn draw_example(
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    dropout: f64,
) -> Result<Example> {
    let clip = MovingSquare::random(rng, cfg.height, cfg.width);
    let x0 = clip.latent(cfg);
    let t = 1 + rng.below(sched.train_steps());
    let eps = gaussian(rng, cfg.latent_dims());
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t = x0.zip_map(&eps, |x, e| (a * x as f64 + b * e as f64) as f32)?;
    let cond = if rng.uniform() < dropout {
        Condition::null(cfg.channels)
    } else {
        super::embed_prompt(&clip.prompt(), cfg.channels)
    };
    Ok(Example { x_t, t, cond, eps })
}

#[derive(Clone, Debug)]
struct AttnIdx {
    mode: AttentionMode,
    norm_g: usize,
    norm_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    attns: Vec<AttnIdx>,
    mlp_g: usize,
    mlp_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    time_proj: usize,
    cond_proj: usize,
    blocks: Vec<BlockIdx>,
    fin_g: usize,
    fin_b: usize,
    fin_proj: usize,
    fin_bias: usize,
}

impl Layout {
    fn new(model: &ToyVdm, names: &[String]) -> Self {
        let pos: HashMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let at = |n: &str| {
            *pos.get(n)
                .unwrap_or_else(|| panic!("parameter {n} missing"))
        };
        let blocks = model
            .blocks
            .iter()
            .enumerate()
            .map(|(b, block)| BlockIdx {
                attns: block
                    .attns
                    .iter()
                    .map(|a| {
                        let p = format!("block{b}.attn_{}", a.mode);
                        AttnIdx {
                            mode: a.mode,
                            norm_g: at(&format!("{p}.norm.gamma")),
                            norm_b: at(&format!("{p}.norm.beta")),
                            wq: at(&format!("{p}.w_q")),
                            wk: at(&format!("{p}.w_k")),
                            wv: at(&format!("{p}.w_v")),
                            wo: at(&format!("{p}.w_out")),
                        }
                    })
                    .collect(),
                mlp_g: at(&format!("block{b}.mlp.norm.gamma")),
                mlp_b: at(&format!("block{b}.mlp.norm.beta")),
                w1: at(&format!("block{b}.mlp.w1")),
                b1: at(&format!("block{b}.mlp.b1")),
                w2: at(&format!("block{b}.mlp.w2")),
                b2: at(&format!("block{b}.mlp.b2")),
            })
            .collect();
        Self {
            time_proj: at("time_proj"),
            cond_proj: at("cond_proj"),
            blocks,
            fin_g: at("final.norm.gamma"),
            fin_b: at("final.norm.beta"),
            fin_proj: at("final.proj"),
            fin_bias: at("final.bias"),
        }
    }
}

/// `a[n×k] · b[k×m]`
fn mm(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · g` for `a[n×k]`, `g[n×m]`, accumulated into `out[k×m]`.
fn mm_tn_acc(a: &[f64], n: usize, k: usize, g: &[f64], m: usize, out: &mut [f64]) {
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &gv) in out[p * m..(p + 1) * m]
                .iter_mut()
                .zip(&g[i * m..(i + 1) * m])
            {
                *o += av * gv;
            }
        }
    }
}

/// `g · bᵀ` for `g[n×m]`, `b[k×m]`, giving `[n×k]`.
fn mm_nt(g: &[f64], n: usize, m: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for p in 0..k {
            out[i * k + p] = g[i * m..(i + 1) * m]
                .iter()
                .zip(&b[p * m..(p + 1) * m])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

fn add_row_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
    }
}

fn col_sum_acc(g: &[f64], m: usize, out: &mut [f64]) {
    for row in g.chunks(m) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn ln_fwd(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let n = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n];
    let mut y = vec![0.0; x.len()];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS as f64).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn ln_bwd(
    dy: &[f64],
    c: &LnCache,
    d: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    for i in 0..n {
        let (dyr, xh) = (&dy[i * d..(i + 1) * d], &c.xhat[i * d..(i + 1) * d]);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[i * d + j] = c.inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

struct AttnCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    mixed: Vec<f64>,
    /// Per `(block, head)`, row-major `N × N`.
    maps: Vec<Vec<f64>>,
}

struct MlpCache {
    x: Vec<f64>,
    z: Vec<f64>,
    a: Vec<f64>,
}

struct BlockCache {
    attns: Vec<(LnCache, AttnCache)>,
    mlp_ln: LnCache,
    mlp: MlpCache,
}

struct Tape {
    tf: Vec<f64>,
    ce: Vec<f64>,
    blocks: Vec<BlockCache>,
    fin_ln: LnCache,
    fin_y: Vec<f64>,
    eps_hat: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Trainable parameters as `f64`, in [`ToyVdm::named_parameters`] order.
#[derive(Clone, Debug)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Vec<f64>>,
    layout: Layout,
    config: ModelConfig,
}

impl Params {
    pub fn from_model(model: &ToyVdm) -> Self {
        let named = model.named_parameters();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let values = named
            .iter()
            .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
            .collect();
        let layout = Layout::new(model, &names);
        Self {
            names,
            values,
            layout,
            config: model.config().clone(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    /// Rounds back to `f32` and stores into `model`.
    pub fn write_to(&self, model: &mut ToyVdm) -> Result<()> {
        for ((name, t), vals) in model.named_parameters_mut().into_iter().zip(&self.values) {
            if t.len() != vals.len() {
                return Err(Error::Training(format!("parameter {name} changed size")));
            }
            for (dst, &v) in t.data_mut().iter_mut().zip(vals) {
                *dst = v as f32;
            }
        }
        Ok(())
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    fn attn_fwd(&self, x: &[f64], idx: &AttnIdx, vd: VideoDims) -> (Vec<f64>, AttnCache) {
        let d = self.config.channels;
        let heads = self.config.heads;
        let dh = d / heads;
        let m = x.len() / d;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = mm(x, m, d, self.p(idx.wq), d);
        let k = mm(x, m, d, self.p(idx.wk), d);
        let v = mm(x, m, d, self.p(idx.wv), d);
        let n = vd.block_tokens(idx.mode);
        let mut mixed = vec![0.0; m * d];
        let mut maps = Vec::with_capacity(vd.block_count(idx.mode) * heads);
        for blk in 0..vd.block_count(idx.mode) {
            let rows: Vec<usize> = (0..n).map(|i| vd.token_row(idx.mode, blk, i)).collect();
            for h in 0..heads {
                let off = h * dh;
                let mut a = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &q[rows[i] * d + off..rows[i] * d + off + dh];
                    for j in 0..n {
                        let kj = &k[rows[j] * d + off..rows[j] * d + off + dh];
                        a[i * n + j] = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    let row = &mut a[i * n..(i + 1) * n];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e - mx).exp();
                        s += *e;
                    }
                    row.iter_mut().for_each(|e| *e /= s);
                    for j in 0..n {
                        let w = a[i * n + j];
                        for c in 0..dh {
                            mixed[rows[i] * d + off + c] += w * v[rows[j] * d + off + c];
                        }
                    }
                }
                maps.push(a);
            }
        }
        let out = mm(&mixed, m, d, self.p(idx.wo), d);
        (
            out,
            AttnCache {
                x: x.to_vec(),
                q,
                k,
                v,
                mixed,
                maps,
            },
        )
    }

    fn attn_bwd(
        &self,
        dout: &[f64],
        c: &AttnCache,
        idx: &AttnIdx,
        vd: VideoDims,
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let d = self.config.channels;
        let heads = self.config.heads;
        let dh = d / heads;
        let m = dout.len() / d;
        let scale = 1.0 / (dh as f64).sqrt();
        mm_tn_acc(&c.mixed, m, d, dout, d, &mut grads[idx.wo]);
        let dmixed = mm_nt(dout, m, d, self.p(idx.wo), d);
        let (mut dq, mut dk, mut dv) = (vec![0.0; m * d], vec![0.0; m * d], vec![0.0; m * d]);
        let n = vd.block_tokens(idx.mode);
        for blk in 0..vd.block_count(idx.mode) {
            let rows: Vec<usize> = (0..n).map(|i| vd.token_row(idx.mode, blk, i)).collect();
            for h in 0..heads {
                let off = h * dh;
                let a = &c.maps[blk * heads + h];
                let mut ds = vec![0.0; n * n];
                for i in 0..n {
                    let dmi = &dmixed[rows[i] * d + off..rows[i] * d + off + dh];
                    let mut da = vec![0.0; n];
                    for j in 0..n {
                        let vj = &c.v[rows[j] * d + off..rows[j] * d + off + dh];
                        da[j] = dmi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let w = a[i * n + j];
                        for cc in 0..dh {
                            dv[rows[j] * d + off + cc] += w * dmi[cc];
                        }
                    }
                    let dot: f64 = (0..n).map(|j| a[i * n + j] * da[j]).sum();
                    for j in 0..n {
                        ds[i * n + j] = a[i * n + j] * (da[j] - dot) * scale;
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let g = ds[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for cc in 0..dh {
                            dq[rows[i] * d + off + cc] += g * c.k[rows[j] * d + off + cc];
                            dk[rows[j] * d + off + cc] += g * c.q[rows[i] * d + off + cc];
                        }
                    }
                }
            }
        }
        mm_tn_acc(&c.x, m, d, &dq, d, &mut grads[idx.wq]);
        mm_tn_acc(&c.x, m, d, &dk, d, &mut grads[idx.wk]);
        mm_tn_acc(&c.x, m, d, &dv, d, &mut grads[idx.wv]);
        let mut dx = mm_nt(&dq, m, d, self.p(idx.wq), d);
        add_into(&mut dx, &mm_nt(&dk, m, d, self.p(idx.wk), d));
        add_into(&mut dx, &mm_nt(&dv, m, d, self.p(idx.wv), d));
        dx
    }

    fn mlp_fwd(&self, x: &[f64], b: &BlockIdx) -> (Vec<f64>, MlpCache) {
        let d = self.config.channels;
        let m = x.len() / d;
        let mut z = mm(x, m, d, self.p(b.w1), 4 * d);
        add_row_bias(&mut z, self.p(b.b1));
        let a: Vec<f64> = z.iter().map(|&z| z * sigmoid(z)).collect();
        let mut y = mm(&a, m, 4 * d, self.p(b.w2), d);
        add_row_bias(&mut y, self.p(b.b2));
        (
            y,
            MlpCache {
                x: x.to_vec(),
                z,
                a,
            },
        )
    }

    fn mlp_bwd(&self, dy: &[f64], c: &MlpCache, b: &BlockIdx, grads: &mut [Vec<f64>]) -> Vec<f64> {
        let d = self.config.channels;
        let m = dy.len() / d;
        mm_tn_acc(&c.a, m, 4 * d, dy, d, &mut grads[b.w2]);
        col_sum_acc(dy, d, &mut grads[b.b2]);
        let da = mm_nt(dy, m, d, self.p(b.w2), 4 * d);
        let dz: Vec<f64> = da
            .iter()
            .zip(&c.z)
            .map(|(g, &z)| {
                let s = sigmoid(z);
                g * s * (1.0 + z * (1.0 - s))
            })
            .collect();
        mm_tn_acc(&c.x, m, d, &dz, 4 * d, &mut grads[b.w1]);
        col_sum_acc(&dz, 4 * d, &mut grads[b.b1]);
        mm_nt(&dz, m, 4 * d, self.p(b.w1), d)
    }

    fn forward(&self, ex: &Example) -> Result<Tape> {
        let cfg = &self.config;
        let d = cfg.channels;
        let vd = cfg.video_dims();
        if ex.x_t.dims() != vd.as_array() || ex.eps.dims() != vd.as_array() {
            return Err(Error::Shape(format!(
                "example does not match model {:?}",
                vd.as_array()
            )));
        }
        let tokens = latent_to_tokens(&ex.x_t)?;
        let mut h: Vec<f64> = tokens.data().iter().map(|&v| v as f64).collect();
        let m = h.len() / d;
        let tf = timestep_features(ex.t, d);
        let ce: Vec<f64> = ex
            .cond
            .embedding()
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let mut emb = mm(&tf, 1, d, self.p(self.layout.time_proj), d);
        add_into(&mut emb, &mm(&ce, 1, d, self.p(self.layout.cond_proj), d));
        add_row_bias(&mut h, &emb);

        let enc = cfg.encoder_blocks;
        let dec_start = enc + cfg.bottleneck_blocks;
        let mut skips: Vec<Vec<f64>> = Vec::with_capacity(enc);
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for (b, bi) in self.layout.blocks.iter().enumerate() {
            if b >= dec_start {
                add_into(&mut h, &skips[cfg.skip_source(b - dec_start)]);
            }
            let mut attns = Vec::with_capacity(bi.attns.len());
            for ai in &bi.attns {
                let (n, lc) = ln_fwd(&h, d, self.p(ai.norm_g), self.p(ai.norm_b));
                let (out, ac) = self.attn_fwd(&n, ai, vd);
                add_into(&mut h, &out);
                attns.push((lc, ac));
            }
            let (n, mlp_ln) = ln_fwd(&h, d, self.p(bi.mlp_g), self.p(bi.mlp_b));
            let (out, mlp) = self.mlp_fwd(&n, bi);
            add_into(&mut h, &out);
            if b < enc {
                skips.push(h.clone());
            }
            blocks.push(BlockCache { attns, mlp_ln, mlp });
        }
        let (fin_y, fin_ln) = ln_fwd(&h, d, self.p(self.layout.fin_g), self.p(self.layout.fin_b));
        let mut eps_hat = mm(&fin_y, m, d, self.p(self.layout.fin_proj), d);
        add_row_bias(&mut eps_hat, self.p(self.layout.fin_bias));
        Ok(Tape {
            tf,
            ce,
            blocks,
            fin_ln,
            fin_y,
            eps_hat,
        })
    }

    fn target(ex: &Example) -> Result<Vec<f64>> {
        Ok(latent_to_tokens(&ex.eps)?
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect())
    }

    fn mse(eps_hat: &[f64], target: &[f64]) -> f64 {
        eps_hat
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / target.len() as f64
    }

    /// `mean((ε̂ − ε)²)` in `f64`.
    pub fn loss(&self, ex: &Example) -> Result<f64> {
        let tape = self.forward(ex)?;
        Ok(Self::mse(&tape.eps_hat, &Self::target(ex)?))
    }

    /// Loss and its gradient, one `Vec` per parameter in [`Params::names`]
    /// order.
    pub fn loss_and_grad(&self, ex: &Example) -> Result<(f64, Vec<Vec<f64>>)> {
        let cfg = &self.config;
        let d = cfg.channels;
        let vd = cfg.video_dims();
        let tape = self.forward(ex)?;
        let target = Self::target(ex)?;
        let loss = Self::mse(&tape.eps_hat, &target);
        let count = target.len() as f64;
        let m = target.len() / d;
        let mut grads: Vec<Vec<f64>> = self.values.iter().map(|v| vec![0.0; v.len()]).collect();
        let l = &self.layout;

        let deps: Vec<f64> = tape
            .eps_hat
            .iter()
            .zip(&target)
            .map(|(a, b)| 2.0 * (a - b) / count)
            .collect();
        col_sum_acc(&deps, d, &mut grads[l.fin_bias]);
        mm_tn_acc(&tape.fin_y, m, d, &deps, d, &mut grads[l.fin_proj]);
        let dy = mm_nt(&deps, m, d, self.p(l.fin_proj), d);
        let (mut gg, mut gb) = (vec![0.0; d], vec![0.0; d]);
        let mut dh = ln_bwd(&dy, &tape.fin_ln, d, self.p(l.fin_g), &mut gg, &mut gb);
        add_into(&mut grads[l.fin_g], &gg);
        add_into(&mut grads[l.fin_b], &gb);

        let enc = cfg.encoder_blocks;
        let dec_start = enc + cfg.bottleneck_blocks;
        let mut dskips = vec![vec![0.0; m * d]; enc];
        for b in (0..l.blocks.len()).rev() {
            let (bi, bc) = (&l.blocks[b], &tape.blocks[b]);
            if b < enc {
                add_into(&mut dh, &dskips[b]);
            }
            let dn = self.mlp_bwd(&dh, &bc.mlp, bi, &mut grads);
            let (mut gg, mut gb) = (vec![0.0; d], vec![0.0; d]);
            add_into(
                &mut dh,
                &ln_bwd(&dn, &bc.mlp_ln, d, self.p(bi.mlp_g), &mut gg, &mut gb),
            );
            add_into(&mut grads[bi.mlp_g], &gg);
            add_into(&mut grads[bi.mlp_b], &gb);
            for (ai, (lc, ac)) in bi.attns.iter().zip(&bc.attns).rev() {
                let dn = self.attn_bwd(&dh, ac, ai, vd, &mut grads);
                let (mut gg, mut gb) = (vec![0.0; d], vec![0.0; d]);
                add_into(
                    &mut dh,
                    &ln_bwd(&dn, lc, d, self.p(ai.norm_g), &mut gg, &mut gb),
                );
                add_into(&mut grads[ai.norm_g], &gg);
                add_into(&mut grads[ai.norm_b], &gb);
            }
            if b >= dec_start {
                add_into(&mut dskips[cfg.skip_source(b - dec_start)], &dh);
            }
        }
        let mut demb = vec![0.0; d];
        col_sum_acc(&dh, d, &mut demb);
        mm_tn_acc(&tape.tf, 1, d, &demb, d, &mut grads[l.time_proj]);
        mm_tn_acc(&tape.ce, 1, d, &demb, d, &mut grads[l.cond_proj]);
        Ok((loss, grads))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Fixed examples the reported losses are measured on.
    pub eval_size: usize,
    /// Probability of training a sample on the null prompt.
    pub cond_dropout: f64,
    /// Record the batch loss every this many steps (0 = never).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch: 4,
            seed: 42,
            eval_size: 16,
            cond_dropout: 0.1,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `(step, batch loss)` samples.
    pub history: Vec<(usize, f64)>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn eval_loss(params: &Params, set: &[Example]) -> Result<f64> {
    let losses = set
        .par_iter()
        .map(|ex| params.loss(ex))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Adam on the noise-prediction objective. Losses are reported on a fixed
/// evaluation set drawn before training.
pub fn train_toy(
    model: &mut ToyVdm,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.batch == 0 || !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::Config(
            "train needs batch >= 1 and a finite lr >= 0".into(),
        ));
    }
    let mcfg = model.config().clone();
    let mut eval_rng = SeededRng::substream(cfg.seed, "train.eval");
    let eval_set = (0..cfg.eval_size.max(1))
        .map(|_| draw_example(&mcfg, sched, &mut eval_rng, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let mut params = Params::from_model(model);
    let initial_loss = eval_loss(&params, &eval_set)?;
    if !initial_loss.is_finite() {
        return Err(Error::Training("initial loss is not finite".into()));
    }
    let mut m1: Vec<Vec<f64>> = params.values.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut m2 = m1.clone();
    let mut rng = SeededRng::substream(cfg.seed, "train.batch");
    let mut history = Vec::new();
    for step in 1..=cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| draw_example(&mcfg, sched, &mut rng, cfg.cond_dropout))
            .collect::<Result<Vec<_>>>()?;
        let results = batch
            .par_iter()
            .map(|ex| params.loss_and_grad(ex))
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / cfg.batch as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Vec<f64>> = params.values.iter().map(|v| vec![0.0; v.len()]).collect();
        for (l, g) in &results {
            loss += l * inv;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, v)| *a += v * inv);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss diverged at step {step}")));
        }
        let bc1 = 1.0 - ADAM_B1.powi(step as i32);
        let bc2 = 1.0 - ADAM_B2.powi(step as i32);
        for ((p, g), (a, b)) in params
            .values
            .iter_mut()
            .zip(&grads)
            .zip(m1.iter_mut().zip(m2.iter_mut()))
        {
            for i in 0..p.len() {
                a[i] = ADAM_B1 * a[i] + (1.0 - ADAM_B1) * g[i];
                b[i] = ADAM_B2 * b[i] + (1.0 - ADAM_B2) * g[i] * g[i];
                p[i] -= cfg.lr * (a[i] / bc1) / ((b[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
            history.push((step, loss));
        }
    }
    let final_loss = eval_loss(&params, &eval_set)?;
    if !final_loss.is_finite() {
        return Err(Error::Training("final loss is not finite".into()));
    }
    params.write_to(model)?;
    Ok(TrainReport {
        initial_loss,
        final_loss,
        history,
    })
}
