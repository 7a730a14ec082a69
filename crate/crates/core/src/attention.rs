//! Self-attention over token blocks and the replacement matrices that stand
//! in for an attention map.
//!
//! A map is `softmax(Q Kᵀ / √d_head)` per head and mixes the value rows:
//! the layer output is `concat_heads(A_h V_h) · w_out`. Every hook in the
//! crate acts on `A` after the softmax, so the projections are always
//! computed even when the map itself is replaced.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::numcore::{gaussian, SeededRng, Tensor};

/// Row sums of a map must be within this of one.
pub const STOCHASTIC_TOL: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionMode {
    /// Among the `H·W` tokens of one frame.
    Spatial,
    /// Among the `F` frames at one spatial location.
    Temporal,
    /// Among all `F·H·W` tokens.
    Full3d,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Spatial => "spatial",
            Self::Temporal => "temporal",
            Self::Full3d => "full3d",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Self::Spatial),
            "temporal" => Ok(Self::Temporal),
            "full3d" => Ok(Self::Full3d),
            other => Err(Error::Config(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// Projection weights of one attention layer. Rows act on row-vector tokens,
/// so `Q = x · w_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
    heads: usize,
}

impl AttentionWeights {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_out: Tensor, heads: usize) -> Result<Self> {
        let (d, d2) = w_q.shape2()?;
        if d != d2 {
            return shape_err(format!("w_q must be square, got {:?}", w_q.dims()));
        }
        for (name, w) in [("w_k", &w_k), ("w_v", &w_v), ("w_out", &w_out)] {
            if w.dims() != [d, d] {
                return shape_err(format!("{name} is {:?}, expected [{d}, {d}]", w.dims()));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide width {d}"
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_out,
            heads,
        })
    }

    /// Scaled-Gaussian init, std `1/√D`, each matrix from its own sub-stream.
    pub fn seeded(seed: u64, label: &str, dim: usize, heads: usize) -> Result<Self> {
        let std = 1.0 / (dim as f32).sqrt();
        let draw = |name: &str| {
            let mut rng = SeededRng::substream(seed, &format!("{label}.{name}"));
            gaussian(&mut rng, [dim, dim]).scale(std)
        };
        Self::new(
            draw("w_q")?,
            draw("w_k")?,
            draw("w_v")?,
            draw("w_out")?,
            heads,
        )
    }

    pub fn dim(&self) -> usize {
        self.w_q.dims()[0]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_head(&self) -> usize {
        self.dim() / self.heads
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_out", &mut self.w_out),
        ]
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_out", &self.w_out),
        ]
    }
}

/// Row-stochastic attention map(s), `[heads × N × N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    values: Tensor,
    mode: AttentionMode,
}

impl AttentionMap {
    /// Accepts `[N × N]` (single head) or `[heads × N × N]` and checks that
    /// every row is a probability vector.
    pub fn new(values: Tensor, mode: AttentionMode) -> Result<Self> {
        let values = match *values.dims() {
            [r, c] => values.reshape([1, r, c])?,
            [_, _, _] => values,
            ref d => return shape_err(format!("attention map must be 2-D or 3-D, got {d:?}")),
        };
        let d = values.dims();
        if d[1] != d[2] {
            return shape_err(format!("attention map must be square per head, got {d:?}"));
        }
        validate_stochastic(&values)?;
        Ok(Self { values, mode })
    }

    pub(crate) fn from_trusted(values: Tensor, mode: AttentionMode) -> Self {
        debug_assert_eq!(values.rank(), 3);
        Self { values, mode }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mode(&self) -> AttentionMode {
        self.mode
    }

    pub fn heads(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn n_tokens(&self) -> usize {
        self.values.dims()[1]
    }

    /// The `[N × N]` slice of one head, row-major.
    pub fn head(&self, h: usize) -> &[f32] {
        let n = self.n_tokens();
        &self.values.data()[h * n * n..(h + 1) * n * n]
    }

    pub fn head_tensor(&self, h: usize) -> Tensor {
        let n = self.n_tokens();
        Tensor::new([n, n], self.head(h).to_vec()).expect("head slice is square")
    }
}

/// Checks non-negativity and unit row sums (last axis) within
/// [`STOCHASTIC_TOL`].
pub fn validate_stochastic(values: &Tensor) -> Result<()> {
    let n = *values.dims().last().unwrap_or(&0);
    if n == 0 {
        return shape_err("empty attention map");
    }
    for (r, row) in values.data().chunks(n).enumerate() {
        if let Some(v) = row.iter().find(|v| **v < 0.0) {
            return Err(Error::Validation(format!(
                "row {r} has negative weight {v}"
            )));
        }
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL as f64 {
            return Err(Error::Validation(format!("row {r} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// A synthetic map substituted for `A`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Replacement {
    /// `I`: every token keeps its own value row.
    Identity,
    /// `U`: every entry `1/N`; every output row is the mean value row.
    Uniform,
    /// `α·I + (1 − α)·U`, `α ∈ [0, 1]`.
    Blend(f32),
}

impl Replacement {
    pub fn blend(alpha: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Domain(format!("blend alpha {alpha} outside [0, 1]")));
        }
        Ok(Self::Blend(alpha))
    }

    /// Dense `[N × N]` matrix. `Blend(1)` is exactly `I` and `Blend(0)`
    /// exactly `U`.
    pub fn materialize(self, n: usize) -> Result<Tensor> {
        if n == 0 {
            return shape_err("replacement matrix needs N >= 1");
        }
        let u = 1.0 / n as f32;
        let (a, b) = match self {
            Self::Identity => return Ok(Tensor::eye(n)),
            Self::Uniform => return Ok(Tensor::full([n, n], u)),
            Self::Blend(alpha) => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Domain(format!("blend alpha {alpha} outside [0, 1]")));
                }
                (alpha, 1.0 - alpha)
            }
        };
        Tensor::from_fn([n, n], |k| {
            let delta = if k / n == k % n { 1.0 } else { 0.0 };
            a * delta + b * u
        })
    }

    pub fn label(self) -> String {
        match self {
            Self::Identity => "I".into(),
            Self::Uniform => "U".into(),
            Self::Blend(a) => format!("blend{a}"),
        }
    }
}

impl FromStr for Replacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "i" | "identity" => Ok(Self::Identity),
            "U" | "u" | "uniform" => Ok(Self::Uniform),
            other => {
                let a = other
                    .strip_prefix("blend")
                    .and_then(|a| a.trim_start_matches([':', '=']).parse::<f32>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown replacement `{other}`")))?;
                Self::blend(a)
            }
        }
    }
}

/// `map · v` after checking that `map` is row-stochastic.
pub fn apply_map(map_values: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, n2) = map_values.shape2()?;
    if n != n2 {
        return shape_err(format!("map must be square, got {:?}", map_values.dims()));
    }
    validate_stochastic(map_values)?;
    map_values.matmul(v)
}

/// How a layer treats its attention map on one forward pass.
#[derive(Clone, Debug, Default)]
pub enum Treatment<'a> {
    #[default]
    Native,
    Replace(Replacement),
    /// Use this map instead of the layer's own.
    InjectMap(&'a AttentionMap),
    /// Keep the layer's queries; take keys and values from elsewhere.
    InjectKeysValues {
        keys: &'a Tensor,
        values: &'a Tensor,
    },
    /// Keep the layer's map; take values from elsewhere.
    InjectValues(&'a Tensor),
}

/// Everything one attention evaluation produces.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `mixed · w_out`, `[N × D]`.
    pub out: Tensor,
    /// The map that was actually applied (after any replacement).
    pub map: AttentionMap,
    pub keys: Tensor,
    /// The values the map was applied to.
    pub values: Tensor,
    /// `concat_heads(A_h V_h)` before the output projection, `[N × D]`.
    pub mixed: Tensor,
}

fn head_cols(t: &Tensor, h: usize, dh: usize) -> Tensor {
    let (n, d) = t.shape2().expect("2-D");
    if dh == d {
        return t.clone();
    }
    let mut data = Vec::with_capacity(n * dh);
    for row in t.data().chunks(d) {
        data.extend_from_slice(&row[h * dh..(h + 1) * dh]);
    }
    Tensor::new([n, dh], data).expect("finite")
}

/// Plain forward: returns the layer output and its softmax map.
pub fn attention_forward(x: &Tensor, w: &AttentionWeights) -> Result<(Tensor, AttentionMap)> {
    let o = attend(x, w, AttentionMode::Full3d, &Treatment::Native)?;
    Ok((o.out, o.map))
}

/// Attention over one token block with an optional hook treatment.
pub fn attend(
    x: &Tensor,
    w: &AttentionWeights,
    mode: AttentionMode,
    treatment: &Treatment<'_>,
) -> Result<AttentionOutput> {
    let (n, d) = x.shape2()?;
    if d != w.dim() {
        return shape_err(format!("tokens have width {d}, weights expect {}", w.dim()));
    }
    if n == 0 {
        return shape_err("attention over zero tokens");
    }
    let heads = w.heads();
    let dh = w.d_head();
    let scale = 1.0 / (dh as f32).sqrt();

    let q = x.matmul(&w.w_q)?;
    let (keys, values) = match treatment {
        Treatment::InjectKeysValues { keys, values } => {
            if keys.dims() != [n, d] || values.dims() != [n, d] {
                return Err(Error::Injection(format!(
                    "injected keys/values {:?}/{:?} do not match [{n}, {d}]",
                    keys.dims(),
                    values.dims()
                )));
            }
            ((*keys).clone(), (*values).clone())
        }
        _ => (x.matmul(&w.w_k)?, x.matmul(&w.w_v)?),
    };
    let mix_values = match treatment {
        Treatment::InjectValues(v) => {
            if v.dims() != [n, d] {
                return Err(Error::Injection(format!(
                    "injected values {:?} do not match [{n}, {d}]",
                    v.dims()
                )));
            }
            *v
        }
        _ => &values,
    };

    let replacement = match treatment {
        Treatment::Replace(r) => Some(r.materialize(n)?),
        _ => None,
    };
    if let Treatment::InjectMap(m) = treatment {
        if m.n_tokens() != n || m.heads() != heads {
            return Err(Error::Injection(format!(
                "injected map is {}x{}x{}, layer needs {heads}x{n}x{n}",
                m.heads(),
                m.n_tokens(),
                m.n_tokens()
            )));
        }
    }

    let mut map_data = Vec::with_capacity(heads * n * n);
    let mut mixed = vec![0.0f32; n * d];
    for h in 0..heads {
        let qh = head_cols(&q, h, dh);
        let kh = head_cols(&keys, h, dh);
        let vh = head_cols(mix_values, h, dh);
        let a = match (treatment, &replacement) {
            (_, Some(r)) => r.clone(),
            (Treatment::InjectMap(m), _) => m.head_tensor(h),
            _ => qh.matmul_transposed(&kh)?.scale(scale)?.row_softmax()?,
        };
        let oh = a.matmul(&vh)?;
        for (i, row) in oh.data().chunks(dh).enumerate() {
            mixed[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(row);
        }
        map_data.extend_from_slice(a.data());
    }
    let mixed = Tensor::new([n, d], mixed)?;
    let out = mixed.matmul(&w.w_out)?;
    let values = match treatment {
        Treatment::InjectValues(v) => (*v).clone(),
        _ => values,
    };
    let map = AttentionMap::from_trusted(Tensor::new([heads, n, n], map_data)?, mode);
    Ok(AttentionOutput {
        out,
        map,
        keys,
        values,
        mixed,
    })
}

/// Video latent extent, `F × C × H × W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoDims {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl VideoDims {
    pub fn from_latent(latent: &Tensor) -> Result<Self> {
        match *latent.dims() {
            [frames, channels, height, width] => Ok(Self {
                frames,
                channels,
                height,
                width,
            }),
            ref d => shape_err(format!("latent must be F x C x H x W, got {d:?}")),
        }
    }

    pub fn as_array(self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn pixels(self) -> usize {
        self.height * self.width
    }

    pub fn tokens(self) -> usize {
        self.frames * self.pixels()
    }

    /// Token count of one block in `mode`.
    pub fn block_tokens(self, mode: AttentionMode) -> usize {
        match mode {
            AttentionMode::Spatial => self.pixels(),
            AttentionMode::Temporal => self.frames,
            AttentionMode::Full3d => self.tokens(),
        }
    }

    pub fn block_count(self, mode: AttentionMode) -> usize {
        match mode {
            AttentionMode::Spatial => self.frames,
            AttentionMode::Temporal => self.pixels(),
            AttentionMode::Full3d => 1,
        }
    }

    /// Row of the `[F·H·W × C]` token matrix holding `token` of `block`.
    pub(crate) fn token_row(self, mode: AttentionMode, block: usize, token: usize) -> usize {
        match mode {
            AttentionMode::Spatial => block * self.pixels() + token,
            AttentionMode::Temporal => token * self.pixels() + block,
            AttentionMode::Full3d => token,
        }
    }
}

/// `[F × C × H × W]` → `[F·H·W × C]`, rows ordered by `(f, h, w)`.
pub fn latent_to_tokens(latent: &Tensor) -> Result<Tensor> {
    let v = VideoDims::from_latent(latent)?;
    let (c, p) = (v.channels, v.pixels());
    let src = latent.data();
    let mut out = vec![0.0f32; src.len()];
    for f in 0..v.frames {
        for ch in 0..c {
            for s in 0..p {
                out[(f * p + s) * c + ch] = src[(f * c + ch) * p + s];
            }
        }
    }
    Tensor::new([v.tokens(), c], out)
}

pub fn tokens_to_latent(tokens: &Tensor, v: VideoDims) -> Result<Tensor> {
    if tokens.dims() != [v.tokens(), v.channels] {
        return shape_err(format!("tokens {:?} do not match {:?}", tokens.dims(), v));
    }
    let (c, p) = (v.channels, v.pixels());
    let src = tokens.data();
    let mut out = vec![0.0f32; src.len()];
    for f in 0..v.frames {
        for ch in 0..c {
            for s in 0..p {
                out[(f * c + ch) * p + s] = src[(f * p + s) * c + ch];
            }
        }
    }
    Tensor::new(v.as_array(), out)
}

/// Copies the rows of one block out of a token matrix.
pub(crate) fn gather_block(
    tokens: &Tensor,
    v: VideoDims,
    mode: AttentionMode,
    block: usize,
) -> Tensor {
    let c = tokens.dims()[1];
    let n = v.block_tokens(mode);
    let mut data = Vec::with_capacity(n * c);
    for t in 0..n {
        let r = v.token_row(mode, block, t);
        data.extend_from_slice(&tokens.data()[r * c..(r + 1) * c]);
    }
    Tensor::new([n, c], data).expect("gathered rows are finite")
}

/// Writes one block back into a token matrix.
pub(crate) fn scatter_block(
    tokens: &mut Tensor,
    v: VideoDims,
    mode: AttentionMode,
    block: usize,
    rows: &Tensor,
) {
    let c = tokens.dims()[1];
    let n = v.block_tokens(mode);
    let dst = tokens.data_mut();
    for t in 0..n {
        let r = v.token_row(mode, block, t);
        dst[r * c..(r + 1) * c].copy_from_slice(&rows.data()[t * c..(t + 1) * c]);
    }
}

/// Splits a latent into the independent token blocks attention runs over:
/// `F` blocks of `[H·W × C]` (spatial), `H·W` blocks of `[F × C]`
/// (temporal) or one `[F·H·W × C]` block (full 3-D).
pub fn reshape_for_mode(latent: &Tensor, mode: AttentionMode) -> Result<Vec<Tensor>> {
    let v = VideoDims::from_latent(latent)?;
    let tokens = latent_to_tokens(latent)?;
    Ok((0..v.block_count(mode))
        .map(|b| gather_block(&tokens, v, mode, b))
        .collect())
}

/// Inverse of [`reshape_for_mode`].
pub fn inverse_reshape(blocks: &[Tensor], mode: AttentionMode, v: VideoDims) -> Result<Tensor> {
    if blocks.len() != v.block_count(mode) {
        return shape_err(format!(
            "{} blocks given, {mode} layout of {v:?} has {}",
            blocks.len(),
            v.block_count(mode)
        ));
    }
    let mut tokens = Tensor::zeros([v.tokens(), v.channels]);
    for (b, rows) in blocks.iter().enumerate() {
        if rows.dims() != [v.block_tokens(mode), v.channels] {
            return shape_err(format!("block {b} has dims {:?}", rows.dims()));
        }
        scatter_block(&mut tokens, v, mode, b, rows);
    }
    tokens_to_latent(&tokens, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gaussian;

    fn weights(d: usize, heads: usize, seed: u64) -> AttentionWeights {
        AttentionWeights::seeded(seed, "t", d, heads).unwrap()
    }

    /// Explicit-loop attention for a single head.
    fn naive(x: &Tensor, w: &AttentionWeights) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = x.shape2().unwrap();
        let proj = |m: &Tensor| {
            let mut o = vec![0.0f64; n * d];
            for i in 0..n {
                for j in 0..d {
                    for k in 0..d {
                        o[i * d + j] += x.data()[i * d + k] as f64 * m.data()[k * d + j] as f64;
                    }
                }
            }
            o
        };
        let (q, k, v) = (proj(&w.w_q), proj(&w.w_k), proj(&w.w_v));
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..n {
                a[i * n + j] = (logits[j] - m).exp() / z;
            }
        }
        let mut av = vec![0.0f64; n * d];
        for i in 0..n {
            for c in 0..d {
                av[i * d + c] = (0..n).map(|j| a[i * n + j] * v[j * d + c]).sum();
            }
        }
        let mut out = vec![0.0f64; n * d];
        for i in 0..n {
            for c in 0..d {
                out[i * d + c] = (0..d)
                    .map(|k| av[i * d + k] * w.w_out.data()[k * d + c] as f64)
                    .sum();
            }
        }
        (a, out)
    }

    #[test]
    fn single_token_map_is_one() {
        let x = gaussian(&mut SeededRng::new(3), [1, 8]);
        let (_, map) = attention_forward(&x, &weights(8, 1, 1)).unwrap();
        assert_eq!(map.values().data(), &[1.0]);
    }

    #[test]
    fn zero_input_gives_uniform_rows() {
        let x = Tensor::zeros([5, 8]);
        let (_, map) = attention_forward(&x, &weights(8, 2, 1)).unwrap();
        assert!(map.values().data().iter().all(|&v| v == 0.2));
    }

    #[test]
    fn matches_naive_oracle() {
        let x = gaussian(&mut SeededRng::new(11), [4, 6]);
        let w = weights(6, 1, 5);
        let (out, map) = attention_forward(&x, &w).unwrap();
        let (a, o) = naive(&x, &w);
        for (got, want) in map.values().data().iter().zip(&a) {
            assert!((*got as f64 - want).abs() < 1e-5);
        }
        for (got, want) in out.data().iter().zip(&o) {
            assert!((*got as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn materialize_examples() {
        assert_eq!(
            Replacement::Identity.materialize(3).unwrap().data(),
            &[1., 0., 0., 0., 1., 0., 0., 0., 1.]
        );
        assert_eq!(
            Replacement::Uniform.materialize(4).unwrap().data(),
            &[0.25; 16]
        );
        assert_eq!(
            Replacement::Blend(0.5).materialize(2).unwrap().data(),
            &[0.75, 0.25, 0.25, 0.75]
        );
        assert!(matches!(Replacement::blend(1.5), Err(Error::Domain(_))));
        assert!(matches!(
            Replacement::Blend(-0.1).materialize(2),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn blend_endpoints_are_exact() {
        for n in [2, 3, 7, 64] {
            assert!(Replacement::Blend(1.0)
                .materialize(n)
                .unwrap()
                .bit_eq(&Tensor::eye(n)));
            assert!(Replacement::Blend(0.0)
                .materialize(n)
                .unwrap()
                .bit_eq(&Replacement::Uniform.materialize(n).unwrap()));
        }
    }

    #[test]
    fn apply_map_examples() {
        let v = gaussian(&mut SeededRng::new(2), [4, 3]);
        assert!(apply_map(&Tensor::eye(4), &v).unwrap().bit_eq(&v));

        let uv = apply_map(&Replacement::Uniform.materialize(4).unwrap(), &v).unwrap();
        for c in 0..3 {
            let mean: f32 = (0..4).map(|r| v.data()[r * 3 + c]).sum::<f32>() / 4.0;
            for r in 0..4 {
                assert!((uv.data()[r * 3 + c] - mean).abs() < 1e-6);
            }
        }

        let bad = Tensor::full([2, 2], 0.7);
        assert!(matches!(
            apply_map(&bad, &Tensor::zeros([2, 1])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn apply_map_matches_loop_oracle() {
        let mut rng = SeededRng::new(9);
        let raw = gaussian(&mut rng, [4, 4]).row_softmax().unwrap();
        let v = gaussian(&mut rng, [4, 2]);
        let got = apply_map(&raw, &v).unwrap();
        for i in 0..4 {
            for c in 0..2 {
                let want: f64 = (0..4)
                    .map(|j| raw.data()[i * 4 + j] as f64 * v.data()[j * 2 + c] as f64)
                    .sum();
                assert!((got.data()[i * 2 + c] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reshape_block_counts_and_roundtrip() {
        let latent = gaussian(&mut SeededRng::new(4), [2, 1, 2, 2]);
        let s = reshape_for_mode(&latent, AttentionMode::Spatial).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].dims(), &[4, 1]);
        let t = reshape_for_mode(&latent, AttentionMode::Temporal).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[0].dims(), &[2, 1]);
        let v = VideoDims::from_latent(&latent).unwrap();
        for (mode, blocks) in [(AttentionMode::Spatial, s), (AttentionMode::Temporal, t)] {
            assert!(inverse_reshape(&blocks, mode, v).unwrap().bit_eq(&latent));
        }
        let f = reshape_for_mode(&latent, AttentionMode::Full3d).unwrap();
        assert_eq!(f[0].dims(), &[8, 1]);
        assert!(inverse_reshape(&f, AttentionMode::Full3d, v)
            .unwrap()
            .bit_eq(&latent));
    }

    #[test]
    fn temporal_block_is_one_location_across_frames() {
        // latent[f, 0, h, w] = 10 f + (2 h + w)
        let latent = Tensor::from_fn([3, 1, 2, 2], |i| (10 * (i / 4) + i % 4) as f32).unwrap();
        let t = reshape_for_mode(&latent, AttentionMode::Temporal).unwrap();
        assert_eq!(t[1].data(), &[1.0, 11.0, 21.0]);
    }

    #[test]
    fn inject_map_shape_mismatch_is_injection_error() {
        let x = gaussian(&mut SeededRng::new(1), [3, 4]);
        let m = AttentionMap::new(Tensor::eye(2), AttentionMode::Spatial).unwrap();
        let err = attend(
            &x,
            &weights(4, 1, 1),
            AttentionMode::Spatial,
            &Treatment::InjectMap(&m),
        );
        assert!(matches!(err, Err(Error::Injection(_))));
    }

    #[test]
    fn identity_replacement_bypasses_attention() {
        let x = gaussian(&mut SeededRng::new(8), [5, 4]);
        let w = weights(4, 2, 3);
        let o = attend(
            &x,
            &w,
            AttentionMode::Spatial,
            &Treatment::Replace(Replacement::Identity),
        )
        .unwrap();
        let bypass = x.matmul(&w.w_v).unwrap().matmul(&w.w_out).unwrap();
        assert!(o.out.max_abs_diff(&bypass).unwrap() < 1e-6);
    }
}
