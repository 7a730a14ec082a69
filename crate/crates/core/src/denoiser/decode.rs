use nalgebra::DMatrix;

use crate::attention::VideoDims;
use crate::error::{shape_err, Result};
use crate::numcore::{gaussian, SeededRng, Tensor};

/// Nearest-neighbour upsampling factor from latent to pixels.
pub const UPSAMPLE: usize = 4;

/// Fixed latent-to-pixel map: a per-pixel linear projection `C → 3`,
/// ×4 nearest-neighbour upsampling, then `tanh` into `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDecoder {
    /// `[C × 3]`
    pub proj: Tensor,
    /// `[3]`
    pub bias: Tensor,
}

impl LatentDecoder {
    pub fn seeded(seed: u64, channels: usize) -> Result<Self> {
        let std = 1.0 / (channels as f32).sqrt();
        let proj = gaussian(
            &mut SeededRng::substream(seed, "decoder.proj"),
            [channels, 3],
        )
        .scale(std)?;
        Ok(Self {
            proj,
            bias: Tensor::zeros([3]),
        })
    }

    /// `[F × C × H × W]` → `[F × 3 × 4H × 4W]`.
    pub fn decode(&self, x0: &Tensor) -> Result<Tensor> {
        let v = VideoDims::from_latent(x0)?;
        let c = v.channels;
        if self.proj.dims() != [c, 3] {
            return shape_err(format!(
                "decoder expects {} channels, latent has {c}",
                self.proj.dims()[0]
            ));
        }
        let (h, w, p) = (v.height, v.width, v.pixels());
        let (oh, ow) = (h * UPSAMPLE, w * UPSAMPLE);
        let src = x0.data();
        let mut out = vec![0.0f32; v.frames * 3 * oh * ow];
        for f in 0..v.frames {
            for k in 0..3 {
                for s in 0..p {
                    let mut acc = self.bias.data()[k];
                    for ch in 0..c {
                        acc += src[(f * c + ch) * p + s] * self.proj.data()[ch * 3 + k];
                    }
                    let val = acc.tanh();
                    let (y, x) = (s / w, s % w);
                    for dy in 0..UPSAMPLE {
                        let row = ((f * 3 + k) * oh + y * UPSAMPLE + dy) * ow + x * UPSAMPLE;
                        out[row..row + UPSAMPLE].fill(val);
                    }
                }
            }
        }
        Tensor::new([v.frames, 3, oh, ow], out)
    }

    /// `max_k Σ_c |proj[c, k]|`: `‖decode(a) − decode(b)‖∞ ≤ L‖a − b‖∞`
    /// because `tanh` is 1-Lipschitz.
    pub fn lipschitz_bound(&self) -> f64 {
        (0..3)
            .map(|k| {
                self.proj
                    .data()
                    .chunks(3)
                    .map(|row| (row[k] as f64).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Least-squares lift of a video back into latent space: average each
    /// 4×4 pixel cell, undo `tanh` (clamped), and take the minimum-norm
    /// solution of the `C → 3` projection through its pseudo-inverse.
    pub fn encode(&self, video: &Tensor) -> Result<Tensor> {
        let (frames, oh, ow) = match *video.dims() {
            [f, 3, oh, ow] if oh % UPSAMPLE == 0 && ow % UPSAMPLE == 0 => (f, oh, ow),
            ref d => return shape_err(format!("video must be F x 3 x 4H x 4W, got {d:?}")),
        };
        let (h, w) = (oh / UPSAMPLE, ow / UPSAMPLE);
        let c = self.proj.dims()[0];
        let p = DMatrix::from_fn(3, c, |k, ch| self.proj.data()[ch * 3 + k] as f64);
        let pinv = p
            .pseudo_inverse(1e-12)
            .map_err(|e| crate::error::Error::Domain(format!("pseudo-inverse failed: {e}")))?;
        let src = video.data();
        let mut out = vec![0.0f32; frames * c * h * w];
        let cell = (UPSAMPLE * UPSAMPLE) as f64;
        for f in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    let mut pre = [0.0f64; 3];
                    for (k, pk) in pre.iter_mut().enumerate() {
                        let mut mean = 0.0f64;
                        for dy in 0..UPSAMPLE {
                            let row = ((f * 3 + k) * oh + y * UPSAMPLE + dy) * ow + x * UPSAMPLE;
                            mean += src[row..row + UPSAMPLE]
                                .iter()
                                .map(|&v| v as f64)
                                .sum::<f64>();
                        }
                        let m = (mean / cell).clamp(-0.999_999, 0.999_999);
                        *pk = m.atanh() - self.bias.data()[k] as f64;
                    }
                    for ch in 0..c {
                        let val: f64 = (0..3).map(|k| pinv[(ch, k)] * pre[k]).sum();
                        out[(f * c + ch) * h * w + y * w + x] = val as f32;
                    }
                }
            }
        }
        Tensor::new([frames, c, h, w], out)
    }
}
