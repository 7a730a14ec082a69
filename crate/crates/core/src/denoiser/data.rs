//! Procedural training and "real" clips: a square translating across the
//! frame with a per-clip velocity, wrapping at the borders.

use crate::denoiser::decode::UPSAMPLE;
use crate::denoiser::ModelConfig;
use crate::error::Result;
use crate::numcore::{gaussian, SeededRng, Tensor};

pub const COLORS: [&str; 3] = ["red", "green", "blue"];

const RGB: [[f32; 3]; 3] = [[0.8, -0.6, -0.6], [-0.6, 0.8, -0.6], [-0.6, -0.6, 0.8]];
const BACKGROUND: f32 = -0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MovingSquare {
    pub x: usize,
    pub y: usize,
    pub vx: isize,
    pub vy: isize,
    /// Index into [`COLORS`].
    pub color: usize,
}

impl MovingSquare {
    pub fn random(rng: &mut SeededRng, height: usize, width: usize) -> Self {
        Self {
            x: rng.below(width),
            y: rng.below(height),
            vx: rng.below(3) as isize - 1,
            vy: rng.below(3) as isize - 1,
            color: rng.below(COLORS.len()),
        }
    }

    pub fn prompt(&self) -> String {
        let horizontal = match self.vx {
            1 => Some("right"),
            -1 => Some("left"),
            _ => None,
        };
        let vertical = match self.vy {
            1 => Some("down"),
            -1 => Some("up"),
            _ => None,
        };
        let motion = match (vertical, horizontal) {
            (None, None) => "standing still".to_string(),
            (Some(v), None) => format!("moving {v}"),
            (None, Some(h)) => format!("moving {h}"),
            (Some(v), Some(h)) => format!("moving {v} {h}"),
        };
        format!("a {} square {motion}", COLORS[self.color])
    }

    fn side(height: usize) -> usize {
        (height / 4).max(1)
    }

    /// Whether cell `(row, col)` of an `h × w` grid is covered in `frame`.
    pub fn covers(&self, frame: usize, row: usize, col: usize, h: usize, w: usize) -> bool {
        let shift = |start: usize, v: isize, n: usize| {
            (start as isize + v * frame as isize).rem_euclid(n as isize) as usize
        };
        let (x0, y0) = (shift(self.x, self.vx, w), shift(self.y, self.vy, h));
        let s = Self::side(h);
        let dx = (col + w - x0) % w;
        let dy = (row + h - y0) % h;
        dx < s && dy < s
    }

    /// `[F × C × H × W]`: the colour's channel signature under the square,
    /// zero elsewhere.
    pub fn latent(&self, cfg: &ModelConfig) -> Tensor {
        let (f, c, h, w) = (cfg.frames, cfg.channels, cfg.height, cfg.width);
        let sig = color_signature(self.color, c);
        Tensor::from_fn([f, c, h, w], |i| {
            let (fr, ch, row, col) = (i / (c * h * w), (i / (h * w)) % c, (i / w) % h, i % w);
            if self.covers(fr, row, col, h, w) {
                sig[ch]
            } else {
                0.0
            }
        })
        .expect("finite")
    }

    /// `[F × 3 × 4H × 4W]` pixels in `[−1, 1]`.
    pub fn video(&self, frames: usize, height: usize, width: usize) -> Tensor {
        let (oh, ow) = (height * UPSAMPLE, width * UPSAMPLE);
        Tensor::from_fn([frames, 3, oh, ow], |i| {
            let (fr, k, py, px) = (
                i / (3 * oh * ow),
                (i / (oh * ow)) % 3,
                (i / ow) % oh,
                i % ow,
            );
            if self.covers(fr, py / UPSAMPLE, px / UPSAMPLE, height, width) {
                RGB[self.color][k]
            } else {
                BACKGROUND
            }
        })
        .expect("finite")
    }
}

fn color_signature(color: usize, channels: usize) -> Vec<f32> {
    let mut rng = SeededRng::substream(0, &format!("square.{}", COLORS[color]));
    gaussian(&mut rng, [channels]).into_data()
}

/// A clip lifted into latent space through the decoder's pseudo-inverse,
/// standing in for an encoded real video.
pub fn real_clip(model: &super::ToyVdm, clip: &MovingSquare) -> Result<Tensor> {
    let cfg = model.config();
    model
        .decoder
        .encode(&clip.video(cfg.frames, cfg.height, cfg.width))
}
