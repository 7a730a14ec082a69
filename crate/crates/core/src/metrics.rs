//! Deterministic video metrics on `[F × 3 × H × W]` pixel tensors in
//! `[−1, 1]`. These are proxies: none of them is a learned perceptual score.

use crate::error::{shape_err, Error, Result};
use crate::numcore::Tensor;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn video_dims(v: &Tensor) -> Result<[usize; 4]> {
    match *v.dims() {
        [f, c, h, w] if f > 0 && c > 0 && h > 0 && w > 0 => Ok([f, c, h, w]),
        ref d => shape_err(format!("video must be F x C x H x W, got {d:?}")),
    }
}

fn frames(v: &Tensor) -> Result<Vec<&[f32]>> {
    let [f, ..] = video_dims(v)?;
    let len = v.len() / f;
    Ok(v.data().chunks(len).collect())
}

fn window_starts(extent: usize) -> Vec<usize> {
    if extent <= SSIM_WINDOW {
        return vec![0];
    }
    (0..=extent - SSIM_WINDOW).step_by(SSIM_STRIDE).collect()
}

/// Single-scale SSIM with an 8×8 uniform window at stride 4, on pixels
/// mapped to `[0, 1]`, averaged over windows, channels and frames.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let [f, c, h, w] = video_dims(a)?;
    if a.dims() != b.dims() {
        return shape_err(format!("ssim of {:?} and {:?}", a.dims(), b.dims()));
    }
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let n = (wh * ww) as f64;
    let unit = |v: f32| (v as f64 + 1.0) * 0.5;
    let (ys, xs) = (window_starts(h), window_starts(w));
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for plane in 0..f * c {
        let base = plane * h * w;
        for &y0 in &ys {
            for &x0 in &xs {
                let px = |d: &[f32], y: usize, x: usize| unit(d[base + (y0 + y) * w + x0 + x]);
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..wh {
                    for x in 0..ww {
                        ma += px(da, y, x);
                        mb += px(db, y, x);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..wh {
                    for x in 0..ww {
                        let (p, q) = (px(da, y, x) - ma, px(db, y, x) - mb);
                        va += p * p;
                        vb += q * q;
                        cov += p * q;
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
                let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return shape_err(format!("mse of {:?} and {:?}", a.dims(), b.dims()));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.len().max(1) as f64)
}

fn rms_of(parts: impl Iterator<Item = f64>, pixels: usize) -> f64 {
    parts.sum::<f64>().sqrt() / (pixels as f64).sqrt()
}

/// Mean over `t` of `‖frame_{t+1} − frame_t‖₂ / √pixels`.
pub fn motion_magnitude(v: &Tensor) -> Result<f64> {
    let fr = frames(v)?;
    if fr.len() < 2 {
        return Err(Error::Domain(
            "motion magnitude needs at least 2 frames".into(),
        ));
    }
    let p = fr[0].len();
    let sum: f64 = fr
        .windows(2)
        .map(|w| {
            rms_of(
                w[0].iter()
                    .zip(w[1])
                    .map(|(&a, &b)| (b as f64 - a as f64).powi(2)),
                p,
            )
        })
        .sum();
    Ok(sum / (fr.len() - 1) as f64)
}

/// `1 / (1 + mean ‖f_{t+1} − 2f_t + f_{t−1}‖₂ / √pixels)`, in `(0, 1]`.
pub fn motion_smoothness(v: &Tensor) -> Result<f64> {
    let fr = frames(v)?;
    if fr.len() < 3 {
        return Err(Error::Domain(
            "motion smoothness needs at least 3 frames".into(),
        ));
    }
    let p = fr[0].len();
    let sum: f64 = fr
        .windows(3)
        .map(|w| {
            rms_of(
                (0..p).map(|i| (w[2][i] as f64 - 2.0 * w[1][i] as f64 + w[0][i] as f64).powi(2)),
                p,
            )
        })
        .sum();
    Ok(1.0 / (1.0 + sum / (fr.len() - 2) as f64))
}

/// Mean cosine similarity of consecutive mean-removed frames. A pair with
/// a zero-variance frame counts as 1.
pub fn subject_consistency(v: &Tensor) -> Result<f64> {
    let fr = frames(v)?;
    if fr.len() < 2 {
        return Err(Error::Domain(
            "subject consistency needs at least 2 frames".into(),
        ));
    }
    let centred: Vec<Vec<f64>> = fr
        .iter()
        .map(|f| {
            let m = f.iter().map(|&x| x as f64).sum::<f64>() / f.len() as f64;
            f.iter().map(|&x| x as f64 - m).collect()
        })
        .collect();
    let sum: f64 = centred
        .windows(2)
        .map(|w| {
            let dot: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| a * b).sum();
            let na = w[0].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb = w[1].iter().map(|a| a * a).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .sum();
    Ok(sum / (fr.len() - 1) as f64)
}

/// Mean over frames and channels of the variance of the 4-neighbour
/// Laplacian `4p − up − down − left − right` on interior pixels.
pub fn sharpness(v: &Tensor) -> Result<f64> {
    let [f, c, h, w] = video_dims(v)?;
    if h < 3 || w < 3 {
        return Err(Error::Domain(
            "sharpness needs frames of at least 3x3".into(),
        ));
    }
    let d = v.data();
    let mut total = 0.0;
    for plane in 0..f * c {
        let at = |y: usize, x: usize| d[plane * h * w + y * w + x] as f64;
        let mut resp = Vec::with_capacity((h - 2) * (w - 2));
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                resp.push(
                    4.0 * at(y, x) - at(y - 1, x) - at(y + 1, x) - at(y, x - 1) - at(y, x + 1),
                );
            }
        }
        let m = resp.iter().sum::<f64>() / resp.len() as f64;
        total += resp.iter().map(|r| (r - m).powi(2)).sum::<f64>() / resp.len() as f64;
    }
    Ok(total / (f * c) as f64)
}

/// One perturbed video measured against its baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub ssim: f64,
    pub mse: f64,
    pub motion_magnitude: f64,
    pub motion_smoothness: f64,
    pub subject_consistency: f64,
    pub sharpness: f64,
    pub baseline_run_id: String,
    pub perturbed_run_id: String,
}

impl MetricRecord {
    /// Similarity metrics against `baseline`, the rest on `perturbed` alone.
    pub fn compare(
        baseline: &Tensor,
        perturbed: &Tensor,
        baseline_run_id: &str,
        perturbed_run_id: &str,
    ) -> Result<Self> {
        Ok(Self {
            ssim: ssim(baseline, perturbed)?,
            mse: mse(baseline, perturbed)?,
            motion_magnitude: motion_magnitude(perturbed)?,
            motion_smoothness: motion_smoothness(perturbed)?,
            subject_consistency: subject_consistency(perturbed)?,
            sharpness: sharpness(perturbed)?,
            baseline_run_id: baseline_run_id.to_string(),
            perturbed_run_id: perturbed_run_id.to_string(),
        })
    }
}
