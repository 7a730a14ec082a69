use crate::error::{Error, Result};

/// Linear-β noise schedule and the DDIM timestep subsequence.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    train_steps: usize,
    betas: Vec<f64>,
    /// `alpha_bars[t] = Π_{s=1..t} (1 − β_s)`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
    /// DDIM timesteps, ascending.
    steps: Vec<usize>,
}

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_INFERENCE_STEPS: usize = 25;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(DEFAULT_TRAIN_STEPS, DEFAULT_INFERENCE_STEPS).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// `β` linear from `1e-4` to `2e-2` over `train_steps`; inference
    /// timesteps `⌊i·T/S⌋` for `i = 1..=S`, so the chain always starts at `T`.
    pub fn new(train_steps: usize, inference_steps: usize) -> Result<Self> {
        if train_steps < 2 {
            return Err(Error::Config(
                "schedule needs at least 2 training steps".into(),
            ));
        }
        if inference_steps == 0 || inference_steps > train_steps {
            return Err(Error::Config(format!(
                "inference steps must be in 1..={train_steps}, got {inference_steps}"
            )));
        }
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (train_steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(train_steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let steps = (1..=inference_steps)
            .map(|i| i * train_steps / inference_steps)
            .collect();
        Ok(Self {
            train_steps,
            betas,
            alpha_bars,
            steps,
        })
    }

    pub fn with_steps(&self, inference_steps: usize) -> Result<Self> {
        Self::new(self.train_steps, inference_steps)
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    /// `β_t` for `t ≥ 1`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Domain(format!("timestep {t} outside 0..={}", self.train_steps)))
    }

    /// Ascending DDIM timesteps.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// `(t, t_prev)` pairs in denoising order, ending at `t_prev = 0`.
    pub fn denoising_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.steps.len());
        for i in (0..self.steps.len()).rev() {
            let prev = if i == 0 { 0 } else { self.steps[i - 1] };
            out.push((self.steps[i], prev));
        }
        out
    }

    pub fn first_timestep(&self) -> usize {
        *self.steps.last().expect("at least one step")
    }
}
