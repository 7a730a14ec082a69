//! Deterministic DDIM (`η = 0`) sampling and inversion, with the guidance
//! combiners of [`guidance`].

pub mod guidance;
mod schedule;

use std::path::Path;

pub use guidance::{
    cfg_combine, ie_guidance_combine, BranchEstimates, Combo, GuidanceSpec, Strategy,
    DEFAULT_LAMBDA, DEFAULT_OMEGA,
};
pub use schedule::{
    NoiseSchedule, BETA_END, BETA_START, DEFAULT_INFERENCE_STEPS, DEFAULT_TRAIN_STEPS,
};

use crate::adapt::registry::{AttentionRecord, Branch, Registry};
use crate::denoiser::{Condition, ModelConfig, ToyVdm, VideoLatent};
use crate::error::{Error, Result};
use crate::infotheory::LayerStats;
use crate::numcore::{gaussian, iead, SeededRng, Tensor};

fn coefficients(sched: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    let ab = sched.alpha_bar(t)?;
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

/// `x̂₀ = (x_t − √(1−ᾱ_t)·ε) / √ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let (a, b) = coefficients(sched, t)?;
    if a == 0.0 {
        return Err(Error::Domain(format!("alpha_bar is zero at t={t}")));
    }
    x_t.zip_map(eps, |x, e| ((x as f64 - b * e as f64) / a) as f32)
}

/// Moves `x` from `t_from` to `t_to` along the deterministic DDIM path
/// implied by `eps`. Works in either direction.
fn ddim_transfer(
    x: &Tensor,
    t_from: usize,
    t_to: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let (a, b) = coefficients(sched, t_from)?;
    let (a2, b2) = coefficients(sched, t_to)?;
    if a == 0.0 {
        return Err(Error::Domain(format!("alpha_bar is zero at t={t_from}")));
    }
    x.zip_map(eps, |x, e| {
        let x0 = (x as f64 - b * e as f64) / a;
        (a2 * x0 + b2 * e as f64) as f32
    })
}

/// One denoising step `t → t_prev`:
/// `x_{t_prev} = √ᾱ_{t_prev}·x̂₀ + √(1−ᾱ_{t_prev})·ε`.
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev > t {
        return Err(Error::Domain(format!(
            "ddim_step goes backwards: {t} -> {t_prev}"
        )));
    }
    ddim_transfer(x_t, t, t_prev, eps, sched)
}

/// One inversion step `t → t_next` with `t_next ≥ t`, the mirror image of
/// [`ddim_step`].
pub fn ddim_invert_step(
    x_t: &Tensor,
    t: usize,
    t_next: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_next < t {
        return Err(Error::Domain(format!(
            "inversion goes forwards: {t} -> {t_next}"
        )));
    }
    ddim_transfer(x_t, t, t_next, eps, sched)
}

/// First-order DDIM inversion of `x0` under `cond`, evaluating
/// `ε_θ(x_t, t, cond)` at the current point of every step.
///
/// Returns the trajectory `[x_0, x_{t_1}, …, x_T]` on the schedule's grid.
/// Whatever `registry` is set to capture is captured on the way.
pub fn ddim_invert(
    model: &ToyVdm,
    x0: &Tensor,
    cond: &Condition,
    sched: &NoiseSchedule,
    registry: &mut Registry,
) -> Result<Vec<Tensor>> {
    if x0.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("inversion input is not finite".into()));
    }
    let mut grid = vec![0];
    grid.extend_from_slice(sched.steps());
    let mut traj = Vec::with_capacity(grid.len());
    traj.push(x0.clone());
    for w in grid.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let x = traj.last().expect("non-empty");
        let eps = model.predict_noise(&VideoLatent { x: x.clone(), t }, cond, registry)?;
        let next = ddim_invert_step(x, t, t_next, &eps, sched)?;
        traj.push(next);
    }
    Ok(traj)
}

/// `x_T` for `seed`: a standard normal draw from the `"latent"` substream.
pub fn initial_noise(cfg: &ModelConfig, seed: u64) -> Tensor {
    gaussian(&mut SeededRng::substream(seed, "latent"), cfg.latent_dims())
}

#[derive(Clone, Debug)]
enum Combine {
    Guided(GuidanceSpec),
    /// `ε(c, A)` alone, as used for inversion and reconstruction.
    CondOnly,
}

/// Evaluates the branches a guidance rule needs and takes one DDIM step.
#[derive(Clone, Debug)]
pub struct GuidedStepper<'m> {
    model: &'m ToyVdm,
    cond: Condition,
    uncond: Condition,
    combine: Combine,
    target_layer: Option<usize>,
    branches: Vec<Branch>,
}

impl<'m> GuidedStepper<'m> {
    /// `target_layer` is the layer the `U`/`I` branches perturb; required
    /// whenever the rule reads one of those branches.
    pub fn new(
        model: &'m ToyVdm,
        cond: Condition,
        uncond: Condition,
        guidance: GuidanceSpec,
        target_layer: Option<usize>,
    ) -> Result<Self> {
        guidance.validate()?;
        let branches = guidance.required_branches();
        if guidance.needs_target_layer() {
            match target_layer {
                None => {
                    return Err(Error::Spec(format!(
                        "{} perturbs a layer but none was selected",
                        guidance.label()
                    )))
                }
                Some(l) if l >= model.n_layers() => {
                    return Err(Error::Registry(format!(
                        "target layer {l} out of range (model has {})",
                        model.n_layers()
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            model,
            cond,
            uncond,
            combine: Combine::Guided(guidance),
            target_layer,
            branches,
        })
    }

    /// Conditional estimate only, no guidance.
    pub fn unguided(model: &'m ToyVdm, cond: Condition) -> Self {
        let uncond = model.null_condition();
        Self {
            model,
            cond,
            uncond,
            combine: Combine::CondOnly,
            target_layer: None,
            branches: vec![Branch::CondNative],
        }
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Runs every required branch on `(x, t)` in [`Branch::ORDER`].
    pub fn estimates(
        &self,
        x: &Tensor,
        t: usize,
        registry: &mut Registry,
    ) -> Result<BranchEstimates> {
        let mut est = BranchEstimates::new();
        let latent = VideoLatent { x: x.clone(), t };
        for &b in &self.branches {
            let overlay = b
                .targeted_replacement()
                .zip(self.target_layer)
                .map(|(r, l)| (l, r));
            registry.begin_pass(b, overlay);
            let cond = if b.is_conditional() {
                &self.cond
            } else {
                &self.uncond
            };
            let eps = self.model.predict_noise(&latent, cond, registry);
            registry.begin_pass(Branch::CondNative, None);
            est.insert(b, eps?);
        }
        Ok(est)
    }

    pub fn combine(&self, est: &BranchEstimates) -> Result<Tensor> {
        match &self.combine {
            Combine::Guided(spec) => ie_guidance_combine(est, spec),
            Combine::CondOnly => est.get(Branch::CondNative).cloned(),
        }
    }

    pub fn step(
        &self,
        x: &Tensor,
        t: usize,
        t_prev: usize,
        sched: &NoiseSchedule,
        registry: &mut Registry,
    ) -> Result<Tensor> {
        let est = self.estimates(x, t, registry)?;
        let eps = self.combine(&est)?;
        ddim_step(x, t, t_prev, &eps, sched)
    }

    /// Full denoising chain from `x_T`. With `trace`, per-step latents and
    /// branch estimates are written there as IEAD files.
    pub fn run(
        &self,
        x_t: Tensor,
        sched: &NoiseSchedule,
        registry: &mut Registry,
        trace: Option<&Path>,
    ) -> Result<Tensor> {
        let mut x = x_t;
        for (i, (t, t_prev)) in sched.denoising_pairs().into_iter().enumerate() {
            let est = self.estimates(&x, t, registry)?;
            let eps = self.combine(&est)?;
            if let Some(dir) = trace {
                iead::write(dir.join(format!("step{i:03}-t{t}-x.iead")), &x)?;
                for b in est.branches() {
                    iead::write(
                        dir.join(format!("step{i:03}-t{t}-eps-{b}.iead")),
                        est.get(b)?,
                    )?;
                }
            }
            x = ddim_step(&x, t, t_prev, &eps, sched)?;
        }
        if let Some(dir) = trace {
            iead::write(dir.join("x0.iead"), &x)?;
        }
        Ok(x)
    }
}

/// One text-to-video request.
#[derive(Clone, Debug)]
pub struct SampleRequest<'a> {
    pub prompt: &'a str,
    /// Takes the place of the null prompt in the unconditional branches.
    pub negative_prompt: Option<&'a str>,
    pub seed: u64,
    pub guidance: GuidanceSpec,
    pub target_layer: Option<usize>,
    pub trace_dir: Option<&'a Path>,
}

impl<'a> SampleRequest<'a> {
    pub fn new(prompt: &'a str, seed: u64) -> Self {
        Self {
            prompt,
            negative_prompt: None,
            seed,
            guidance: GuidanceSpec::default(),
            target_layer: None,
            trace_dir: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub latent: Tensor,
    pub records: Vec<AttentionRecord>,
    pub stats: Vec<(Branch, LayerStats)>,
}

fn unconditional(model: &ToyVdm, negative: Option<&str>) -> Condition {
    match negative {
        Some(p) if !p.trim().is_empty() => model.embed_prompt(p),
        _ => model.null_condition(),
    }
}

/// Samples from `x_T = initial_noise(seed)`. Records and stats are drained
/// from `registry`; its registrations stay in place.
pub fn sample(
    model: &ToyVdm,
    req: &SampleRequest<'_>,
    sched: &NoiseSchedule,
    registry: &mut Registry,
) -> Result<SampleOutput> {
    let stepper = GuidedStepper::new(
        model,
        model.embed_prompt(req.prompt),
        unconditional(model, req.negative_prompt),
        req.guidance,
        req.target_layer,
    )?;
    let x_t = initial_noise(model.config(), req.seed);
    let latent = stepper.run(x_t, sched, registry, req.trace_dir)?;
    Ok(SampleOutput {
        latent,
        records: registry.take_records(),
        stats: registry.take_stats(),
    })
}
