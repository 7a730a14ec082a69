//! Entropy-guided layer selection and the two pipelines built on it:
//! quality enhancement (perturbed guidance branches at the highest-entropy
//! layer) and video editing (attention-map injection at the lowest-entropy
//! layers).

pub mod registry;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use registry::{
    layer_stats, Action, AttentionRecord, Branch, Capture, HookCall, RecordKey, Registration,
    Registry,
};

use crate::attention::{AttentionMap, AttentionMode};
use crate::denoiser::{Condition, ToyVdm, VideoLatent};
use crate::error::{Error, Result};
use crate::infotheory::{self, LayerStats};
use crate::numcore::{iead, Tensor};
use crate::sampler::{
    ddim_invert, initial_noise, sample, GuidanceSpec, GuidedStepper, NoiseSchedule, SampleOutput,
    SampleRequest, DEFAULT_OMEGA,
};

/// Which timesteps the selection entropy comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProbePolicy {
    /// One conditional pass at `t = T`.
    #[default]
    FirstStep,
    /// Per-layer average over every step of a guided sampling run.
    MeanOverSteps,
}

impl FromStr for ProbePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "first_step" => Ok(Self::FirstStep),
            "mean" | "mean_over_steps" => Ok(Self::MeanOverSteps),
            other => Err(Error::Config(format!("unknown probe policy `{other}`"))),
        }
    }
}

impl fmt::Display for ProbePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FirstStep => "first_step",
            Self::MeanOverSteps => "mean_over_steps",
        })
    }
}

fn mean_stats(
    per_pass: Vec<LayerStats>,
    n_layers: usize,
    timestep: usize,
) -> Result<Vec<LayerStats>> {
    let mut groups: Vec<Vec<LayerStats>> = vec![Vec::new(); n_layers];
    for s in per_pass {
        let l = s.layer_index;
        groups[l].push(s);
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(l, g)| {
            let first = g
                .first()
                .ok_or_else(|| Error::Domain(format!("no stats captured for layer {l}")))?;
            let k = g.len() as f64;
            let avg = |f: fn(&LayerStats) -> f64| g.iter().map(f).sum::<f64>() / k;
            Ok(LayerStats {
                layer_index: l,
                mode: first.mode,
                n_tokens: first.n_tokens,
                timestep,
                entropy: avg(|s| s.entropy),
                entropy_pct: avg(|s| s.entropy_pct),
                energy_map: avg(|s| s.energy_map),
                energy_out: avg(|s| s.energy_out),
                energy_out_uniform: avg(|s| s.energy_out_uniform),
                energy_out_identity: avg(|s| s.energy_out_identity),
                identity_energy_exact: g.iter().all(|s| s.identity_energy_exact),
                containment: avg(|s| s.containment),
            })
        })
        .collect()
}

/// Per-layer stats of the conditional branch, starting from `x_t` at the
/// schedule's first timestep. `stepper` drives the run for
/// [`ProbePolicy::MeanOverSteps`].
pub fn probe_latent(
    model: &ToyVdm,
    x_t: &Tensor,
    cond: &Condition,
    stepper: &GuidedStepper<'_>,
    sched: &NoiseSchedule,
    policy: ProbePolicy,
) -> Result<Vec<LayerStats>> {
    probe_in(model, model.registry(), x_t, cond, stepper, sched, policy)
}

/// [`probe_latent`] on top of existing registrations, e.g. a forced
/// replacement whose effect on the stats is being inspected.
pub fn probe_in(
    model: &ToyVdm,
    mut reg: Registry,
    x_t: &Tensor,
    cond: &Condition,
    stepper: &GuidedStepper<'_>,
    sched: &NoiseSchedule,
    policy: ProbePolicy,
) -> Result<Vec<LayerStats>> {
    reg.record_all(Capture::Stats);
    let t = sched.first_timestep();
    match policy {
        ProbePolicy::FirstStep => {
            reg.begin_pass(Branch::CondNative, None);
            model.predict_noise(&VideoLatent { x: x_t.clone(), t }, cond, &mut reg)?;
            let stats: Vec<LayerStats> = reg.take_stats().into_iter().map(|(_, s)| s).collect();
            mean_stats(stats, model.n_layers(), t)
        }
        ProbePolicy::MeanOverSteps => {
            stepper.run(x_t.clone(), sched, &mut reg, None)?;
            let stats = reg
                .take_stats()
                .into_iter()
                .filter(|(b, _)| *b == Branch::CondNative)
                .map(|(_, s)| s)
                .collect();
            mean_stats(stats, model.n_layers(), t)
        }
    }
}

/// Entropy probe for a text-to-video run: `x_T` from `seed`, plain CFG at
/// the default scale for the multi-step policy.
pub fn probe_entropy(
    model: &ToyVdm,
    prompt: &str,
    seed: u64,
    sched: &NoiseSchedule,
    policy: ProbePolicy,
) -> Result<Vec<LayerStats>> {
    probe_entropy_with(model, prompt, seed, sched, policy, DEFAULT_OMEGA)
}

fn probe_entropy_with(
    model: &ToyVdm,
    prompt: &str,
    seed: u64,
    sched: &NoiseSchedule,
    policy: ProbePolicy,
    omega: f32,
) -> Result<Vec<LayerStats>> {
    let cond = model.embed_prompt(prompt);
    let stepper = GuidedStepper::new(
        model,
        cond.clone(),
        model.null_condition(),
        GuidanceSpec::cfg(omega),
        None,
    )?;
    probe_latent(
        model,
        &initial_noise(model.config(), seed),
        &cond,
        &stepper,
        sched,
        policy,
    )
}

#[derive(Clone, Debug)]
pub struct EnhanceOutput {
    pub sample: SampleOutput,
    /// The layer the `U`/`I` branches perturb.
    pub layer: usize,
    pub probe: Vec<LayerStats>,
}

/// Probes `req.prompt`, targets the highest-entropy layer and samples with
/// `req.guidance`. Any `req.target_layer` is overridden.
pub fn enhance(
    model: &ToyVdm,
    req: &SampleRequest<'_>,
    sched: &NoiseSchedule,
    policy: ProbePolicy,
) -> Result<EnhanceOutput> {
    req.guidance.validate()?;
    let probe = probe_entropy_with(
        model,
        req.prompt,
        req.seed,
        sched,
        policy,
        req.guidance.omega,
    )?;
    let layer = infotheory::select_max(&probe)?;
    let req = SampleRequest {
        target_layer: Some(layer),
        ..req.clone()
    };
    let sample = sample(model, &req, sched, &mut model.registry())?;
    Ok(EnhanceOutput {
        sample,
        layer,
        probe,
    })
}

/// How the injected layer set is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSelection {
    /// The `⌊ρ·n⌋` lowest-entropy layers.
    Entropy { rho: f64 },
    /// A hand-picked set, e.g. a contiguous decoder span.
    Fixed(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditConfig {
    pub selection: LayerSelection,
    pub policy: ProbePolicy,
    /// Guidance scale of both branches of a generated edit. Real-video
    /// edits run unguided so that the source pass reconstructs the input.
    pub omega: f32,
    /// `Inject` by default; the key/value and value variants are baselines.
    pub action: Action,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            selection: LayerSelection::Entropy { rho: 0.5 },
            policy: ProbePolicy::FirstStep,
            omega: DEFAULT_OMEGA,
            action: Action::Inject,
        }
    }
}

impl EditConfig {
    pub fn with_rho(rho: f64) -> Self {
        Self {
            selection: LayerSelection::Entropy { rho },
            ..Self::default()
        }
    }

    fn layers(&self, probe: &[LayerStats], n_layers: usize) -> Result<Vec<usize>> {
        let set: Vec<usize> = match &self.selection {
            LayerSelection::Entropy { rho } => infotheory::select_bottom_fraction(probe, *rho)?
                .into_iter()
                .collect(),
            LayerSelection::Fixed(ls) => {
                let mut v = ls.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        if set.is_empty() {
            return Err(Error::Domain("edit selects no layer".into()));
        }
        if let Some(&bad) = set.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Registry(format!(
                "unknown layer index {bad} (model has {n_layers})"
            )));
        }
        Ok(set)
    }

    fn capture(&self) -> Capture {
        match self.action {
            Action::Inject => Capture::Maps,
            _ => Capture::Full,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EditOutput {
    pub source_latent: Tensor,
    pub target_latent: Tensor,
    pub source_video: Tensor,
    pub target_video: Tensor,
    /// The injected layers, ascending.
    pub layers: Vec<usize>,
    pub probe: Vec<LayerStats>,
    /// Injection hook calls logged by the target run.
    pub inject_calls: usize,
    pub hook_log: Vec<HookCall>,
}

/// Runs source and target in lockstep from the same `x_T`. Each step the
/// source records maps at `layers` and the target replays them.
fn lockstep(
    model: &ToyVdm,
    source: &GuidedStepper<'_>,
    target: &GuidedStepper<'_>,
    x_t: Tensor,
    layers: &[usize],
    cfg: &EditConfig,
    sched: &NoiseSchedule,
) -> Result<(Tensor, Tensor, Registry)> {
    let mut src_reg = model.registry();
    let mut dst_reg = model.registry();
    for &layer in layers {
        src_reg.register(Registration::Record {
            layer,
            capture: cfg.capture(),
        })?;
        dst_reg.register(Registration::Act {
            layer,
            action: cfg.action,
        })?;
    }
    let (mut xs, mut xd) = (x_t.clone(), x_t);
    for (t, t_prev) in sched.denoising_pairs() {
        xs = source.step(&xs, t, t_prev, sched, &mut src_reg)?;
        dst_reg.clear_bank();
        dst_reg.load_bank(src_reg.take_records());
        xd = target.step(&xd, t, t_prev, sched, &mut dst_reg)?;
    }
    Ok((xs, xd, dst_reg))
}

fn finish(
    model: &ToyVdm,
    xs: Tensor,
    xd: Tensor,
    dst_reg: Registry,
    layers: Vec<usize>,
    probe: Vec<LayerStats>,
    action: Action,
) -> Result<EditOutput> {
    let kind = match action {
        Action::InjectKeysValues => "inject_kv",
        Action::InjectValues => "inject_v",
        _ => "inject",
    };
    Ok(EditOutput {
        source_video: model.decode(&xs)?,
        target_video: model.decode(&xd)?,
        source_latent: xs,
        target_latent: xd,
        layers,
        probe,
        inject_calls: dst_reg.call_count(kind),
        hook_log: dst_reg.calls().to_vec(),
    })
}

fn check_prompts(src: &str, dst: &str) -> Result<()> {
    if src.trim().is_empty() || dst.trim().is_empty() {
        return Err(Error::Config("edit prompts must be non-empty".into()));
    }
    Ok(())
}

/// Edits a generated video: both prompts share `x_T` from `seed`; the
/// target replays the source's attention at the selected layers on every
/// step, for both guidance branches.
pub fn edit_generated(
    model: &ToyVdm,
    src_prompt: &str,
    dst_prompt: &str,
    seed: u64,
    sched: &NoiseSchedule,
    cfg: &EditConfig,
) -> Result<EditOutput> {
    check_prompts(src_prompt, dst_prompt)?;
    let probe = probe_entropy_with(model, src_prompt, seed, sched, cfg.policy, cfg.omega)?;
    let layers = cfg.layers(&probe, model.n_layers())?;
    let guide = |p: &str| {
        GuidedStepper::new(
            model,
            model.embed_prompt(p),
            model.null_condition(),
            GuidanceSpec::cfg(cfg.omega),
            None,
        )
    };
    let (source, target) = (guide(src_prompt)?, guide(dst_prompt)?);
    let x_t = initial_noise(model.config(), seed);
    let (xs, xd, reg) = lockstep(model, &source, &target, x_t, &layers, cfg, sched)?;
    finish(model, xs, xd, reg, layers, probe, cfg.action)
}

#[derive(Clone, Debug)]
pub struct RealEditOutput {
    pub edit: EditOutput,
    /// `[x_0, …, x_T]` from inverting the input under the source prompt.
    pub trajectory: Vec<Tensor>,
}

/// Edits an existing latent: invert under `src_prompt`, then run the source
/// reconstruction and the target generation from the inverted `x_T`, the
/// target replaying the reconstruction's attention at the selected layers.
/// `edit.source_latent` is the reconstruction.
pub fn edit_real(
    model: &ToyVdm,
    x0: &Tensor,
    src_prompt: &str,
    dst_prompt: &str,
    sched: &NoiseSchedule,
    cfg: &EditConfig,
) -> Result<RealEditOutput> {
    check_prompts(src_prompt, dst_prompt)?;
    let src_cond = model.embed_prompt(src_prompt);
    let trajectory = ddim_invert(model, x0, &src_cond, sched, &mut model.registry())?;
    let x_t = trajectory.last().expect("non-empty trajectory").clone();
    let source = GuidedStepper::unguided(model, src_cond.clone());
    let target = GuidedStepper::unguided(model, model.embed_prompt(dst_prompt));
    let probe = probe_latent(model, &x_t, &src_cond, &source, sched, cfg.policy)?;
    let layers = cfg.layers(&probe, model.n_layers())?;
    let (xs, xd, reg) = lockstep(model, &source, &target, x_t, &layers, cfg, sched)?;
    Ok(RealEditOutput {
        edit: finish(model, xs, xd, reg, layers, probe, cfg.action)?,
        trajectory,
    })
}

/// `x_T` back to `x_0` under `cond` with no guidance, the forward half of
/// an inversion round trip.
pub fn reconstruct(
    model: &ToyVdm,
    x_t: &Tensor,
    cond: &Condition,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    GuidedStepper::unguided(model, cond.clone()).run(
        x_t.clone(),
        sched,
        &mut model.registry(),
        None,
    )
}

/// Plain `key=value` manifest, keys in the given order.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[(&str, String)]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn join_layers(layers: &[usize]) -> String {
    layers
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes one file per `(timestep, layer)` of `branch`:
/// `run-<id>/t<t>/layer<idx>-<mode>.iead`, token blocks stacked into
/// `[blocks × heads × N × N]`. Returns the written paths in order.
pub fn dump_records(
    records: &[AttentionRecord],
    branch: Branch,
    root: impl AsRef<Path>,
    run_id: &str,
) -> Result<Vec<PathBuf>> {
    let mut groups: BTreeMap<(usize, usize), Vec<&AttentionRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.branch == branch) {
        groups
            .entry((r.timestep, r.layer_index))
            .or_default()
            .push(r);
    }
    let mut written = Vec::with_capacity(groups.len());
    for ((t, layer), mut recs) in groups {
        recs.sort_by_key(|r| r.block_index);
        let mode = recs[0].mode;
        let (h, n) = (recs[0].map.heads(), recs[0].map.n_tokens());
        let mut data = Vec::with_capacity(recs.len() * h * n * n);
        for r in &recs {
            data.extend_from_slice(r.map.values().data());
        }
        let tensor = Tensor::new([recs.len(), h, n, n], data)?;
        let path = root
            .as_ref()
            .join(format!("run-{run_id}"))
            .join(format!("t{t}"))
            .join(format!("layer{layer}-{mode}.iead"));
        iead::write(&path, &tensor)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a dump written by [`dump_records`] back into per-block maps.
pub fn load_dumped_maps(path: impl AsRef<Path>, mode: AttentionMode) -> Result<Vec<AttentionMap>> {
    let path = path.as_ref();
    let t = iead::read(path)?;
    let [blocks, h, n, n2] = *t.dims() else {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected a rank-4 map dump".into(),
        });
    };
    if n != n2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "maps are not square".into(),
        });
    }
    t.data()
        .chunks(h * n * n)
        .take(blocks)
        .map(|c| AttentionMap::new(Tensor::new([h, n, n], c.to_vec())?, mode))
        .collect()
}
