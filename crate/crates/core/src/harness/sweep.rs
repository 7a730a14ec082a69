//! Perturbation sweeps with one shared baseline per `(prompt, seed)` and
//! resumable per-run output directories.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::KvConfig;
use super::prompts::default_prompts;
use crate::adapt::{self, Branch, Capture, EditConfig, ProbePolicy, Registration};
use crate::attention::{AttentionMode, Replacement};
use crate::denoiser::{ModelConfig, Stage, ToyVdm};
use crate::error::{Error, Result};
use crate::infotheory::{self, LayerStats};
use crate::metrics::MetricRecord;
use crate::numcore::{iead, Tensor};
use crate::sampler::{sample, Combo, GuidanceSpec, NoiseSchedule, SampleRequest, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    /// One layer at a time, each matrix.
    SingleLayer,
    /// Preset layer groups, each matrix.
    MultiLayer,
    /// One layer at a time, `αI + (1−α)U` for each α.
    Blend,
    /// Guidance rules at the highest-entropy layer.
    Strategy,
    /// Self-prompt edits with the ρ lowest-entropy layers injected.
    Rho,
}

impl SweepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SingleLayer => "single_layer",
            Self::MultiLayer => "multi_layer",
            Self::Blend => "blend",
            Self::Strategy => "strategy",
            Self::Rho => "rho",
        }
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_layer" => Ok(Self::SingleLayer),
            "multi" | "multi_layer" => Ok(Self::MultiLayer),
            "blend" => Ok(Self::Blend),
            "strategy" => Ok(Self::Strategy),
            "rho" => Ok(Self::Rho),
            other => Err(Error::Config(format!("unknown sweep kind `{other}`"))),
        }
    }
}

/// Named layer groups for multi-layer sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerPreset {
    Top50Entropy,
    Bottom50Entropy,
    EncoderLayers,
    DecoderLayers,
    SpatialOnly,
    TemporalOnly,
}

impl LayerPreset {
    pub const ALL: [LayerPreset; 6] = [
        Self::Top50Entropy,
        Self::Bottom50Entropy,
        Self::EncoderLayers,
        Self::DecoderLayers,
        Self::SpatialOnly,
        Self::TemporalOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Top50Entropy => "top50_entropy",
            Self::Bottom50Entropy => "bottom50_entropy",
            Self::EncoderLayers => "encoder_layers",
            Self::DecoderLayers => "decoder_layers",
            Self::SpatialOnly => "spatial_only",
            Self::TemporalOnly => "temporal_only",
        }
    }

    /// Resolves against a model and its baseline probe.
    pub fn resolve(self, model: &ToyVdm, probe: &[LayerStats]) -> Result<Vec<usize>> {
        let pick = |f: &dyn Fn(&crate::denoiser::LayerInfo) -> bool| -> Vec<usize> {
            model
                .layers()
                .iter()
                .filter(|l| f(l))
                .map(|l| l.index)
                .collect()
        };
        let half = infotheory::bottom_count(probe.len(), 0.5).max(1);
        let set = match self {
            Self::Top50Entropy => {
                let mut v: Vec<usize> = infotheory::rank_layers(probe)?
                    .into_iter()
                    .take(half)
                    .collect();
                v.sort_unstable();
                v
            }
            Self::Bottom50Entropy => infotheory::select_bottom_fraction(probe, 0.5)?
                .into_iter()
                .collect(),
            Self::EncoderLayers => pick(&|l| l.stage == Stage::Encoder),
            Self::DecoderLayers => pick(&|l| l.stage == Stage::Decoder),
            Self::SpatialOnly => pick(&|l| l.mode == AttentionMode::Spatial),
            Self::TemporalOnly => pick(&|l| l.mode == AttentionMode::Temporal),
        };
        if set.is_empty() {
            return Err(Error::Domain(format!(
                "preset {} is empty for this model",
                self.as_str()
            )));
        }
        Ok(set)
    }
}

impl FromStr for LayerPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer preset `{s}`")))
    }
}

impl fmt::Display for LayerPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub prompts: Vec<String>,
    pub seeds: Vec<u64>,
    pub matrices: Vec<Replacement>,
    pub alphas: Vec<f32>,
    /// Layers for single-layer and blend sweeps; `None` means all.
    pub layers: Option<Vec<usize>>,
    pub combos: Vec<LayerPreset>,
    pub strategies: Vec<GuidanceSpec>,
    pub rhos: Vec<f64>,
    /// Appended to the prompt to form the edit target of ρ sweeps.
    pub edit_suffix: String,
    pub omega: f32,
    pub policy: ProbePolicy,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let mut strategies: Vec<GuidanceSpec> = [Combo::AMinusI, Combo::UMinusA, Combo::UMinusI]
            .into_iter()
            .map(|c| GuidanceSpec::eq5(9.0, 1.0, c))
            .collect();
        for s in [Strategy::S1, Strategy::S2, Strategy::S3, Strategy::S4] {
            strategies.push(GuidanceSpec {
                strategy: s,
                ..GuidanceSpec::cfg(9.0)
            });
        }
        Self {
            kind: SweepKind::SingleLayer,
            prompts: default_prompts(),
            seeds: vec![0],
            matrices: vec![Replacement::Identity, Replacement::Uniform],
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            layers: None,
            combos: LayerPreset::ALL.to_vec(),
            strategies,
            rhos: vec![0.25, 0.5, 0.65, 0.75, 1.0],
            edit_suffix: " at night".into(),
            omega: 9.0,
            policy: ProbePolicy::FirstStep,
        }
    }
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.prompts.is_empty() || self.seeds.is_empty() {
            return bad("sweep needs at least one prompt and one seed");
        }
        match self.kind {
            SweepKind::SingleLayer | SweepKind::MultiLayer if self.matrices.is_empty() => {
                bad("sweep needs at least one matrix")
            }
            SweepKind::MultiLayer if self.combos.is_empty() => {
                bad("multi-layer sweep needs presets")
            }
            SweepKind::Blend if self.alphas.is_empty() => bad("blend sweep needs alphas"),
            SweepKind::Blend if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) => {
                bad("blend alphas must lie in [0, 1]")
            }
            SweepKind::Strategy if self.strategies.is_empty() => {
                bad("strategy sweep needs strategies")
            }
            SweepKind::Rho
                if self.rhos.is_empty() || self.rhos.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) =>
            {
                bad("rho sweep needs values in (0, 1]")
            }
            _ => self.strategies.iter().try_for_each(|s| s.validate()),
        }
    }

    /// Field name to canonical value, sorted by name.
    pub fn canonical(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("kind", self.kind.as_str().to_string());
        m.insert("prompts", join(&self.prompts, "|"));
        m.insert("seeds", join(&self.seeds, ","));
        m.insert(
            "matrices",
            self.matrices
                .iter()
                .map(|r| r.label())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("alphas", join(&self.alphas, ","));
        m.insert(
            "layers",
            self.layers.as_ref().map_or("all".into(), |l| join(l, ",")),
        );
        m.insert("combos", join(&self.combos, ","));
        m.insert(
            "strategies",
            self.strategies
                .iter()
                .map(|s| s.label())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("rhos", join(&self.rhos, ","));
        m.insert("edit_suffix", self.edit_suffix.clone());
        m.insert("omega", self.omega.to_string());
        m.insert("policy", self.policy.to_string());
        m
    }

    /// SHA-256 over the canonical fields, the model config and the
    /// schedule; independent of field order.
    pub fn hash(&self, model: &ModelConfig, sched: &NoiseSchedule) -> String {
        let mut h = Sha256::new();
        let mut lines: Vec<String> = self
            .canonical()
            .into_iter()
            .map(|(k, v)| format!("spec.{k}={v}"))
            .collect();
        lines.extend(model.to_kv().lines().map(|l| format!("model.{l}")));
        lines.push(format!("sched.train_steps={}", sched.train_steps()));
        lines.push(format!("sched.steps={}", sched.steps().len()));
        lines.sort();
        for l in lines {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// One perturbed run and its measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub spec_hash: String,
    pub prompt_id: usize,
    pub prompt: String,
    pub seed: u64,
    pub layers: Vec<usize>,
    pub mode_set: String,
    /// `I`, `U`, `blend`, a guidance label, or `inject`.
    pub matrix: String,
    pub alpha: Option<f32>,
    pub metrics: Option<MetricRecord>,
    /// Mean `entropy_pct` of the perturbed layers over the run's
    /// conditional passes.
    pub entropy_pct_mean: Option<f64>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn layer_set(&self) -> String {
        join(&self.layers, ";")
    }

    fn to_kv(&self) -> String {
        let mut lines = vec![
            format!("run_id={}", self.run_id),
            format!("spec_hash={}", self.spec_hash),
            format!("prompt_id={}", self.prompt_id),
            format!("prompt={}", self.prompt),
            format!("seed={}", self.seed),
            format!("layers={}", join(&self.layers, ",")),
            format!("mode_set={}", self.mode_set),
            format!("matrix={}", self.matrix),
        ];
        if let Some(a) = self.alpha {
            lines.push(format!("alpha={a}"));
        }
        if let Some(m) = &self.metrics {
            lines.push(format!("ssim={}", m.ssim));
            lines.push(format!("mse={}", m.mse));
            lines.push(format!("motion_magnitude={}", m.motion_magnitude));
            lines.push(format!("motion_smoothness={}", m.motion_smoothness));
            lines.push(format!("subject_consistency={}", m.subject_consistency));
            lines.push(format!("sharpness={}", m.sharpness));
            lines.push(format!("baseline_run_id={}", m.baseline_run_id));
        }
        if let Some(e) = self.entropy_pct_mean {
            lines.push(format!("entropy_pct_mean={e}"));
        }
        if let Some(e) = &self.error {
            lines.push(format!("error={}", e.replace('\n', " ")));
        }
        lines.join("\n") + "\n"
    }

    fn from_kv(text: &str) -> Result<Self> {
        let c = KvConfig::parse(text)?;
        let req = |k: &str| {
            c.get(k)
                .map(String::from)
                .ok_or_else(|| Error::Config(format!("run record lacks {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            c.get_parsed::<f64>(k)?
                .ok_or_else(|| Error::Config(format!("run record lacks {k}")))
        };
        let run_id = req("run_id")?;
        let metrics = match c.get("ssim") {
            None => None,
            Some(_) => Some(MetricRecord {
                ssim: num("ssim")?,
                mse: num("mse")?,
                motion_magnitude: num("motion_magnitude")?,
                motion_smoothness: num("motion_smoothness")?,
                subject_consistency: num("subject_consistency")?,
                sharpness: num("sharpness")?,
                baseline_run_id: req("baseline_run_id")?,
                perturbed_run_id: run_id.clone(),
            }),
        };
        let layers = match c.get("layers") {
            Some("") | None => Vec::new(),
            Some(l) => l
                .split(',')
                .map(|x| {
                    x.parse()
                        .map_err(|_| Error::Config(format!("bad layer `{x}`")))
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            spec_hash: req("spec_hash")?,
            prompt_id: c.get_parsed("prompt_id")?.unwrap_or(0),
            prompt: req("prompt")?,
            seed: c.get_parsed("seed")?.unwrap_or(0),
            layers,
            mode_set: c.get("mode_set").unwrap_or_default().to_string(),
            matrix: req("matrix")?,
            alpha: c.get_parsed("alpha")?,
            metrics,
            entropy_pct_mean: c.get_parsed("entropy_pct_mean")?,
            error: c.get("error").map(String::from),
            run_id,
        })
    }
}

#[derive(Clone, Debug)]
enum Perturbation {
    Replace {
        layers: Vec<usize>,
        replacement: Replacement,
    },
    Preset {
        preset: LayerPreset,
        replacement: Replacement,
    },
    Guidance(GuidanceSpec),
    Rho(f64),
}

#[derive(Clone, Debug)]
struct Task {
    run_id: String,
    prompt_id: usize,
    seed: u64,
    matrix: String,
    alpha: Option<f32>,
    perturbation: Perturbation,
}

fn base_id(prompt_id: usize, seed: u64) -> String {
    format!("p{prompt_id:03}-s{seed}-base")
}

fn replacement_tag(r: Replacement) -> (String, Option<f32>) {
    match r {
        Replacement::Identity => ("I".into(), None),
        Replacement::Uniform => ("U".into(), None),
        Replacement::Blend(a) => ("blend".into(), Some(a)),
    }
}

fn plan(spec: &SweepSpec, n_layers: usize) -> Result<Vec<Task>> {
    let layers: Vec<usize> = match &spec.layers {
        Some(l) => l.clone(),
        None => (0..n_layers).collect(),
    };
    if let Some(&bad) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(Error::Config(format!(
            "layer {bad} out of range (model has {n_layers})"
        )));
    }
    let mut tasks = Vec::new();
    for (pid, _) in spec.prompts.iter().enumerate() {
        for &seed in &spec.seeds {
            let id = |tail: String| format!("p{pid:03}-s{seed}-{tail}");
            let mut push = |tail: String, matrix: String, alpha, perturbation| {
                tasks.push(Task {
                    run_id: id(tail),
                    prompt_id: pid,
                    seed,
                    matrix,
                    alpha,
                    perturbation,
                })
            };
            match spec.kind {
                SweepKind::SingleLayer => {
                    for &l in &layers {
                        for &r in &spec.matrices {
                            let (m, a) = replacement_tag(r);
                            push(
                                format!("L{l}-{}", r.label()),
                                m,
                                a,
                                Perturbation::Replace {
                                    layers: vec![l],
                                    replacement: r,
                                },
                            );
                        }
                    }
                }
                SweepKind::Blend => {
                    for &l in &layers {
                        for &alpha in &spec.alphas {
                            let r = Replacement::blend(alpha)?;
                            push(
                                format!("L{l}-blend{alpha}"),
                                "blend".into(),
                                Some(alpha),
                                Perturbation::Replace {
                                    layers: vec![l],
                                    replacement: r,
                                },
                            );
                        }
                    }
                }
                SweepKind::MultiLayer => {
                    for &preset in &spec.combos {
                        for &r in &spec.matrices {
                            let (m, a) = replacement_tag(r);
                            push(
                                format!("{preset}-{}", r.label()),
                                m,
                                a,
                                Perturbation::Preset {
                                    preset,
                                    replacement: r,
                                },
                            );
                        }
                    }
                }
                SweepKind::Strategy => {
                    for g in &spec.strategies {
                        push(
                            format!("g-{}", g.label()),
                            g.label(),
                            None,
                            Perturbation::Guidance(*g),
                        );
                    }
                }
                SweepKind::Rho => {
                    for &rho in &spec.rhos {
                        push(
                            format!("rho{rho}"),
                            "inject".into(),
                            None,
                            Perturbation::Rho(rho),
                        );
                    }
                }
            }
        }
    }
    Ok(tasks)
}

/// Per-`(prompt, seed)` baseline: plain CFG video and its entropy probe.
#[derive(Clone, Debug)]
struct Baseline {
    video: Tensor,
    probe: Vec<LayerStats>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    /// Perturbed runs in plan order.
    pub records: Vec<RunRecord>,
    pub baseline_ids: Vec<String>,
    /// Runs computed by this call (the rest were loaded from disk).
    pub executed: Vec<String>,
    pub baselines_executed: usize,
    pub spec_hash: String,
}

struct Ctx<'a> {
    model: &'a ToyVdm,
    spec: &'a SweepSpec,
    sched: &'a NoiseSchedule,
    runs: PathBuf,
    hash: String,
}

fn mode_set(model: &ToyVdm, layers: &[usize]) -> String {
    let mut modes: Vec<&str> = layers
        .iter()
        .map(|&l| model.layers()[l].mode.as_str())
        .collect();
    modes.sort_unstable();
    modes.dedup();
    modes.join(";")
}

fn cond_entropy_mean(stats: &[(Branch, LayerStats)]) -> Option<f64> {
    let v: Vec<f64> = stats
        .iter()
        .filter(|(b, _)| *b == Branch::CondNative)
        .map(|(_, s)| s.entropy_pct)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Ctx<'_> {
    fn request<'p>(&self, prompt: &'p str, seed: u64) -> SampleRequest<'p> {
        SampleRequest {
            guidance: GuidanceSpec::cfg(self.spec.omega),
            ..SampleRequest::new(prompt, seed)
        }
    }

    fn baseline(&self, pid: usize, seed: u64) -> Result<(Baseline, bool)> {
        let dir = self.runs.join(base_id(pid, seed));
        let prompt = &self.spec.prompts[pid];
        let probe = adapt::probe_entropy(self.model, prompt, seed, self.sched, self.spec.policy)?;
        let video_path = dir.join("video.iead");
        let marker = dir.join("record.txt");
        if marker.exists()
            && fs::read_to_string(&marker)?.contains(&format!("spec_hash={}", self.hash))
        {
            return Ok((
                Baseline {
                    video: iead::read(&video_path)?,
                    probe,
                },
                false,
            ));
        }
        let out = sample(
            self.model,
            &self.request(prompt, seed),
            self.sched,
            &mut self.model.registry(),
        )?;
        let video = self.model.decode(&out.latent)?;
        iead::write(dir.join("latent.iead"), &out.latent)?;
        iead::write(&video_path, &video)?;
        fs::write(
            marker,
            format!(
                "run_id={}\nspec_hash={}\nprompt={prompt}\nseed={seed}\n",
                base_id(pid, seed),
                self.hash
            ),
        )?;
        Ok((Baseline { video, probe }, true))
    }

    fn execute(&self, task: &Task, base: &Baseline) -> Result<(Vec<usize>, Tensor, Option<f64>)> {
        let model = self.model;
        let prompt = &self.spec.prompts[task.prompt_id];
        let replace =
            |layers: Vec<usize>, r: Replacement| -> Result<(Vec<usize>, Tensor, Option<f64>)> {
                let mut reg = model.registry();
                for &layer in &layers {
                    reg.register(Registration::Act {
                        layer,
                        action: adapt::Action::Replace(r),
                    })?;
                    reg.register(Registration::Record {
                        layer,
                        capture: Capture::Stats,
                    })?;
                }
                let out = sample(
                    model,
                    &self.request(prompt, task.seed),
                    self.sched,
                    &mut reg,
                )?;
                Ok((
                    layers,
                    model.decode(&out.latent)?,
                    cond_entropy_mean(&out.stats),
                ))
            };
        match &task.perturbation {
            Perturbation::Replace {
                layers,
                replacement,
            } => replace(layers.clone(), *replacement),
            Perturbation::Preset {
                preset,
                replacement,
            } => replace(preset.resolve(model, &base.probe)?, *replacement),
            Perturbation::Guidance(g) => {
                let layer = infotheory::select_max(&base.probe)?;
                let mut reg = model.registry();
                reg.register(Registration::Record {
                    layer,
                    capture: Capture::Stats,
                })?;
                let req = SampleRequest {
                    guidance: *g,
                    target_layer: Some(layer),
                    ..SampleRequest::new(prompt, task.seed)
                };
                let out = sample(model, &req, self.sched, &mut reg)?;
                Ok((
                    vec![layer],
                    model.decode(&out.latent)?,
                    cond_entropy_mean(&out.stats),
                ))
            }
            Perturbation::Rho(rho) => {
                let cfg = EditConfig {
                    omega: self.spec.omega,
                    policy: self.spec.policy,
                    ..EditConfig::with_rho(*rho)
                };
                let dst = format!("{prompt}{}", self.spec.edit_suffix);
                let out = adapt::edit_generated(model, prompt, &dst, task.seed, self.sched, &cfg)?;
                let pcts: Vec<f64> = out
                    .layers
                    .iter()
                    .map(|&l| out.probe[l].entropy_pct)
                    .collect();
                let mean = pcts.iter().sum::<f64>() / pcts.len() as f64;
                Ok((out.layers, out.target_video, Some(mean)))
            }
        }
    }

    fn run_task(&self, task: &Task, base: &Baseline) -> Result<RunRecord> {
        let dir = self.runs.join(&task.run_id);
        let mut rec = RunRecord {
            run_id: task.run_id.clone(),
            spec_hash: self.hash.clone(),
            prompt_id: task.prompt_id,
            prompt: self.spec.prompts[task.prompt_id].clone(),
            seed: task.seed,
            layers: Vec::new(),
            mode_set: String::new(),
            matrix: task.matrix.clone(),
            alpha: task.alpha,
            metrics: None,
            entropy_pct_mean: None,
            error: None,
        };
        let measured = self.execute(task, base).and_then(|(layers, video, ent)| {
            let m = MetricRecord::compare(
                &base.video,
                &video,
                &base_id(task.prompt_id, task.seed),
                &task.run_id,
            )?;
            iead::write(dir.join("video.iead"), &video)?;
            Ok((layers, m, ent))
        });
        match measured {
            Ok((layers, m, ent)) => {
                rec.mode_set = mode_set(self.model, &layers);
                rec.layers = layers;
                rec.metrics = Some(m);
                rec.entropy_pct_mean = ent;
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("record.txt"), rec.to_kv())?;
        Ok(rec)
    }

    fn load_done(&self, task: &Task) -> Option<RunRecord> {
        let text = fs::read_to_string(self.runs.join(&task.run_id).join("record.txt")).ok()?;
        let rec = RunRecord::from_kv(&text).ok()?;
        (rec.spec_hash == self.hash && rec.is_ok()).then_some(rec)
    }
}

/// Runs (or resumes) a sweep under `out/runs/`. Completed runs with a
/// matching spec hash are loaded instead of recomputed; failed runs are
/// recorded with their error and retried on the next call. Results do not
/// depend on `workers`.
pub fn run_sweep(
    spec: &SweepSpec,
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    out: impl AsRef<Path>,
    workers: usize,
) -> Result<SweepResult> {
    spec.validate()?;
    let model = ToyVdm::new(model_cfg.clone())?;
    let tasks = plan(spec, model.n_layers())?;
    let ctx = Ctx {
        model: &model,
        spec,
        sched,
        runs: out.as_ref().join("runs"),
        hash: spec.hash(model_cfg, sched),
    };
    fs::create_dir_all(&ctx.runs)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let pairs: Vec<(usize, u64)> = (0..spec.prompts.len())
        .flat_map(|p| spec.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let baselines: Vec<(Baseline, bool)> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(p, s)| ctx.baseline(p, s))
            .collect::<Result<_>>()
    })?;
    let base_of: BTreeMap<(usize, u64), &Baseline> = pairs
        .iter()
        .copied()
        .zip(baselines.iter().map(|(b, _)| b))
        .collect();

    let results: Vec<(RunRecord, bool)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|t| match ctx.load_done(t) {
                Some(rec) => Ok((rec, false)),
                None => ctx
                    .run_task(t, base_of[&(t.prompt_id, t.seed)])
                    .map(|r| (r, true)),
            })
            .collect::<Result<_>>()
    })?;
    Ok(SweepResult {
        executed: results
            .iter()
            .filter(|(_, e)| *e)
            .map(|(r, _)| r.run_id.clone())
            .collect(),
        records: results.into_iter().map(|(r, _)| r).collect(),
        baseline_ids: pairs.iter().map(|&(p, s)| base_id(p, s)).collect(),
        baselines_executed: baselines.iter().filter(|(_, e)| *e).count(),
        spec_hash: ctx.hash,
    })
}
