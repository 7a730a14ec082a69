//! Command-line front end. Exit codes: 0 ok, 2 configuration error,
//! 3 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ieadapt::adapt::{self, Action, EditConfig, LayerSelection, ProbePolicy};
use ieadapt::attention::Replacement;
use ieadapt::denoiser::data::{MovingSquare, COLORS};
use ieadapt::denoiser::train::{train_toy, TrainConfig};
use ieadapt::denoiser::{ModelConfig, ToyVdm, UPSAMPLE};
use ieadapt::harness::config::KvConfig;
use ieadapt::harness::prompts::{default_prompts, load_prompts};
use ieadapt::harness::{self, LayerPreset, SweepKind, SweepSpec};
use ieadapt::numcore::{iead, Tensor};
use ieadapt::sampler::{sample, Combo, GuidanceSpec, NoiseSchedule, SampleRequest, Strategy};
use ieadapt::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "ieadapt",
    version,
    about = "Attention-entropy tools for a toy video diffusion model"
)]
struct Cli {
    /// key=value file; flags win over it. Model keys take a `model.` prefix.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for sweeps and attention blocks.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Load weights saved by `train-toy` instead of the seeded init.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Text-to-video with classifier-free guidance.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        neg_prompt: Option<String>,
        #[arg(long)]
        omega: Option<f32>,
        /// Also dump per-step latents and branch estimates.
        #[arg(long)]
        trace: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Attention replacement sweeps.
    Perturb {
        #[arg(long, default_value = "single")]
        sweep: String,
        /// Comma list of I, U.
        #[arg(long, default_value = "I,U")]
        matrix: String,
        /// Comma list of blend weights.
        #[arg(long)]
        alpha: Option<String>,
        /// `all`, `3,5`, `2-4`, or preset names for multi-layer sweeps.
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Comma list or range `a-b`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        rhos: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer entropy and energy report.
    EntropyReport {
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        policy: Option<String>,
        /// Force these layers to the identity map while probing.
        #[arg(long)]
        force_identity: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Guidance with perturbed branches at the highest-entropy layer.
    Enhance {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        combo: Option<String>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        omega: Option<f32>,
        #[arg(long)]
        lambda: Option<f32>,
        #[arg(long)]
        policy: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Prompt edit by attention-map injection.
    Edit {
        #[arg(long)]
        src_prompt: String,
        #[arg(long)]
        dst_prompt: String,
        #[arg(long)]
        rho: Option<f64>,
        /// Inject a fixed layer list instead of selecting by entropy.
        #[arg(long)]
        layers: Option<String>,
        /// inject (maps), kv or v.
        #[arg(long)]
        action: Option<String>,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        omega: Option<f32>,
        /// Edit this video (pixels or latent, IEAD) instead of a generated one.
        #[arg(long)]
        real: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// DDIM inversion and reconstruction of a video.
    Invert {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        common: Common,
    },
    /// Trains the model on moving-square clips and saves the weights.
    TrainToy {
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Writes a moving-square clip as a pixel video, for `edit --real`.
    SynthClip {
        #[arg(long, default_value = "red")]
        color: String,
        #[arg(long, default_value_t = 0)]
        x: usize,
        #[arg(long, default_value_t = 0)]
        y: usize,
        #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
        vx: isize,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        vy: isize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flag, then config file, then fallback.
struct Settings {
    kv: KvConfig,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let kv = match path {
            Some(p) => KvConfig::parse(
                &fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            )?,
            None => KvConfig::default(),
        };
        Ok(Self { kv })
    }

    fn pick<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.kv.get_parsed(key)?.unwrap_or(default)),
        }
    }

    fn pick_str(&self, flag: Option<&str>, key: &str, default: &str) -> String {
        flag.or_else(|| self.kv.get(key))
            .unwrap_or(default)
            .to_string()
    }

    fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Some(s) = self.kv.get_parsed::<u64>("seed")? {
            return Ok(s);
        }
        match std::env::var("IEADAPT_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("IEADAPT_SEED=`{v}` is not a u64"))),
            Err(_) => Ok(0),
        }
    }

    fn schedule(&self, steps: Option<usize>) -> Result<NoiseSchedule> {
        let train = self.pick(None, "train_steps", 1000usize)?;
        NoiseSchedule::new(train, self.pick(steps, "steps", 25usize)?)
    }

    fn model_config(&self) -> Result<ModelConfig> {
        let pairs: Vec<(&str, &str)> = self
            .kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k, v)))
            .collect();
        let cfg = ModelConfig::default().apply_kv(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn model(&self, weights: Option<&Path>) -> Result<ToyVdm> {
        match weights
            .map(Path::to_path_buf)
            .or_else(|| self.kv.get("weights").map(PathBuf::from))
        {
            Some(dir) => ToyVdm::load_weights(dir),
            None => ToyVdm::new(self.model_config()?),
        }
    }

    fn out(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.kv.get("out").map(PathBuf::from))
            .ok_or_else(|| Error::Config("--out is required".into()))
    }

    fn policy(&self, flag: Option<&str>) -> Result<ProbePolicy> {
        self.pick_str(flag, "policy", "first").parse()
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse()
                .map_err(|_| Error::Config(format!("bad {what} `{x}`")))
        })
        .collect()
}

/// `3,5`, `2-4` or a mix.
fn parse_indices(s: &str, what: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (
                    a.parse()
                        .map_err(|_| Error::Config(format!("bad {what} `{part}`")))?,
                    b.parse()
                        .map_err(|_| Error::Config(format!("bad {what} `{part}`")))?,
                );
                out.extend(a..=b);
            }
            None => out.push(
                part.parse()
                    .map_err(|_| Error::Config(format!("bad {what} `{part}`")))?,
            ),
        }
    }
    Ok(out)
}

fn write_pgm_frames(video: &Tensor, dir: &Path) -> Result<()> {
    let [f, c, h, w] = *video.dims() else {
        return Err(Error::Shape("video must be rank 4".into()));
    };
    fs::create_dir_all(dir)?;
    let d = video.data();
    for fr in 0..f {
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        for i in 0..h * w {
            let mean = (0..c).map(|k| d[(fr * c + k) * h * w + i]).sum::<f32>() / c as f32;
            bytes.push((((mean + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        fs::write(dir.join(format!("frame{fr:03}.pgm")), bytes)?;
    }
    Ok(())
}

fn save_video(out: &Path, name: &str, latent: &Tensor, video: &Tensor) -> Result<()> {
    iead::write(out.join(format!("{name}-latent.iead")), latent)?;
    iead::write(out.join(format!("{name}-video.iead")), video)?;
    write_pgm_frames(video, &out.join(format!("{name}-frames")))
}

fn guidance(
    s: &Settings,
    combo: Option<&str>,
    strategy: Option<&str>,
    omega: Option<f32>,
    lambda: Option<f32>,
) -> Result<GuidanceSpec> {
    let strategy: Strategy = s.pick_str(strategy, "strategy", "eq5").parse()?;
    let default_combo = if strategy == Strategy::Eq5 {
        "UI"
    } else {
        "none"
    };
    let combo: Combo = s.pick_str(combo, "combo", default_combo).parse()?;
    let spec = GuidanceSpec {
        omega: s.pick(omega, "omega", 9.0f32)?,
        lambda: s.pick(lambda, "lambda", 1.0f32)?,
        combo,
        strategy,
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

/// A pixel video is lifted through the decoder's pseudo-inverse; a latent
/// is used as is.
fn load_latent(model: &ToyVdm, path: &Path) -> Result<Tensor> {
    let t = iead::read(path)?;
    let cfg = model.config();
    if t.dims() == cfg.latent_dims() {
        return Ok(t);
    }
    if t.dims() == [cfg.frames, 3, cfg.height * UPSAMPLE, cfg.width * UPSAMPLE] {
        return model.decoder.encode(&t);
    }
    Err(Error::Config(format!(
        "{} has shape {:?}, which is neither a latent nor a video for this model",
        path.display(),
        t.dims()
    )))
}

fn run(cli: Cli) -> Result<()> {
    let s = Settings::load(cli.config.as_deref())?;
    let workers = s.pick(cli.workers, "workers", 0usize)?;
    if workers > 0 {
        // The global pool only sizes attention-block parallelism.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let weights = cli.weights.as_deref();
    match cli.cmd {
        Cmd::Generate {
            prompt,
            neg_prompt,
            omega,
            trace,
            common,
        } => {
            let model = s.model(weights)?;
            let sched = s.schedule(common.steps)?;
            let out = s.out(common.out.as_deref())?;
            let seed = s.seed(common.seed)?;
            let trace_dir = out.join("trace");
            let req = SampleRequest {
                negative_prompt: neg_prompt.as_deref(),
                guidance: GuidanceSpec::cfg(s.pick(omega, "omega", 9.0f32)?),
                trace_dir: trace.then_some(trace_dir.as_path()),
                ..SampleRequest::new(&prompt, seed)
            };
            let o = sample(&model, &req, &sched, &mut model.registry())?;
            save_video(&out, "generated", &o.latent, &model.decode(&o.latent)?)?;
            adapt::write_manifest(
                out.join("run.manifest"),
                &[
                    ("command", "generate".into()),
                    ("prompt", prompt.clone()),
                    ("negative_prompt", neg_prompt.clone().unwrap_or_default()),
                    ("seed", seed.to_string()),
                    ("steps", sched.steps().len().to_string()),
                    ("omega", req.guidance.omega.to_string()),
                ],
            )?;
            println!("wrote {}", out.display());
        }
        Cmd::Perturb {
            sweep,
            matrix,
            alpha,
            layers,
            prompts,
            seeds,
            rhos,
            steps,
            out,
        } => {
            let model_cfg = s.model_config()?;
            let sched = s.schedule(steps)?;
            let out = s.out(out.as_deref())?;
            let kind: SweepKind = sweep.parse()?;
            let mut spec = SweepSpec {
                kind,
                prompts: match prompts.or_else(|| s.kv.get("prompts").map(PathBuf::from)) {
                    Some(p) => load_prompts(p).map_err(|e| Error::Config(e.to_string()))?,
                    None => default_prompts(),
                },
                seeds: match seeds {
                    Some(l) => parse_indices(&l, "seed")?
                        .into_iter()
                        .map(|x| x as u64)
                        .collect(),
                    None => vec![s.seed(None)?],
                },
                matrices: parse_list::<Replacement>(&matrix, "matrix")?,
                omega: s.pick(None, "omega", 9.0f32)?,
                ..SweepSpec::default()
            };
            if let Some(a) = alpha {
                spec.alphas = parse_list(&a, "alpha")?;
            }
            if let Some(r) = rhos {
                spec.rhos = parse_list(&r, "rho")?;
            }
            if layers != "all" {
                if kind == SweepKind::MultiLayer {
                    spec.combos = parse_list::<LayerPreset>(&layers, "layer preset")?;
                } else {
                    spec.layers = Some(parse_indices(&layers, "layer")?);
                }
            }
            let r = harness::run_sweep(&spec, &model_cfg, &sched, &out, workers.max(1))?;
            harness::emit_report(&r.records, &out)?;
            let failed = r.records.iter().filter(|x| !x.is_ok()).count();
            println!(
                "{} runs ({} executed, {} failed), {} baselines; spec hash {}",
                r.records.len(),
                r.executed.len(),
                failed,
                r.baseline_ids.len(),
                r.spec_hash
            );
        }
        Cmd::EntropyReport {
            prompts,
            policy,
            force_identity,
            common,
        } => {
            let model = s.model(weights)?;
            let sched = s.schedule(common.steps)?;
            let out = s.out(common.out.as_deref())?;
            let prompts = match prompts.or_else(|| s.kv.get("prompts").map(PathBuf::from)) {
                Some(p) => load_prompts(p).map_err(|e| Error::Config(e.to_string()))?,
                None => default_prompts(),
            };
            let forced: Vec<(usize, Replacement)> = match force_identity {
                Some(l) => parse_indices(&l, "layer")?
                    .into_iter()
                    .map(|l| (l, Replacement::Identity))
                    .collect(),
                None => Vec::new(),
            };
            let rep = harness::entropy_report(
                &model,
                &prompts,
                s.seed(common.seed)?,
                &sched,
                s.policy(policy.as_deref())?,
                &forced,
            )?;
            harness::write_entropy_report(&rep, &out)?;
            for st in &rep.summary {
                println!(
                    "layer {:>2} {:<8} entropy {:>6.2}%  E(UV) {:.4e}  E(AV) {:.4e}  E(IV) {:.4e}  contained {:.2}",
                    st.layer_index,
                    st.mode,
                    100.0 * st.entropy_pct,
                    st.energy_out_uniform,
                    st.energy_out,
                    st.energy_out_identity,
                    st.containment
                );
            }
        }
        Cmd::Enhance {
            prompt,
            combo,
            strategy,
            omega,
            lambda,
            policy,
            common,
        } => {
            let model = s.model(weights)?;
            let sched = s.schedule(common.steps)?;
            let out = s.out(common.out.as_deref())?;
            let seed = s.seed(common.seed)?;
            let spec = guidance(&s, combo.as_deref(), strategy.as_deref(), omega, lambda)?;
            let req = SampleRequest {
                guidance: spec,
                ..SampleRequest::new(&prompt, seed)
            };
            let o = adapt::enhance(&model, &req, &sched, s.policy(policy.as_deref())?)?;
            save_video(
                &out,
                "enhanced",
                &o.sample.latent,
                &model.decode(&o.sample.latent)?,
            )?;
            adapt::write_manifest(
                out.join("run.manifest"),
                &[
                    ("command", "enhance".into()),
                    ("prompt", prompt),
                    ("seed", seed.to_string()),
                    ("guidance", spec.label()),
                    ("layer", o.layer.to_string()),
                    ("steps", sched.steps().len().to_string()),
                ],
            )?;
            println!("perturbed layer {}; wrote {}", o.layer, out.display());
        }
        Cmd::Edit {
            src_prompt,
            dst_prompt,
            rho,
            layers,
            action,
            policy,
            omega,
            real,
            common,
        } => {
            let model = s.model(weights)?;
            let sched = s.schedule(common.steps)?;
            let out = s.out(common.out.as_deref())?;
            let rho = s.pick(rho, "rho", 0.5f64)?;
            let cfg = EditConfig {
                selection: match layers {
                    Some(l) => LayerSelection::Fixed(parse_indices(&l, "layer")?),
                    None => LayerSelection::Entropy { rho },
                },
                policy: s.policy(policy.as_deref())?,
                omega: s.pick(omega, "omega", 9.0f32)?,
                action: s
                    .pick_str(action.as_deref(), "action", "inject")
                    .parse::<Action>()?,
            };
            let seed = s.seed(common.seed)?;
            let (edit, source) = match &real {
                Some(path) => {
                    let x0 = load_latent(&model, path)?;
                    (
                        adapt::edit_real(&model, &x0, &src_prompt, &dst_prompt, &sched, &cfg)?.edit,
                        path.display().to_string(),
                    )
                }
                None => (
                    adapt::edit_generated(&model, &src_prompt, &dst_prompt, seed, &sched, &cfg)?,
                    format!("generated:{seed}"),
                ),
            };
            save_video(&out, "source", &edit.source_latent, &edit.source_video)?;
            save_video(&out, "target", &edit.target_latent, &edit.target_video)?;
            adapt::write_manifest(
                out.join("edit.manifest"),
                &[
                    ("source", source),
                    ("seed", seed.to_string()),
                    ("src_prompt", src_prompt),
                    ("dst_prompt", dst_prompt),
                    ("rho", rho.to_string()),
                    ("policy", cfg.policy.to_string()),
                    ("layers", adapt::join_layers(&edit.layers)),
                    (
                        "omega",
                        if real.is_some() {
                            "unguided".into()
                        } else {
                            cfg.omega.to_string()
                        },
                    ),
                    ("train_steps", sched.train_steps().to_string()),
                    ("steps", sched.steps().len().to_string()),
                    ("inject_at", "all_steps".into()),
                ],
            )?;
            println!(
                "injected layers {}; wrote {}",
                adapt::join_layers(&edit.layers),
                out.display()
            );
        }
        Cmd::Invert {
            video,
            prompt,
            common,
        } => {
            let model = s.model(weights)?;
            let sched = s.schedule(common.steps)?;
            let out = s.out(common.out.as_deref())?;
            let x0 = load_latent(&model, &video)?;
            let cond = model.embed_prompt(&prompt);
            let traj =
                ieadapt::sampler::ddim_invert(&model, &x0, &cond, &sched, &mut model.registry())?;
            let x_t = traj.last().expect("non-empty");
            for (i, x) in traj.iter().enumerate() {
                iead::write(out.join("trajectory").join(format!("x{i:03}.iead")), x)?;
            }
            iead::write(out.join("xT.iead"), x_t)?;
            let recon = adapt::reconstruct(&model, x_t, &cond, &sched)?;
            save_video(&out, "reconstruction", &recon, &model.decode(&recon)?)?;
            let err = x0.relative_l2(&recon)?;
            adapt::write_manifest(
                out.join("invert.manifest"),
                &[
                    ("video", video.display().to_string()),
                    ("prompt", prompt),
                    ("steps", sched.steps().len().to_string()),
                    ("relative_l2", err.to_string()),
                ],
            )?;
            println!("reconstruction relative L2 {err:.6}");
        }
        Cmd::TrainToy { lr, batch, common } => {
            let mut model = s.model(weights)?;
            let sched = s.schedule(None)?;
            let out = s.out(common.out.as_deref())?;
            let cfg = TrainConfig {
                steps: s.pick(common.steps, "train.steps", 2000usize)?,
                lr: s.pick(lr, "lr", 1e-3f64)?,
                batch: s.pick(batch, "batch", 4usize)?,
                seed: s.seed(common.seed)?,
                ..TrainConfig::default()
            };
            let report = train_toy(&mut model, &sched, &cfg)?;
            model.save_weights(&out)?;
            let mut log = String::from("step,batch_loss\n");
            for (st, l) in &report.history {
                log.push_str(&format!("{st},{l}\n"));
            }
            fs::write(out.join("loss.csv"), log)?;
            println!(
                "eval loss {:.6} -> {:.6}; weights in {}",
                report.initial_loss,
                report.final_loss,
                out.display()
            );
        }
        Cmd::SynthClip {
            color,
            x,
            y,
            vx,
            vy,
            out,
        } => {
            let cfg = s.model_config()?;
            let color = COLORS
                .iter()
                .position(|c| *c == color)
                .ok_or_else(|| Error::Config(format!("color must be one of {COLORS:?}")))?;
            let clip = MovingSquare {
                x,
                y,
                vx,
                vy,
                color,
            };
            iead::write(&out, &clip.video(cfg.frames, cfg.height, cfg.width))?;
            println!("{} -> {}", clip.prompt(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Spec(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
