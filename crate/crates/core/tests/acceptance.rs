//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any fails. Run with `cargo test --test acceptance`.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ieadapt::adapt::{self, Action, Branch, Capture, EditConfig, ProbePolicy, Registration};
use ieadapt::attention::{
    attend, latent_to_tokens, tokens_to_latent, AttentionMap, AttentionMode, Replacement, Treatment,
};
use ieadapt::denoiser::train::{draw_example, train_toy, Params, TrainConfig};
use ieadapt::denoiser::{
    timestep_features, Condition, ModelConfig, Norm, ToyVdm, VideoLatent, LN_EPS,
};
use ieadapt::harness::{entropy_report, run_sweep, SweepKind, SweepSpec, ENTROPY_CSV_HEADER};
use ieadapt::infotheory::{
    bottom_count, energy_map, entropy, max_entropy, select_bottom_fraction, select_max, LayerStats,
};
use ieadapt::metrics::motion_magnitude;
use ieadapt::numcore::{gaussian, iead, SeededRng, Tensor};
use ieadapt::sampler::{
    ddim_invert, ie_guidance_combine, sample, BranchEstimates, Combo, GuidanceSpec, NoiseSchedule,
    SampleRequest, Strategy,
};

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

/// A random row-stochastic map whose entries are multiples of 2^-20, so
/// every row sums to exactly 1 and the bounds can be checked at 1e-9.
fn random_map(rng: &mut SeededRng, n: usize) -> Tensor {
    const SCALE: u32 = 1 << 20;
    let mut data = Vec::with_capacity(n * n);
    let style = rng.below(4);
    for _ in 0..n {
        let temp = match style {
            0 => 0.05,
            1 => 1.0,
            2 => 10.0,
            _ => 0.5 + 4.0 * rng.uniform(),
        };
        let logits: Vec<f64> = (0..n)
            .map(|_| {
                if rng.uniform() < 0.15 {
                    f64::NEG_INFINITY
                } else {
                    rng.normal() as f64 / temp
                }
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = if max == f64::NEG_INFINITY {
            let mut v = vec![0.0; n];
            v[rng.below(n)] = 1.0;
            v
        } else {
            logits.iter().map(|l| (l - max).exp()).collect()
        };
        let total: f64 = w.iter().sum();
        let mut counts: Vec<u32> = w
            .iter()
            .map(|x| (x / total * SCALE as f64).floor() as u32)
            .collect();
        let short = SCALE - counts.iter().sum::<u32>();
        let top = (0..n)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a)))
            .unwrap();
        counts[top] += short;
        data.extend(counts.iter().map(|&c| c as f32 / SCALE as f32));
    }
    Tensor::new([n, n], data).unwrap()
}

fn bounds() -> Outcome {
    let mut rng = SeededRng::new(1);
    let tol = 1e-9;
    let mut worst_h = 0.0f64;
    for n in [2usize, 4, 16, 64] {
        let hmax = max_entropy(n);
        for i in 0..1000 {
            let m =
                AttentionMap::new(random_map(&mut rng, n), AttentionMode::Spatial).map_err(err)?;
            let h = entropy(&m).map_err(err)?;
            let e = energy_map(&m);
            check(h >= -tol && h <= hmax + tol, || {
                format!("N={n} map {i}: H={h} outside [0, {hmax}]")
            })?;
            check(e >= 1.0 - tol && e <= n as f64 + tol, || {
                format!("N={n} map {i}: E={e} outside [1, {n}]")
            })?;
            worst_h = worst_h.max(h / hmax);
        }
        let i = AttentionMap::new(Tensor::eye(n), AttentionMode::Spatial).map_err(err)?;
        check(entropy(&i).map_err(err)? == 0.0, || {
            format!("H(I) != 0 for N={n}")
        })?;
        check(energy_map(&i) == n as f64, || {
            format!("E(I) != N for N={n}")
        })?;
        let u = AttentionMap::new(
            Replacement::Uniform.materialize(n).map_err(err)?,
            AttentionMode::Spatial,
        )
        .map_err(err)?;
        check((entropy(&u).map_err(err)? - hmax).abs() <= tol, || {
            format!("H(U) != N ln N for N={n}")
        })?;
        check((energy_map(&u) - 1.0).abs() <= tol, || {
            format!("E(U) != 1 for N={n}")
        })?;
    }
    Ok(format!("4000 maps within bounds; max H/Hmax {worst_h:.4}"))
}

// ---------------------------------------------------------------- 2

/// Hand-written forward in which layer `bypass` computes `(x·w_v)·w_out`.
fn bypassed_forward(m: &ToyVdm, lat: &VideoLatent, c: &Condition, bypass: usize) -> Tensor {
    let cfg = m.config();
    let v = cfg.video_dims();
    let d = cfg.channels;
    let norm = |n: &Norm, x: &Tensor| {
        let mut y = x.layer_norm(LN_EPS).unwrap();
        for row in y.data_mut().chunks_mut(d) {
            for ((v, &g), &b) in row.iter_mut().zip(n.gamma.data()).zip(n.beta.data()) {
                *v = *v * g + b;
            }
        }
        y
    };
    let add_row = |x: &mut Tensor, b: &[f32]| {
        for row in x.data_mut().chunks_mut(b.len()) {
            for (v, &b) in row.iter_mut().zip(b) {
                *v += b;
            }
        }
    };
    let feats: Vec<f32> = timestep_features(lat.t, d)
        .into_iter()
        .map(|x| x as f32)
        .collect();
    let temb = Tensor::new([1, d], feats)
        .unwrap()
        .matmul(&m.time_proj)
        .unwrap();
    let cemb = c
        .embedding()
        .clone()
        .reshape([1, d])
        .unwrap()
        .matmul(&m.cond_proj)
        .unwrap();
    let emb = temb.add(&cemb).unwrap();

    let mut h = latent_to_tokens(&lat.x).unwrap();
    add_row(&mut h, emb.data());
    let (p, f) = (v.height * v.width, v.frames);
    let rows_of = |mode: AttentionMode, b: usize| -> Vec<usize> {
        match mode {
            AttentionMode::Spatial => (0..p).map(|s| b * p + s).collect(),
            AttentionMode::Temporal => (0..f).map(|fr| fr * p + b).collect(),
            AttentionMode::Full3d => (0..f * p).collect(),
        }
    };
    let blocks_of = |mode: AttentionMode| match mode {
        AttentionMode::Spatial => f,
        AttentionMode::Temporal => p,
        AttentionMode::Full3d => 1,
    };
    let dec_start = cfg.encoder_blocks + cfg.bottleneck_blocks;
    let mut skips = Vec::new();
    let mut layer = 0;
    for (bi, block) in m.blocks.iter().enumerate() {
        if bi >= dec_start {
            h.add_assign(&skips[cfg.skip_source(bi - dec_start)])
                .unwrap();
        }
        for sub in &block.attns {
            let n = norm(&sub.norm, &h);
            let mut out = Tensor::zeros(n.dims().to_vec());
            for b in 0..blocks_of(sub.mode) {
                let rows = rows_of(sub.mode, b);
                let x = Tensor::new(
                    [rows.len(), d],
                    rows.iter().flat_map(|&r| n.row(r).to_vec()).collect(),
                )
                .unwrap();
                let y = if layer == bypass {
                    x.matmul(&sub.weights.w_v)
                        .unwrap()
                        .matmul(&sub.weights.w_out)
                        .unwrap()
                } else {
                    attend(&x, &sub.weights, sub.mode, &Treatment::Native)
                        .unwrap()
                        .out
                };
                for (k, &r) in rows.iter().enumerate() {
                    out.data_mut()[r * d..(r + 1) * d].copy_from_slice(y.row(k));
                }
            }
            h.add_assign(&out).unwrap();
            layer += 1;
        }
        let n = norm(&block.mlp_norm, &h);
        let mut z = n.matmul(&block.mlp.w1).unwrap();
        add_row(&mut z, block.mlp.b1.data());
        let a = z.map(|z| z / (1.0 + (-z).exp())).unwrap();
        let mut y = a.matmul(&block.mlp.w2).unwrap();
        add_row(&mut y, block.mlp.b2.data());
        h.add_assign(&y).unwrap();
        if bi < cfg.encoder_blocks {
            skips.push(h.clone());
        }
    }
    let mut eps = norm(&m.final_norm, &h).matmul(&m.final_proj).unwrap();
    add_row(&mut eps, m.final_bias.data());
    tokens_to_latent(&eps, v).unwrap()
}

fn replacement_oracles() -> Outcome {
    let model = ToyVdm::new(ModelConfig::default()).map_err(err)?;
    let cfg = model.config().clone();
    let mut rng = SeededRng::new(2);
    let lat = VideoLatent {
        x: gaussian(&mut rng, cfg.latent_dims()),
        t: 600,
    };
    let c = model.embed_prompt("a fox running through snow");
    let mut worst = 0.0f32;
    for layer in 0..model.n_layers() {
        let mut reg = model.registry();
        reg.register(Registration::Act {
            layer,
            action: Action::Replace(Replacement::Identity),
        })
        .map_err(err)?;
        let hooked = model.predict_noise(&lat, &c, &mut reg).map_err(err)?;
        let diff = hooked
            .max_abs_diff(&bypassed_forward(&model, &lat, &c, layer))
            .map_err(err)?;
        check(diff <= 1e-6, || {
            format!("identity at layer {layer}: |diff| {diff}")
        })?;
        worst = worst.max(diff);
    }
    // Uniform: every output row of A·V (and of the projected output) is the same.
    let mut row_var = 0.0f64;
    for n in [2usize, 7, 64] {
        let x = gaussian(&mut rng, [n, cfg.channels]);
        let w = &model.blocks[0].attns[0].weights;
        let o = attend(
            &x,
            w,
            AttentionMode::Spatial,
            &Treatment::Replace(Replacement::Uniform),
        )
        .map_err(err)?;
        for t in [&o.mixed, &o.out] {
            for col in 0..cfg.channels {
                let vals: Vec<f64> = t.rows().map(|r| r[col] as f64).collect();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                row_var = row_var.max(var);
            }
        }
    }
    check(row_var <= 1e-6, || {
        format!("uniform output row variance {row_var}")
    })?;
    Ok(format!(
        "identity max |diff| {worst:e} over {} layers; uniform row variance {row_var:e}",
        model.n_layers()
    ))
}

// ---------------------------------------------------------------- 3

fn replay_identity() -> Outcome {
    let model = ToyVdm::new(ModelConfig::default()).map_err(err)?;
    let sched = NoiseSchedule::new(1000, 10).map_err(err)?;
    let req = SampleRequest::new("a red square moving right", 5);
    let mut rec = model.registry();
    rec.record_all(Capture::Maps);
    let first = sample(&model, &req, &sched, &mut rec).map_err(err)?;
    let mut inj = model.registry();
    for layer in 0..model.n_layers() {
        inj.register(Registration::Act {
            layer,
            action: Action::Inject,
        })
        .map_err(err)?;
    }
    let n_records = first.records.len();
    inj.load_bank(first.records);
    let replay = sample(&model, &req, &sched, &mut inj).map_err(err)?;
    check(replay.latent.bit_eq(&first.latent), || {
        "replayed latent differs".into()
    })?;

    let p = "a cat sitting on a sofa";
    let edit =
        adapt::edit_generated(&model, p, p, 3, &sched, &EditConfig::with_rho(1.0)).map_err(err)?;
    check(edit.target_video.bit_eq(&edit.source_video), || {
        "self-edit video differs".into()
    })?;
    check(edit.target_latent.bit_eq(&edit.source_latent), || {
        "self-edit latent differs".into()
    })?;
    Ok(format!(
        "replay of {n_records} maps bit-identical; self-edit over {} layers bit-identical",
        edit.layers.len()
    ))
}

// ---------------------------------------------------------------- 4

fn direct(spec: &GuidanceSpec, e: &[Vec<f32>; 5], i: usize) -> f32 {
    let (w, l) = (spec.omega, spec.lambda);
    let [u_a, c_a, c_u, c_i, u_i] = [e[0][i], e[1][i], e[2][i], e[3][i], e[4][i]];
    match (spec.strategy, spec.combo) {
        (Strategy::Eq5, Combo::AMinusI) => (u_a + w * (c_a - u_a)) + l * (c_a - c_i),
        (Strategy::Eq5, Combo::UMinusA) => (u_a + w * (c_a - u_a)) + l * (c_u - c_a),
        (Strategy::Eq5, Combo::UMinusI) => (u_a + w * (c_a - u_a)) + l * (c_u - c_i),
        (Strategy::S1, _) => u_a + w * (c_a - u_i),
        (Strategy::S2, _) => (u_a + w * (c_a - u_a)) + l * (c_a - c_i),
        (Strategy::S3, _) => (u_a + w * (c_u - u_a)) + l * (c_a - c_i),
        (Strategy::S4, _) => u_a + w * (c_u - u_a),
        _ => u_a + w * (c_a - u_a),
    }
}

fn guidance_algebra() -> Outcome {
    let mut rng = SeededRng::new(4);
    let mut specs = Vec::new();
    for c in [Combo::AMinusI, Combo::UMinusA, Combo::UMinusI] {
        specs.push(GuidanceSpec::eq5(0.0, 0.0, c));
    }
    for s in [Strategy::S1, Strategy::S2, Strategy::S3, Strategy::S4] {
        specs.push(GuidanceSpec {
            strategy: s,
            ..GuidanceSpec::cfg(0.0)
        });
    }
    let order = [
        Branch::UncondNative,
        Branch::CondNative,
        Branch::CondUniform,
        Branch::CondIdentity,
        Branch::UncondIdentity,
    ];
    let mut compared = 0usize;
    for set in 0..100 {
        let dims = [2 + rng.below(3), 3, 2, 2];
        let scale = [1e-3f32, 1.0, 50.0][set % 3];
        let e: [Tensor; 5] =
            std::array::from_fn(|_| gaussian(&mut rng, dims).scale(scale).unwrap());
        let mut est = BranchEstimates::new();
        for (b, t) in order.iter().zip(&e) {
            est.insert(*b, t.clone());
        }
        let raw: [Vec<f32>; 5] = std::array::from_fn(|k| e[k].data().to_vec());
        for base in &specs {
            let spec = GuidanceSpec {
                omega: 1.0 + 15.0 * rng.uniform() as f32,
                lambda: 3.0 * rng.uniform() as f32 - 0.5,
                ..*base
            };
            let got = ie_guidance_combine(&est, &spec).map_err(err)?;
            for (i, g) in got.data().iter().enumerate() {
                let want = direct(&spec, &raw, i);
                check(g.to_bits() == want.to_bits(), || {
                    format!("{} set {set} elem {i}: {g} vs {want}", spec.label())
                })?;
                compared += 1;
            }
        }
    }
    let model = ToyVdm::new(ModelConfig::default()).map_err(err)?;
    let sched = NoiseSchedule::new(1000, 10).map_err(err)?;
    let plain = sample(
        &model,
        &SampleRequest::new("a dog on a beach", 8),
        &sched,
        &mut model.registry(),
    )
    .map_err(err)?;
    for c in [Combo::AMinusI, Combo::UMinusA, Combo::UMinusI] {
        let req = SampleRequest {
            guidance: GuidanceSpec::eq5(9.0, 0.0, c),
            target_layer: Some(3),
            ..SampleRequest::new("a dog on a beach", 8)
        };
        let out = sample(&model, &req, &sched, &mut model.registry()).map_err(err)?;
        check(out.latent.bit_eq(&plain.latent), || {
            format!("eq5 {c:?} with lambda 0 differs from cfg")
        })?;
    }
    Ok(format!(
        "{compared} elements at 0 ULP over 7 strategies x 100 sets; eq5 lambda=0 == cfg end to end"
    ))
}

// ---------------------------------------------------------------- 5

fn run_cli(args: &[&str], workers: usize, out: &Path) -> std::result::Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_ieadapt"))
        .args(args)
        .args(["--workers", &workers.to_string(), "--out"])
        .arg(out)
        .env_remove("IEADAPT_SEED")
        .output()
        .map_err(err)?;
    check(status.status.success(), || {
        format!(
            "ieadapt {args:?} failed: {}",
            String::from_utf8_lossy(&status.stderr)
        )
    })
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let cmds: [&[&str]; 3] = [
        &[
            "generate",
            "--prompt",
            "a red square moving right",
            "--seed",
            "11",
            "--steps",
            "10",
        ],
        &[
            "enhance",
            "--prompt",
            "a red square moving right",
            "--seed",
            "11",
            "--steps",
            "10",
            "--combo",
            "UI",
            "--strategy",
            "eq5",
        ],
        &[
            "edit",
            "--src-prompt",
            "a cat",
            "--dst-prompt",
            "a dog",
            "--seed",
            "11",
            "--steps",
            "10",
            "--rho",
            "0.5",
        ],
    ];
    let mut files = 0;
    for (k, args) in cmds.iter().enumerate() {
        let runs = [(1usize, "a"), (1, "b"), (4, "c")];
        let mut dumps = Vec::new();
        for (w, tag) in runs {
            let out = tmp.path().join(format!("{k}-{tag}"));
            run_cli(args, w, &out)?;
            dumps.push(dir_bytes(&out));
        }
        check(!dumps[0].is_empty(), || {
            format!("{} wrote nothing", args[0])
        })?;
        check(dumps[0] == dumps[1], || {
            format!("{} differs between two runs", args[0])
        })?;
        check(dumps[0] == dumps[2], || {
            format!("{} differs between 1 and 4 workers", args[0])
        })?;
        files += dumps[0].len();
    }
    Ok(format!(
        "generate/enhance/edit: {files} files bit-identical across reruns and workers 1/4"
    ))
}

// ---------------------------------------------------------------- 6

fn blend_endpoints() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let cfg = ModelConfig::default();
    let sched = NoiseSchedule::new(1000, 10).map_err(err)?;
    let base = SweepSpec {
        prompts: vec!["a red square moving right".into()],
        seeds: vec![2],
        ..SweepSpec::default()
    };
    let single = SweepSpec {
        kind: SweepKind::SingleLayer,
        ..base.clone()
    };
    let blend = SweepSpec {
        kind: SweepKind::Blend,
        alphas: vec![0.0, 1.0],
        ..base
    };
    let a = run_sweep(&single, &cfg, &sched, tmp.path().join("single"), 4).map_err(err)?;
    let b = run_sweep(&blend, &cfg, &sched, tmp.path().join("blend"), 4).map_err(err)?;
    let video = |root: &str, id: &str| {
        iead::read(
            tmp.path()
                .join(root)
                .join("runs")
                .join(id)
                .join("video.iead"),
        )
    };
    let mut pairs = 0;
    for layer in 0..ToyVdm::new(cfg.clone()).map_err(err)?.n_layers() {
        for (alpha, m) in [("0", "U"), ("1", "I")] {
            let bv = video("blend", &format!("p000-s2-L{layer}-blend{alpha}")).map_err(err)?;
            let sv = video("single", &format!("p000-s2-L{layer}-{m}")).map_err(err)?;
            check(bv.bit_eq(&sv), || {
                format!("layer {layer}: blend alpha {alpha} != {m}")
            })?;
            pairs += 1;
        }
    }
    check(
        a.records.iter().chain(&b.records).all(|r| r.is_ok()),
        || "a sweep run failed".into(),
    )?;
    for n in [2usize, 3, 8, 64] {
        let hs: Vec<f64> = [0.0f32, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&al| {
                let m = Replacement::blend(al).unwrap().materialize(n).unwrap();
                entropy(&AttentionMap::new(m, AttentionMode::Spatial).unwrap()).unwrap()
            })
            .collect();
        check(hs.windows(2).all(|w| w[1] < w[0]), || {
            format!("N={n}: entropies {hs:?} not strictly decreasing")
        })?;
    }
    Ok(format!("{pairs} endpoint runs bit-identical; blend entropy strictly decreasing for N in {{2,3,8,64}}"))
}

// ---------------------------------------------------------------- 7

fn inversion() -> Outcome {
    let model = ToyVdm::new(ModelConfig::default()).map_err(err)?;
    let prompt = "a red square moving right";
    let cond = model.embed_prompt(prompt);
    let mut lines = Vec::new();
    for seed in [0u64, 1, 2] {
        let x0 = sample(
            &model,
            &SampleRequest::new(prompt, seed),
            &NoiseSchedule::new(1000, 25).map_err(err)?,
            &mut model.registry(),
        )
        .map_err(err)?
        .latent;
        let mut errs = Vec::new();
        for steps in [10usize, 25, 50] {
            let sched = NoiseSchedule::new(1000, steps).map_err(err)?;
            let traj =
                ddim_invert(&model, &x0, &cond, &sched, &mut model.registry()).map_err(err)?;
            let rec =
                adapt::reconstruct(&model, traj.last().unwrap(), &cond, &sched).map_err(err)?;
            errs.push(x0.relative_l2(&rec).map_err(err)?);
        }
        check(errs[1] < errs[0] && errs[2] < errs[1], || {
            format!("seed {seed}: errors {errs:?} not decreasing")
        })?;
        lines.push(format!(
            "s{seed} {:.4}/{:.4}/{:.4}",
            errs[0], errs[1], errs[2]
        ));
    }
    Ok(format!(
        "relative L2 at 10/25/50 steps: {}",
        lines.join(", ")
    ))
}

// ---------------------------------------------------------------- 8

fn entropy_energy_report() -> Outcome {
    let model = ToyVdm::new(ModelConfig::default()).map_err(err)?;
    let sched = NoiseSchedule::new(1000, 10).map_err(err)?;
    let prompts: Vec<String> = [
        "a red square moving right",
        "a cat",
        "fireworks over a city",
    ]
    .map(String::from)
    .to_vec();
    let rep =
        entropy_report(&model, &prompts, 0, &sched, ProbePolicy::FirstStep, &[]).map_err(err)?;
    for col in [
        "entropy_pct",
        "energy_out",
        "energy_out_uniform",
        "energy_out_identity",
        "containment",
    ] {
        check(ENTROPY_CSV_HEADER.split(',').any(|c| c == col), || {
            format!("column {col} missing")
        })?;
    }
    check(rep.summary.len() == model.n_layers(), || {
        "summary does not cover every layer".into()
    })?;
    check(rep.rows.len() == model.n_layers() * prompts.len(), || {
        "rows missing".into()
    })?;
    for (_, s) in &rep.rows {
        check(s.identity_energy_exact, || {
            format!("E(IV) != E(V) on layer {}", s.layer_index)
        })?;
        check((0.0..=1.0).contains(&s.containment), || {
            format!("containment {} out of range", s.containment)
        })?;
        check((0.0..=1.0).contains(&s.entropy_pct), || {
            format!("entropy_pct {} out of range", s.entropy_pct)
        })?;
    }
    let csv = rep.summary_csv();
    check(csv.lines().count() == model.n_layers() + 1, || {
        "summary csv row count".into()
    })?;
    let fr: Vec<String> = rep
        .summary
        .iter()
        .map(|s| format!("{:.2}", s.containment))
        .collect();
    Ok(format!(
        "E(IV)=E(V) exact on all {} rows; containment per layer [{}]",
        rep.rows.len(),
        fr.join(" ")
    ))
}

// ---------------------------------------------------------------- 9

fn directional_gate() -> Outcome {
    let model = ToyVdm::new(ModelConfig::default()).map_err(err)?;
    let sched = NoiseSchedule::new(1000, 25).map_err(err)?;
    let temporal: Vec<usize> = model
        .layers()
        .iter()
        .filter(|l| l.mode == AttentionMode::Temporal)
        .map(|l| l.index)
        .collect();

    // Hard gate: temporal outputs are frame-constant under all-U.
    let mut reg = model.registry();
    for &layer in &temporal {
        reg.register(Registration::Act {
            layer,
            action: Action::Replace(Replacement::Uniform),
        })
        .map_err(err)?;
        reg.register(Registration::Record {
            layer,
            capture: Capture::Full,
        })
        .map_err(err)?;
    }
    let mut rng = SeededRng::new(9);
    let lat = VideoLatent {
        x: gaussian(&mut rng, model.config().latent_dims()),
        t: 800,
    };
    model
        .predict_noise(&lat, &model.embed_prompt("a bird flying"), &mut reg)
        .map_err(err)?;
    let w_out = |layer: usize| {
        let info = model.layers()[layer];
        let sub = &model.blocks[info.block]
            .attns
            .iter()
            .find(|a| a.mode == info.mode)
            .unwrap();
        sub.weights.w_out.clone()
    };
    let mut worst = 0.0f32;
    for r in reg.records() {
        let out = r
            .mixed
            .as_ref()
            .unwrap()
            .matmul(&w_out(r.layer_index))
            .map_err(err)?;
        for t in [r.mixed.as_ref().unwrap(), &out] {
            for f in 1..t.dims()[0] {
                for (a, b) in t.row(f).iter().zip(t.row(0)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    check(!reg.records().is_empty(), || "no temporal records".into())?;
    check(worst <= 1e-6, || {
        format!("temporal output varies across frames by {worst}")
    })?;

    // Soft gate: motion under all-temporal-U vs baseline, 10 seeds.
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let req = SampleRequest::new("a red square moving right", seed);
        let base = sample(&model, &req, &sched, &mut model.registry())
            .map_err(err)?
            .latent;
        let mut reg = model.registry();
        for &layer in &temporal {
            reg.register(Registration::Act {
                layer,
                action: Action::Replace(Replacement::Uniform),
            })
            .map_err(err)?;
        }
        let pert = sample(&model, &req, &sched, &mut reg).map_err(err)?.latent;
        let mb = motion_magnitude(&model.decode(&base).map_err(err)?).map_err(err)?;
        let mp = motion_magnitude(&model.decode(&pert).map_err(err)?).map_err(err)?;
        if mp <= mb {
            wins += 1;
        }
        detail.push(format!("{:+.3}", mp - mb));
    }
    let msg = format!(
        "frame-constant max dev {worst:e}; motion <= baseline in {wins}/10 seeds (delta {})",
        detail.join(" ")
    );
    check(wins >= 8, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 10

fn trainer() -> Outcome {
    let sched = NoiseSchedule::default();
    let mut worst = 0.0f64;
    for heads in [1usize, 2] {
        let model = ToyVdm::new(ModelConfig {
            heads,
            ..ModelConfig::tiny(5)
        })
        .map_err(err)?;
        let mut rng = SeededRng::new(10 + heads as u64);
        let ex = draw_example(model.config(), &sched, &mut rng, 0.0).map_err(err)?;
        let params = Params::from_model(&model);
        let (_, grads) = params.loss_and_grad(&ex).map_err(err)?;
        let h = 1e-5;
        for (pi, name) in params.names().iter().enumerate() {
            let mut fd = vec![0.0; grads[pi].len()];
            for (j, slot) in fd.iter_mut().enumerate() {
                let mut p = params.clone();
                p.values_mut()[pi][j] += h;
                let up = p.loss(&ex).map_err(err)?;
                p.values_mut()[pi][j] -= 2.0 * h;
                let down = p.loss(&ex).map_err(err)?;
                *slot = (up - down) / (2.0 * h);
            }
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let diff: Vec<f64> = fd.iter().zip(&grads[pi]).map(|(a, b)| a - b).collect();
            let scale = norm(&fd).max(norm(&grads[pi]));
            if scale > 1e-10 {
                let rel = norm(&diff) / scale;
                check(rel <= 1e-3, || {
                    format!("heads={heads} {name}: relative error {rel:e}")
                })?;
                worst = worst.max(rel);
            }
        }
    }
    let mut model = ToyVdm::new(ModelConfig::tiny(42)).map_err(err)?;
    let report = train_toy(&mut model, &sched, &TrainConfig::default()).map_err(err)?;
    check(report.final_loss < report.initial_loss, || {
        format!("loss {} -> {}", report.initial_loss, report.final_loss)
    })?;
    Ok(format!(
        "max block relative gradient error {worst:.2e}; seed 42 loss {:.4} -> {:.4} over 2000 steps",
        report.initial_loss, report.final_loss
    ))
}

// ---------------------------------------------------------------- 11

fn stats(pcts: &[f64]) -> Vec<LayerStats> {
    pcts.iter()
        .enumerate()
        .map(|(i, &p)| LayerStats {
            layer_index: i,
            mode: AttentionMode::Spatial,
            n_tokens: 8,
            timestep: 0,
            entropy: p * max_entropy(8),
            entropy_pct: p,
            energy_map: 1.0,
            energy_out: 0.0,
            energy_out_uniform: 0.0,
            energy_out_identity: 0.0,
            identity_energy_exact: true,
            containment: 1.0,
        })
        .collect()
}

fn selection() -> Outcome {
    let mut rng = SeededRng::new(11);
    let mut ties = 0;
    for case in 0..1000 {
        let n = 1 + rng.below(24);
        // Coarse levels make ties common.
        let levels = if case % 2 == 0 { 4 } else { 1000 };
        let pcts: Vec<f64> = (0..n)
            .map(|_| rng.below(levels) as f64 / levels as f64)
            .collect();
        let distinct: BTreeSet<u64> = pcts.iter().map(|p| p.to_bits()).collect();
        if distinct.len() < n {
            ties += 1;
        }
        let s = stats(&pcts);

        // select_max: first index holding the maximum.
        let mut best = 0;
        for i in 1..n {
            if pcts[i] > pcts[best] {
                best = i;
            }
        }
        let got = select_max(&s).map_err(err)?;
        check(got == best, || {
            format!("case {case}: select_max {got} vs {best} for {pcts:?}")
        })?;

        // bottom fraction: stable sort by (pct, index), take floor(rho*n).
        for rho in [
            0.1,
            0.25,
            0.29,
            0.5,
            0.65,
            0.75,
            1.0,
            rng.uniform().max(1e-3),
        ] {
            let k = ((rho * n as f64) + 1e-9).floor() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| pcts[a].partial_cmp(&pcts[b]).unwrap().then(a.cmp(&b)));
            let want: BTreeSet<usize> = idx.into_iter().take(k).collect();
            match select_bottom_fraction(&s, rho) {
                Ok(got) => check(got == want, || {
                    format!("case {case} rho {rho}: {got:?} vs {want:?}")
                })?,
                Err(_) => check(k == 0, || {
                    format!("case {case} rho {rho}: unexpected error with k={k}")
                })?,
            }
            check(bottom_count(n, rho) == k, || "bottom_count mismatch".into())?;
        }
    }
    Ok(format!(
        "1000 vectors ({ties} with ties) agree with sort oracles"
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("entropy/energy bounds", bounds),
        ("replacement oracles", replacement_oracles),
        ("replay and self-edit identity", replay_identity),
        ("guidance algebra", guidance_algebra),
        ("determinism across runs and workers", determinism),
        ("blend endpoints and monotone entropy", blend_endpoints),
        ("inversion error decreases with steps", inversion),
        ("entropy/energy report", entropy_energy_report),
        ("temporal-U frame constancy and motion", directional_gate),
        ("trainer gradients and loss", trainer),
        ("selection arithmetic", selection),
    ];
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    println!("acceptance: {} criteria", criteria.len());
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("criterion {id:>2} PASS  {name} ({secs:.1}s): {d}"),
            Err(d) => {
                println!("criterion {id:>2} FAIL  {name} ({secs:.1}s): {d}");
                failed.push(id);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
