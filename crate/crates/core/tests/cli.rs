use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ieadapt::numcore::iead;

fn ieadapt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ieadapt"))
        .args(args)
        .current_dir(dir)
        .env_remove("IEADAPT_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TINY: &str = "model.frames=3\nmodel.channels=4\nmodel.height=4\nmodel.width=4\nsteps=3\n";

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

#[test]
fn generate_writes_tensors_and_frames() {
    let dir = tiny_dir();
    let o = ieadapt(
        &[
            "--config", "tiny.cfg", "generate", "--prompt", "a cat", "--seed", "4", "--out", "g",
            "--trace",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g = dir.path().join("g");
    assert_eq!(
        iead::read(g.join("generated-latent.iead")).unwrap().dims(),
        [3, 4, 4, 4]
    );
    assert_eq!(
        iead::read(g.join("generated-video.iead")).unwrap().dims(),
        [3, 3, 16, 16]
    );
    for f in 0..3 {
        let pgm = fs::read(g.join(format!("generated-frames/frame{f:03}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 256);
    }
    assert!(g.join("trace/x0.iead").exists());
    let manifest = fs::read_to_string(g.join("run.manifest")).unwrap();
    assert!(manifest.contains("seed=4\n") && manifest.contains("steps=3\n"));
}

#[test]
fn flags_override_config_and_env_seed_is_the_fallback() {
    let dir = tiny_dir();
    fs::write(dir.path().join("seeded.cfg"), format!("{TINY}seed=9\n")).unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_ieadapt"));
        c.args(args)
            .current_dir(dir.path())
            .env_remove("IEADAPT_SEED");
        if let Some(s) = env {
            c.env("IEADAPT_SEED", s);
        }
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let seed_of = |out: &str| {
        let m = fs::read_to_string(dir.path().join(out).join("run.manifest")).unwrap();
        m.lines()
            .find_map(|l| l.strip_prefix("seed="))
            .unwrap()
            .to_string()
    };
    run(
        &[
            "--config",
            "seeded.cfg",
            "generate",
            "--prompt",
            "x",
            "--out",
            "a",
        ],
        Some("7"),
    );
    assert_eq!(seed_of("a"), "9");
    run(
        &[
            "--config",
            "seeded.cfg",
            "generate",
            "--prompt",
            "x",
            "--seed",
            "2",
            "--out",
            "b",
        ],
        Some("7"),
    );
    assert_eq!(seed_of("b"), "2");
    run(
        &[
            "--config", "tiny.cfg", "generate", "--prompt", "x", "--out", "c",
        ],
        Some("7"),
    );
    assert_eq!(seed_of("c"), "7");
    run(
        &[
            "--config", "tiny.cfg", "generate", "--prompt", "x", "--out", "d",
        ],
        None,
    );
    assert_eq!(seed_of("d"), "0");
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tiny_dir();
    fs::write(dir.path().join("bad.cfg"), "omega=lots\n").unwrap();
    fs::write(dir.path().join("badmodel.cfg"), "model.frames=1\n").unwrap();
    fs::write(dir.path().join("garbage.cfg"), "no equals sign here\n").unwrap();
    let cases: [&[&str]; 7] = [
        &["generate", "--prompt", "x", "--out", "o", "--bogus"],
        &[
            "--config", "bad.cfg", "generate", "--prompt", "x", "--out", "o",
        ],
        &[
            "--config",
            "badmodel.cfg",
            "generate",
            "--prompt",
            "x",
            "--out",
            "o",
        ],
        &[
            "--config",
            "garbage.cfg",
            "generate",
            "--prompt",
            "x",
            "--out",
            "o",
        ],
        &[
            "--config",
            "tiny.cfg",
            "enhance",
            "--prompt",
            "x",
            "--strategy",
            "cfg",
            "--combo",
            "UI",
            "--out",
            "o",
        ],
        &[
            "--config", "tiny.cfg", "perturb", "--sweep", "sideways", "--out", "o",
        ],
        &["--config", "tiny.cfg", "generate", "--prompt", "x"],
    ];
    for args in cases {
        let o = ieadapt(args, dir.path());
        assert_eq!(
            code(&o),
            2,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let o = Command::new(env!("CARGO_BIN_EXE_ieadapt"))
        .args([
            "--config", "tiny.cfg", "generate", "--prompt", "x", "--out", "o",
        ])
        .current_dir(dir.path())
        .env("IEADAPT_SEED", "minus one")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tiny_dir();
    let o = ieadapt(
        &[
            "--config",
            "tiny.cfg",
            "invert",
            "--video",
            "missing.iead",
            "--prompt",
            "x",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(dir.path().join("junk.iead"), b"not a tensor").unwrap();
    let o = ieadapt(
        &[
            "--config",
            "tiny.cfg",
            "edit",
            "--src-prompt",
            "a",
            "--dst-prompt",
            "b",
            "--real",
            "junk.iead",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
    // rho too small to select any layer out of ten.
    let o = ieadapt(
        &[
            "--config",
            "tiny.cfg",
            "edit",
            "--src-prompt",
            "a",
            "--dst-prompt",
            "b",
            "--rho",
            "0.01",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn real_edit_and_inversion_round_trip_through_files() {
    let dir = tiny_dir();
    let ok = |args: &[&str]| {
        let o = ieadapt(args, dir.path());
        assert_eq!(
            code(&o),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    };
    ok(&[
        "--config",
        "tiny.cfg",
        "synth-clip",
        "--color",
        "green",
        "--vx",
        "-1",
        "--out",
        "clip.iead",
    ]);
    ok(&[
        "--config",
        "tiny.cfg",
        "invert",
        "--video",
        "clip.iead",
        "--prompt",
        "a green square moving left",
        "--out",
        "inv",
    ]);
    assert!(dir.path().join("inv/xT.iead").exists());
    assert_eq!(
        fs::read_dir(dir.path().join("inv/trajectory"))
            .unwrap()
            .count(),
        4
    );
    let m = fs::read_to_string(dir.path().join("inv/invert.manifest")).unwrap();
    assert!(m.lines().any(|l| l.starts_with("relative_l2=")));
    let out = ok(&[
        "--config",
        "tiny.cfg",
        "edit",
        "--src-prompt",
        "a green square moving left",
        "--dst-prompt",
        "a red square moving left",
        "--real",
        "clip.iead",
        "--layers",
        "0,2-3",
        "--out",
        "ed",
    ]);
    assert!(out.contains("injected layers 0,2,3"), "{out}");
    let m = fs::read_to_string(dir.path().join("ed/edit.manifest")).unwrap();
    assert!(m.contains("source=clip.iead\n") && m.contains("omega=unguided\n"));
}

#[test]
fn train_then_generate_with_saved_weights() {
    let dir = tiny_dir();
    let o = ieadapt(
        &[
            "--config",
            "tiny.cfg",
            "train-toy",
            "--steps",
            "5",
            "--lr",
            "1e-3",
            "--seed",
            "42",
            "--out",
            "w",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("w/loss.csv").exists());
    let a = ieadapt(
        &[
            "--weights",
            "w",
            "generate",
            "--prompt",
            "x",
            "--steps",
            "3",
            "--out",
            "a",
        ],
        dir.path(),
    );
    let b = ieadapt(
        &[
            "--config", "tiny.cfg", "generate", "--prompt", "x", "--out", "b",
        ],
        dir.path(),
    );
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(code(&b), 0);
    let la = iead::read(dir.path().join("a/generated-latent.iead")).unwrap();
    let lb = iead::read(dir.path().join("b/generated-latent.iead")).unwrap();
    assert_eq!(la.dims(), lb.dims());
    assert!(!la.bit_eq(&lb), "trained weights should change the sample");
}

#[test]
fn perturb_and_entropy_report_write_reports() {
    let dir = tiny_dir();
    fs::write(
        dir.path().join("prompts.txt"),
        "# two prompts\na cat\na dog\n",
    )
    .unwrap();
    let o = ieadapt(
        &[
            "--config",
            "tiny.cfg",
            "perturb",
            "--sweep",
            "single",
            "--matrix",
            "U",
            "--layers",
            "1,3",
            "--prompts",
            "prompts.txt",
            "--seeds",
            "0-1",
            "--out",
            "p",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        stdout.starts_with("8 runs (8 executed, 0 failed), 4 baselines"),
        "{stdout}"
    );
    let csv = fs::read_to_string(dir.path().join("p/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    let again = ieadapt(
        &[
            "--config",
            "tiny.cfg",
            "perturb",
            "--sweep",
            "single",
            "--matrix",
            "U",
            "--layers",
            "1,3",
            "--prompts",
            "prompts.txt",
            "--seeds",
            "0-1",
            "--out",
            "p",
        ],
        dir.path(),
    );
    assert!(String::from_utf8_lossy(&again.stdout).starts_with("8 runs (0 executed"));
    assert_eq!(
        fs::read_to_string(dir.path().join("p/sweep.csv")).unwrap(),
        csv
    );

    let o = ieadapt(
        &[
            "--config",
            "tiny.cfg",
            "perturb",
            "--sweep",
            "multi",
            "--layers",
            "temporal_only,top50_entropy",
            "--prompts",
            "prompts.txt",
            "--out",
            "m",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = ieadapt(
        &[
            "--config",
            "tiny.cfg",
            "entropy-report",
            "--prompts",
            "prompts.txt",
            "--policy",
            "mean",
            "--out",
            "e",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "entropy.csv",
        "entropy_summary.csv",
        "entropy_pct.svg",
        "energy.svg",
    ] {
        assert!(dir.path().join("e").join(f).exists(), "{f}");
    }
}
