//! CSV and SVG emission for sweeps and entropy reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::svg::grouped_bar_chart;
use crate::adapt::{self, ProbePolicy, Registration};
use crate::attention::Replacement;
use crate::denoiser::ToyVdm;
use crate::error::{Error, Result};
use crate::infotheory::LayerStats;
use crate::sampler::{initial_noise, GuidanceSpec, GuidedStepper, NoiseSchedule};

use super::sweep::RunRecord;

pub const SWEEP_CSV_HEADER: &str =
    "run_id,prompt_id,seed,layer_set,mode_set,matrix,alpha,ssim,mse,\
motion_magnitude,motion_smoothness,subject_consistency,sharpness,entropy_pct_mean";

const METRICS: [&str; 6] = [
    "ssim",
    "mse",
    "motion_magnitude",
    "motion_smoothness",
    "subject_consistency",
    "sharpness",
];

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metric(r: &RunRecord, name: &str) -> Option<f64> {
    let m = r.metrics.as_ref()?;
    Some(match name {
        "ssim" => m.ssim,
        "mse" => m.mse,
        "motion_magnitude" => m.motion_magnitude,
        "motion_smoothness" => m.motion_smoothness,
        "subject_consistency" => m.subject_consistency,
        "sharpness" => m.sharpness,
        _ => return None,
    })
}

/// The sweep CSV, one row per record. Failed runs keep their identifying
/// columns and leave the measurements empty.
pub fn sweep_csv(records: &[RunRecord]) -> String {
    let mut s = String::new();
    s.push_str(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in records {
        let vals: Vec<String> = METRICS.iter().map(|m| opt(metric(r, m))).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&r.run_id),
            r.prompt_id,
            r.seed,
            csv_field(&r.layer_set()),
            csv_field(&r.mode_set),
            csv_field(&r.matrix),
            opt(r.alpha),
            vals.join(","),
            opt(r.entropy_pct_mean)
        );
    }
    s
}

/// Mean of each metric per `(layer set, matrix)`, shaped for a grouped bar
/// chart: categories are layer sets, series are matrices.
fn grouped(records: &[RunRecord], name: &str) -> (Vec<String>, Vec<(String, Vec<f64>)>) {
    let mut cats: Vec<String> = Vec::new();
    let mut series: Vec<String> = Vec::new();
    for r in records {
        let cat = match r.alpha {
            Some(a) => format!("{} a={a}", r.layer_set()),
            None => r.layer_set(),
        };
        if !cats.contains(&cat) {
            cats.push(cat);
        }
        if !series.contains(&r.matrix) {
            series.push(r.matrix.clone());
        }
    }
    let table = series
        .iter()
        .map(|m| {
            let vals = cats
                .iter()
                .map(|c| {
                    let v: Vec<f64> = records
                        .iter()
                        .filter(|r| &r.matrix == m)
                        .filter(|r| match r.alpha {
                            Some(a) => &format!("{} a={a}", r.layer_set()) == c,
                            None => &r.layer_set() == c,
                        })
                        .filter_map(|r| metric(r, name))
                        .collect();
                    if v.is_empty() {
                        f64::NAN
                    } else {
                        v.iter().sum::<f64>() / v.len() as f64
                    }
                })
                .collect();
            (m.clone(), vals)
        })
        .collect();
    (cats, table)
}

/// Writes `sweep.csv` and one `sweep-<metric>.svg` per metric into `out`.
pub fn emit_report(records: &[RunRecord], out: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Domain("no records to report".into()));
    }
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let csv = out.join("sweep.csv");
    fs::write(&csv, sweep_csv(records))?;
    let mut written = vec![csv];
    for m in METRICS {
        let (cats, series) = grouped(records, m);
        let p = out.join(format!("sweep-{m}.svg"));
        fs::write(
            &p,
            grouped_bar_chart(&format!("{m} (proxy) by layer set"), &cats, &series),
        )?;
        written.push(p);
    }
    Ok(written)
}

pub const ENTROPY_CSV_HEADER: &str =
    "prompt_id,layer_index,mode,n_tokens,timestep,entropy,entropy_pct,\
energy_map,energy_out,energy_out_uniform,energy_out_identity,e_iv_equals_e_v,containment";

/// Per-layer stats for every prompt, plus their per-layer means.
#[derive(Clone, Debug)]
pub struct EntropyReport {
    /// `(prompt index, stats)` in prompt then layer order.
    pub rows: Vec<(usize, LayerStats)>,
    pub summary: Vec<LayerStats>,
}

impl EntropyReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{ENTROPY_CSV_HEADER}\n");
        for (p, st) in &self.rows {
            push_stats_row(&mut s, &p.to_string(), st);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{}\n", ENTROPY_CSV_HEADER.replacen("prompt_id", "scope", 1));
        for st in &self.summary {
            push_stats_row(&mut s, "mean", st);
        }
        s
    }
}

fn push_stats_row(s: &mut String, scope: &str, st: &LayerStats) {
    let _ = writeln!(
        s,
        "{scope},{},{},{},{},{},{},{},{},{},{},{},{}",
        st.layer_index,
        st.mode,
        st.n_tokens,
        st.timestep,
        st.entropy,
        st.entropy_pct,
        st.energy_map,
        st.energy_out,
        st.energy_out_uniform,
        st.energy_out_identity,
        st.identity_energy_exact,
        st.containment
    );
}

/// Probes every prompt from `x_T(seed)` and aggregates per-layer entropy,
/// energies and the `E(UV) ≤ E(AV) ≤ E(IV)` containment fraction.
/// `forced` replacements are applied during the probe.
pub fn entropy_report(
    model: &ToyVdm,
    prompts: &[String],
    seed: u64,
    sched: &NoiseSchedule,
    policy: ProbePolicy,
    forced: &[(usize, Replacement)],
) -> Result<EntropyReport> {
    if prompts.is_empty() {
        return Err(Error::Config(
            "entropy report needs at least one prompt".into(),
        ));
    }
    let mut rows = Vec::new();
    for (pid, prompt) in prompts.iter().enumerate() {
        let mut reg = model.registry();
        for &(layer, r) in forced {
            reg.register(Registration::Act {
                layer,
                action: adapt::Action::Replace(r),
            })?;
        }
        let cond = model.embed_prompt(prompt);
        let stepper = GuidedStepper::new(
            model,
            cond.clone(),
            model.null_condition(),
            GuidanceSpec::default(),
            None,
        )?;
        let x_t = initial_noise(model.config(), seed);
        for st in adapt::probe_in(model, reg, &x_t, &cond, &stepper, sched, policy)? {
            rows.push((pid, st));
        }
    }
    let n = model.n_layers();
    let k = prompts.len() as f64;
    let summary = (0..n)
        .map(|l| {
            let g: Vec<&LayerStats> = rows
                .iter()
                .filter(|(_, s)| s.layer_index == l)
                .map(|(_, s)| s)
                .collect();
            let avg = |f: fn(&LayerStats) -> f64| g.iter().map(|s| f(s)).sum::<f64>() / k;
            LayerStats {
                layer_index: l,
                mode: g[0].mode,
                n_tokens: g[0].n_tokens,
                timestep: g[0].timestep,
                entropy: avg(|s| s.entropy),
                entropy_pct: avg(|s| s.entropy_pct),
                energy_map: avg(|s| s.energy_map),
                energy_out: avg(|s| s.energy_out),
                energy_out_uniform: avg(|s| s.energy_out_uniform),
                energy_out_identity: avg(|s| s.energy_out_identity),
                identity_energy_exact: g.iter().all(|s| s.identity_energy_exact),
                containment: avg(|s| s.containment),
            }
        })
        .collect();
    Ok(EntropyReport { rows, summary })
}

/// Writes `entropy.csv`, `entropy_summary.csv`, `entropy_pct.svg` and
/// `energy.svg`.
pub fn write_entropy_report(report: &EntropyReport, out: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let labels: Vec<String> = report
        .summary
        .iter()
        .map(|s| format!("{} {}", s.layer_index, s.mode))
        .collect();
    let col = |f: fn(&LayerStats) -> f64| report.summary.iter().map(f).collect::<Vec<f64>>();
    let files = [
        ("entropy.csv", report.csv()),
        ("entropy_summary.csv", report.summary_csv()),
        (
            "entropy_pct.svg",
            grouped_bar_chart(
                "attention entropy (% of maximum) per layer",
                &labels,
                &[
                    ("entropy_pct".into(), col(|s| s.entropy_pct)),
                    ("containment".into(), col(|s| s.containment)),
                ],
            ),
        ),
        (
            "energy.svg",
            grouped_bar_chart(
                "output energy per layer",
                &labels,
                &[
                    ("E(UV)".into(), col(|s| s.energy_out_uniform)),
                    ("E(AV)".into(), col(|s| s.energy_out)),
                    ("E(IV)".into(), col(|s| s.energy_out_identity)),
                ],
            ),
        ),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let p = out.join(name);
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}
