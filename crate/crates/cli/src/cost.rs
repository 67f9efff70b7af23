use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use ditlab::arch::{ArchOverrides, PRESET_NAMES};
use ditlab::cost::{latency_bench, table_check, CheckSettings, CostReport, LatencyReport, COST_RESOLUTIONS};
use ditlab::train::{toy_model, train, SyntheticDataset, TrainConfig};
use ditlab::{preset, token_counts, ArchConfig, MacsMode};
use serde::{Deserialize, Serialize};

use crate::manifest::{config_error, create_out, csv_writer, load_spec, write_json, write_manifest};
use crate::{Common, EXIT_CHECK, EXIT_CONFIG, EXIT_RUNTIME};

fn parse_resolution(s: &str) -> Result<usize, String> {
    let r: usize = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if COST_RESOLUTIONS.contains(&r) {
        Ok(r)
    } else {
        Err(format!("resolution must be one of 256, 512, 1024 (got {r})"))
    }
}

// ---------------------------------------------------------------- cost-report

#[derive(Args)]
pub struct CostArgs {
    #[command(flatten)]
    common: Common,
    /// Preset name; repeat for several. Defaults to every preset.
    #[arg(long)]
    preset: Vec<String>,
    /// Architecture file (JSON overrides); repeat for several.
    #[arg(long, value_name = "FILE")]
    arch: Vec<std::path::PathBuf>,
    /// MAC counting mode.
    #[arg(long, value_parser = ["projection", "full"])]
    mode: Option<String>,
    /// Resolutions for the token table and latency run; repeat for several.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Vec<usize>,
    /// Time end-to-end DDIM sampling with this many runs (writes latency.json).
    #[arg(long, value_name = "RUNS")]
    latency_runs: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedArch {
    pub name: String,
    pub arch: ArchConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub entries: Vec<NamedArch>,
    pub mode: MacsMode,
    pub resolutions: Vec<usize>,
    #[serde(default)]
    pub latency: Option<LatencySpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatencySpec {
    pub runs: usize,
    pub ddim_steps: usize,
}

fn parse_mode(m: &str) -> Result<MacsMode> {
    m.parse::<MacsMode>().map_err(config_error)
}

fn cost_spec(a: &CostArgs) -> Result<CostSpec> {
    let mut spec = match &a.common.config {
        Some(p) => load_spec(p, "cost-report")?,
        None => CostSpec {
            entries: Vec::new(),
            mode: MacsMode::ProjectionOnly,
            resolutions: COST_RESOLUTIONS.to_vec(),
            latency: None,
        },
    };
    for name in &a.preset {
        spec.entries.push(NamedArch {
            name: name.clone(),
            arch: preset(name)?,
        });
    }
    for path in &a.arch {
        let o: ArchOverrides = load_spec(path, "arch")?;
        let name = o
            .name
            .clone()
            .or(o.preset.clone())
            .unwrap_or_else(|| path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        spec.entries.push(NamedArch { name, arch: o.resolve()? });
    }
    if spec.entries.is_empty() {
        for name in PRESET_NAMES {
            spec.entries.push(NamedArch {
                name: name.to_string(),
                arch: preset(name)?,
            });
        }
    }
    if let Some(m) = &a.mode {
        spec.mode = parse_mode(m)?;
    }
    if !a.resolution.is_empty() {
        spec.resolutions = a.resolution.clone();
    }
    if let Some(runs) = a.latency_runs {
        spec.latency = Some(LatencySpec { runs, ddim_steps: 50 });
    }
    Ok(spec)
}

pub fn cost_report(a: CostArgs) -> Result<u8> {
    let spec = cost_spec(&a)?;
    let out = &a.common.out;
    create_out(out)?;
    for e in &spec.entries {
        e.arch.validate().into_result().with_context(|| format!("config {}", e.name))?;
    }

    let mut w = csv_writer(out, "cost.csv")?;
    w.write_record(CostReport::CSV_HEADER)?;
    for e in &spec.entries {
        let r = CostReport::new(&e.name, &e.arch, spec.mode)?;
        w.write_record(r.csv_record())?;
        println!(
            "{:<14} params {:>14}  TMACs {}",
            e.name,
            r.params,
            r.macs
                .iter()
                .map(|(res, m)| format!("{res}:{:.3}", *m as f64 / 1e12))
                .collect::<Vec<_>>()
                .join("  ")
        );
    }
    w.flush()?;

    let mut w = csv_writer(out, "tokens.csv")?;
    w.write_record(["name", "resolution", "image", "text", "time", "condition", "self_attention"])?;
    for e in &spec.entries {
        for &res in &spec.resolutions {
            let t = token_counts(&e.arch, res)?;
            w.write_record([
                e.name.clone(),
                res.to_string(),
                t.image_tokens.to_string(),
                t.text_tokens.to_string(),
                t.time_tokens.to_string(),
                t.condition_tokens.to_string(),
                t.self_attention_tokens.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut outputs = vec!["cost.csv".to_string(), "tokens.csv".to_string()];
    if let Some(l) = &spec.latency {
        let mut reports: Vec<(String, LatencyReport)> = Vec::new();
        for e in &spec.entries {
            let r = latency_bench(&e.arch, e.arch.resolution, l.ddim_steps, l.runs)
                .with_context(|| format!("latency of {}", e.name))?;
            println!("{:<14} median {:.4} s over {} runs", e.name, r.median_seconds, r.runs.len());
            reports.push((e.name.clone(), r));
        }
        write_json(&out.join("latency.json"), &reports)?;
        outputs.push("latency.json".into());
    }
    write_manifest(out, "cost-report", &spec, &outputs)?;
    Ok(0)
}

// ---------------------------------------------------------------- build-check

#[derive(Args)]
pub struct BuildCheckArgs {
    #[command(flatten)]
    common: Common,
}

pub fn build_check(a: BuildCheckArgs) -> Result<u8> {
    let spec: CheckSettings = match &a.common.config {
        Some(p) => load_spec(p, "build-check")?,
        None => CheckSettings::default(),
    };
    let out = &a.common.out;
    create_out(out)?;
    let rows = table_check(&spec)?;
    let mut w = csv_writer(out, "build_check.csv")?;
    w.write_record([
        "preset",
        "params",
        "params_b",
        "table_params_b",
        "params_checked",
        "params_ok",
        "tmacs_256",
        "tmacs_512",
        "tmacs_1024",
        "table_tmacs_256",
        "table_tmacs_512",
        "table_tmacs_1024",
        "macs_checked",
        "macs_ok",
        "passed",
    ])?;
    let mut failed = 0;
    for r in &rows {
        let mut rec = vec![
            r.preset.clone(),
            r.params.to_string(),
            format!("{:.1}", r.params_b),
            format!("{:.2}", r.expected_params_b),
            r.params_checked.to_string(),
            r.params_ok.to_string(),
        ];
        rec.extend(r.tmacs.iter().map(|v| format!("{v:.4}")));
        rec.extend(r.expected_tmacs.iter().map(|v| format!("{v:.2}")));
        rec.extend([r.macs_checked.to_string(), r.macs_ok.to_string(), r.passed().to_string()]);
        w.write_record(&rec)?;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<12} {:>5.1}B (table {:>4.1})  TMACs {:>6.3} {:>6.3} {:>7.3} (table {:.2} {:.2} {:.2})  {verdict}",
            r.preset,
            r.params_b,
            r.expected_params_b,
            r.tmacs[0],
            r.tmacs[1],
            r.tmacs[2],
            r.expected_tmacs[0],
            r.expected_tmacs[1],
            r.expected_tmacs[2]
        );
        failed += usize::from(!r.passed());
    }
    w.flush()?;
    write_manifest(out, "build-check", &spec, &["build_check.csv".to_string()])?;
    if failed > 0 {
        eprintln!("{failed} row(s) outside tolerance");
        return Ok(EXIT_CHECK);
    }
    Ok(0)
}

// ---------------------------------------------------------------------- sweep

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Base preset when the spec gives none.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_parser = ["projection", "full"])]
    mode: Option<String>,
    /// Seed for toy training entries.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Factors shared by every entry.
    #[serde(default)]
    pub base: ArchOverrides,
    /// One override set per entry; empty runs the base alone.
    #[serde(default)]
    pub entries: Vec<ArchOverrides>,
    #[serde(default = "default_mode")]
    pub mode: MacsMode,
    /// Also train each entry on the toy scenes.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

fn default_mode() -> MacsMode {
    MacsMode::ProjectionOnly
}

#[derive(Serialize)]
struct EntryResult<'a> {
    name: &'a str,
    status: &'a str,
    detail: &'a str,
    arch: Option<&'a ArchConfig>,
    cost: Option<&'a CostReport>,
    final_loss: Option<f64>,
}

fn entry_name(o: &ArchOverrides, i: usize) -> String {
    o.name.clone().or(o.preset.clone()).unwrap_or_else(|| format!("entry-{i}"))
}

fn safe_file_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

pub fn sweep(a: SweepArgs) -> Result<u8> {
    let mut spec: SweepSpec = match &a.common.config {
        Some(p) => load_spec(p, "sweep")?,
        None => SweepSpec {
            mode: default_mode(),
            ..SweepSpec::default()
        },
    };
    if let Some(p) = &a.preset {
        spec.base.preset = Some(p.clone());
    }
    if let Some(m) = &a.mode {
        spec.mode = parse_mode(m)?;
    }
    if let (Some(seed), Some(t)) = (a.seed, spec.train.as_mut()) {
        t.seed = seed;
    }
    if let Some(t) = &spec.train {
        t.check()?;
    }
    let base = spec.base.resolve()?;
    let entries: Vec<(String, ArchOverrides)> = if spec.entries.is_empty() {
        vec![(entry_name(&spec.base, 0).replace("entry-0", "base"), ArchOverrides::default())]
    } else {
        spec.entries.iter().enumerate().map(|(i, o)| (entry_name(o, i), o.clone())).collect()
    };
    let mut seen = BTreeSet::new();
    for (n, _) in &entries {
        if !seen.insert(safe_file_name(n)) {
            return Err(config_error(format!("duplicate sweep entry name {n:?}")));
        }
    }

    let out = &a.common.out;
    let dir = out.join("entries");
    create_out(&dir)?;
    let mut rows = Vec::new();
    let (mut skipped, mut failed) = (0, 0);
    for (name, o) in &entries {
        let arch = match &o.preset {
            Some(_) => o.resolve(),
            None => Ok(o.apply(&base)),
        };
        let arch = arch.and_then(|c| c.validate().into_result().map(|_| c));
        let (status, detail, arch, cost, loss) = match arch {
            Err(e) => {
                skipped += 1;
                ("skipped", e.to_string(), None, None, None)
            }
            Ok(arch) => match run_entry(name, &arch, spec.mode, spec.train.as_ref()) {
                Ok((cost, loss)) => ("ok", String::new(), Some(arch), Some(cost), loss),
                Err(e) => {
                    failed += 1;
                    ("failed", format!("{e:#}"), Some(arch), None, None)
                }
            },
        };
        println!("{name:<16} {status} {detail}");
        write_json(
            &dir.join(format!("{}.json", safe_file_name(name))),
            &EntryResult {
                name,
                status,
                detail: &detail,
                arch: arch.as_ref(),
                cost: cost.as_ref(),
                final_loss: loss,
            },
        )?;
        rows.push((name.clone(), status, detail, cost, loss));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    write_sweep_csv(out, &rows, spec.mode)?;
    write_manifest(out, "sweep", &spec, &["sweep.csv".to_string(), "entries".to_string()])?;
    Ok(if failed > 0 {
        EXIT_RUNTIME
    } else if skipped > 0 {
        EXIT_CONFIG
    } else {
        0
    })
}

type SweepRow = (String, &'static str, String, Option<CostReport>, Option<f64>);

fn write_sweep_csv(out: &Path, rows: &[SweepRow], mode: MacsMode) -> Result<()> {
    let mut w = csv_writer(out, "sweep.csv")?;
    let mut header: Vec<&str> = CostReport::CSV_HEADER.to_vec();
    header.extend(["final_loss", "status", "detail"]);
    w.write_record(&header)?;
    for (name, status, detail, cost, loss) in rows {
        let mut rec = match cost {
            Some(c) => c.csv_record(),
            None => {
                let mut r = vec![name.clone()];
                r.extend(std::iter::repeat_n(String::new(), CostReport::CSV_HEADER.len() - 2));
                r.push(mode.label().to_string());
                r
            }
        };
        rec.push(loss.map(|l| format!("{l:.9e}")).unwrap_or_default());
        rec.push(status.to_string());
        rec.push(detail.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn run_entry(
    name: &str,
    arch: &ArchConfig,
    mode: MacsMode,
    tc: Option<&TrainConfig>,
) -> Result<(CostReport, Option<f64>)> {
    let cost = CostReport::new(name, arch, mode)?;
    let loss = match tc {
        None => None,
        Some(tc) => {
            let mut model = toy_model(arch, tc.seed)?;
            let log = train(&mut model, tc, vec![SyntheticDataset::train_split()])?;
            Some(log.tail_mean(100.min(tc.steps)))
        }
    };
    Ok((cost, loss))
}
