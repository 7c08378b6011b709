//! `grdo`: generate datasets, train, sweep α, compare objectives, evaluate
//! checkpoints and summarise sweep tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use grdo_core::checkpoint::load_checkpoint;
use grdo_core::data::{self, GenConfig};
use grdo_core::metrics::{attribute_groups, evaluate};
use grdo_core::trainer::{self, load_data, write_run, RunConfig};
use grdo_core::Error;

const SEED_ENV: &str = "GRDO_SEED";

#[derive(Parser, Debug)]
#[command(name = "grdo", version, about = "KL-regularised group DRO experiments on synthetic grouped volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set dro.alpha=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; nothing is written outside it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed override (takes precedence over GRDO_SEED and the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train.jsonl and val.jsonl from a generator config or preset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Built-in preset used when no --config is given.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train one run per seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train GDRO at every α of the config for every seed.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Train WCE, focal and GDRO at every α for every seed.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a JSONL dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample attribute defining evaluation groups (default: site or gender).
        #[arg(long)]
        attribute: Option<String>,
    },
    /// Turn a sweep CSV into per-α summary and long-format tables.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Config-class core errors exit 1, everything else 2.
fn classify(run: &str, e: Error) -> Failure {
    match e {
        Error::Config(_) => Failure::Config(anyhow!("{e}")),
        Error::Divergence { step, .. } => Failure::Runtime(anyhow!("run {run} failed at step {step}: {e}")),
        other => Failure::Runtime(anyhow!("run {run} failed: {other}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, e) = match &f {
                Failure::Config(e) => ("config error", e),
                Failure::Runtime(e) => ("error", e),
            };
            eprintln!("{kind}: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { common, preset } => cmd_generate(&common, preset.as_deref()),
        Command::Train { common } => cmd_train(&common),
        Command::Sweep { common } => cmd_sweep(&common),
        Command::Compare { common } => cmd_compare(&common),
        Command::Evaluate {
            common,
            checkpoint,
            data,
            attribute,
        } => cmd_evaluate(&common, &checkpoint, &data, attribute),
        Command::Report { common, input } => cmd_report(&common, &input),
    }
}

fn read_config_value(path: Option<&Path>) -> Result<Value, Failure> {
    let path = path.ok_or_else(|| config_err(anyhow!("--config is required")))?;
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(config_err)
}

/// Applies `a.b.c=value` overrides; values parse as JSON, else as strings.
fn apply_overrides(mut root: Value, overrides: &[String]) -> Result<Value, Failure> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| config_err(anyhow!("override `{item}` is not of the form key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(config_err(anyhow!("override key `{key}` is malformed")));
        }
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let last = i + 1 == parts.len();
            node = match node {
                Value::Object(map) => {
                    if last {
                        map.insert(part.to_string(), value.clone());
                        break;
                    }
                    map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
                }
                Value::Array(items) => {
                    let idx: usize = part
                        .parse()
                        .map_err(|_| config_err(anyhow!("override key `{key}`: `{part}` is not an index")))?;
                    let len = items.len();
                    let slot = items
                        .get_mut(idx)
                        .ok_or_else(|| config_err(anyhow!("override key `{key}`: index {idx} out of range ({len})")))?;
                    if last {
                        *slot = value.clone();
                        break;
                    }
                    slot
                }
                _ => {
                    return Err(config_err(anyhow!(
                        "override key `{key}`: `{}` is not an object",
                        parts[..i].join(".")
                    )))
                }
            };
        }
    }
    Ok(root)
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| config_err(anyhow!("{SEED_ENV}: `{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(config_err)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime_err)
}

fn echo_config<T: serde::Serialize>(out: &Path, config: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(config).map_err(runtime_err)?;
    write_file(&out.join("config.resolved.json"), text + "\n")
}

fn load_run_config(common: &Common) -> Result<RunConfig, Failure> {
    let raw = read_config_value(common.config.as_deref())?;
    let raw = apply_overrides(raw, &common.overrides)?;
    let mut config: RunConfig = serde_json::from_value(raw).map_err(|e| config_err(anyhow!("{e}")))?;
    if let Some(seed) = resolve_seed(common.seed)? {
        config.seeds = vec![seed];
    }
    if config.seeds.is_empty() {
        return Err(config_err(anyhow!("seeds: at least one seed is required")));
    }
    config.validate().map_err(config_err)?;
    Ok(config)
}

fn cmd_generate(common: &Common, preset: Option<&str>) -> Result<(), Failure> {
    let raw = match (&common.config, preset) {
        (Some(_), Some(_)) => return Err(config_err(anyhow!("give either --config or --preset, not both"))),
        (Some(p), None) => read_config_value(Some(p))?,
        (None, Some(name)) => {
            let g = GenConfig::preset(name).ok_or_else(|| config_err(anyhow!("preset: unknown preset `{name}`")))?;
            serde_json::to_value(g).map_err(runtime_err)?
        }
        (None, None) => return Err(config_err(anyhow!("--config or --preset is required"))),
    };
    let raw = apply_overrides(raw, &common.overrides)?;
    let mut config: GenConfig = serde_json::from_value(raw).map_err(|e| config_err(anyhow!("{e}")))?;
    if let Some(seed) = resolve_seed(common.seed)? {
        config.seed = seed;
    }
    config.validate().map_err(config_err)?;
    prepare_out(&common.out)?;
    echo_config(&common.out, &config)?;
    let (train, val) = data::generate(&config).map_err(|e| classify("generate", e))?;
    data::save(&train, &common.out.join("train.jsonl")).map_err(|e| classify("generate", e))?;
    data::save(&val, &common.out.join("val.jsonl")).map_err(|e| classify("generate", e))?;
    println!(
        "wrote {} train / {} val samples to {}",
        train.len(),
        val.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_train(common: &Common) -> Result<(), Failure> {
    let config = load_run_config(common)?;
    prepare_out(&common.out)?;
    echo_config(&common.out, &config)?;
    let data = load_data(&config.data).map_err(|e| classify("train", e))?;
    for &seed in &config.seeds {
        let id = format!("train/seed_{seed}");
        let result = trainer::train_on(&config, &data, seed).map_err(|e| classify(&id, e))?;
        let dir = common.out.join(format!("seed_{seed}"));
        write_run(&dir, &config, &result).map_err(|e| classify(&id, e))?;
        println!(
            "{id}: best epoch {} val loss {:.4} P {:.4} worst-group {:.4}",
            result.history.best_epoch, result.val_loss, result.metrics.challenge_p, result.metrics.worst_group_macro_f1
        );
    }
    Ok(())
}

fn cmd_sweep(common: &Common) -> Result<(), Failure> {
    let config = load_run_config(common)?;
    if config.alphas.is_empty() {
        return Err(config_err(anyhow!("alphas: at least one α is required")));
    }
    prepare_out(&common.out)?;
    echo_config(&common.out, &config)?;
    let data = load_data(&config.data).map_err(|e| classify("sweep", e))?;
    let table = trainer::sweep_alpha_on(&config, &data, &config.alphas, &config.seeds, Some(&common.out))
        .map_err(|e| classify("sweep", e))?;
    write_file(&common.out.join("sweep.csv"), table.to_csv().map_err(|e| classify("sweep", e))?)?;
    write_file(
        &common.out.join("sweep_summary.csv"),
        table.summary_csv().map_err(|e| classify("sweep", e))?,
    )?;
    let failed: Vec<&String> = table.cells.iter().filter_map(|c| c.result.as_ref().err()).collect();
    for row in table.summary() {
        println!(
            "alpha {}: P {:.4} ± {:.4}, worst-group {:.4} ({} seeds, {} failed)",
            row.alpha, row.mean_p, row.std_p, row.mean_worst_group, row.seeds, row.failed
        );
    }
    for f in &failed {
        eprintln!("{f}");
    }
    if !failed.is_empty() && failed.len() == table.cells.len() {
        return Err(runtime_err(anyhow!("every sweep cell failed")));
    }
    Ok(())
}

fn cmd_compare(common: &Common) -> Result<(), Failure> {
    let config = load_run_config(common)?;
    prepare_out(&common.out)?;
    echo_config(&common.out, &config)?;
    let data = load_data(&config.data).map_err(|e| classify("compare", e))?;
    let cmp = trainer::compare_objectives_on(&config, &data, &config.seeds, Some(&common.out))
        .map_err(|e| classify("compare", e))?;
    write_file(&common.out.join("comparison.csv"), cmp.to_csv().map_err(|e| classify("compare", e))?)?;
    for row in &cmp.rows {
        println!(
            "{:<18} P {:.4} ± {:.4}  worst-group {:.4} ± {:.4}  minority-cell {:.4} ± {:.4}",
            row.method,
            row.mean_p,
            row.std_p,
            row.mean_worst_group,
            row.std_worst_group,
            row.mean_minority_cell,
            row.std_minority_cell
        );
    }
    for f in cmp.cells.iter().filter_map(|c| c.result.as_ref().err()) {
        eprintln!("{f}");
    }
    Ok(())
}

fn cmd_evaluate(common: &Common, checkpoint: &Path, data_path: &Path, attribute: Option<String>) -> Result<(), Failure> {
    if common.config.is_some() || !common.overrides.is_empty() {
        return Err(config_err(anyhow!("evaluate takes no --config or --set; the checkpoint carries the model config")));
    }
    let grdo_core::checkpoint::Checkpoint { config: model, params, .. } = load_checkpoint(checkpoint).map_err(|e| classify("evaluate", e))?;
    let dataset = data::load(data_path).map_err(|e| classify("evaluate", e))?;
    let attribute = attribute
        .or_else(|| dataset.provenance.as_ref().map(|p| p.regime.attribute().to_string()))
        .unwrap_or_else(|| {
            let gender = dataset.samples.first().is_some_and(|s| s.attrs.contains_key("gender"));
            if gender { "gender" } else { "site" }.to_string()
        });
    attribute_groups(&dataset, &attribute).map_err(config_err)?;
    prepare_out(&common.out)?;
    let echo: BTreeMap<&str, String> = [
        ("checkpoint", checkpoint.display().to_string()),
        ("data", data_path.display().to_string()),
        ("attribute", attribute.clone()),
    ]
    .into_iter()
    .collect();
    echo_config(&common.out, &echo)?;
    let report = evaluate(&params, &model, &dataset, &attribute).map_err(|e| classify("evaluate", e))?;
    write_file(&common.out.join("metrics.json"), report.to_json().map_err(|e| classify("evaluate", e))?)?;
    write_file(&common.out.join("metrics.csv"), report.to_csv().map_err(|e| classify("evaluate", e))?)?;
    println!(
        "P {:.4}  worst-group {:.4}  accuracy {:.4}",
        report.challenge_p, report.worst_group_macro_f1, report.accuracy
    );
    Ok(())
}

/// One parsed row of a sweep CSV.
#[derive(Debug, serde::Deserialize)]
struct SweepRow {
    alpha: f64,
    seed: u64,
    group: Option<usize>,
    macro_f1: Option<f64>,
    challenge_p: Option<f64>,
    worst_group_macro_f1: Option<f64>,
    status: String,
}

#[derive(Debug, serde::Serialize)]
struct ReportSummaryRow {
    alpha: f64,
    seeds: usize,
    failed: usize,
    mean_p: f64,
    std_p: f64,
    mean_worst_group: f64,
    std_worst_group: f64,
}

#[derive(Debug, serde::Serialize)]
struct LongRow<'a> {
    alpha: f64,
    seed: u64,
    metric: &'a str,
    group: String,
    value: f64,
}

fn cmd_report(common: &Common, input: &Path) -> Result<(), Failure> {
    if common.config.is_some() || !common.overrides.is_empty() {
        return Err(config_err(anyhow!("report takes no --config or --set")));
    }
    let mut reader = csv::Reader::from_path(input)
        .with_context(|| format!("reading {}", input.display()))
        .map_err(config_err)?;
    let mut rows = Vec::new();
    for (i, r) in reader.deserialize::<SweepRow>().enumerate() {
        rows.push(r.with_context(|| format!("{}: row {}", input.display(), i + 2)).map_err(config_err)?);
    }
    prepare_out(&common.out)?;
    let echo: BTreeMap<&str, String> = [("input", input.display().to_string())].into_iter().collect();
    echo_config(&common.out, &echo)?;

    let mut alphas: Vec<f64> = Vec::new();
    for r in &rows {
        if !alphas.iter().any(|a| a.to_bits() == r.alpha.to_bits()) {
            alphas.push(r.alpha);
        }
    }
    let mut summary = csv::Writer::from_writer(Vec::new());
    let mut long = csv::Writer::from_writer(Vec::new());
    for &alpha in &alphas {
        let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.alpha.to_bits() == alpha.to_bits()).collect();
        let mut seeds: Vec<u64> = mine.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut p = Vec::new();
        let mut worst = Vec::new();
        let mut failed = 0;
        for &seed in &seeds {
            let seed_rows: Vec<&&SweepRow> = mine.iter().filter(|r| r.seed == seed).collect();
            let ok = seed_rows.iter().find(|r| r.status == "ok");
            let Some(first) = ok else {
                failed += 1;
                continue;
            };
            let cp = first.challenge_p.unwrap_or(f64::NAN);
            let wg = first.worst_group_macro_f1.unwrap_or(f64::NAN);
            p.push(cp);
            worst.push(wg);
            let w = |long: &mut csv::Writer<Vec<u8>>, metric, group: String, value| {
                long.serialize(LongRow {
                    alpha,
                    seed,
                    metric,
                    group,
                    value,
                })
            };
            w(&mut long, "challenge_p", String::new(), cp).map_err(runtime_err)?;
            w(&mut long, "worst_group_macro_f1", String::new(), wg).map_err(runtime_err)?;
            for r in seed_rows.iter().filter(|r| r.status == "ok") {
                if let (Some(g), Some(f)) = (r.group, r.macro_f1) {
                    w(&mut long, "group_macro_f1", g.to_string(), f).map_err(runtime_err)?;
                }
            }
        }
        let (mean_p, std_p) = trainer::mean_std(&p);
        let (mean_worst_group, std_worst_group) = trainer::mean_std(&worst);
        summary
            .serialize(ReportSummaryRow {
                alpha,
                seeds: seeds.len(),
                failed,
                mean_p,
                std_p,
                mean_worst_group,
                std_worst_group,
            })
            .map_err(runtime_err)?;
    }
    let summary = summary.into_inner().map_err(|e| runtime_err(anyhow!("{e}")))?;
    let long = long.into_inner().map_err(|e| runtime_err(anyhow!("{e}")))?;
    write_file(&common.out.join("report_summary.csv"), summary)?;
    write_file(&common.out.join("report_long.csv"), long)?;
    println!("summarised {} α values from {}", alphas.len(), input.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_set_nested_values() {
        let v = json!({"dro": {"alpha": 0.0}, "seeds": [1, 2]});
        let v = apply_overrides(v, &["dro.alpha=0.5".into(), "seeds.1=7".into(), "objective=gdro".into()]).unwrap();
        assert_eq!(v["dro"]["alpha"], json!(0.5));
        assert_eq!(v["seeds"], json!([1, 7]));
        assert_eq!(v["objective"], json!("gdro"));
    }

    #[test]
    fn malformed_override_is_a_config_error() {
        let err = apply_overrides(json!({}), &["novalue".into()]).unwrap_err();
        assert_eq!(err.code(), 1);
        let err = apply_overrides(json!({"a": 1}), &["a.b=2".into()]).unwrap_err();
        assert_eq!(err.code(), 1);
    }
}
