use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmq_core::experiments::{
    compute_bpw, load_results, render_svg, run_sota_grid, run_uniform_grid, write_results, FailedCell, GridSpec,
    ResultsTable,
};
use mmq_core::importance::{
    bootstrap_importance_ci, consensus_ranking, fit_random_forest, linear_baseline_r2, permutation_importance,
    shapley_importance, write_consensus_csv, AttributionDataset, ConsensusRow, ForestConfig, ImportanceReport,
    DEFAULT_BOOTSTRAPS, DEFAULT_PERMUTATION_REPEATS, MIN_FOREST_ROWS,
};
use mmq_core::pipeline::{
    apply_quantization, build_model, collect_calibration, export_weights, parse_tokens, BlockGroup, ComponentId,
    LayerType, QuantConfig, QuantMethod, Selector, TaskKind,
};
use serde::Serialize;

use crate::config::Config;

/// Non-fatal outcome of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    PartialFailure,
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// `results.csv` → `results.manifest.json`.
pub fn manifest_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "results".into());
    csv.with_file_name(format!("{stem}.manifest.json"))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config_hash: String,
    method: QuantMethod,
    seeds: &'a [u64],
    tasks: &'a [TaskKind],
    probes: mmq_core::experiments::ProbePlan,
    calibration: Option<mmq_core::experiments::ProbePlan>,
    rows: usize,
    failures: &'a [FailedCell],
}

pub fn grid(config: &Config, method: QuantMethod, out: Option<PathBuf>) -> Result<Outcome> {
    let out = out.unwrap_or_else(|| config.output_dir.join(format!("{method}_results.csv")));
    let table = match method {
        QuantMethod::Uniform => run_uniform_grid(&config.pipeline, &config.probes, &config.grid)?,
        QuantMethod::Gptq | QuantMethod::Awq => {
            let calibration = config.calibration_or_fail()?;
            let grid = GridSpec { methods: vec![method], ..config.grid.clone() };
            run_sota_grid(&config.pipeline, &config.probes, Some(calibration), &grid)?
        }
        QuantMethod::Rtn => bail!("grid supports uniform, gptq and awq"),
    };
    let mut csv = Vec::new();
    write_results(&table, &mut csv)?;
    write_file(&out, &csv)?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: config.hash(),
        method,
        seeds: &config.grid.seeds,
        tasks: &config.grid.tasks,
        probes: config.probes,
        calibration: config.calibration,
        rows: table.len(),
        failures: &table.failures,
    };
    write_file(&manifest_path(&out), &to_json(&manifest)?)?;
    println!("wrote {} rows to {}", table.len(), out.display());
    for f in &table.failures {
        eprintln!("cell {} ({}) failed: {}", f.run_id, f.description, f.error);
    }
    Ok(if table.failures.is_empty() { Outcome::Success } else { Outcome::PartialFailure })
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub results: PathBuf,
    pub task: TaskKind,
    pub method: Option<QuantMethod>,
    pub model: String,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct LinearSummary {
    pub r2: f64,
    pub rank_deficient: bool,
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub task: TaskKind,
    pub method: Option<QuantMethod>,
    pub rows: usize,
    pub features: Vec<String>,
    pub forest_r2: f64,
    pub impurity: ImportanceReport,
    pub permutation: ImportanceReport,
    pub shapley: ImportanceReport,
    pub consensus: ImportanceReport,
    pub linear: LinearSummary,
}

pub fn analyze_table(table: &ResultsTable, args: &AnalyzeArgs) -> Result<AnalysisReport> {
    let data = AttributionDataset::from_results(table, args.task, args.method)?;
    if data.len() < MIN_FOREST_ROWS {
        bail!("need at least {MIN_FOREST_ROWS} rows for task {}, found {}", args.task, data.len());
    }
    let config = ForestConfig { seed: args.seed, ..ForestConfig::default() };
    let forest = fit_random_forest(&data, config)?;
    let impurity = bootstrap_importance_ci(&data, config, DEFAULT_BOOTSTRAPS, args.seed.wrapping_add(1))?;
    let permutation = permutation_importance(&forest, &data, DEFAULT_PERMUTATION_REPEATS, args.seed.wrapping_add(2))?;
    let shapley = shapley_importance(&forest, &data, args.seed.wrapping_add(3))?;
    let consensus = consensus_ranking(&[impurity.clone(), permutation.clone(), shapley.clone()])?;
    let linear = linear_baseline_r2(&data)?;
    Ok(AnalysisReport {
        task: args.task,
        method: args.method,
        rows: data.len(),
        features: data.feature_names.clone(),
        forest_r2: forest.r2(&data),
        impurity,
        permutation,
        shapley,
        consensus,
        linear: LinearSummary { r2: linear.r2, rank_deficient: linear.rank_deficient },
    })
}

pub fn consensus_row(report: &AnalysisReport, model: &str) -> Result<ConsensusRow> {
    let method = report.method.map_or_else(|| "all".to_string(), |m| m.to_string());
    Ok(ConsensusRow::from_report(model, &method, report.task.token(), &report.consensus)?)
}

pub fn analyze(args: &AnalyzeArgs) -> Result<Outcome> {
    let table = load_results(&args.results).with_context(|| format!("reading {}", args.results.display()))?;
    let report = analyze_table(&table, args)?;
    let row = consensus_row(&report, &args.model)?;
    write_file(&args.out, &to_json(&report)?)?;
    let mut csv = Vec::new();
    write_consensus_csv(std::slice::from_ref(&row), &mut csv)?;
    write_file(&args.out.with_extension("csv"), &csv)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    out.write_all(&csv)?;
    writeln!(out, "linear R2 = {:.4} (forest R2 = {:.4})", report.linear.r2, report.forest_r2)?;
    Ok(Outcome::Success)
}

pub fn plot(results: &Path, task: TaskKind, out: &Path) -> Result<Outcome> {
    let table = load_results(results).with_context(|| format!("reading {}", results.display()))?;
    let svg = render_svg(&table, task)?;
    write_file(out, svg.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(Outcome::Success)
}

#[derive(Debug, Clone)]
pub struct QuantizeArgs {
    pub method: QuantMethod,
    pub bits: u8,
    pub components: Option<String>,
    pub groups: Option<String>,
    pub layer_types: Option<String>,
    pub export: Option<PathBuf>,
}

fn tokens_or_all<T>(flag: &Option<String>, all: &[T]) -> Result<BTreeSet<T>>
where
    T: Copy + Ord + std::str::FromStr<Err = mmq_core::Error>,
{
    let set = match flag {
        Some(s) => parse_tokens(s)?,
        None => all.iter().copied().collect(),
    };
    Ok(set)
}

pub fn quantize(config: &Config, args: &QuantizeArgs) -> Result<Outcome> {
    if !(2..=16).contains(&args.bits) {
        bail!("--bits must be in 2..=16, got {}", args.bits);
    }
    let sel = Selector {
        components: tokens_or_all(&args.components, ComponentId::ALL)?,
        groups: tokens_or_all(&args.groups, BlockGroup::ALL)?,
        layer_types: tokens_or_all(&args.layer_types, LayerType::ALL)?,
    };
    let spec = &config.pipeline;
    let fp = build_model(spec)?;
    let calib = if args.method.needs_calibration() {
        let plan = config.calibration_or_fail()?;
        let probes = plan.probes_for(spec, spec.seed)?;
        Some(collect_calibration(&fp, &probes, plan.count)?)
    } else {
        None
    };
    let grid = &config.grid;
    let qc = QuantConfig {
        method: args.method,
        bits: args.bits,
        group_size: grid.group_size,
        damping: grid.damping,
        block_size: grid.block_size,
    };
    let (q, ledger) = apply_quantization(&fp, &sel, &qc, calib.as_ref())?;
    let bpw = compute_bpw(&ledger, &fp)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "layer\tmethod\tbits\tgroup_size\tweights\tstorage_bits\tproxy_error")?;
    for e in &ledger.entries {
        let proxy = e.proxy_error.map_or_else(|| "-".to_string(), |p| format!("{p:.6e}"));
        writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}\t{}", e.layer, e.method, e.bits, e.group_size, e.weights, e.storage_bits, proxy)?;
    }
    writeln!(out, "layers {} bpw {bpw:.6}", ledger.len())?;
    if let Some(path) = &args.export {
        create_parent(path)?;
        let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
        let mut w = std::io::BufWriter::new(file);
        export_weights(&q, &mut w)?;
        w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(Outcome::Success)
}
