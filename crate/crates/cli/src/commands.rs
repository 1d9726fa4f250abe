use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use fspm_core::calibrate::{self, Bounds, FitParams};
use fspm_core::engine::{self, BranchingRules, RingDemand, RingMode};
use fspm_core::ingest::{self, canonical_json, Dataset, MeasurementPaths};
use fspm_core::pa_classify::{self, PaMap};
use fspm_core::{direct_estim, export, synthetic, DirectParams, FitOptions, FitProblem, HiddenParams, SimConfig, TreeTopology};

use crate::output::{config_hash, Outputs, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "fspm", version, about = "Calibration pipeline for source-sink tree growth models")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the four measurement CSVs into a validated tree.json.
    Ingest(IngestArgs),
    /// Cluster terminal internode weights into physiological ages.
    ClassifyPa(ClassifyArgs),
    /// Estimate sink ratios, allometry and specific leaf weight.
    Estimate(EstimateArgs),
    /// Run the growth recursion on every tree.
    Simulate(SimulateArgs),
    /// Fit seed biomass per tree and shared rp, pc.
    Fit(FitArgs),
    /// Write a 3-D line skeleton per tree.
    ExportSkeleton(SkeletonArgs),
    /// Time the factored simulation of a generated branching structure.
    BenchSubstructure(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RingModeArg {
    Uniform,
    Pipe,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RingDemandArg {
    PerBlade,
    Constant,
}

#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "uniform")]
    ring_mode: RingModeArg,
    #[arg(long, value_enum, default_value = "per-blade")]
    ring_demand: RingDemandArg,
}

impl ModelArgs {
    fn config(&self) -> SimConfig {
        SimConfig {
            ring_mode: match self.ring_mode {
                RingModeArg::Uniform => RingMode::Uniform,
                RingModeArg::Pipe => RingMode::Pipe,
            },
            ring_demand: match self.ring_demand {
                RingDemandArg::PerBlade => RingDemand::PerBlade,
                RingDemandArg::Constant => RingDemand::Constant,
            },
            ..SimConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    axes: PathBuf,
    #[arg(long)]
    gus: PathBuf,
    #[arg(long)]
    internodes: PathBuf,
    #[arg(long)]
    leaves: PathBuf,
    /// Output directory, or a path ending in .json for the tree file itself.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long)]
    tree: PathBuf,
    /// Number of physiological ages.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Cluster raw terminal weights instead of weights relative to each tree's main axis.
    #[arg(long)]
    raw_weights: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    pa_map: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    pa_map: PathBuf,
    /// direct_params.json
    #[arg(long)]
    params: PathBuf,
    /// Hidden parameters: {"q0": {tree: value}, "rp": .., "pc": ..}; fit_result.json qualifies.
    #[arg(long)]
    hidden: PathBuf,
    /// Simulate only the first n cycles.
    #[arg(long)]
    cycles: Option<u32>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    pa_map: PathBuf,
    #[arg(long)]
    params: PathBuf,
    /// Initial hidden parameters; defaults to q0 = 10 g per tree, rp = 6.4319, pc = 0.13882.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    n_starts: usize,
    #[arg(long, default_value_t = 200)]
    max_iterations: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SkeletonArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    pa_map: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    hidden: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cycles: Option<u32>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 30)]
    cycles: u32,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Lateral axes borne per GU of every PA but the last.
    #[arg(long, default_value_t = 2)]
    branching: u32,
    #[arg(long, default_value_t = 1)]
    internodes: u32,
    /// direct_params.json; the built-in reference set when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    q0: f64,
    #[arg(long, default_value_t = synthetic::REFERENCE_RP)]
    rp: f64,
    #[arg(long, default_value_t = synthetic::REFERENCE_PC)]
    pc: f64,
    /// The factored mode only supports uniform ring distribution.
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub enum Outcome {
    Done,
    NotConverged,
}

/// Hidden parameter file; extra fields (as in fit_result.json) are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct HiddenSet {
    q0: BTreeMap<String, f64>,
    rp: f64,
    pc: f64,
}

impl HiddenSet {
    fn for_tree(&self, tree: &str) -> Result<HiddenParams> {
        let q0 = *self.q0.get(tree).ok_or_else(|| anyhow!("no q0 for tree {tree}"))?;
        Ok(HiddenParams { q0, rp: self.rp, pc: self.pc })
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Ingest(a) => ingest_cmd(a),
        Command::ClassifyPa(a) => classify_cmd(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::ExportSkeleton(a) => skeleton_cmd(a),
        Command::BenchSubstructure(a) => bench_cmd(a),
    }
}

fn manifest<C: Serialize>(command: &str, inputs: &[&Path], config: &C, seed: Option<u64>) -> Result<RunManifest> {
    Ok(RunManifest {
        command: command.into(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        config_hash: config_hash(config)?,
        seed,
        version: env!("CARGO_PKG_VERSION").into(),
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn classified(data: &Dataset, pa: &PaMap) -> Result<Vec<TreeTopology>> {
    data.trees
        .iter()
        .map(|t| {
            let map = pa.get(&t.tree_id).ok_or_else(|| anyhow!("PA map has no entry for tree {}", t.tree_id))?;
            t.with_pa(map).with_context(|| format!("applying PAs to tree {}", t.tree_id))
        })
        .collect()
}

fn ingest_cmd(a: IngestArgs) -> Result<Outcome> {
    let paths = MeasurementPaths { axes: a.axes, gus: a.gus, internodes: a.internodes, leaves: a.leaves };
    let data = Dataset::from_measurements(ingest::parse_measurements(&paths)?)?;
    let (dir, name) = match a.out.extension() {
        Some(ext) if ext == "json" => (
            a.out.parent().map(Path::to_path_buf).unwrap_or_default(),
            a.out.file_name().expect("path with extension has a file name").to_string_lossy().into_owned(),
        ),
        _ => (a.out.clone(), "tree.json".to_string()),
    };
    log::info!("ingested {} trees", data.trees.len());
    let mut out = Outputs::new(dir);
    out.add(name, canonical_json(&data));
    let inputs = [paths.axes.as_path(), &paths.gus, &paths.internodes, &paths.leaves];
    out.commit(&manifest("ingest", &inputs, &serde_json::json!({}), None)?)?;
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct ClusterSummary {
    k: usize,
    normalized: bool,
    boundaries: Vec<f64>,
    means: Vec<f64>,
    wcss: f64,
    assignments: BTreeMap<String, BTreeMap<String, usize>>,
}

fn classify_cmd(a: ClassifyArgs) -> Result<Outcome> {
    let data: Dataset = read_json(&a.tree)?;
    let normalize = !a.raw_weights;
    let c = pa_classify::classify_dataset(&data, a.k, normalize)?;
    let mut assignments: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (key, &cluster) in &c.partition.assignments {
        assignments.entry(key.tree_id.clone()).or_default().insert(key.axis_id.clone(), cluster);
    }
    let summary = ClusterSummary {
        k: c.partition.k,
        normalized: normalize,
        boundaries: c.partition.boundaries.clone(),
        means: c.partition.means.clone(),
        wcss: c.partition.wcss,
        assignments,
    };
    let mut targets = Vec::new();
    for t in &data.trees {
        let pa = &c.pa[&t.tree_id];
        let internodes: Vec<_> = data.internodes_of(&t.tree_id).cloned().collect();
        let leaves: Vec<_> = data.leaves_of(&t.tree_id).cloned().collect();
        targets.push(ingest::build_target_series(&internodes, &leaves, t, pa)?);
    }
    let mut out = Outputs::new(&a.out);
    out.add("pa_map.json", canonical_json(&c.pa));
    out.add("targets.json", canonical_json(&targets));
    out.add("clusters.json", canonical_json(&summary));
    let config = serde_json::json!({ "k": a.k, "normalize": normalize });
    out.commit(&manifest("classify-pa", &[&a.tree], &config, None)?)?;
    Ok(Outcome::Done)
}

fn estimate_cmd(a: EstimateArgs) -> Result<Outcome> {
    let data: Dataset = read_json(&a.tree)?;
    let pa: PaMap = read_json(&a.pa_map)?;
    let dp = direct_estim::estimate_direct_params(&data, &pa)?;
    let mut out = Outputs::new(&a.out);
    out.add("direct_params.json", canonical_json(&dp));
    out.commit(&manifest("estimate", &[&a.tree, &a.pa_map], &serde_json::json!({}), None)?)?;
    Ok(Outcome::Done)
}

fn simulate_all(
    trees: &[TreeTopology],
    dp: &DirectParams,
    hidden: &HiddenSet,
    cfg: &SimConfig,
    cycles: Option<u32>,
) -> Result<Vec<engine::SimulationTrace>> {
    trees
        .iter()
        .map(|t| {
            let hp = hidden.for_tree(&t.tree_id)?;
            let trace = engine::simulate_until(&hp, dp, t, cfg, cycles.unwrap_or(t.age))
                .with_context(|| format!("simulating tree {}", t.tree_id))?;
            Ok(trace)
        })
        .collect()
}

fn simulate_cmd(a: SimulateArgs) -> Result<Outcome> {
    let data: Dataset = read_json(&a.tree)?;
    let pa: PaMap = read_json(&a.pa_map)?;
    let dp: DirectParams = read_json(&a.params)?;
    let hidden: HiddenSet = read_json(&a.hidden)?;
    let cfg = a.model.config();
    let trees = classified(&data, &pa)?;
    let traces = simulate_all(&trees, &dp, &hidden, &cfg, a.cycles)?;
    let mut out = Outputs::new(&a.out);
    for tr in &traces {
        out.add(format!("{}.trace.csv", tr.tree_id), export::trace_csv(tr));
        out.add(format!("{}.organs.csv", tr.tree_id), export::organs_csv(tr));
    }
    let config = serde_json::json!({ "model": cfg, "cycles": a.cycles });
    out.commit(&manifest("simulate", &[&a.tree, &a.pa_map, &a.params, &a.hidden], &config, None)?)?;
    Ok(Outcome::Done)
}

fn fit_cmd(a: FitArgs) -> Result<Outcome> {
    let data: Dataset = read_json(&a.tree)?;
    let pa: PaMap = read_json(&a.pa_map)?;
    let dp: DirectParams = read_json(&a.params)?;
    let cfg = a.model.config();
    let trees = classified(&data, &pa)?;
    let mut targets = Vec::new();
    for t in &trees {
        let internodes: Vec<_> = data.internodes_of(&t.tree_id).cloned().collect();
        let leaves: Vec<_> = data.leaves_of(&t.tree_id).cloned().collect();
        targets.push(ingest::build_target_series(&internodes, &leaves, t, &pa[&t.tree_id])?);
    }
    let init = match &a.init {
        Some(p) => read_json::<HiddenSet>(p)?,
        None => HiddenSet {
            q0: trees.iter().map(|t| (t.tree_id.clone(), 10.0)).collect(),
            rp: synthetic::REFERENCE_RP,
            pc: synthetic::REFERENCE_PC,
        },
    };
    let init = FitParams {
        q0: trees.iter().map(|t| init.for_tree(&t.tree_id).map(|h| h.q0)).collect::<Result<_>>()?,
        rp: init.rp,
        pc: init.pc,
    };
    let problem = FitProblem::new(&targets, trees, dp, cfg, Bounds::default())?;
    let opts = FitOptions { n_starts: a.n_starts, seed: a.seed, max_iterations: a.max_iterations, ..FitOptions::default() };
    let fit = calibrate::fit_hidden(&problem, &init, &opts)?;
    log::info!("fit sse {:e} after {} iterations", fit.sse, fit.iterations);

    let mut out = Outputs::new(&a.out);
    out.add("fit_result.json", canonical_json(&fit));
    let params = fit.params(&problem);
    for (i, (t, ts)) in problem.topologies.iter().zip(&targets).enumerate() {
        let trace = engine::simulate(&params.hidden(i), &problem.dp, t, &problem.config)?;
        for table in export::export_fit_csv(&trace, ts)? {
            out.add(format!("{}.{}", t.tree_id, table.file_name()), table.to_csv());
        }
    }
    let config = serde_json::json!({ "model": cfg, "options": opts, "init": init });
    let mut inputs = vec![a.tree.as_path(), &a.pa_map, &a.params];
    inputs.extend(a.init.as_deref());
    out.commit(&manifest("fit", &inputs, &config, Some(a.seed))?)?;
    if fit.converged {
        Ok(Outcome::Done)
    } else {
        eprintln!("fit did not converge after {} iterations (sse {:e})", fit.iterations, fit.sse);
        Ok(Outcome::NotConverged)
    }
}

fn skeleton_cmd(a: SkeletonArgs) -> Result<Outcome> {
    let data: Dataset = read_json(&a.tree)?;
    let pa: PaMap = read_json(&a.pa_map)?;
    let dp: DirectParams = read_json(&a.params)?;
    let hidden: HiddenSet = read_json(&a.hidden)?;
    let cfg = a.model.config();
    let trees = classified(&data, &pa)?;
    let traces = simulate_all(&trees, &dp, &hidden, &cfg, a.cycles)?;
    let mut out = Outputs::new(&a.out);
    for (t, tr) in trees.iter().zip(&traces) {
        out.add(format!("{}.skeleton.csv", t.tree_id), export::export_skeleton(tr, t, a.seed)?);
    }
    let config = serde_json::json!({ "model": cfg, "cycles": a.cycles });
    out.commit(&manifest("export-skeleton", &[&a.tree, &a.pa_map, &a.params, &a.hidden], &config, Some(a.seed))?)?;
    Ok(Outcome::Done)
}

fn bench_cmd(a: BenchArgs) -> Result<Outcome> {
    if a.k == 0 {
        bail!("--k must be at least 1");
    }
    let dp: DirectParams = match &a.params {
        Some(p) => read_json(p)?,
        None => synthetic::reference_direct_params(),
    };
    let mut rules = BranchingRules::uniform(a.k, a.internodes, a.branching);
    if let Some(last) = rules.pa.last_mut() {
        last.branches_per_gu = 0;
    }
    let cfg = a.model.config();
    let hp = HiddenParams { q0: a.q0, rp: a.rp, pc: a.pc };
    let organs = engine::substructure_organ_count(&rules, a.cycles)?;
    let start = Instant::now();
    let trace = engine::simulate_factored(&hp, &dp, &rules, a.cycles, &cfg)?;
    let elapsed = start.elapsed();
    println!("organs {organs}");
    println!("final_mass_g {}", trace.final_mass());
    println!("elapsed_ms {:.3}", elapsed.as_secs_f64() * 1e3);
    if let Some(dir) = &a.out {
        let mut out = Outputs::new(dir);
        out.add("trace.csv", export::trace_csv(&trace));
        out.add("organs.csv", export::organs_csv(&trace));
        let config = serde_json::json!({
            "cycles": a.cycles, "k": a.k, "branching": a.branching, "internodes": a.internodes,
            "hidden": hp, "model": cfg,
        });
        let inputs: Vec<&Path> = a.params.as_deref().into_iter().collect();
        out.commit(&manifest("bench-substructure", &inputs, &config, None)?)?;
    }
    Ok(Outcome::Done)
}
