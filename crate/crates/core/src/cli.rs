//! Command-line front end. Every subcommand writes its outputs plus a JSON
//! manifest that records the exact argument vector, so `replay` can re-run it.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::chartnet;
use crate::dissim::{self, GeodesicConfig};
use crate::evalkit::{self, EvalReport};
use crate::multistory::MultistoryConfig;
use crate::pipeline::{self, ChartingConfig, PipelineError, SweepConfig, SweepParam};
use crate::scenesim::{self, presets, Aabb, SceneSpec};
use crate::tensors::{self, DatasetError, SceneDataset};

pub const EXIT_OK: i32 = 0;
/// Bad flags, unknown subcommand, malformed values.
pub const EXIT_USAGE: i32 = 2;
/// Missing or unreadable input, unwritable output.
pub const EXIT_IO: i32 = 3;
/// Input that parses but is invalid: corrupt dataset, bad config.
pub const EXIT_INPUT: i32 = 4;
/// A pipeline stage failed on valid input.
pub const EXIT_COMPUTE: i32 = 5;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Io { .. } => EXIT_IO,
            Self::Input(_) => EXIT_INPUT,
            Self::Pipeline(PipelineError::Dataset(DatasetError::Io(_))) => EXIT_IO,
            Self::Pipeline(PipelineError::Dataset(_) | PipelineError::Invalid(_)) => EXIT_INPUT,
            Self::Pipeline(_) => EXIT_COMPUTE,
        }
    }

    fn category(&self) -> &'static str {
        match self.exit_code() {
            EXIT_USAGE => "usage error",
            EXIT_IO => "i/o error",
            EXIT_INPUT => "invalid input",
            _ => "pipeline error",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_owned(), source }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<SceneDataset, CliError> {
    tensors::load_dataset(path).map_err(|e| match e {
        DatasetError::Io(source) => CliError::Io { path: path.to_owned(), source },
        other => CliError::Input(format!("{}: {other}", path.display())),
    })
}

#[derive(Debug, Parser)]
#[command(name = "chartloc", version, about = "3-D radio localization: AoA triangulation and channel charting")]
#[command(after_help = "Exit codes: 0 success, 2 usage, 3 i/o, 4 invalid input, 5 pipeline failure.\n\
Worker threads: --threads, else CHARTLOC_THREADS, else all cores.")]
struct Cli {
    /// Worker thread cap; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scene JSON or a preset name.
    Simulate(SimulateArgs),
    /// Normalized beamspace features of a dataset.
    Features(FeaturesArgs),
    /// ADP dissimilarities completed to geodesics.
    Dissim(DissimArgs),
    /// Classical AoA triangulation of every record.
    Triangulate(TriangulateArgs),
    /// Conventional and/or augmented channel charting.
    Chart(ChartArgs),
    /// Floor classification plus one expert chart per floor.
    Multistory(MultistoryArgs),
    /// Evaluate position estimates against a dataset's ground truth.
    Eval(EvalArgs),
    /// Regenerate the factory scene over a parameter range and compare methods.
    Sweep(SweepArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scene JSON file, or `factory` / `multistory`.
    #[arg(long)]
    scene: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample count for presets (per floor for `multistory`).
    #[arg(long)]
    samples: Option<usize>,
    /// Array rows for the factory preset.
    #[arg(long, default_value_t = 8)]
    rows: usize,
    /// Array columns for the factory preset.
    #[arg(long, default_value_t = 8)]
    cols: usize,
    /// Also write the resolved scene JSON here.
    #[arg(long)]
    scene_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long)]
    data: PathBuf,
    /// Feature matrix (f32, row-major binary); the normalizer goes to `<out>.normalizer.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DissimArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// GeodesicConfig JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Write raw ADP dissimilarities instead of geodesics.
    #[arg(long)]
    raw: bool,
}

#[derive(Debug, Args, Clone)]
struct RegionArgs {
    /// Scene JSON whose UE regions bound the search.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Search box `xmin,ymin,zmin,xmax,ymax,zmax` in meters.
    #[arg(long)]
    region: Option<String>,
}

impl RegionArgs {
    fn resolve(&self) -> Result<Aabb, CliError> {
        match (&self.region, &self.scene) {
            (Some(r), _) => {
                let v: Vec<f64> = r
                    .split(',')
                    .map(|t| t.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::Usage(format!("--region: {e}")))?;
                if v.len() != 6 {
                    return Err(CliError::Usage("--region needs six comma-separated numbers".into()));
                }
                let b = Aabb::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]);
                if !b.is_valid() {
                    return Err(CliError::Usage("--region minimum must not exceed maximum".into()));
                }
                Ok(b)
            }
            (None, Some(path)) => Ok(pipeline::ue_bounds(&read_json::<SceneSpec>(path)?)),
            (None, None) => Err(CliError::Usage("need --region or --scene to bound the position search".into())),
        }
    }
}

#[derive(Debug, Args)]
struct TriangulateArgs {
    #[arg(long)]
    data: PathBuf,
    /// CSV: record_index,x,y,z,log_likelihood.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    region: RegionArgs,
    #[arg(long)]
    grid_pitch: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ChartModeArg {
    Conventional,
    Augmented,
    Both,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct ChartArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ChartModeArg::Conventional)]
    mode: ChartModeArg,
    #[arg(long)]
    out_dir: PathBuf,
    /// ChartingConfig JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    region: RegionArgs,
}

#[derive(Debug, Args)]
struct MultistoryArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    floors: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// MultistoryConfig JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// CSV with columns record_index,x,y,z (extra columns ignored).
    #[arg(long)]
    estimates: PathBuf,
    /// Fit the optimal affine map before measuring errors.
    #[arg(long)]
    affine: bool,
    /// Output stem; writes `.csv`, `.json` and `.svg`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// `n_row` or `density`.
    #[arg(long)]
    param: String,
    /// Comma-separated values, e.g. `2,4,8`.
    #[arg(long)]
    values: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_col: usize,
    #[arg(long, default_value_t = 8)]
    n_row: usize,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// ChartingConfig JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Skip the augmented chart.
    #[arg(long)]
    no_augmented: bool,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// Everything needed to re-run an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub version: u32,
    pub crate_version: String,
    pub subcommand: String,
    /// Arguments after the program name, `--threads` included.
    pub argv: Vec<String>,
    /// Directory that relative paths in `argv` are resolved against.
    pub working_dir: PathBuf,
    pub threads: Option<usize>,
    pub inputs: Vec<PathBuf>,
    /// Files reproduced by a replay; the manifest itself is not listed.
    pub outputs: Vec<PathBuf>,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub wall_clock_s: f64,
}

struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    config: serde_json::Value,
    seeds: Vec<u64>,
    manifest: PathBuf,
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Runs the CLI on `argv` (without the program name) and returns the exit
/// status. Messages go to stdout/stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(std::iter::once("chartloc".to_owned()).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("chartloc: {}: {e}", e.category());
            e.exit_code()
        }
    }
}

fn thread_cap(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(n) = flag {
        return if n == 0 { Err(CliError::Usage("--threads must be at least 1".into())) } else { Ok(Some(n)) };
    }
    match std::env::var("CHARTLOC_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("CHARTLOC_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn execute(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    if let Command::Replay(args) = &cli.command {
        let manifest: ExperimentManifest = read_json(&args.manifest)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CliError::Input(format!("manifest version {} is not {MANIFEST_VERSION}", manifest.version)));
        }
        let replayed = Cli::try_parse_from(std::iter::once("chartloc".to_owned()).chain(manifest.argv.iter().cloned()))
            .map_err(|e| CliError::Input(format!("manifest argv does not parse: {e}")))?;
        if matches!(replayed.command, Command::Replay(_)) {
            return Err(CliError::Input("a manifest cannot record a replay".into()));
        }
        let here = std::env::current_dir().unwrap_or_default();
        if !manifest.working_dir.as_os_str().is_empty() && manifest.working_dir != here {
            std::env::set_current_dir(&manifest.working_dir).map_err(io_err(&manifest.working_dir))?;
        }
        return execute(replayed, &manifest.argv);
    }
    let threads = thread_cap(cli.threads)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let subcommand = subcommand_name(&cli.command).to_owned();
    let outcome = pool.install(|| dispatch(cli.command))?;
    let manifest = ExperimentManifest {
        version: MANIFEST_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_owned(),
        subcommand,
        argv: argv.to_vec(),
        working_dir: std::env::current_dir().unwrap_or_default(),
        threads,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        config: outcome.config,
        seeds: outcome.seeds,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&outcome.manifest, text)?;
    println!("manifest: {}", outcome.manifest.display());
    Ok(())
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Features(_) => "features",
        Command::Dissim(_) => "dissim",
        Command::Triangulate(_) => "triangulate",
        Command::Chart(_) => "chart",
        Command::Multistory(_) => "multistory",
        Command::Eval(_) => "eval",
        Command::Sweep(_) => "sweep",
        Command::Replay(_) => "replay",
    }
}

fn dispatch(c: Command) -> Result<Outcome, CliError> {
    match c {
        Command::Simulate(a) => simulate(a),
        Command::Features(a) => features(a),
        Command::Dissim(a) => dissim_cmd(a),
        Command::Triangulate(a) => triangulate(a),
        Command::Chart(a) => chart(a),
        Command::Multistory(a) => multistory(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Replay(_) => unreachable!("replay is resolved before dispatch"),
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn simulate(a: SimulateArgs) -> Result<Outcome, CliError> {
    let mut inputs = Vec::new();
    let mut scene = match a.scene.as_str() {
        "factory" => presets::factory(a.rows, a.cols, a.samples.unwrap_or(2000), a.seed.unwrap_or(7)),
        "multistory" => presets::multistory(a.samples.unwrap_or(500), a.seed.unwrap_or(7)),
        path => {
            inputs.push(PathBuf::from(path));
            let mut s: SceneSpec = read_json(Path::new(path))?;
            if let Some(n) = a.samples {
                let per = n / s.ue_regions.len().max(1);
                for r in &mut s.ue_regions {
                    r.count = per;
                }
            }
            s
        }
    };
    if let Some(seed) = a.seed {
        scene.rng_seed = seed;
    }
    scene.validate().map_err(|e| CliError::Input(format!("scene: {e}")))?;
    let data = scenesim::generate_dataset(&scene).map_err(PipelineError::from)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    tensors::save_dataset(&data, &a.out).map_err(|e| match e {
        DatasetError::Io(source) => CliError::Io { path: a.out.clone(), source },
        other => CliError::Input(other.to_string()),
    })?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.scene_out {
        write(p, serde_json::to_string_pretty(&scene).expect("scene serializes"))?;
        outputs.push(p.clone());
    }
    println!("{} records written to {}", data.len(), a.out.display());
    Ok(Outcome {
        inputs,
        outputs,
        config: to_value(&scene),
        seeds: vec![scene.rng_seed],
        manifest: manifest_path_for(&a.out),
    })
}

fn features(a: FeaturesArgs) -> Result<Outcome, CliError> {
    let data = load(&a.data)?;
    let (norm, feat) = pipeline::dataset_features(&data)?;
    let flat: Vec<f32> = feat.iter().copied().collect();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    tensors::write_matrix(&a.out, feat.nrows(), feat.ncols(), &flat).map_err(io_err(&a.out))?;
    let norm_path = PathBuf::from(format!("{}.normalizer.json", a.out.display()));
    write(&norm_path, serde_json::to_string_pretty(&norm).expect("normalizer serializes"))?;
    println!("{} x {} features written to {}", feat.nrows(), feat.ncols(), a.out.display());
    Ok(Outcome {
        inputs: vec![a.data],
        outputs: vec![a.out.clone(), norm_path],
        config: serde_json::json!({ "normalizer_id": norm.id }),
        seeds: vec![],
        manifest: manifest_path_for(&a.out),
    })
}

fn dissim_cmd(a: DissimArgs) -> Result<Outcome, CliError> {
    let data = load(&a.data)?;
    let mut cfg: GeodesicConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GeodesicConfig::default(),
    };
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(eta) = a.eta {
        cfg.eta = eta;
    }
    let (matrix, k_used) = if a.raw {
        let m = dissim::dataset_dissimilarities_aligned(&data, cfg.eta, cfg.weighting, cfg.align_lead).map_err(PipelineError::from)?;
        (m, 0)
    } else {
        dissim::dataset_geodesics(&data, &cfg).map_err(PipelineError::from)?
    };
    let flat: Vec<f32> = matrix.iter().map(|&v| v as f32).collect();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    tensors::write_matrix(&a.out, matrix.nrows(), matrix.ncols(), &flat).map_err(io_err(&a.out))?;
    println!("{0} x {0} matrix written to {1} (k used: {k_used})", matrix.nrows(), a.out.display());
    Ok(Outcome {
        inputs: vec![a.data],
        outputs: vec![a.out.clone()],
        config: serde_json::json!({ "geodesic": to_value(&cfg), "raw": a.raw, "k_used": k_used }),
        seeds: vec![],
        manifest: manifest_path_for(&a.out),
    })
}

fn triangulate(a: TriangulateArgs) -> Result<Outcome, CliError> {
    let data = load(&a.data)?;
    let region = a.region.resolve()?;
    let mut opts = crate::classical::TriangulationOptions::default();
    if let Some(p) = a.grid_pitch {
        if !(p > 0.0) {
            return Err(CliError::Usage("--grid-pitch must be positive".into()));
        }
        opts.grid_pitch = p;
    }
    let tri = pipeline::triangulate_dataset(&data, &region, &opts);
    let mut csv = String::from("record_index,x,y,z,log_likelihood\n");
    for (i, (p, ll)) in tri.positions.outer_iter().zip(&tri.log_likelihood).enumerate() {
        csv.push_str(&format!("{i},{},{},{},{ll}\n", p[0], p[1], p[2]));
    }
    write(&a.out, csv)?;
    let flagged = tri.low_confidence.iter().filter(|&&f| f).count();
    println!("{} positions written to {} ({flagged} low-confidence)", data.len(), a.out.display());
    let mut inputs = vec![a.data];
    inputs.extend(a.region.scene.clone());
    Ok(Outcome {
        inputs,
        outputs: vec![a.out.clone()],
        config: serde_json::json!({ "region": to_value(&region), "options": to_value(&opts) }),
        seeds: vec![],
        manifest: manifest_path_for(&a.out),
    })
}

fn apply_train_flags(cfg: &mut chartnet::TrainConfig, f: &TrainFlags) {
    if let Some(e) = f.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = f.seed {
        cfg.rng_seed = s;
    }
    if let Some(lr) = f.learning_rate {
        cfg.learning_rate = lr;
    }
}

fn chart_csv(chart: &Array2<f64>) -> String {
    let mut s = String::from("record_index,x,y,z\n");
    for (i, r) in chart.outer_iter().enumerate() {
        let c: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{i},{}\n", c.join(",")));
    }
    s
}

fn export(report: &EvalReport, stem: &Path, outputs: &mut Vec<PathBuf>) -> Result<(), CliError> {
    evalkit::export_report(report, stem).map_err(io_err(stem))?;
    outputs.extend(["csv", "json", "svg"].map(|ext| stem.with_extension(ext)));
    Ok(())
}

fn checkpoint(params: &chartnet::Mlp32, cfg: &chartnet::TrainConfig, path: PathBuf, outputs: &mut Vec<PathBuf>) -> Result<(), CliError> {
    chartnet::save_checkpoint(&path, params, Some(cfg), None).map_err(io_err(&path))?;
    outputs.push(path);
    Ok(())
}

fn chart(a: ChartArgs) -> Result<Outcome, CliError> {
    let data = load(&a.data)?;
    let mut cfg: ChartingConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ChartingConfig::default(),
    };
    cfg.run_conventional = matches!(a.mode, ChartModeArg::Conventional | ChartModeArg::Both);
    cfg.run_augmented = matches!(a.mode, ChartModeArg::Augmented | ChartModeArg::Both);
    apply_train_flags(&mut cfg.siamese, &a.train);
    apply_train_flags(&mut cfg.augmented, &a.train);
    if let Some(l) = a.lambda {
        cfg.augmented.lambda = l;
    }
    cfg.siamese.validate().map_err(|e| CliError::Input(e.to_string()))?;
    cfg.augmented.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let region = a.region.resolve()?;
    let res = pipeline::run_charting(&data, &region, &cfg)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut outputs = Vec::new();
    export(&res.triangulation, &dir.join("triangulation"), &mut outputs)?;
    println!("triangulation MAE {:.3} m", res.triangulation.mae);
    if let (Some(rep), Some(chart), Some(params)) = (&res.conventional, &res.conventional_chart, &res.conventional_params) {
        let p = dir.join("conventional_chart.csv");
        write(&p, chart_csv(chart))?;
        outputs.push(p);
        checkpoint(params, &cfg.siamese, dir.join("conventional.ckpt"), &mut outputs)?;
        export(rep, &dir.join("conventional"), &mut outputs)?;
        println!("conventional chart MAE after affine {:.3} m", rep.mae);
    }
    if let (Some(rep), Some(chart), Some(params)) = (&res.augmented, &res.augmented_chart, &res.augmented_params) {
        let p = dir.join("augmented_chart.csv");
        write(&p, chart_csv(chart))?;
        outputs.push(p);
        checkpoint(params, &cfg.augmented, dir.join("augmented.ckpt"), &mut outputs)?;
        export(rep, &dir.join("augmented"), &mut outputs)?;
        println!("augmented chart MAE {:.3} m", rep.mae);
    }
    let mut inputs = vec![a.data];
    inputs.extend(a.config);
    inputs.extend(a.region.scene.clone());
    Ok(Outcome {
        inputs,
        outputs,
        config: serde_json::json!({ "charting": to_value(&cfg), "region": to_value(&region) }),
        seeds: vec![cfg.siamese.rng_seed, cfg.augmented.rng_seed],
        manifest: dir.join("manifest.json"),
    })
}

#[derive(Serialize)]
struct AssignmentFile<'a> {
    labels: &'a [usize],
    centroids: &'a [Vec<f64>],
    inertia: f64,
    floor_heights: &'a [f64],
    alignments: &'a [evalkit::Affine<f64>],
    k_used: &'a [usize],
}

fn multistory(a: MultistoryArgs) -> Result<Outcome, CliError> {
    let data = load(&a.data)?;
    let mut cfg: MultistoryConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => MultistoryConfig::default(),
    };
    if a.floors == 0 {
        return Err(CliError::Usage("--floors must be at least 1".into()));
    }
    cfg.n_floors = a.floors;
    apply_train_flags(&mut cfg.expert, &a.train);
    if let Some(s) = a.train.seed {
        cfg.seed = s;
    }
    let mut stage0 = chartnet::TrainConfig::default();
    apply_train_flags(&mut stage0, &a.train);
    let res = pipeline::run_multistory(&data, &stage0, &cfg)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut outputs = Vec::new();
    checkpoint(&res.stage0, &stage0, dir.join("stage0.ckpt"), &mut outputs)?;
    for (f, expert) in res.model.floor_experts.iter().enumerate() {
        checkpoint(expert, &cfg.expert, dir.join(format!("expert_{f}.ckpt")), &mut outputs)?;
    }
    let assignment = AssignmentFile {
        labels: &res.model.assignment.labels,
        centroids: &res.model.assignment.centroids,
        inertia: res.model.assignment.inertia,
        floor_heights: &res.model.floor_heights,
        alignments: &res.model.alignments,
        k_used: &res.model.k_used,
    };
    let p = dir.join("assignment.json");
    write(&p, serde_json::to_string_pretty(&assignment).expect("assignment serializes"))?;
    outputs.push(p);
    for (name, m) in [("stage0_chart.csv", &res.stage0_chart), ("multistory_positions.csv", &res.assembled)] {
        let p = dir.join(name);
        write(&p, chart_csv(m))?;
        outputs.push(p);
    }
    export(&res.conventional, &dir.join("conventional"), &mut outputs)?;
    export(&res.multistory, &dir.join("multistory"), &mut outputs)?;
    if data.floor_labels().is_some() {
        println!("floor classification error {:.4}", res.classification_error);
    }
    println!("conventional 3-D chart MAE {:.3} m, multistory MAE {:.3} m", res.conventional.mae, res.multistory.mae);
    let mut inputs = vec![a.data];
    inputs.extend(a.config);
    Ok(Outcome {
        inputs,
        outputs,
        config: serde_json::json!({ "stage0": to_value(&stage0), "multistory": to_value(&cfg) }),
        seeds: vec![stage0.rng_seed, cfg.seed],
        manifest: dir.join("manifest.json"),
    })
}

/// Reads `record_index,x,y,z` rows; the estimates are ordered by index.
pub fn read_estimates(text: &str, records: usize) -> Result<Array2<f64>, String> {
    let mut out = Array2::from_elem((records, 3), f64::NAN);
    let mut seen = vec![false; records];
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 4 {
            return Err(format!("line {}: expected at least 4 columns", line_no + 1));
        }
        let i: usize = cols[0].trim().parse().map_err(|e| format!("line {}: {e}", line_no + 1))?;
        if i >= records {
            return Err(format!("line {}: record index {i} out of range", line_no + 1));
        }
        for k in 0..3 {
            out[(i, k)] = cols[k + 1].trim().parse().map_err(|e| format!("line {}: {e}", line_no + 1))?;
        }
        seen[i] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(format!("no estimate for record {missing}"));
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<Outcome, CliError> {
    let data = load(&a.data)?;
    let text = fs::read_to_string(&a.estimates).map_err(io_err(&a.estimates))?;
    let est = read_estimates(&text, data.len()).map_err(|e| CliError::Input(format!("{}: {e}", a.estimates.display())))?;
    let truth = pipeline::truth_matrix(&data);
    let report = if a.affine {
        evalkit::mae_after_affine(est.view(), truth.view())
    } else {
        evalkit::mae(est.view(), truth.view(), None)
    }
    .map_err(PipelineError::from)?;
    let mut outputs = Vec::new();
    export(&report, &a.out, &mut outputs)?;
    println!("MAE {:.3} m (p50 {:.3}, p90 {:.3}, p95 {:.3})", report.mae, report.p50, report.p90, report.p95);
    Ok(Outcome {
        inputs: vec![a.data, a.estimates],
        outputs,
        config: serde_json::json!({ "affine": a.affine }),
        seeds: vec![],
        manifest: a.out.with_extension("manifest.json"),
    })
}

fn sweep(a: SweepArgs) -> Result<Outcome, CliError> {
    let param: SweepParam = a.param.parse().map_err(CliError::Usage)?;
    let values: Vec<f64> = a
        .values
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--values: {e}")))?;
    if values.is_empty() || values.iter().any(|v| !(*v > 0.0)) {
        return Err(CliError::Usage("--values must be positive numbers".into()));
    }
    let mut charting: ChartingConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ChartingConfig::default(),
    };
    if let Some(e) = a.epochs {
        charting.siamese.epochs = e;
        charting.augmented.epochs = e;
    }
    if a.no_augmented {
        charting.run_augmented = false;
    }
    let config = SweepConfig {
        param,
        values,
        n_col: a.n_col,
        n_row: a.n_row,
        samples: a.samples,
        seed: a.seed,
        charting,
    };
    let results = pipeline::sweep(&config)?;
    let rows = pipeline::sweep_rows(&results);
    write(&a.out, pipeline::sweep_csv(&rows))?;
    let mut outputs = vec![a.out.clone()];
    for (v, r) in &results {
        let stem = a.out.with_file_name(format!(
            "{}_{v}",
            a.out.file_stem().map_or("sweep".into(), |s| s.to_string_lossy().into_owned())
        ));
        let reports: Vec<(&str, &EvalReport)> = [("triangulation", Some(&r.triangulation)), ("conventional", r.conventional.as_ref()), ("augmented", r.augmented.as_ref())]
            .into_iter()
            .filter_map(|(n, rep)| rep.map(|rep| (n, rep)))
            .collect();
        for (name, rep) in reports {
            let p = PathBuf::from(format!("{}_{name}.json", stem.display()));
            write(&p, evalkit::report_json(rep))?;
            outputs.push(p);
        }
    }
    for r in &rows {
        println!("{} = {}: {} MAE {:.3} m", a.param, r.value, r.method, r.mae);
    }
    let mut inputs = Vec::new();
    inputs.extend(a.config);
    Ok(Outcome {
        inputs,
        outputs,
        config: to_value(&config),
        seeds: vec![config.seed],
        manifest: manifest_path_for(&a.out),
    })
}
