mod config;
mod svg;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a2_core::autodiff::Fault;
use a2_core::io::{load_scene, load_weights, save_scene, save_weights};
use a2_core::network::{ModelWeights, NetworkConfig};
use a2_core::outlier::DEFAULT_THRESHOLD;
use a2_core::pose::{localize, match_scene, outlier_sweep, SweepOptions, SweepRow};
use a2_core::synth::{generate_scene, ScenePair, SynthConfig};
use a2_core::train::{grad_check, train_from, EpochLog};
use a2_core::{CorrespondenceSet, Error};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit 2.
    Usage(String),
    /// Anything that went wrong while running; exit 1.
    Failed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Failed(format!("{}: {e}", path.display()))
}

fn with_path(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| CliError::Failed(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "a2", version, about = "Descriptor-free 2D-3D matching and localization")]
struct Cli {
    /// TOML run configuration with [dataset] [synth] [network] [train] [ransac] [gradcheck].
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scene pairs and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Overrides [dataset] count.
        #[arg(long)]
        count: Option<usize>,
        /// Overrides [synth] seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a directory of scenes; writes weights and a per-epoch loss CSV.
    Train {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the weights path with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Initial and filtered correspondences for one scene.
    Match {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the query pose of one scene and report errors against ground truth.
    Localize {
        #[arg(long, required_unless_present = "oracle")]
        weights: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
        /// Use the ground-truth correspondences instead of the network.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AUC against injected outlier ratio; writes CSV and an SVG plot.
    Sweep {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the CSV path with an .svg extension.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient path.
    Gradcheck {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Args, Clone, Copy)]
struct FilterArgs {
    /// Inlier probability threshold of the outlier filter.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Skip outlier rejection and keep every initial match.
    #[arg(long)]
    no_or: bool,
}

impl FilterArgs {
    fn threshold(self) -> CliResult<Option<f64>> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CliError::Usage(format!("--threshold {} outside [0, 1]", self.threshold)));
        }
        Ok((!self.no_or).then_some(self.threshold))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("A2_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("A2_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failed(e.to_string()))
}

fn run(cli: Cli) -> CliResult<u8> {
    configure_threads()?;
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { out, count, seed } => cmd_synth(&cfg, &out, count, seed),
        Command::Train { scenes, out, log } => cmd_train(&cfg, &scenes, &out, log.as_deref()),
        Command::Match {
            weights,
            scene,
            filter,
            out,
        } => cmd_match(&weights, &scene, filter.threshold()?, out.as_deref()),
        Command::Localize {
            weights,
            scene,
            filter,
            oracle,
            out,
        } => cmd_localize(&cfg, weights.as_deref(), &scene, filter.threshold()?, oracle, out.as_deref()),
        Command::Sweep {
            weights,
            scenes,
            ratios,
            seeds,
            filter,
            oracle,
            out,
            svg,
        } => {
            let opts = SweepOptions {
                seeds,
                threshold: filter.threshold()?,
                oracle,
                ransac: cfg.ransac.clone(),
            };
            cmd_sweep(&weights, &scenes, &ratios, &opts, &out, svg.as_deref())
        }
        Command::Gradcheck { samples, inject_fault } => cmd_gradcheck(&cfg, samples, inject_fault),
    }
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(at(p)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Failed(e.to_string())),
    }
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Failed(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    count: usize,
    synth: SynthConfig,
    files: Vec<String>,
}

fn scene_name(i: usize) -> String {
    format!("scene_{i:05}.json")
}

fn cmd_synth(cfg: &RunConfig, out: &Path, count: Option<usize>, seed: Option<u64>) -> CliResult<u8> {
    let count = count.unwrap_or(cfg.dataset.count);
    let base = SynthConfig {
        seed: seed.unwrap_or(cfg.synth.seed),
        ..cfg.synth.clone()
    };
    fs::create_dir_all(out).map_err(at(out))?;
    let scenes: Vec<ScenePair> = {
        use rayon::prelude::*;
        (0..count)
            .into_par_iter()
            .map(|i| {
                generate_scene(&SynthConfig {
                    seed: base.seed.wrapping_add(i as u64),
                    ..base.clone()
                })
            })
            .collect::<Result<_, _>>()?
    };
    let mut files = Vec::with_capacity(count);
    for (i, s) in scenes.iter().enumerate() {
        let name = scene_name(i);
        let path = out.join(&name);
        save_scene(&path, s).map_err(with_path(&path))?;
        files.push(name);
    }
    let manifest = Manifest {
        seed: base.seed,
        count,
        synth: base,
        files,
    };
    let path = out.join("manifest.json");
    fs::write(&path, to_json(&manifest)?).map_err(at(&path))?;
    Ok(0)
}

fn load_scene_dir(dir: &Path) -> CliResult<Vec<ScenePair>> {
    let entries = fs::read_dir(dir).map_err(at(dir))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != "manifest.json")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Failed(format!("no scene files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| load_scene(p).map_err(with_path(p)))
        .collect()
}

fn load_model(path: &Path) -> CliResult<ModelWeights> {
    load_weights(path).map_err(with_path(path))
}

pub const LOSS_CSV_HEADER: &str = "epoch,matching_loss,rejection_loss,total,wall_seconds";

fn loss_row(e: &EpochLog) -> String {
    format!(
        "{},{},{},{},{:.3}\n",
        e.epoch, e.matching_loss, e.rejection_loss, e.total, e.wall_seconds
    )
}

fn cmd_train(cfg: &RunConfig, scenes: &Path, out: &Path, log: Option<&Path>) -> CliResult<u8> {
    let dataset = load_scene_dir(scenes)?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("csv"));
    let mut csv = fs::File::create(&log_path).map_err(at(&log_path))?;
    writeln!(csv, "{LOSS_CSV_HEADER}").map_err(at(&log_path))?;
    let init = ModelWeights::init(&cfg.network, cfg.train.seed)?;
    let mut write_err = None;
    let outcome = train_from(init, &dataset, &cfg.train, |e| {
        if let Err(err) = csv.write_all(loss_row(e).as_bytes()) {
            write_err.get_or_insert(err);
        }
        eprintln!("epoch {:>3}  loss {:.6}", e.epoch, e.total);
    })?;
    if let Some(err) = write_err {
        return Err(at(&log_path)(err));
    }
    save_weights(out, &outcome.weights).map_err(with_path(out))?;
    Ok(0)
}

#[derive(Serialize)]
struct MatchEntry {
    keypoint: usize,
    point: usize,
    score: f64,
    inlier_prob: f64,
}

#[derive(Serialize)]
struct MatchReport {
    threshold: Option<f64>,
    initial: Vec<MatchEntry>,
    #[serde(rename = "final")]
    final_set: Vec<MatchEntry>,
}

fn entries(set: &CorrespondenceSet, initial: &CorrespondenceSet, probs: &[f64]) -> Vec<MatchEntry> {
    set.iter()
        .map(|c| {
            let idx = initial
                .iter()
                .position(|i| i.keypoint == c.keypoint && i.point == c.point)
                .expect("final matches come from the initial set");
            MatchEntry {
                keypoint: c.keypoint,
                point: c.point,
                score: c.score,
                inlier_prob: probs[idx],
            }
        })
        .collect()
}

fn cmd_match(weights: &Path, scene: &Path, threshold: Option<f64>, out: Option<&Path>) -> CliResult<u8> {
    let w = load_model(weights)?;
    let pair = load_scene(scene).map_err(with_path(scene))?;
    let m = match_scene(&pair, &w, threshold)?;
    let report = MatchReport {
        threshold,
        initial: entries(&m.initial, &m.initial, &m.probs),
        final_set: entries(&m.final_set, &m.initial, &m.probs),
    };
    write_output(out, &to_json(&report)?)?;
    Ok(0)
}

#[derive(Serialize)]
struct LocalizeReport {
    status: &'static str,
    n_correspondences: usize,
    n_inliers: usize,
    rotation_error_deg: Option<f64>,
    translation_error: Option<f64>,
    reprojection_error_px: Option<f64>,
    pose: Option<a2_core::geometry::RigidPose>,
}

fn cmd_localize(
    cfg: &RunConfig,
    weights: Option<&Path>,
    scene: &Path,
    threshold: Option<f64>,
    oracle: bool,
    out: Option<&Path>,
) -> CliResult<u8> {
    let pair = load_scene(scene).map_err(with_path(scene))?;
    let corrs = if oracle {
        pair.gt_matches.clone()
    } else {
        let path = weights.ok_or_else(|| CliError::Usage("--weights is required without --oracle".into()))?;
        match_scene(&pair, &load_model(path)?, threshold)?.final_set
    };
    let r = localize(&pair, &corrs, &cfg.ransac)?;
    let finite = |v: f64| r.success.then_some(v);
    let report = LocalizeReport {
        status: if r.success { "ok" } else { "LocalizationFailed" },
        n_correspondences: r.n_correspondences,
        n_inliers: r.n_inliers,
        rotation_error_deg: finite(r.rotation_error_deg),
        translation_error: finite(r.translation_error),
        reprojection_error_px: finite(r.reprojection_error),
        pose: r.pose,
    };
    write_output(out, &to_json(&report)?)?;
    Ok(0)
}

fn cmd_sweep(
    weights: &Path,
    scenes: &Path,
    ratios: &[f64],
    opts: &SweepOptions,
    out: &Path,
    svg: Option<&Path>,
) -> CliResult<u8> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(CliError::Usage(format!("ratio {r} outside [0, 1]")));
    }
    let w = load_model(weights)?;
    let dataset = load_scene_dir(scenes)?;
    let rows = outlier_sweep(&w, &dataset, ratios, opts)?;
    let mut csv = format!("{}\n", SweepRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    fs::write(out, csv).map_err(at(out))?;
    let svg_path = svg.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("svg"));
    fs::write(&svg_path, svg::sweep_plot(&rows)).map_err(at(&svg_path))?;
    Ok(0)
}

fn cmd_gradcheck(cfg: &RunConfig, samples: Option<usize>, inject_fault: bool) -> CliResult<u8> {
    let gc = &cfg.gradcheck;
    let samples = samples.unwrap_or(gc.samples);
    let scene = generate_scene(&SynthConfig {
        n_points: gc.n_points,
        inlier_fraction: 0.75,
        pixel_noise_sigma: 1.0,
        seed: gc.seed.wrapping_add(11),
        ..SynthConfig::default()
    })?;
    let net = NetworkConfig {
        d: gc.d,
        encoder_units: 1,
        classifier_units: 2,
        ..cfg.network.clone()
    };
    let w = ModelWeights::init(&net, gc.seed.wrapping_add(5))?;
    let fault = inject_fault.then_some(Fault::LeakyReluSlope);
    let report = grad_check(&scene, &w, samples, gc.seed, fault)?;
    println!("{:<16} {:>12}", "module", "max_rel_err");
    for (module, err) in &report.per_module {
        println!("{module:<16} {err:>12.3e}");
    }
    let worst = report.worst().ok_or_else(|| CliError::Failed("no parameters sampled".into()))?;
    println!(
        "checked {} parameters; max relative error {:.3e} at {}[{}]; max absolute difference {:.3e}",
        report.checks.len(),
        report.max_rel_err,
        worst.name,
        worst.index,
        report.max_abs_diff
    );
    if report.passed(gc.tolerance) {
        println!("PASS");
        Ok(0)
    } else {
        println!(
            "FAIL: worst parameter {}[{}] analytic {:.6e} numeric {:.6e}",
            worst.name, worst.index, worst.analytic, worst.numeric
        );
        Ok(1)
    }
}
