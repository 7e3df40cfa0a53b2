//! `rigid-reg` command line: `register`, `synth` and `eval`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::bench::io::{
    load_cloud_auto, load_report_json, load_transform, save_cloud_auto, save_report_json, save_trace_csv,
    save_transform,
};
use crate::bench::metrics::{alpha_recall, rmse};
use crate::bench::normalize::Normalization;
use crate::bench::report::{Method, RegistrationReport};
use crate::bench::shapes::scanned_model;
use crate::bench::synth::{generate, GroundTruth, NoiseMode, SyntheticSpec};
use crate::bench::{run_method, RunOptions};
use crate::error::{Error, Result};
use crate::lie::RigidTransform;
use crate::p2point::NuSetting;
use crate::spatial::lower_median;

/// Exit code for solver degeneracy.
pub const EXIT_DEGENERATE: i32 = 2;
/// Exit code for every other failure, including bad arguments.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "rigid-reg", version, about = "Rigid point-cloud registration with robust and accelerated ICP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a source cloud onto a target cloud.
    Register(RegisterArgs),
    /// Generate a seeded partial-overlap problem.
    Synth(SynthArgs),
    /// RMSE and alpha-recall tables over a manifest.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub method: Method,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Initial transform (4x4 text), original coordinates.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Ground-truth transform; enables RMSE.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Kernel scale upper bound, normalized units.
    #[arg(long)]
    pub nu_max: Option<f64>,
    /// Kernel scale lower bound, normalized units.
    #[arg(long)]
    pub nu_min: Option<f64>,
    /// Stopping threshold override.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Register in the input coordinates.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Clone, Args)]
struct SynthArgs {
    /// Ordered input cloud. Defaults to the built-in scanned model.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Sample count of the built-in shape.
    #[arg(long, default_value_t = 5000)]
    points: usize,
    #[arg(long, default_value_t = 0.6)]
    front: f64,
    #[arg(long, default_value_t = 0.47)]
    back: f64,
    #[arg(long, default_value = "none")]
    noise: NoiseMode,
    /// Outliers added to the source, as a fraction of its points.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest random rotation angle in degrees.
    #[arg(long, default_value_t = 15.0)]
    max_angle: f64,
    /// Largest random translation per axis.
    #[arg(long, default_value_t = 0.05)]
    max_translation: f64,
    /// Use this ground truth instead of a random one.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out_source: PathBuf,
    #[arg(long)]
    out_target: PathBuf,
    #[arg(long)]
    out_gt: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Recall thresholds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.001")]
    alpha: Vec<f64>,
    /// Write the table here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FAILURE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Register(a) => register(&a).map(|r| print!("{}", summary(&r))),
        Command::Synth(a) => synth(&a),
        Command::Eval(a) => eval(&a).map(|t| print!("{t}")),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::Degenerate(_)) => {
            eprintln!("error: {e}");
            EXIT_DEGENERATE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn summary(r: &RegistrationReport) -> String {
    let mut s = format!(
        "method {}\niterations {}\nwall_time_seconds {:.6}\n",
        r.method, r.iterations, r.wall_time_seconds
    );
    if let Some(e) = r.rmse {
        writeln!(s, "rmse {e:e}").unwrap();
    }
    for n in &r.notes {
        writeln!(s, "note {n}").unwrap();
    }
    s
}

/// Loads, normalizes, registers and writes the requested outputs.
pub fn register(a: &RegisterArgs) -> Result<RegistrationReport> {
    let report = compute_registration(a)?;
    save_transform(&report.final_transform, &a.out)?;
    if let Some(p) = &a.trace {
        save_trace_csv(&report.trace, p)?;
    }
    if let Some(p) = &a.json {
        save_report_json(&report, p)?;
    }
    Ok(report)
}

/// [`register`] without the file outputs. The report's transform is in
/// original coordinates; energies, trace and RMSE are in the registration
/// frame.
pub fn compute_registration(a: &RegisterArgs) -> Result<RegistrationReport> {
    let src = load_cloud_auto(&a.source)?;
    let tgt = load_cloud_auto(&a.target)?;
    let init = a.init.as_deref().map(load_transform).transpose()?.unwrap_or_else(RigidTransform::identity);
    let gt = a.gt.as_deref().map(load_transform).transpose()?;
    let norm = if a.no_normalize {
        Normalization::identity()
    } else {
        Normalization::for_pair(&src, &tgt)?
    };
    let (src_n, tgt_n) = (norm.apply_cloud(&src), norm.apply_cloud(&tgt));
    let opts = RunOptions {
        initial_transform: norm.normalize_transform(&init),
        nu_max: a.nu_max.map_or(NuSetting::Auto, NuSetting::Value),
        nu_min: a.nu_min.map_or(NuSetting::Auto, NuSetting::Value),
        trans_eps: a.eps,
    };
    let mut report = run_method(a.method, &src_n, &tgt_n, &opts)?;
    report.rmse = gt.map(|g| rmse(&src_n, &report.final_transform, &norm.normalize_transform(&g)));
    report.final_transform = norm.denormalize_transform(&report.final_transform);
    if !a.no_normalize {
        report.notes.push(format!(
            "normalized about center ({:?}, {:?}, {:?}) with scale {:?}",
            norm.center.x, norm.center.y, norm.center.z, norm.scale
        ));
    }
    Ok(report)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cloud = match &a.input {
        Some(p) => load_cloud_auto(p)?,
        None => scanned_model(a.points)?,
    };
    let ground_truth = match &a.gt {
        Some(p) => GroundTruth::Given(load_transform(p)?),
        None => GroundTruth::Random {
            max_angle: a.max_angle.to_radians(),
            max_translation: a.max_translation,
        },
    };
    let spec = SyntheticSpec {
        overlap_front_fraction: a.front,
        overlap_back_fraction: a.back,
        noise_sigma_mode: a.noise,
        outlier_fraction: a.outliers,
        seed: a.seed,
        ground_truth,
    };
    let problem = generate(&cloud, &spec)?;
    save_cloud_auto(&problem.source, &a.out_source)?;
    save_cloud_auto(&problem.target, &a.out_target)?;
    save_transform(&problem.truth, &a.out_gt)
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub enum ManifestEntry {
    /// A saved report JSON carrying an RMSE.
    Report(PathBuf),
    /// A registration to run with default settings.
    Register {
        method: Method,
        source: PathBuf,
        target: PathBuf,
        gt: PathBuf,
        init: Option<PathBuf>,
    },
}

/// Line-oriented manifest:
///
/// ```text
/// # comment
/// report runs/a.json
/// register robust-icp src.ply tgt.ply gt.txt [init.txt]
/// ```
///
/// Relative paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path, origin: &str) -> Result<Vec<ManifestEntry>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let path = |s: &str| base.join(s);
        let entry = match toks.as_slice() {
            ["report", p] => ManifestEntry::Report(path(p)),
            ["register", m, s, t, g, rest @ ..] if rest.len() <= 1 => ManifestEntry::Register {
                method: m.parse().map_err(|e: Error| err(i + 1, e.to_string()))?,
                source: path(s),
                target: path(t),
                gt: path(g),
                init: rest.first().map(|p| path(p)),
            },
            _ => return Err(err(i + 1, format!("unrecognized manifest line {line:?}"))),
        };
        out.push(entry);
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{origin}: manifest has no entries")));
    }
    Ok(out)
}

fn entry_result(entry: &ManifestEntry, idx: usize) -> Result<(Method, f64)> {
    let report = match entry {
        ManifestEntry::Report(p) => load_report_json(p)?,
        ManifestEntry::Register { method, source, target, gt, init } => compute_registration(&RegisterArgs {
            method: *method,
            source: source.clone(),
            target: target.clone(),
            init: init.clone(),
            gt: Some(gt.clone()),
            nu_max: None,
            nu_min: None,
            eps: None,
            out: PathBuf::new(),
            trace: None,
            json: None,
            no_normalize: false,
        })?,
    };
    let r = report
        .rmse
        .ok_or_else(|| Error::Format(format!("manifest entry {} has no RMSE", idx + 1)))?;
    Ok((report.method, r))
}

/// Formats per-method rows of case count, median and mean RMSE and the
/// recall at each `alpha`.
pub fn eval_table(results: &[(Method, f64)], alphas: &[f64]) -> Result<String> {
    let mut methods: Vec<Method> = Vec::new();
    for (m, _) in results {
        if !methods.contains(m) {
            methods.push(*m);
        }
    }
    let mut out = String::from("method\tcases\tmedian_rmse\tmean_rmse");
    for a in alphas {
        write!(out, "\trecall@{a}").unwrap();
    }
    out.push('\n');
    for m in methods {
        let mut r: Vec<f64> = results.iter().filter(|(k, _)| *k == m).map(|(_, v)| *v).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        write!(out, "{m}\t{}\t{:e}\t{:e}", r.len(), lower_median(&mut r.clone()).unwrap(), mean).unwrap();
        for &a in alphas {
            let frac = alpha_recall(&r, a)?;
            let hits = r.iter().filter(|&&v| v < a).count();
            write!(out, "\t{hits}/{} ({frac:.6})", r.len()).unwrap();
        }
        r.clear();
        out.push('\n');
    }
    Ok(out)
}

fn eval(a: &EvalArgs) -> Result<String> {
    if a.alpha.is_empty() {
        return Err(Error::InvalidParameter("at least one alpha is required".into()));
    }
    let text = fs::read_to_string(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, base, &a.manifest.display().to_string())?;
    let results: Vec<(Method, f64)> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| entry_result(e, i))
        .collect::<Result<_>>()?;
    let table = eval_table(&results, &a.alpha)?;
    if let Some(p) = &a.out {
        fs::write(p, &table)?;
    }
    Ok(table)
}
