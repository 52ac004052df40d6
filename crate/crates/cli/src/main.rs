//! `voxharm` command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use voxharm::evaluation::{evaluate_dataset, EmptyPolicy, EvalCase};
use voxharm::histogram::{
    build_histogram, dataset_distance, emit_plot_data, emit_plot_json, padded_range, value_range, Histogram,
};
use voxharm::nifti::{self, DataType};
use voxharm::pipeline::{case_id, discover, generate_phantoms, run_pipeline, PhantomSpec, PipelineConfig, Stage};
use voxharm::region::{validate_regions, RegionSpec};
use voxharm::resample::{resample_labels, resample_volume, Boundary, ResampleSpec};
use voxharm::stats::compute_stats;
use voxharm::transforms::{
    harmonize_dataset, remap_labels, FittedMaps, Harmonization, HistogramMatchParams, LabelRemap, MatchMode,
    DEFAULT_MATCH_BINS,
};
use voxharm::{Error, LabelMap, Result, Vocabulary, Volume};

#[derive(Parser)]
#[command(
    name = "voxharm",
    version,
    about = "CT intensity harmonization, preprocessing and evaluation"
)]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "VOXHARM_THREADS")]
    threads: Option<usize>,
    /// Seed for stochastic steps; overrides any seed in a config or spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pooled intensity statistics over one or more globs.
    Stats {
        #[arg(required = true)]
        globs: Vec<String>,
        /// Percentile ranks to report.
        #[arg(long, value_delimiter = ',', default_value = "0.5,50,99.5")]
        percentiles: Vec<f64>,
    },
    /// Histogram plot data; each series is `[name=]glob`.
    Histogram {
        #[arg(required = true)]
        series: Vec<String>,
        #[arg(long, default_value_t = 256)]
        bins: usize,
        /// Value range `lo,hi`; defaults to the range of all series.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        range: Option<Vec<f64>>,
        /// CSV output, or JSON when the name ends in `.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits and applies a harmonization map from a source to a reference dataset.
    Harmonize {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// File pattern inside the source and reference directories.
        #[arg(long, default_value = "*.nii*")]
        pattern: String,
        #[arg(long, default_value_t = DEFAULT_MATCH_BINS)]
        bins: usize,
        #[arg(long, value_enum, default_value_t = Mode::PerVolume)]
        mode: Mode,
        /// Cap on reference voxels used for the reference CDF.
        #[arg(long)]
        subsample: Option<usize>,
    },
    /// Clip, normalize and resample per a pipeline config, without remap or harmonization.
    Preprocess(ConfigArgs),
    /// Relabels label maps with a remap file.
    Remap {
        #[arg(long)]
        map: PathBuf,
        #[arg(required = true)]
        globs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resamples volumes (or label maps with `--labels`) to a new spacing.
    Resample {
        /// Target spacing `a,b,c` in mm, or one value for isotropic.
        #[arg(long, value_delimiter = ',', required = true)]
        spacing: Vec<f64>,
        /// Interpolation order for intensities: 0, 1 or 3.
        #[arg(long, default_value_t = 3)]
        order: u8,
        #[arg(long, value_enum, default_value_t = BoundaryArg::Extrapolate)]
        boundary: BoundaryArg,
        /// Inputs are label maps; nearest-neighbour is used.
        #[arg(long)]
        labels: bool,
        #[arg(required = true)]
        globs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Region Dice between predicted and ground-truth label maps.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Region file (`[[regions]]` with `name` and `labels`); defaults to the five kidney regions.
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write one `case,region,dice` row per score.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Score cases where both masks are empty as 1 instead of leaving them undefined.
        #[arg(long)]
        empty_as_one: bool,
        #[arg(long, default_value = "*.nii*")]
        pattern: String,
    },
    /// Writes synthetic phantom volumes and label maps.
    Phantom {
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Target)]
        preset: Preset,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the full pipeline from a config file.
    Run(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Shift,
    Match,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    PerVolume,
    Pooled,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundaryArg {
    Extrapolate,
    Mirror,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Target,
    Source,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // First paragraph of clap's report, folded onto one line.
            let text = e.to_string();
            let message = text
                .lines()
                .take_while(|l| !l.trim().is_empty())
                .map(str::trim)
                .collect::<Vec<_>>()
                .join(" ");
            let message = message.trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": message }));
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    }
    match cli.command {
        Command::Stats { globs, percentiles } => {
            let volumes = read_volumes(&expand(&globs)?)?;
            let stats = compute_stats(&volumes, None, &percentiles)?;
            print_json(&json!({ "volumes": volumes.len(), "stats": stats }))
        }
        Command::Histogram {
            series,
            bins,
            range,
            out,
        } => histogram(&series, bins, range, &out),
        Command::Harmonize {
            method,
            source,
            reference,
            out,
            pattern,
            bins,
            mode,
            subsample,
        } => {
            let method = match method {
                Method::Shift => Harmonization::MomentShift,
                Method::Match => Harmonization::HistogramMatch(HistogramMatchParams {
                    bins,
                    mode: match mode {
                        Mode::PerVolume => MatchMode::PerVolume,
                        Mode::Pooled => MatchMode::Pooled,
                    },
                    reference_subsample: subsample,
                }),
            };
            harmonize(&method, &source, &reference, &out, &pattern, cli.seed.unwrap_or(0))
        }
        Command::Preprocess(args) => {
            let mut config = load_config(&args.config, cli.seed)?;
            let stages = config
                .effective_stages()
                .into_iter()
                .filter(|s| !matches!(s, Stage::Remap | Stage::Harmonize))
                .collect();
            config.stages = Some(stages);
            config.validate()?;
            summarize(&run_pipeline(&config, cli.threads)?)
        }
        Command::Run(args) => {
            let config = load_config(&args.config, cli.seed)?;
            summarize(&run_pipeline(&config, cli.threads)?)
        }
        Command::Remap { map, globs, out } => {
            let remap = LabelRemap::load(&map)?;
            let paths = expand(&globs)?;
            create_dir(&out)?;
            for path in &paths {
                let labels = nifti::read_labels(path, &Vocabulary::new(), false)?;
                let mapped = remap_labels(&labels, &remap).map_err(|e| e.in_stage("remap", case_id(path)))?;
                nifti::write_labels(&mapped, out.join(file_name(path)))?;
            }
            print_json(&json!({ "remapped": paths.len(), "out": out }))
        }
        Command::Resample {
            spacing,
            order,
            boundary,
            labels,
            globs,
            out,
        } => {
            let target_spacing = match spacing[..] {
                [s] => [s; 3],
                [a, b, c] => [a, b, c],
                _ => return Err(Error::InvalidArgument("--spacing takes one or three values".into())),
            };
            let spec = ResampleSpec {
                target_spacing,
                intensity_order: order,
                label_order: 0,
                boundary: match boundary {
                    BoundaryArg::Extrapolate => Boundary::Extrapolate,
                    BoundaryArg::Mirror => Boundary::Mirror,
                },
            };
            spec.validate()?;
            let paths = expand(&globs)?;
            create_dir(&out)?;
            for path in &paths {
                let dest = out.join(file_name(path));
                let id = case_id(path);
                if labels {
                    let l = nifti::read_labels(path, &Vocabulary::new(), false)?;
                    let r = resample_labels(&l, &spec).map_err(|e| e.in_stage("resample", &id))?;
                    nifti::write_labels(&r, dest)?;
                } else {
                    let v = nifti::read_volume(path)?;
                    let r = resample_volume(&v, &spec).map_err(|e| e.in_stage("resample", &id))?;
                    nifti::write_volume(&r, dest, DataType::Float32)?;
                }
            }
            print_json(&json!({ "resampled": paths.len(), "spacing": target_spacing, "out": out }))
        }
        Command::Evaluate {
            pred,
            gt,
            regions,
            out,
            csv,
            empty_as_one,
            pattern,
        } => {
            let regions = match regions {
                Some(path) => load_regions(&path)?,
                None => RegionSpec::kits_defaults(),
            };
            let policy = if empty_as_one {
                EmptyPolicy::One
            } else {
                EmptyPolicy::Undefined
            };
            evaluate(&pred, &gt, &pattern, &regions, policy, &out, csv.as_deref())
        }
        Command::Phantom {
            spec,
            preset,
            count,
            out,
        } => {
            let mut spec = match spec {
                Some(path) => PhantomSpec::load(path)?,
                None => match preset {
                    Preset::Target => PhantomSpec::target_preset(),
                    Preset::Source => PhantomSpec::source_preset(),
                },
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            if let Some(count) = count {
                spec.count = count;
            }
            let cases = generate_phantoms(&spec, &out)?;
            print_json(&json!({ "cases": cases.len(), "seed": spec.seed, "out": out }))
        }
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn file_name(path: &Path) -> &std::ffi::OsStr {
    path.file_name().unwrap_or(path.as_os_str())
}

/// Expands every glob; each must match at least one file. Result is sorted.
fn expand(globs: &[String]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for pattern in globs {
        let before = paths.len();
        let matches = glob::glob(pattern).map_err(|e| Error::InvalidArgument(format!("bad glob `{pattern}`: {e}")))?;
        for entry in matches {
            let path = entry.map_err(|e| Error::Io {
                path: e.path().to_path_buf(),
                source: e.into(),
            })?;
            if path.is_file() {
                paths.push(path);
            }
        }
        if paths.len() == before {
            return Err(Error::Empty(format!("`{pattern}` matches no files")));
        }
    }
    paths.sort();
    paths.dedup();
    Ok(paths)
}

fn read_volumes(paths: &[PathBuf]) -> Result<Vec<Volume>> {
    paths.iter().map(nifti::read_volume).collect()
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn summarize(manifest: &voxharm::pipeline::Manifest) -> Result<()> {
    let distances = manifest
        .harmonization
        .as_ref()
        .map(|h| json!({ "before": h.distance_before, "after": h.distance_after }));
    print_json(&json!({
        "outputs": manifest.outputs.len(),
        "out": manifest.config.output.dir,
        "stages": manifest.stages,
        "distance": distances,
        "digest": manifest.digest,
    }))
}

fn histogram(series: &[String], bins: usize, range: Option<Vec<f64>>, out: &Path) -> Result<()> {
    let mut named = BTreeMap::new();
    for (i, s) in series.iter().enumerate() {
        let (name, pattern) = match s.split_once('=') {
            Some((n, p)) => (n.to_string(), p.to_string()),
            None if series.len() == 1 => ("data".to_string(), s.clone()),
            None => (format!("series_{i}"), s.clone()),
        };
        let volumes = read_volumes(&expand(&[pattern])?)?;
        if named.insert(name.clone(), volumes).is_some() {
            return Err(Error::InvalidArgument(format!("series `{name}` given twice")));
        }
    }
    let (lo, hi) = match range.as_deref() {
        Some(&[lo, hi]) if lo < hi => (lo, hi),
        Some(r) => {
            return Err(Error::InvalidArgument(format!(
                "--range needs lo,hi with lo < hi, got {r:?}"
            )))
        }
        None => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for volumes in named.values() {
                let (a, b) = value_range(volumes)?;
                lo = lo.min(a);
                hi = hi.max(b);
            }
            padded_range(lo, hi)
        }
    };
    let histograms: BTreeMap<String, Histogram> = named
        .iter()
        .map(|(name, volumes)| Ok((name.clone(), build_histogram(volumes, lo, hi, bins)?)))
        .collect::<Result<_>>()?;
    if out.extension().is_some_and(|e| e == "json") {
        emit_plot_json(&histograms, out)?;
    } else {
        emit_plot_data(&histograms, out)?;
    }
    let outside: BTreeMap<&String, u64> = histograms
        .iter()
        .map(|(n, h)| (n, h.underflow() + h.overflow()))
        .collect();
    print_json(&json!({ "bins": bins, "range": [lo, hi], "out_of_range": outside, "out": out }))
}

fn harmonize(
    method: &Harmonization,
    source: &Path,
    reference: &Path,
    out: &Path,
    pattern: &str,
    seed: u64,
) -> Result<()> {
    let load = |dir: &Path| -> Result<(Vec<String>, Vec<Volume>)> {
        let found = discover(dir, pattern)?;
        if found.is_empty() {
            return Err(Error::Empty(format!("no `{pattern}` files in {}", dir.display())));
        }
        let volumes = found
            .iter()
            .map(|(id, p)| nifti::read_volume(p).map_err(|e| e.in_stage("load", id)))
            .collect::<Result<_>>()?;
        Ok((found.into_iter().map(|(id, _)| id).collect(), volumes))
    };
    let (ids, src) = load(source)?;
    let (_, reference) = load(reference)?;
    let harmonized = harmonize_dataset(&src, &reference, method, seed).map_err(|e| e.in_stage("harmonize", "*"))?;

    for sub in ["volumes", "maps"] {
        create_dir(&out.join(sub))?;
    }
    for (id, volume) in ids.iter().zip(&harmonized.volumes) {
        nifti::write_volume(
            volume,
            out.join("volumes").join(format!("{id}.nii.gz")),
            DataType::Float32,
        )?;
    }
    match &harmonized.maps {
        FittedMaps::None => {}
        FittedMaps::Shared(map) => map.save(out.join("maps").join(format!("{}.json", method.name())))?,
        FittedMaps::PerVolume(maps) => {
            for (id, map) in ids.iter().zip(maps) {
                map.save(out.join("maps").join(format!("{id}.json")))?;
            }
        }
    }
    let before = dataset_distance(&src, &reference, DEFAULT_MATCH_BINS)?;
    let after = dataset_distance(&harmonized.volumes, &reference, DEFAULT_MATCH_BINS)?;
    print_json(&json!({
        "method": method.name(),
        "volumes": ids.len(),
        "distance_bins": DEFAULT_MATCH_BINS,
        "distance_before": before,
        "distance_after": after,
        "out": out,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionFile {
    regions: Vec<RegionSpec>,
}

fn load_regions(path: &Path) -> Result<Vec<RegionSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let file: RegionFile = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    validate_regions(&file.regions)?;
    Ok(file.regions)
}

fn evaluate(
    pred: &Path,
    gt: &Path,
    pattern: &str,
    regions: &[RegionSpec],
    policy: EmptyPolicy,
    out: &Path,
    csv: Option<&Path>,
) -> Result<()> {
    let truths = discover(gt, pattern)?;
    let preds: BTreeMap<String, PathBuf> = discover(pred, pattern)?.into_iter().collect();
    if truths.is_empty() {
        return Err(Error::Empty(format!("no `{pattern}` files in {}", gt.display())));
    }
    let mut pairs: Vec<(String, LabelMap, LabelMap)> = Vec::new();
    for (id, gt_path) in &truths {
        let pred_path = preds
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no prediction for case `{id}` in {}", pred.display())))?;
        let read = |p: &Path| nifti::read_labels(p, &Vocabulary::kits(), false).map_err(|e| e.in_stage("evaluate", id));
        pairs.push((id.clone(), read(pred_path)?, read(gt_path)?));
    }
    if let Some(extra) = preds.keys().find(|id| !truths.iter().any(|(t, _)| t == *id)) {
        return Err(Error::InvalidArgument(format!(
            "prediction `{extra}` has no ground truth"
        )));
    }
    let cases: Vec<EvalCase<'_>> = pairs.iter().map(|(id, p, g)| EvalCase { id, pred: p, gt: g }).collect();
    let report = evaluate_dataset(&cases, regions, policy)?;
    report.write_json(out)?;
    if let Some(csv) = csv {
        report.write_csv(csv)?;
    }
    println!("{:<20} {:>12} {:>10}", "region", "dice x100", "undefined");
    for r in regions {
        let score = report.aggregate[&r.name].map_or("-".to_string(), |s| format!("{:.6}", s * 100.0));
        println!("{:<20} {:>12} {:>10}", r.name, score, report.undefined_counts[&r.name]);
    }
    Ok(())
}
