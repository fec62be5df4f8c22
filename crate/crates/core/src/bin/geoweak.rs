use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use geoweak_core::datamodel::{validate_dataset, Dataset, GeoPoint};
use geoweak_core::error::{Error, Result};
use geoweak_core::evaluator::{evaluate, EvalConfig};
use geoweak_core::geocluster::{cluster_dataset, dbscan, DbscanParams};
use geoweak_core::harness::report::{render_arm_comparison, ApScale, ApTable};
use geoweak_core::harness::{
    generate_synthetic, run_experiment, ExperimentConfig, SplitStrategy, SynthParams,
};
use geoweak_core::parsers::{
    filter_fair1m, parse_label_mode_manifest, parse_point_collection, parse_predictions,
    parse_split_manifest, read_dataset_file, write_dataset, write_label_mode_manifest,
    write_point_collection, write_split_manifest, ParseMode, PointLocation, FAIR1M_MAX_ANNOTATIONS,
    FAIR1M_MAX_DIM,
};
use geoweak_core::splitter::{
    derive_weak_labels, out_country_rules, sample_label_fractions, split_by_region,
    split_random_by_cluster, LabelMode, LabelModeAssignment, SplitRatios, WeakSource,
    US_CENTER_MERIDIAN,
};
use geoweak_core::teachersim::{simulate_pseudo_labels, NoiseModel};

#[derive(Parser)]
#[command(
    name = "geoweak",
    version,
    about = "Point-supervised detection data pipeline"
)]
struct Cli {
    /// Random seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (TOML) for `run`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that receives outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Abort on the first malformed record (default).
    #[arg(long, global = true, conflicts_with = "lenient")]
    strict: bool,
    /// Drop malformed records and keep going.
    #[arg(long, global = true)]
    lenient: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a dataset, writing it back in normalized form.
    Ingest(IngestArgs),
    /// Density-cluster geo points into farms.
    Cluster(ClusterArgs),
    /// Assign images to splits without breaking clusters.
    Split(SplitArgs),
    /// Choose strong and weak training images for a label fraction.
    Fractions(FractionArgs),
    /// Simulate pseudo boxes for the weak images.
    Pseudolabel(PseudoArgs),
    /// Score predictions against ground truth at several IoU thresholds.
    Evaluate(EvalArgs),
    /// Render an AP table with fraction and arm deltas.
    Report(ReportArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Run the full pipeline from a config.
    Run,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Drop images larger than 2000x2000 or with more than 100 annotations.
    #[arg(long)]
    fair1m_filter: bool,
}

#[derive(Args)]
struct ClusterArgs {
    /// Point collection; writes `clusters.csv`.
    #[arg(long, required_unless_present = "dataset")]
    points: Option<PathBuf>,
    /// Dataset whose annotation geo points are clustered; writes it back with cluster ids.
    #[arg(long, conflicts_with = "points")]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 2000.0)]
    eps_m: f64,
    #[arg(long, default_value_t = 3)]
    min_pts: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    ClusterRandom,
    Region,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset carrying cluster ids.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "cluster-random")]
    strategy: StrategyArg,
    /// train,val,test proportions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.15, 0.15])]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = US_CENTER_MERIDIAN, allow_hyphen_values = true)]
    meridian: f64,
}

#[derive(Args)]
struct FractionArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    #[arg(long)]
    fraction: f64,
}

#[derive(Args)]
struct PseudoArgs {
    /// Fully box-labelled dataset (hidden truth).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    modes: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    center_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    scale_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    drop_rate: f64,
    #[arg(long, default_value_t = 2.0)]
    score_alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    score_beta: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    preds: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75])]
    thresholds: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Fraction,
    Percent,
}

#[derive(Args)]
struct ReportArgs {
    /// AP table: group,fraction,iou_<t>...
    #[arg(long)]
    input: PathBuf,
    /// Second arm to compare against `input` (deltas are compare - input).
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "percent")]
    scale: ScaleArg,
    #[arg(long, default_value = "AP")]
    title: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    images: usize,
    #[arg(long, default_value_t = 1)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    countries: usize,
    #[arg(long, default_value_t = 100)]
    farms: usize,
    #[arg(long, default_value_t = 1)]
    min_objects: usize,
    #[arg(long, default_value_t = 6)]
    max_objects: usize,
    #[arg(long, default_value_t = 256)]
    image_size: u32,
    #[arg(long, default_value_t = 500.0)]
    spread_m: f64,
}

struct Ctx {
    seed: u64,
    mode: ParseMode,
    out: PathBuf,
}

impl Ctx {
    fn read(&self, path: &Path) -> Result<Dataset> {
        let parsed = read_dataset_file(path, self.mode)?;
        if parsed.dropped > 0 {
            eprintln!("dropped {} malformed record(s)", parsed.dropped);
        }
        Ok(parsed.dataset)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        fs::write(&path, text)?;
        Ok(path)
    }
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn ingest(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let mut d = ctx.read(&a.input)?;
    if a.fair1m_filter {
        let (kept, dropped) = filter_fair1m(&d, FAIR1M_MAX_DIM, FAIR1M_MAX_ANNOTATIONS);
        println!("fair1m filter dropped {dropped} image(s)");
        d = kept;
    }
    let report = validate_dataset(&d);
    ctx.write("validation.json", &json(&report)?)?;
    let path = ctx.write("dataset.json", &write_dataset(&d)?)?;
    println!(
        "{} images, {} boxes, {} points, {} violation(s) -> {}",
        report.images,
        report.boxes,
        report.points,
        report.violations.len(),
        path.display()
    );
    if report.is_valid() {
        Ok(())
    } else {
        for v in report.violations.iter().take(20) {
            eprintln!("{}", v.message);
        }
        Err(Error::Validation(report.violations.len()))
    }
}

fn cluster(ctx: &Ctx, a: &ClusterArgs) -> Result<()> {
    let params = DbscanParams::new(a.eps_m, a.min_pts)?;
    if let Some(path) = &a.dataset {
        let (d, report) = cluster_dataset(&ctx.read(path)?, &params)?;
        ctx.write("dataset.json", &write_dataset(&d)?)?;
        ctx.write("cluster_report.json", &json(&report)?)?;
        println!(
            "{} clusters, {} singleton images",
            report.clusters, report.singletons
        );
        return Ok(());
    }
    let records = parse_point_collection(File::open(a.points.as_ref().expect("clap enforces"))?)?;
    let points = records
        .iter()
        .map(|r| match r.location {
            PointLocation::Geo(g) => Ok(g),
            PointLocation::Pixel(_) => {
                Err(Error::Format("clustering needs geographic points".into()))
            }
        })
        .collect::<Result<Vec<GeoPoint>>>()?;
    let assignment = dbscan(&points, &params);
    ctx.write("clusters.csv", &assignment.to_manifest())?;
    println!(
        "{} points, {} clusters, {} noise",
        points.len(),
        assignment.n_clusters(),
        assignment.noise_count()
    );
    Ok(())
}

fn split(ctx: &Ctx, a: &SplitArgs) -> Result<()> {
    let d = ctx.read(&a.dataset)?;
    let assignment = match a.strategy {
        StrategyArg::ClusterRandom => {
            let [train, val, test] = a.ratios[..] else {
                return Err(Error::InvalidArgument("--ratios needs three values".into()));
            };
            split_random_by_cluster(&d, &SplitRatios::new(train, val, test)?, ctx.seed)?
        }
        StrategyArg::Region => {
            let (s, leak) = split_by_region(&d, &out_country_rules(a.meridian))?;
            ctx.write("leakage_report.json", &json(&leak)?)?;
            s
        }
    };
    ctx.write("splits.csv", &write_split_manifest(&assignment)?)?;
    for (s, n) in assignment.counts() {
        println!("{s}: {n}");
    }
    Ok(())
}

fn fractions(ctx: &Ctx, a: &FractionArgs) -> Result<()> {
    let d = ctx.read(&a.dataset)?;
    let splits = parse_split_manifest(File::open(&a.splits)?)?;
    let modes = sample_label_fractions(&d, &splits, a.fraction, ctx.seed)?;
    ctx.write("label_modes.csv", &write_label_mode_manifest(&modes)?)?;
    println!(
        "{} strong, {} weak",
        modes.strong_count(),
        modes.weak_count()
    );
    Ok(())
}

fn pseudolabel(ctx: &Ctx, a: &PseudoArgs) -> Result<()> {
    let truth = ctx.read(&a.dataset)?;
    let modes = parse_label_mode_manifest(File::open(&a.modes)?)?;
    let weak_ids = modes.ids(LabelMode::Weak);
    let weak_truth = Dataset::new(
        truth.class_table.clone(),
        truth
            .images
            .iter()
            .filter(|im| weak_ids.binary_search(&im.image_id).is_ok())
            .cloned()
            .collect(),
    );
    let weak = derive_weak_labels(
        &weak_truth,
        &modes_for(&modes, &weak_truth),
        WeakSource::BoxCenter,
    )?;
    let noise = NoiseModel {
        center_jitter_sigma: a.center_sigma,
        scale_jitter_sigma: a.scale_sigma,
        drop_rate: a.drop_rate,
        score_alpha: a.score_alpha,
        score_beta: a.score_beta,
    };
    let pseudo = simulate_pseudo_labels(&weak, &weak_truth, &noise, ctx.seed)?;
    ctx.write("pseudo_labels.json", &write_dataset(&pseudo)?)?;
    println!(
        "{} pseudo boxes on {} images",
        pseudo.annotation_count(),
        pseudo.images.len()
    );
    Ok(())
}

/// Restrict a label-mode manifest to the images of `d`.
fn modes_for(modes: &LabelModeAssignment, d: &Dataset) -> LabelModeAssignment {
    let ids = d.image_ids();
    LabelModeAssignment {
        modes: modes
            .modes
            .iter()
            .filter(|(id, _)| ids.contains(id))
            .map(|(k, v)| (*k, *v))
            .collect(),
    }
}

fn evaluate_cmd(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let gt = ctx.read(&a.gt)?;
    let preds = parse_predictions(File::open(&a.preds)?)?;
    let result = evaluate(&preds, &gt, &EvalConfig::new(a.thresholds.clone())?)?;
    ctx.write("eval.json", &json(&result)?)?;
    let csv = result.summary_csv();
    ctx.write("eval.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let scale = match a.scale {
        ScaleArg::Fraction => ApScale::Fraction,
        ScaleArg::Percent => ApScale::Percent,
    };
    let base = ApTable::from_csv(&fs::read_to_string(&a.input)?, scale)?;
    let mut md = base.render_markdown(&a.title);
    if let Some(other) = &a.compare {
        let other = ApTable::from_csv(&fs::read_to_string(other)?, scale)?;
        md.push('\n');
        md.push_str(&render_arm_comparison("input", &base, "compare", &other)?);
    }
    ctx.write("report.md", &md)?;
    ctx.write("report.csv", &base.to_csv())?;
    print!("{md}");
    Ok(())
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let corpus = generate_synthetic(&SynthParams {
        n_images: a.images,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        n_classes: a.classes,
        n_countries: a.countries,
        n_farms: a.farms,
        farm_spread_m: a.spread_m,
        image_size: a.image_size,
        seed: ctx.seed,
    })?;
    ctx.write("dataset.json", &write_dataset(&corpus.dataset)?)?;
    ctx.write("points.geojson", &write_point_collection(&corpus.points)?)?;
    println!(
        "{} images, {} boxes",
        corpus.dataset.images.len(),
        corpus.dataset.annotation_count()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.lenient {
        cfg.lenient = true;
    }
    let out = cfg
        .out_dir
        .clone()
        .filter(|_| cli.out_dir == Path::new("."))
        .unwrap_or_else(|| cli.out_dir.clone());
    let record = run_experiment(&cfg, &out)?;
    let strategy = match cfg.split_strategy {
        SplitStrategy::ClusterRandom => "cluster-random",
        SplitStrategy::Region => "region",
    };
    println!(
        "{} images, {} clusters, {strategy} split, {} fraction arm(s) -> {}",
        record.images,
        record.clusters,
        record.fractions.len(),
        out.display()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(0),
        mode: if cli.lenient {
            ParseMode::Lenient
        } else {
            ParseMode::Strict
        },
        out: cli.out_dir.clone(),
    };
    match &cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Cluster(a) => cluster(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::Fractions(a) => fractions(&ctx, a),
        Command::Pseudolabel(a) => pseudolabel(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Run => run(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
