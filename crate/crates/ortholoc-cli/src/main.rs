//! `ortholoc` command line: synthetic dataset generation, single-sample
//! localization/calibration, batch benchmarks, and ablation sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ortholoc::adhop::{GateMetric, MatcherChoice, PipelineConfig, PipelineMode};
use ortholoc::bench::{
    ablate_covisibility, ablate_domain, ablate_resolution, run_benchmark, BenchConfig,
};
use ortholoc::matching::{GtMatchParams, NccParams};
use ortholoc::metrics::compute_metrics;
use ortholoc::sample::Sample;
use ortholoc::synth::{
    anonymize, pair_sample_from, rasterize_dsm, render_dop, DomainShiftKind, PairOptions, Scene,
    SceneSpec, ViewSpec,
};
use ortholoc::CameraIntrinsics;

#[derive(Parser)]
#[command(name = "ortholoc", version, about = "UAV localization and calibration from orthophoto + surface-model geodata")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default scene description JSON to edit and feed to `synth`.
    SceneTemplate {
        /// Output path for the template.
        #[arg(long, default_value = "scene.json")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset: render a scene and emit sample
    /// directories for randomized views.
    Synth(SynthArgs),
    /// Localize one sample (known intrinsics).
    Localize(RunArgs),
    /// Calibrate one sample (estimate the focal length too).
    Calibrate(RunArgs),
    /// Run the benchmark over a dataset directory.
    Bench(BenchArgs),
    /// Ablation sweeps over a dataset directory.
    Ablate {
        #[command(subcommand)]
        which: AblateCommand,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description JSON (see `scene-template`).
    #[arg(long)]
    spec: PathBuf,
    /// Number of views to render.
    #[arg(long, default_value_t = 10)]
    views: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Obliqueness range in degrees, sampled uniformly.
    #[arg(long, default_value_t = 0.0)]
    obliq_min: f64,
    #[arg(long, default_value_t = 35.0)]
    obliq_max: f64,
    /// Camera altitude above the look-at point, meters.
    #[arg(long, default_value_t = 60.0)]
    altitude: f64,
    /// Query image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "320x240")]
    image_size: String,
    /// Focal length in pixels.
    #[arg(long, default_value_t = 400.0)]
    focal: f64,
    /// Reference-crop expansion margin, meters.
    #[arg(long, default_value_t = 5.0)]
    expansion: f64,
    /// Reference-crop random corner offsets, meters.
    #[arg(long, default_value_t = 20.0)]
    perturbation: f64,
    /// Shift each sample into a local coordinate frame.
    #[arg(long)]
    anonymize: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Sample directory.
    #[arg(long)]
    sample: PathBuf,
    /// Matcher: `ncc`, `gt`, `gt:TAU`, or `csv:PATH`.
    #[arg(long, default_value = "ncc")]
    matcher: String,
    /// Enable the homography refinement round.
    #[arg(long)]
    adhop: bool,
    /// Try the matcher in four orientations and keep the best.
    #[arg(long)]
    rotation_invariant: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the full result as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Dataset directory of sample subdirectories.
    #[arg(long)]
    data: PathBuf,
    /// Benchmark configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Matcher override (same syntax as `localize --matcher`).
    #[arg(long)]
    matcher: Option<String>,
    /// Enable the homography refinement round.
    #[arg(long)]
    adhop: bool,
    /// Calibrate instead of localize.
    #[arg(long)]
    calibrate: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum AblateCommand {
    /// Rerun the benchmark at several raster resolutions.
    Resolution {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated resampling factors.
        #[arg(long, default_value = "1.0,0.5,0.25")]
        factors: String,
        /// Also resample the query images.
        #[arg(long)]
        include_query: bool,
        #[command(flatten)]
        common: AblateCommon,
    },
    /// Rerun the benchmark at several covisibility ratios.
    Covis {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1.0,0.5,0.2,0.1")]
        ratios: String,
        #[command(flatten)]
        common: AblateCommon,
    },
    /// Sweep the ground-truth confidence threshold.
    Gtconf {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0.0,0.5,0.95,0.99")]
        taus: String,
        #[command(flatten)]
        common: AblateCommon,
    },
    /// Rerun the benchmark under simulated domain shifts.
    Domain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated kinds: none, photometric, geometric, both.
        #[arg(long, default_value = "none,photometric,both")]
        kinds: String,
        #[arg(long, default_value_t = 0.7)]
        strength: f64,
        #[command(flatten)]
        common: AblateCommon,
    },
}

#[derive(Args)]
struct AblateCommon {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    matcher: Option<String>,
    #[arg(long)]
    adhop: bool,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_matcher(s: &str) -> Result<MatcherChoice> {
    if s == "ncc" {
        return Ok(MatcherChoice::Ncc(NccParams::default()));
    }
    if s == "gt" {
        return Ok(MatcherChoice::Gt(GtMatchParams::default()));
    }
    if let Some(tau) = s.strip_prefix("gt:") {
        let tau: f64 = tau.parse().context("parsing gt matcher tau")?;
        return Ok(MatcherChoice::Gt(GtMatchParams {
            tau,
            ..Default::default()
        }));
    }
    if let Some(path) = s.strip_prefix("csv:") {
        return Ok(MatcherChoice::Csv(PathBuf::from(path)));
    }
    bail!("unknown matcher '{s}' (expected ncc, gt, gt:TAU, or csv:PATH)")
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().context("parsing numeric list"))
        .collect()
}

fn load_bench_config(
    config: Option<&PathBuf>,
    matcher: Option<&String>,
    adhop: bool,
    calibrate: bool,
    seed: Option<u64>,
) -> Result<BenchConfig> {
    let mut cfg: BenchConfig = match config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path).context("reading config")?)
            .context("parsing config JSON")?,
        None => BenchConfig::default(),
    };
    if let Some(m) = matcher {
        cfg.pipeline.matcher = parse_matcher(m)?;
        if matches!(cfg.pipeline.matcher, MatcherChoice::Gt(_)) {
            cfg.pipeline.min_confidence = 0.0;
        }
    }
    if adhop {
        cfg.pipeline.adhop = true;
    }
    if calibrate {
        cfg.pipeline.mode = PipelineMode::Calibrate;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn warn_georef(sample: &Sample) {
    for (name, raster) in [("dop", &sample.dop), ("dsm", &sample.dsm)] {
        if !raster.georef.follows_raster_convention() {
            eprintln!(
                "warning: {name} georef does not follow the top-left-origin convention \
                 (scale_x > 0, scale_y < 0); proceeding anyway"
            );
        }
    }
}

fn cmd_scene_template(out: &Path) -> Result<()> {
    // A ready-to-run example scene. The raster scale is chosen so the
    // default synth camera (400 px focal at 60 m altitude) images the
    // ground at the same resolution as the orthophoto, which the classical
    // correlation matcher needs; the ground-truth matcher has no such
    // constraint.
    let spec = SceneSpec {
        extent_m: (128.0, 128.0),
        base_elevation_m: 100.0,
        terrain: Some(ortholoc::synth::TerrainSpec {
            amplitude_m: 2.0,
            feature_scale_m: 40.0,
            octaves: 2,
            seed: 11,
        }),
        buildings: vec![
            ortholoc::synth::BuildingSpec {
                x0: 30.0,
                y0: 30.0,
                x1: 52.0,
                y1: 50.0,
                height_m: 12.0,
            },
            ortholoc::synth::BuildingSpec {
                x0: 76.0,
                y0: 60.0,
                x1: 94.0,
                y1: 84.0,
                height_m: 8.0,
            },
        ],
        texture: ortholoc::synth::TextureSpec::Procedural {
            seed: 1,
            detail_m: 4.0,
            road_spacing_m: 40.0,
        },
        raster_scale_m: 0.15,
    };
    fs::write(out, serde_json::to_string_pretty(&spec)?)?;
    println!("wrote scene template to {}", out.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec: SceneSpec = serde_json::from_str(
        &fs::read_to_string(&args.spec)
            .with_context(|| format!("reading scene spec {}", args.spec.display()))?,
    )
    .context("parsing scene spec JSON")?;
    let scene = Scene::new(spec).context("compiling scene")?;
    let (w, h) = args
        .image_size
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse::<u32>().ok()?, b.parse::<u32>().ok()?)))
        .context("parsing --image-size (expected WIDTHxHEIGHT)")?;
    if !(args.obliq_min <= args.obliq_max) || args.obliq_max > 85.0 || args.obliq_min < 0.0 {
        bail!("obliqueness range must satisfy 0 <= min <= max <= 85");
    }

    println!("rendering reference rasters ...");
    let dop = render_dop(&scene);
    let dsm = rasterize_dsm(&scene);

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (ex, ey) = scene.spec.extent_m;
    fs::create_dir_all(&args.out)?;
    let mut written = 0usize;
    let mut attempts = 0usize;
    while written < args.views && attempts < args.views * 10 {
        attempts += 1;
        let view = ViewSpec {
            altitude_m: args.altitude * rng.random_range(0.85..1.15),
            obliqueness_deg: rng.random_range(args.obliq_min..=args.obliq_max),
            azimuth_deg: rng.random_range(0.0..360.0),
            yaw_deg: 0.0,
            intrinsics: CameraIntrinsics::new_unchecked(
                args.focal,
                args.focal,
                w as f64 / 2.0,
                h as f64 / 2.0,
                w,
                h,
            ),
            look_at: [
                rng.random_range(0.3 * ex..0.7 * ex),
                rng.random_range(0.3 * ey..0.7 * ey),
                scene.spec.base_elevation_m,
            ],
        };
        let opts = PairOptions {
            expansion_m: args.expansion,
            perturbation_m: args.perturbation,
            seed: rng.random_range(0..u64::MAX / 2),
        };
        match pair_sample_from(&scene, &dop, &dsm, &view, &opts) {
            Ok(mut sample) => {
                sample.id = format!("sample_{written:04}");
                let sample = if args.anonymize {
                    anonymize(&sample, rng.random_range(0..u64::MAX / 2))
                } else {
                    sample
                };
                let dir = args.out.join(&sample.id);
                ortholoc::io::save_sample(&sample, &dir)
                    .with_context(|| format!("writing {}", dir.display()))?;
                written += 1;
            }
            Err(e) => {
                eprintln!("view rejected ({e}); retrying with a new draw");
            }
        }
    }
    if written < args.views {
        bail!("only generated {written}/{} samples", args.views);
    }
    println!("wrote {written} samples to {}", args.out.display());
    Ok(())
}

fn run_result_json(result: &ortholoc::LocResult, metrics: Option<&ortholoc::MetricBundle>) -> serde_json::Value {
    let est = result.final_estimate();
    let [qw, qx, qy, qz] = est.pose.to_quaternion();
    let t = est.pose.translation();
    let c = est.pose.camera_center();
    serde_json::json!({
        "pose": {
            "quaternion_wxyz": [qw, qx, qy, qz],
            "translation": [t.x, t.y, t.z],
            "camera_center": [c.x, c.y, c.z],
        },
        "intrinsics": {
            "fx": est.intrinsics.fx,
            "fy": est.intrinsics.fy,
            "cx": est.intrinsics.cx,
            "cy": est.intrinsics.cy,
        },
        "n_matches": result.n_matches_initial,
        "n_inliers": est.n_inliers,
        "mean_reproj_px": est.mean_reproj_px,
        "accepted_refinement": result.accepted_refinement,
        "homography_inlier_ratio": result.homography_inlier_ratio,
        "focal_depth_ambiguous": result.focal_depth_ambiguous,
        "timings_s": {
            "match": result.timings.match_s,
            "solve": result.timings.solve_s,
            "refine": result.timings.refine_s,
            "total": result.timings.total_s,
        },
        "metrics": metrics.map(|m| serde_json::json!({
            "me_px": m.me_px,
            "te_m": m.te_m,
            "re_deg": m.re_deg,
            "rpe_px": m.rpe_px,
            "rfe_pct": m.rfe_pct,
            "recall_1m_1deg": m.recall_1m_1deg,
            "recall_3m_3deg": m.recall_3m_3deg,
            "recall_5m_5deg": m.recall_5m_5deg,
        })),
    })
}

fn cmd_run(args: &RunArgs, mode: PipelineMode) -> Result<()> {
    let sample = ortholoc::io::load_sample(&args.sample)
        .with_context(|| format!("loading sample {}", args.sample.display()))?;
    warn_georef(&sample);
    let matcher = parse_matcher(&args.matcher)?;
    let min_confidence = if matches!(matcher, MatcherChoice::Gt(_)) {
        0.0
    } else {
        0.5
    };
    let cfg = PipelineConfig {
        matcher,
        adhop: args.adhop,
        rotation_invariant: args.rotation_invariant,
        min_confidence,
        mode,
        gate: GateMetric::OwnInliers,
        seed: args.seed,
        ..Default::default()
    };
    let result = match mode {
        PipelineMode::Localize => ortholoc::localize(&sample, &cfg)?,
        PipelineMode::Calibrate => ortholoc::calibrate(&sample, &cfg)?,
    };
    let metrics = if sample.gt_pose.is_some() {
        Some(compute_metrics(
            &result,
            &sample,
            mode == PipelineMode::Calibrate,
        )?)
    } else {
        None
    };

    let est = result.final_estimate();
    let c = est.pose.camera_center();
    println!(
        "matches: {} (refined: {}), inliers: {}, mean reprojection: {:.3} px",
        result.n_matches_initial,
        result
            .n_matches_refined
            .map(|n| n.to_string())
            .unwrap_or_else(|| "-".into()),
        est.n_inliers,
        est.mean_reproj_px
    );
    println!(
        "camera center: ({:.3}, {:.3}, {:.3}) m, refinement accepted: {}",
        c.x, c.y, c.z, result.accepted_refinement
    );
    if mode == PipelineMode::Calibrate {
        println!(
            "estimated focal: {:.2} px{}",
            est.intrinsics.fx,
            if result.focal_depth_ambiguous {
                " (warning: flat scene, focal/height ambiguous)"
            } else {
                ""
            }
        );
    }
    if let Some(m) = &metrics {
        println!(
            "vs ground truth: TE {:.4} m, RE {:.4} deg, RPE {} px, ME {} px{}",
            m.te_m,
            m.re_deg,
            m.rpe_px.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            m.me_px.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            m.rfe_pct
                .map(|v| format!(", RFE {v:.3}%"))
                .unwrap_or_default()
        );
    }
    if let Some(out) = &args.out {
        fs::write(
            out,
            serde_json::to_string_pretty(&run_result_json(&result, metrics.as_ref()))?,
        )?;
        println!("wrote result JSON to {}", out.display());
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let cfg = load_bench_config(
        args.config.as_ref(),
        args.matcher.as_ref(),
        args.adhop,
        args.calibrate,
        args.seed,
    )?;
    let summary = run_benchmark(&args.data, &cfg, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!(
        "wrote results.csv, timings.csv, summary.json to {}",
        args.out.display()
    );
    Ok(())
}

fn cmd_ablate(which: &AblateCommand) -> Result<()> {
    match which {
        AblateCommand::Resolution {
            data,
            out,
            factors,
            include_query,
            common,
        } => {
            let cfg = load_bench_config(
                common.config.as_ref(),
                common.matcher.as_ref(),
                common.adhop,
                false,
                common.seed,
            )?;
            let samples = ortholoc::bench::load_dataset(data)?;
            let rows = ablate_resolution(&samples, &parse_list(factors)?, *include_query, &cfg, out)?;
            print_rows(&rows);
        }
        AblateCommand::Covis {
            data,
            out,
            ratios,
            common,
        } => {
            let cfg = load_bench_config(
                common.config.as_ref(),
                common.matcher.as_ref(),
                common.adhop,
                false,
                common.seed,
            )?;
            let samples = ortholoc::bench::load_dataset(data)?;
            let rows = ablate_covisibility(&samples, &parse_list(ratios)?, &cfg, out)?;
            print_rows(&rows);
        }
        AblateCommand::Gtconf {
            data,
            out,
            taus,
            common,
        } => {
            let cfg = load_bench_config(
                common.config.as_ref(),
                common.matcher.as_ref(),
                common.adhop,
                false,
                common.seed,
            )?;
            let samples = ortholoc::bench::load_dataset(data)?;
            let rows = ortholoc::bench::sweep_gt_confidence(&samples, &parse_list(taus)?, &cfg, out)?;
            print_rows(&rows);
        }
        AblateCommand::Domain {
            data,
            out,
            kinds,
            strength,
            common,
        } => {
            let cfg = load_bench_config(
                common.config.as_ref(),
                common.matcher.as_ref(),
                common.adhop,
                false,
                common.seed,
            )?;
            let samples = ortholoc::bench::load_dataset(data)?;
            let parsed: Result<Vec<Option<DomainShiftKind>>> = kinds
                .split(',')
                .map(|k| match k.trim() {
                    "none" => Ok(None),
                    "photometric" => Ok(Some(DomainShiftKind::Photometric)),
                    "geometric" => Ok(Some(DomainShiftKind::Geometric)),
                    "both" => Ok(Some(DomainShiftKind::Both)),
                    other => bail!("unknown domain shift kind '{other}'"),
                })
                .collect();
            let rows = ablate_domain(&samples, &parsed?, *strength, &cfg, out)?;
            print_rows(&rows);
        }
    }
    Ok(())
}

fn print_rows(rows: &[ortholoc::bench::AblationRow]) {
    for row in rows {
        match &row.summary {
            Some(s) => println!(
                "{}: TE {} m, recall 1m-1deg {:.1}% ({} samples, {} failed)",
                row.parameter,
                s.median_te_m
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
                s.recall_1m_1deg_pct,
                s.n_samples,
                s.n_failed
            ),
            None => println!("{}: failed", row.parameter),
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::SceneTemplate { out } => cmd_scene_template(out),
        Command::Synth(args) => cmd_synth(args),
        Command::Localize(args) => cmd_run(args, PipelineMode::Localize),
        Command::Calibrate(args) => cmd_run(args, PipelineMode::Calibrate),
        Command::Bench(args) => cmd_bench(args),
        Command::Ablate { which } => cmd_ablate(which),
    }
}
