//! Batch benchmark runner and ablation drivers: per-sample result records,
//! aggregate summaries, and the resolution / covisibility / ground-truth
//! confidence / domain-shift sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adhop::{calibrate, localize, LocResult, MatcherChoice, PipelineConfig, PipelineMode};
use crate::matching::GtMatchParams;
use crate::metrics::{compute_metrics, MetricBundle};
use crate::raster::RasterError;
use crate::sample::{crop_covis, Sample};
use crate::synth::{domain_shift, DomainShiftKind};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("dataset directory contains no samples")]
    EmptyDataset,
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Benchmark configuration: the pipeline settings plus the global seed all
/// per-sample seeds derive from.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BenchConfig {
    pub pipeline: PipelineConfig,
    pub seed: u64,
}

/// Deterministic per-sample seed: a hash of the global seed and the sample
/// id, so batch order and parallelism cannot change per-sample randomness.
pub fn derive_sample_seed(global: u64, sample_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sample_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut z = h ^ global.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One benchmark row. Metrics are absent (not zero) when the run failed or
/// ground truth was missing; failures still count against recall.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub sample_id: String,
    /// Empty string for success, otherwise the failure reason.
    pub failure: Option<String>,
    pub me_px: Option<f64>,
    pub te_m: Option<f64>,
    pub re_deg: Option<f64>,
    pub rpe_px: Option<f64>,
    pub rfe_pct: Option<f64>,
    pub n_matches: usize,
    pub n_inliers: usize,
    pub accepted_refinement: bool,
    pub recall_1m_1deg: bool,
    pub recall_3m_3deg: bool,
    pub recall_5m_5deg: bool,
    /// Wall-clock seconds; written to the timing sidecar only, so the main
    /// results file stays bit-reproducible.
    pub runtime_s: f64,
}

impl ResultRecord {
    fn failed(sample_id: &str, reason: String, runtime_s: f64) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            failure: Some(reason),
            me_px: None,
            te_m: None,
            re_deg: None,
            rpe_px: None,
            rfe_pct: None,
            n_matches: 0,
            n_inliers: 0,
            accepted_refinement: false,
            recall_1m_1deg: false,
            recall_3m_3deg: false,
            recall_5m_5deg: false,
            runtime_s,
        }
    }

    fn from_metrics(sample_id: &str, result: &LocResult, m: &MetricBundle) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            failure: None,
            me_px: m.me_px,
            te_m: Some(m.te_m),
            re_deg: Some(m.re_deg),
            rpe_px: m.rpe_px,
            rfe_pct: m.rfe_pct,
            n_matches: result.n_matches_initial,
            n_inliers: result.final_estimate().n_inliers,
            accepted_refinement: result.accepted_refinement,
            recall_1m_1deg: m.recall_1m_1deg,
            recall_3m_3deg: m.recall_3m_3deg,
            recall_5m_5deg: m.recall_5m_5deg,
            runtime_s: m.runtime_s,
        }
    }
}

/// Aggregate over a batch. Medians are taken over successful estimates;
/// recall percentages are reported both over all samples (failures count
/// as misses) and over successes only, because either convention can be
/// wanted downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub n_samples: usize,
    pub n_success: usize,
    pub n_failed: usize,
    pub median_me_px: Option<f64>,
    pub median_te_m: Option<f64>,
    pub median_re_deg: Option<f64>,
    pub median_rpe_px: Option<f64>,
    pub median_rfe_pct: Option<f64>,
    pub recall_1m_1deg_pct: f64,
    pub recall_3m_3deg_pct: f64,
    pub recall_5m_5deg_pct: f64,
    pub recall_1m_1deg_success_only_pct: f64,
    pub accepted_refinement_pct: f64,
    pub total_runtime_s: f64,
    pub convention: String,
}

fn median_of(values: Vec<f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Summary statistics over a set of records.
pub fn summarize(records: &[ResultRecord]) -> BenchSummary {
    let n = records.len();
    let successes: Vec<&ResultRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
    let n_success = successes.len();
    let pct = |count: usize, total: usize| {
        if total == 0 {
            0.0
        } else {
            100.0 * count as f64 / total as f64
        }
    };
    let r1 = records.iter().filter(|r| r.recall_1m_1deg).count();
    let r3 = records.iter().filter(|r| r.recall_3m_3deg).count();
    let r5 = records.iter().filter(|r| r.recall_5m_5deg).count();
    BenchSummary {
        n_samples: n,
        n_success,
        n_failed: n - n_success,
        median_me_px: median_of(successes.iter().filter_map(|r| r.me_px).collect()),
        median_te_m: median_of(successes.iter().filter_map(|r| r.te_m).collect()),
        median_re_deg: median_of(successes.iter().filter_map(|r| r.re_deg).collect()),
        median_rpe_px: median_of(successes.iter().filter_map(|r| r.rpe_px).collect()),
        median_rfe_pct: median_of(successes.iter().filter_map(|r| r.rfe_pct).collect()),
        recall_1m_1deg_pct: pct(r1, n),
        recall_3m_3deg_pct: pct(r3, n),
        recall_5m_5deg_pct: pct(r5, n),
        recall_1m_1deg_success_only_pct: pct(
            successes.iter().filter(|r| r.recall_1m_1deg).count(),
            n_success,
        ),
        accepted_refinement_pct: pct(
            records.iter().filter(|r| r.accepted_refinement).count(),
            n,
        ),
        total_runtime_s: records.iter().map(|r| r.runtime_s).sum(),
        convention: "medians over successful estimates; recall over all samples with failures \
                     counted as misses"
            .into(),
    }
}

/// Runs the configured pipeline on one sample, never panicking: failures
/// come back as failed records.
pub fn run_one(sample: &Sample, cfg: &BenchConfig) -> ResultRecord {
    let started = std::time::Instant::now();
    let mut pipeline = cfg.pipeline.clone();
    pipeline.seed = derive_sample_seed(cfg.seed, &sample.id);
    let result = match pipeline.mode {
        PipelineMode::Localize => localize(sample, &pipeline),
        PipelineMode::Calibrate => calibrate(sample, &pipeline),
    };
    match result {
        Ok(loc) => {
            let compute_rfe = pipeline.mode == PipelineMode::Calibrate;
            match compute_metrics(&loc, sample, compute_rfe) {
                Ok(m) => ResultRecord::from_metrics(&sample.id, &loc, &m),
                Err(e) => {
                    ResultRecord::failed(&sample.id, e.to_string(), started.elapsed().as_secs_f64())
                }
            }
        }
        Err(e) => ResultRecord::failed(&sample.id, e.to_string(), started.elapsed().as_secs_f64()),
    }
}

/// Runs the benchmark over in-memory samples (the ablation drivers reuse
/// this after transforming the data).
pub fn run_benchmark_samples(samples: &[Sample], cfg: &BenchConfig) -> (Vec<ResultRecord>, BenchSummary) {
    let records: Vec<ResultRecord> = samples.iter().map(|s| run_one(s, cfg)).collect();
    let summary = summarize(&records);
    (records, summary)
}

const RESULTS_HEADER: &str = "sample_id,status,me_px,te_m,re_deg,rpe_px,rfe_pct,n_matches,\
                              n_inliers,accepted_refinement,recall_1m_1deg,recall_3m_3deg,\
                              recall_5m_5deg";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Serializes records in a stable column order. Wall-clock timing is kept
/// out of this file so identical seeds produce identical bytes.
pub fn records_to_csv(records: &[ResultRecord]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in records {
        let status = match &r.failure {
            None => "ok".to_string(),
            Some(reason) => format!("failed: {}", reason.replace([',', '\n'], ";")),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.sample_id,
            status,
            opt_field(r.me_px),
            opt_field(r.te_m),
            opt_field(r.re_deg),
            opt_field(r.rpe_px),
            opt_field(r.rfe_pct),
            r.n_matches,
            r.n_inliers,
            r.accepted_refinement,
            r.recall_1m_1deg,
            r.recall_3m_3deg,
            r.recall_5m_5deg,
        );
    }
    out
}

fn write_outputs(
    records: &[ResultRecord],
    summary: &BenchSummary,
    out_dir: &Path,
) -> Result<(), BenchError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("results.csv"), records_to_csv(records))?;
    let mut timings = String::from("sample_id,runtime_s\n");
    for r in records {
        let _ = writeln!(timings, "{},{}", r.sample_id, r.runtime_s);
    }
    fs::write(out_dir.join("timings.csv"), timings)?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(summary)?,
    )?;
    Ok(())
}

/// Loads every sample directory under `data_dir`, sorted by name.
pub fn load_dataset(data_dir: &Path) -> Result<Vec<Sample>, BenchError> {
    let mut dirs: Vec<_> = fs::read_dir(data_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("camera.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    let mut samples = Vec::with_capacity(dirs.len());
    for d in dirs {
        samples.push(crate::io::load_sample(&d)?);
    }
    Ok(samples)
}

/// Full benchmark over a dataset directory: per-sample records plus an
/// aggregate summary, both written under `out_dir`.
pub fn run_benchmark(
    data_dir: &Path,
    cfg: &BenchConfig,
    out_dir: &Path,
) -> Result<BenchSummary, BenchError> {
    let samples = load_dataset(data_dir)?;
    let (records, summary) = run_benchmark_samples(&samples, cfg);
    write_outputs(&records, &summary, out_dir)?;
    Ok(summary)
}

/// One ablation table row: the swept parameter and the resulting summary;
/// `failed` marks parameters that could not be applied at all.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub parameter: String,
    pub failed: bool,
    pub summary: Option<BenchSummary>,
}

fn ablation_table_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "parameter,status,n_samples,n_failed,median_me_px,median_te_m,median_re_deg,\
         median_rpe_px,median_rfe_pct,recall_1m_1deg_pct,recall_3m_3deg_pct,recall_5m_5deg_pct\n",
    );
    for row in rows {
        match &row.summary {
            Some(s) => {
                let _ = writeln!(
                    out,
                    "{},ok,{},{},{},{},{},{},{},{},{},{}",
                    row.parameter,
                    s.n_samples,
                    s.n_failed,
                    opt_field(s.median_me_px),
                    opt_field(s.median_te_m),
                    opt_field(s.median_re_deg),
                    opt_field(s.median_rpe_px),
                    opt_field(s.median_rfe_pct),
                    s.recall_1m_1deg_pct,
                    s.recall_3m_3deg_pct,
                    s.recall_5m_5deg_pct,
                );
            }
            None => {
                let _ = writeln!(out, "{},failed,,,,,,,,,,", row.parameter);
            }
        }
    }
    out
}

/// Re-runs the benchmark with the reference rasters (and optionally the
/// query image) resampled by each factor. Degenerate factors produce a
/// failed row instead of aborting the sweep.
pub fn ablate_resolution(
    samples: &[Sample],
    factors: &[f64],
    resample_query: bool,
    cfg: &BenchConfig,
    out_dir: &Path,
) -> Result<Vec<AblationRow>, BenchError> {
    let mut rows = Vec::new();
    for &factor in factors {
        let parameter = format!("{factor}");
        if !(factor > 0.0) || !factor.is_finite() {
            rows.push(AblationRow {
                parameter,
                failed: true,
                summary: None,
            });
            continue;
        }
        let mut transformed = Vec::with_capacity(samples.len());
        let mut ok = true;
        for s in samples {
            let mut t = s.clone();
            if factor != 1.0 {
                use crate::geo::SampleMode;
                match (
                    crate::raster::resample(&s.dop, factor, SampleMode::Bilinear),
                    crate::raster::resample(&s.dsm, factor, SampleMode::Bilinear),
                ) {
                    (Ok(dop), Ok(dsm)) => {
                        t.dop = dop;
                        t.dsm = dsm;
                    }
                    _ => {
                        ok = false;
                        break;
                    }
                }
                if resample_query {
                    match crate::raster::resample(&s.query, factor, SampleMode::Bilinear) {
                        Ok(q) => {
                            // The intrinsics scale with the image.
                            let kx = q.width as f64 / s.query.width as f64;
                            let ky = q.height as f64 / s.query.height as f64;
                            t.intrinsics = crate::camera::CameraIntrinsics::new_unchecked(
                                s.intrinsics.fx * kx,
                                s.intrinsics.fy * ky,
                                (s.intrinsics.cx + 0.5) * kx - 0.5,
                                (s.intrinsics.cy + 0.5) * ky - 0.5,
                                q.width,
                                q.height,
                            );
                            t.query = q;
                            // The point map no longer matches the resampled
                            // query; drop it (oracle matching is unavailable
                            // in this mode).
                            t.point_map = crate::sample::PointMap::new_invalid(
                                t.query.width,
                                t.query.height,
                            );
                        }
                        Err(_) => {
                            ok = false;
                            break;
                        }
                    }
                }
            }
            transformed.push(t);
        }
        if !ok {
            rows.push(AblationRow {
                parameter,
                failed: true,
                summary: None,
            });
            continue;
        }
        let (_, summary) = run_benchmark_samples(&transformed, cfg);
        rows.push(AblationRow {
            parameter,
            failed: false,
            summary: Some(summary),
        });
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("ablate_resolution.csv"), ablation_table_csv(&rows))?;
    Ok(rows)
}

/// Re-runs the benchmark with the reference crops shrunk to each target
/// covisibility ratio.
pub fn ablate_covisibility(
    samples: &[Sample],
    ratios: &[f64],
    cfg: &BenchConfig,
    out_dir: &Path,
) -> Result<Vec<AblationRow>, BenchError> {
    let mut rows = Vec::new();
    for &ratio in ratios {
        let parameter = format!("{ratio}");
        if !(ratio > 0.0 && ratio <= 1.0) {
            rows.push(AblationRow {
                parameter,
                failed: true,
                summary: None,
            });
            continue;
        }
        let mut records = Vec::with_capacity(samples.len());
        for s in samples {
            let seed = derive_sample_seed(cfg.seed ^ 0xC0F1_57B1, &s.id);
            match crop_covis(s, ratio, seed) {
                Ok(t) => records.push(run_one(&t, cfg)),
                Err(e) => records.push(ResultRecord::failed(&s.id, e.to_string(), 0.0)),
            }
        }
        let summary = summarize(&records);
        rows.push(AblationRow {
            parameter,
            failed: false,
            summary: Some(summary),
        });
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("ablate_covisibility.csv"), ablation_table_csv(&rows))?;
    Ok(rows)
}

/// Ground-truth confidence sweep: oracle matching at each threshold.
pub fn sweep_gt_confidence(
    samples: &[Sample],
    taus: &[f64],
    cfg: &BenchConfig,
    out_dir: &Path,
) -> Result<Vec<AblationRow>, BenchError> {
    let mut rows = Vec::new();
    for &tau in taus {
        let mut swept = cfg.clone();
        let base = match &cfg.pipeline.matcher {
            MatcherChoice::Gt(p) => *p,
            _ => GtMatchParams::default(),
        };
        swept.pipeline.matcher = MatcherChoice::Gt(GtMatchParams { tau, ..base });
        swept.pipeline.min_confidence = 0.0;
        let (_, summary) = run_benchmark_samples(samples, &swept);
        rows.push(AblationRow {
            parameter: format!("{tau}"),
            failed: false,
            summary: Some(summary),
        });
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("sweep_gt_confidence.csv"), ablation_table_csv(&rows))?;
    Ok(rows)
}

/// Domain-shift sweep: `none` plus the simulated gap kinds at a fixed
/// strength.
pub fn ablate_domain(
    samples: &[Sample],
    kinds: &[Option<DomainShiftKind>],
    strength: f64,
    cfg: &BenchConfig,
    out_dir: &Path,
) -> Result<Vec<AblationRow>, BenchError> {
    let mut rows = Vec::new();
    for kind in kinds {
        let parameter = match kind {
            None => "none".to_string(),
            Some(DomainShiftKind::Photometric) => "photometric".into(),
            Some(DomainShiftKind::Geometric) => "geometric".into(),
            Some(DomainShiftKind::Both) => "both".into(),
        };
        let transformed: Vec<Sample> = samples
            .iter()
            .map(|s| match kind {
                None => s.clone(),
                Some(k) => domain_shift(
                    s,
                    *k,
                    strength,
                    derive_sample_seed(cfg.seed ^ 0xD0_5417, &s.id),
                ),
            })
            .collect();
        let (_, summary) = run_benchmark_samples(&transformed, cfg);
        rows.push(AblationRow {
            parameter,
            failed: false,
            summary: Some(summary),
        });
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("ablate_domain.csv"), ablation_table_csv(&rows))?;
    Ok(rows)
}
