//! Acceptance suite: one test per release criterion, each printing its
//! measured values. Run with `cargo test --test acceptance -- --nocapture`
//! to see the numbers; the pass/fail line per criterion is the test
//! verdict itself.

use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ortholoc::adhop::{localize, calibrate, MatcherChoice, PipelineConfig, PipelineMode};
use ortholoc::bench::{
    ablate_covisibility, ablate_resolution, run_benchmark_samples, records_to_csv,
    sweep_gt_confidence, BenchConfig,
};
use ortholoc::camera::{project_perspective, CameraIntrinsics, CameraPose};
use ortholoc::estimate::{
    epnp, homography_dlt, homography_dlt_ransac, ransac_pnp, refine_lm, reprojection_errors_px,
    residual_and_jacobian, LmOptions, ParamLayout, RansacConfig,
};
use ortholoc::matching::{GtMatchParams, NccParams};
use ortholoc::metrics::compute_metrics;
use ortholoc::rotation::{rotation_angle_deg, so3_exp};
use ortholoc::sample::Sample;
use ortholoc::synth::{
    anonymize, pair_sample_from, rasterize_dsm, render_dop, BuildingSpec, PairOptions, Scene,
    SceneSpec, TerrainSpec, TextureSpec, ViewSpec,
};

// ---------------------------------------------------------------------------
// Shared synthetic data builders
// ---------------------------------------------------------------------------

fn urban_scene(seed: u64, amplitude: f64, building_height: f64) -> Scene {
    Scene::new(SceneSpec {
        extent_m: (96.0, 96.0),
        base_elevation_m: 100.0,
        terrain: Some(TerrainSpec {
            amplitude_m: amplitude,
            feature_scale_m: 24.0,
            octaves: 2,
            seed,
        }),
        buildings: vec![
            BuildingSpec {
                x0: 20.0,
                y0: 22.0,
                x1: 38.0,
                y1: 40.0,
                height_m: building_height,
            },
            BuildingSpec {
                x0: 54.0,
                y0: 52.0,
                x1: 74.0,
                y1: 68.0,
                height_m: 0.7 * building_height,
            },
        ],
        texture: TextureSpec::Procedural {
            seed: seed.wrapping_add(31),
            detail_m: 4.0,
            road_spacing_m: 28.0,
        },
        raster_scale_m: 0.3,
    })
    .unwrap()
}

/// A view whose central ground sampling distance matches the raster scale,
/// which the classical correlation matcher needs.
fn scale_matched_view(scene: &Scene, obliq: f64, azimuth: f64, focal: f64, look: [f64; 2]) -> ViewSpec {
    let s = scene.spec.raster_scale_m;
    ViewSpec {
        altitude_m: focal * s * obliq.to_radians().cos(),
        obliqueness_deg: obliq,
        azimuth_deg: azimuth,
        yaw_deg: 0.0,
        intrinsics: CameraIntrinsics::new_unchecked(focal, focal, 120.0, 90.0, 240, 180),
        look_at: [look[0], look[1], scene.spec.base_elevation_m],
    }
}

/// Batch of paired samples over a few scenes, facades in view.
fn facade_batch(n: usize, obliq_range: (f64, f64), global_seed: u64) -> Vec<Sample> {
    facade_batch_scaled(n, obliq_range, global_seed, 0.3)
}

fn facade_batch_scaled(
    n: usize,
    obliq_range: (f64, f64),
    global_seed: u64,
    raster_scale_m: f64,
) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    let mut out = Vec::with_capacity(n);
    let mut scene_cache: Vec<(Scene, ortholoc::Raster, ortholoc::Raster)> = Vec::new();
    for scene_seed in 0..3u64 {
        let mut spec = urban_scene(global_seed.wrapping_add(scene_seed), 1.5, 12.0).spec.clone();
        spec.raster_scale_m = raster_scale_m;
        let scene = Scene::new(spec).unwrap();
        let dop = render_dop(&scene);
        let dsm = rasterize_dsm(&scene);
        scene_cache.push((scene, dop, dsm));
    }
    let mut i = 0usize;
    while out.len() < n {
        let (scene, dop, dsm) = &scene_cache[i % scene_cache.len()];
        let obliq = rng.random_range(obliq_range.0..=obliq_range.1);
        let azimuth = rng.random_range(0.0..360.0);
        let look = [rng.random_range(36.0..60.0), rng.random_range(36.0..60.0)];
        let view = scale_matched_view(scene, obliq, azimuth, 320.0, look);
        let opts = PairOptions {
            expansion_m: 6.0,
            perturbation_m: 0.0,
            seed: rng.random_range(0..u64::MAX / 2),
        };
        i += 1;
        if let Ok(mut s) = pair_sample_from(scene, dop, dsm, &view, &opts) {
            s.id = format!("sample_{:03}", out.len());
            out.push(s);
        }
    }
    out
}

fn gt_bench(tau: f64, seed: u64) -> BenchConfig {
    BenchConfig {
        pipeline: PipelineConfig {
            matcher: MatcherChoice::Gt(GtMatchParams {
                n: 300,
                gamma: 1.0,
                tau,
            }),
            min_confidence: 0.0,
            ..Default::default()
        },
        seed,
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: ground-truth matching sufficiency
// ---------------------------------------------------------------------------

/// With oracle correspondences filtered at high geometry-aware confidence,
/// 2.5D rasters localize essentially exactly; unfiltered correspondences
/// keep full 1m-1deg recall but carry measurable facade-induced error.
#[test]
fn criterion_1_gt_matching_sufficiency() {
    let started = Instant::now();
    // Facade-bearing scenes with realistic facade fractions: buildings
    // cover a few percent of each view, like built-up aerial scenes, so
    // the unfiltered sweep carries measurable but bounded lift bias.
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut samples: Vec<Sample> = Vec::new();
    let mut scenes = Vec::new();
    for seed in 0..3u64 {
        let scene = Scene::new(SceneSpec {
            extent_m: (96.0, 96.0),
            base_elevation_m: 100.0,
            // Dense relief everywhere (like real surface models) pins the
            // near-planar tilt ambiguity; the facades then contribute
            // bounded bias instead of steering the pose.
            terrain: Some(TerrainSpec {
                amplitude_m: 7.0,
                feature_scale_m: 20.0,
                octaves: 2,
                seed: 101 + seed,
            }),
            buildings: vec![
                BuildingSpec {
                    x0: 24.0,
                    y0: 26.0,
                    x1: 33.0,
                    y1: 34.0,
                    height_m: 9.0,
                },
                BuildingSpec {
                    x0: 58.0,
                    y0: 54.0,
                    x1: 68.0,
                    y1: 62.0,
                    height_m: 7.0,
                },
            ],
            texture: TextureSpec::Procedural {
                seed: 131 + seed,
                detail_m: 4.0,
                road_spacing_m: 28.0,
            },
            raster_scale_m: 0.15,
        })
        .unwrap();
        let dop = render_dop(&scene);
        let dsm = rasterize_dsm(&scene);
        scenes.push((scene, dop, dsm));
    }
    let mut i = 0usize;
    while samples.len() < 20 {
        let (scene, dop, dsm) = &scenes[i % scenes.len()];
        i += 1;
        // Frame and focal sized like real survey imagery relative to the
        // scene: facade lift errors then reproject well outside the
        // consensus threshold instead of being absorbable by a tilt.
        let obliq: f64 = rng.random_range(15.0..35.0);
        let view = ViewSpec {
            altitude_m: 144.0 * obliq.to_radians().cos(),
            obliqueness_deg: obliq,
            azimuth_deg: rng.random_range(0.0..360.0),
            yaw_deg: 0.0,
            intrinsics: CameraIntrinsics::new_unchecked(480.0, 480.0, 160.0, 120.0, 320, 240),
            look_at: [
                rng.random_range(36.0..60.0),
                rng.random_range(36.0..60.0),
                scene.spec.base_elevation_m,
            ],
        };
        let opts = PairOptions {
            expansion_m: 6.0,
            perturbation_m: 0.0,
            seed: rng.random_range(0..u64::MAX / 2),
        };
        if let Ok(mut s) = pair_sample_from(scene, dop, dsm, &view, &opts) {
            s.id = format!("sample_{:03}", samples.len());
            samples.push(s);
        }
    }
    assert!(samples.len() >= 20);

    let dir = std::env::temp_dir().join(format!("orl-acc1-{}", std::process::id()));
    let mut sweep_cfg = gt_bench(0.0, 11);
    sweep_cfg.pipeline.matcher = MatcherChoice::Gt(GtMatchParams {
        n: 400,
        gamma: 1.0,
        tau: 0.0,
    });
    let rows = sweep_gt_confidence(&samples, &[0.0, 0.5, 0.95, 0.99], &sweep_cfg, &dir)
        .expect("sweep runs");
    let te = |i: usize| rows[i].summary.as_ref().unwrap().median_te_m.unwrap();
    let rpe = |i: usize| rows[i].summary.as_ref().unwrap().median_rpe_px.unwrap();
    let recalls = |i: usize| {
        let s = rows[i].summary.as_ref().unwrap();
        (
            s.recall_1m_1deg_pct,
            s.recall_3m_3deg_pct,
            s.recall_5m_5deg_pct,
        )
    };

    for i in [2, 3] {
        // tau = 0.95 and 0.99
        println!(
            "criterion 1: tau={} -> TE {:.2e} m, RPE {:.2e} px, recalls {:?}",
            rows[i].parameter,
            te(i),
            rpe(i),
            recalls(i)
        );
        assert!(te(i) <= 1e-3, "median TE {} above 1e-3 at tau {}", te(i), rows[i].parameter);
        assert!(rpe(i) <= 1e-2, "median RPE {} above 1e-2", rpe(i));
        assert_eq!(recalls(i), (100.0, 100.0, 100.0));
    }
    println!(
        "criterion 1: tau=0.0 -> TE {:.2e} m (vs {:.2e} at 0.95), recall@1m-1deg {}%",
        te(0),
        te(2),
        recalls(0).0
    );
    assert!(te(0) > te(2), "unfiltered TE {} not above filtered {}", te(0), te(2));
    assert_eq!(recalls(0).0, 100.0);

    let elapsed = started.elapsed().as_secs_f64();
    println!("criterion 1: runtime {elapsed:.1} s");
    assert!(elapsed < 120.0, "criterion 1 took {elapsed:.1} s, budget 120 s");
}

// ---------------------------------------------------------------------------
// Criterion 2: refinement never degrades the reported error
// ---------------------------------------------------------------------------

/// Over 200 seeded pipeline runs with mixed matchers and obliqueness up to
/// 60 degrees, the acceptance gate guarantees the reported mean
/// reprojection error never exceeds the initial stage's.
#[test]
fn criterion_2_refinement_non_degradation() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let scene = urban_scene(7, 1.0, 10.0);
    let dop = render_dop(&scene);
    let dsm = rasterize_dsm(&scene);

    let mut runs = 0usize;
    let mut produced = 0usize;
    let mut violations = 0usize;
    while runs < 200 {
        let obliq = rng.random_range(0.0..60.0);
        let azimuth = rng.random_range(0.0..360.0);
        let look = [rng.random_range(38.0..58.0), rng.random_range(38.0..58.0)];
        let view = scale_matched_view(&scene, obliq, azimuth, 280.0, look);
        let opts = PairOptions {
            expansion_m: 5.0,
            perturbation_m: 0.0,
            seed: rng.random_range(0..u64::MAX / 2),
        };
        let Ok(sample) = pair_sample_from(&scene, &dop, &dsm, &view, &opts) else {
            continue;
        };
        runs += 1;
        let use_ncc = runs % 2 == 0;
        let cfg = PipelineConfig {
            matcher: if use_ncc {
                MatcherChoice::Ncc(NccParams {
                    n_features: 128,
                    ..Default::default()
                })
            } else {
                MatcherChoice::Gt(GtMatchParams {
                    n: 200,
                    gamma: 1.0,
                    tau: 0.0,
                })
            },
            min_confidence: if use_ncc { 0.5 } else { 0.0 },
            adhop: true,
            seed: rng.random_range(0..u64::MAX / 2),
            ..Default::default()
        };
        if let Ok(result) = localize(&sample, &cfg) {
            produced += 1;
            let final_err = result.final_estimate().mean_reproj_px;
            if final_err > result.initial.mean_reproj_px + 1e-12 {
                violations += 1;
            }
        }
    }
    println!(
        "criterion 2: {produced}/{runs} runs produced results, {violations} gate violations"
    );
    assert!(produced >= runs * 3 / 4, "too few successful runs: {produced}");
    assert_eq!(violations, 0, "{violations} runs degraded the reported error");
}

// ---------------------------------------------------------------------------
// Criterion 3: refinement improves oblique classical matching
// ---------------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// On oblique views the perspective gap biases classical matching; the
/// homography round must improve the median matching error and median
/// translation error, on a clear majority of samples.
#[test]
fn criterion_3_adhop_improves_oblique_matching() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let scene = urban_scene(5, 1.2, 9.0);
    let dop = render_dop(&scene);
    let dsm = rasterize_dsm(&scene);

    let mut me_plain = Vec::new();
    let mut me_adhop = Vec::new();
    let mut te_plain = Vec::new();
    let mut te_adhop = Vec::new();
    let mut improved = 0usize;
    let mut evaluated = 0usize;
    let mut generated = 0usize;
    while evaluated < 50 && generated < 200 {
        generated += 1;
        let obliq: f64 = rng.random_range(42.0..56.0);
        let azimuth = rng.random_range(0.0..360.0);
        let look = [rng.random_range(38.0..58.0), rng.random_range(38.0..58.0)];
        // Larger frames than the other batches: the oblique views need
        // enough corner coverage on both sides of the warp.
        let s = scene.spec.raster_scale_m;
        let view = ViewSpec {
            altitude_m: 340.0 * s * obliq.to_radians().cos(),
            obliqueness_deg: obliq,
            azimuth_deg: azimuth,
            yaw_deg: 0.0,
            intrinsics: CameraIntrinsics::new_unchecked(340.0, 340.0, 128.0, 96.0, 256, 192),
            look_at: [look[0], look[1], scene.spec.base_elevation_m],
        };
        let opts = PairOptions {
            expansion_m: 5.0,
            perturbation_m: 0.0,
            seed: rng.random_range(0..u64::MAX / 2),
        };
        let Ok(sample) = pair_sample_from(&scene, &dop, &dsm, &view, &opts) else {
            continue;
        };
        let seed = rng.random_range(0..u64::MAX / 2);
        // The refinement stage re-matches on the warped (perspective-
        // compensated) DOP, where correlation works across the whole
        // image; give it the full feature budget.
        let base_cfg = PipelineConfig {
            matcher: MatcherChoice::Ncc(NccParams {
                n_features: 128,
                ..Default::default()
            }),
            rematch: Some(MatcherChoice::Ncc(NccParams {
                n_features: 256,
                ..Default::default()
            })),
            seed,
            ..Default::default()
        };
        let adhop_cfg = PipelineConfig {
            adhop: true,
            ..base_cfg.clone()
        };
        let (Ok(plain), Ok(refined)) = (localize(&sample, &base_cfg), localize(&sample, &adhop_cfg))
        else {
            continue;
        };
        let (Ok(m_plain), Ok(m_adhop)) = (
            compute_metrics(&plain, &sample, false),
            compute_metrics(&refined, &sample, false),
        ) else {
            continue;
        };
        let (Some(me_p), Some(me_a)) = (m_plain.me_px, m_adhop.me_px) else {
            continue;
        };
        evaluated += 1;
        me_plain.push(me_p);
        me_adhop.push(me_a);
        te_plain.push(m_plain.te_m);
        te_adhop.push(m_adhop.te_m);
        if m_adhop.te_m < m_plain.te_m {
            improved += 1;
        }
    }
    assert!(evaluated >= 50, "only {evaluated} samples evaluated");
    let (mp, ma) = (median(me_plain), median(me_adhop));
    let (tp, ta) = (median(te_plain), median(te_adhop));
    let frac = improved as f64 / evaluated as f64;
    println!(
        "criterion 3: median ME {mp:.3} -> {ma:.3} px, median TE {tp:.4} -> {ta:.4} m, \
         improvement fraction {frac:.2}"
    );
    assert!(ma < mp, "median matching error did not improve: {ma} vs {mp}");
    assert!(ta < tp, "median translation error did not improve: {ta} vs {tp}");
    assert!(frac >= 0.6, "improvement fraction {frac:.2} below 0.6");
}

// ---------------------------------------------------------------------------
// Criterion 4: solver synthesis-recovery oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_solver_oracles() {
    let started = Instant::now();
    let k = CameraIntrinsics::new_unchecked(700.0, 690.0, 320.0, 240.0, 640, 480);
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    // EPnP noise-free recovery.
    let mut worst_re = 0.0f64;
    let mut worst_te = 0.0f64;
    for _ in 0..20 {
        let gt = CameraPose::new_unchecked(
            so3_exp(&Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            )),
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(5.0..12.0),
            ),
        );
        let mut world = Vec::new();
        let mut image = Vec::new();
        while world.len() < 8 {
            let p = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-2.0..2.0),
            );
            if let Ok((px, _)) = project_perspective(&p, &k, &gt) {
                world.push(p);
                image.push(px);
            }
        }
        let est = epnp(&world, &image, &k).expect("epnp solves");
        worst_re = worst_re.max(rotation_angle_deg(est.rotation(), gt.rotation()));
        worst_te = worst_te.max((est.camera_center() - gt.camera_center()).norm());
    }
    println!("criterion 4: EPnP worst recovery RE {worst_re:.2e} deg, TE {worst_te:.2e} m");
    assert!(worst_re <= 1e-6 && worst_te <= 1e-6);

    // Homography noise-free recovery, elementwise.
    let h_gt = nalgebra::Matrix3::new(2.0, 0.0, 5.0, 0.0, 2.0, -3.0, 0.0, 0.0, 1.0);
    let hg = ortholoc::Homography::new(h_gt).unwrap();
    let src: Vec<Vector2<f64>> = (0..24)
        .map(|_| Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
        .collect();
    let dst: Vec<Vector2<f64>> = src.iter().map(|p| hg.apply(p)).collect();
    let h = homography_dlt(&src, &dst).unwrap();
    let mut worst_h = 0.0f64;
    for (a, b) in h.matrix().iter().zip(h_gt.iter()) {
        worst_h = worst_h.max((a - b).abs());
    }
    println!("criterion 4: homography worst element error {worst_h:.2e}");
    assert!(worst_h <= 1e-8);

    // Contamination recovery: 30% outliers, >= 95% inlier recall.
    let gt = CameraPose::new_unchecked(
        so3_exp(&Vector3::new(0.1, -0.05, 0.2)),
        Vector3::new(0.2, 0.1, 8.0),
    );
    let mut world = Vec::new();
    let mut image = Vec::new();
    while world.len() < 140 {
        let p = Vector3::new(
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(-2.0..2.0),
        );
        if let Ok((px, _)) = project_perspective(&p, &k, &gt) {
            world.push(p);
            image.push(px);
        }
    }
    for px in image.iter_mut().skip(100) {
        *px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
    }
    let est = ransac_pnp(
        &world,
        &image,
        &k,
        &RansacConfig {
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let recall = est.inlier_mask[..100].iter().filter(|m| **m).count() as f64 / 100.0;
    println!("criterion 4: RANSAC-PnP inlier recall at 30% contamination: {recall:.3}");
    assert!(recall >= 0.95);

    // Homography RANSAC contamination.
    let mut hsrc = Vec::new();
    let mut hdst = Vec::new();
    for _ in 0..70 {
        let p = Vector2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0));
        hdst.push(hg.apply(&p));
        hsrc.push(p);
    }
    for _ in 0..30 {
        hsrc.push(Vector2::new(
            rng.random_range(0.0..400.0),
            rng.random_range(0.0..300.0),
        ));
        hdst.push(Vector2::new(
            rng.random_range(0.0..400.0),
            rng.random_range(0.0..300.0),
        ));
    }
    let (_, mask) = homography_dlt_ransac(
        &hsrc,
        &hdst,
        &RansacConfig {
            inlier_threshold_px: 2.0,
            seed: 6,
            ..Default::default()
        },
    )
    .unwrap();
    let h_recall = mask[..70].iter().filter(|m| **m).count() as f64 / 70.0;
    println!("criterion 4: homography RANSAC inlier recall: {h_recall:.3}");
    assert!(h_recall >= 0.95);

    // Jacobian agreement with central finite differences.
    let layout = ParamLayout {
        optimize_focal: true,
        optimize_principal: true,
    };
    let mut worst_rel = 0.0f64;
    let mut checked = 0;
    while checked < 100 {
        let f = rng.random_range(300.0..1200.0);
        let kk = CameraIntrinsics::new_unchecked(f, f, 320.0, 240.0, 640, 480);
        let pose = CameraPose::new_unchecked(
            so3_exp(&Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            )),
            Vector3::new(0.0, 0.0, rng.random_range(6.0..14.0)),
        );
        let p3 = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-2.0..2.0),
        );
        let obs = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let Some((_, row_u, row_v)) = residual_and_jacobian(&p3, &obs, &kk, &pose, &layout) else {
            continue;
        };
        checked += 1;
        let h_step = 1e-6;
        for c in 0..layout.dim() {
            let eval = |delta: f64| -> Option<Vector2<f64>> {
                let mut w = Vector3::zeros();
                let mut dt = Vector3::zeros();
                let mut kf = kk;
                match c {
                    0..=2 => w[c] = delta,
                    3..=5 => dt[c - 3] = delta,
                    6 => kf = kf.with_shared_focal(kf.shared_focal() + delta),
                    7 => kf.cx += delta,
                    _ => kf.cy += delta,
                }
                let pose2 = pose.apply_increment(&w, &dt);
                let pc = pose2.transform_point(&p3);
                if pc.z <= 1e-9 {
                    return None;
                }
                Some(Vector2::new(
                    kf.fx * pc.x / pc.z + kf.cx - obs.x,
                    kf.fy * pc.y / pc.z + kf.cy - obs.y,
                ))
            };
            let (Some(rp), Some(rm)) = (eval(h_step), eval(-h_step)) else {
                continue;
            };
            let fd_u = (rp.x - rm.x) / (2.0 * h_step);
            let fd_v = (rp.y - rm.y) / (2.0 * h_step);
            worst_rel = worst_rel.max((fd_u - row_u[c]).abs() / row_u[c].abs().max(1.0));
            worst_rel = worst_rel.max((fd_v - row_v[c]).abs() / row_v[c].abs().max(1.0));
        }
    }
    println!("criterion 4: worst Jacobian FD relative error {worst_rel:.2e}");
    assert!(worst_rel < 1e-4);

    let elapsed = started.elapsed().as_secs_f64();
    println!("criterion 4: runtime {elapsed:.1} s");
    assert!(elapsed < 60.0, "criterion 4 took {elapsed:.1} s, budget 60 s");
}

// ---------------------------------------------------------------------------
// Criterion 5: focal/translation valley
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_focal_translation_valley() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let f = 600.0;
    let k = CameraIntrinsics::new_unchecked(f, f, 320.0, 240.0, 640, 480);
    // Nadir camera at height tz over the plane z = 0 through the origin.
    let tz = 50.0;
    let nadir = CameraPose::new_unchecked(
        nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0),
        Vector3::new(0.0, 0.0, tz),
    );

    // Zero-relief: all points on the plane.
    let mut flat_world = Vec::new();
    let mut flat_image = Vec::new();
    while flat_world.len() < 60 {
        let p = Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), 0.0);
        if let Ok((px, _)) = project_perspective(&p, &k, &nadir) {
            flat_world.push(p);
            flat_image.push(px);
        }
    }
    let mut worst_flat = 0.0f64;
    for alpha in [0.9, 0.95, 1.05, 1.1] {
        let k2 = k.with_shared_focal(f * alpha);
        let pose2 = CameraPose::new_unchecked(*nadir.rotation(), Vector3::new(0.0, 0.0, tz * alpha));
        let errs = reprojection_errors_px(&flat_world, &flat_image, &k2, &pose2);
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        worst_flat = worst_flat.max(mean);
    }
    println!("criterion 5: zero-relief joint-scaling error {worst_flat:.2e} px");
    assert!(worst_flat < 0.05);

    // Deep relief: heights up to 0.4 of the camera distance.
    let mut deep_world = Vec::new();
    let mut deep_image = Vec::new();
    while deep_world.len() < 60 {
        let p = Vector3::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(0.0..0.4 * tz),
        );
        if let Ok((px, _)) = project_perspective(&p, &k, &nadir) {
            deep_world.push(p);
            deep_image.push(px);
        }
    }
    let k2 = k.with_shared_focal(f * 1.1);
    let pose2 = CameraPose::new_unchecked(*nadir.rotation(), Vector3::new(0.0, 0.0, tz * 1.1));
    let errs = reprojection_errors_px(&deep_world, &deep_image, &k2, &pose2);
    let deep_mean = errs.iter().sum::<f64>() / errs.len() as f64;
    println!("criterion 5: deep-relief joint-scaling error {deep_mean:.2} px");
    assert!(deep_mean > 1.0);

    // Calibration on noise-free deep-relief correspondences recovers the
    // focal from the oversized standard guess.
    let guess = CameraIntrinsics::focal_guess(640, 480);
    let k0 = k.with_shared_focal(guess);
    let t0 = ransac_pnp(
        &deep_world,
        &deep_image,
        &k0,
        &RansacConfig {
            seed: 9,
            ..Default::default()
        },
    )
    .unwrap();
    let refined = refine_lm(
        &deep_world,
        &deep_image,
        &k0,
        &t0.pose,
        &LmOptions {
            optimize_focal: true,
            ..Default::default()
        },
    )
    .unwrap();
    let rfe = (refined.intrinsics.fx - f).abs() / f * 100.0;
    println!("criterion 5: deep-relief calibration RFE {rfe:.4}%");
    assert!(rfe < 0.1);

    // End-to-end: pipeline calibration on a deep-relief synthetic sample.
    let scene = urban_scene(15, 1.0, 24.0);
    let dop = render_dop(&scene);
    let dsm = rasterize_dsm(&scene);
    let view = scale_matched_view(&scene, 30.0, 45.0, 320.0, [40.0, 40.0]);
    let sample = pair_sample_from(
        &scene,
        &dop,
        &dsm,
        &view,
        &PairOptions {
            expansion_m: 6.0,
            perturbation_m: 0.0,
            seed: 3,
        },
    )
    .unwrap();
    let cfg = PipelineConfig {
        matcher: MatcherChoice::Gt(GtMatchParams {
            n: 300,
            gamma: 1.0,
            tau: 0.95,
        }),
        min_confidence: 0.0,
        mode: PipelineMode::Calibrate,
        seed: 4,
        ..Default::default()
    };
    let result = calibrate(&sample, &cfg).unwrap();
    let m = compute_metrics(&result, &sample, true).unwrap();
    println!(
        "criterion 5: pipeline calibration RFE {:.4}%, TE {:.4} m",
        m.rfe_pct.unwrap(),
        m.te_m
    );
    assert!(m.rfe_pct.unwrap() < 0.1);
    assert!(m.te_m < 0.01);
}

// ---------------------------------------------------------------------------
// Criterion 6: ablation trends
// ---------------------------------------------------------------------------

/// Coarser rasters cannot make localization better, and starving
/// covisibility must hurt recall.
#[test]
fn criterion_6_ablation_trends() {
    // Resolution: oracle matching isolates the raster contribution; lift
    // errors grow with the DSM cell size on undulating terrain.
    let mut samples = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let scene = Scene::new(SceneSpec {
        extent_m: (96.0, 96.0),
        base_elevation_m: 100.0,
        terrain: Some(TerrainSpec {
            amplitude_m: 4.0,
            feature_scale_m: 12.0,
            octaves: 2,
            seed: 61,
        }),
        buildings: vec![],
        texture: TextureSpec::Procedural {
            seed: 62,
            detail_m: 4.0,
            road_spacing_m: 30.0,
        },
        raster_scale_m: 0.3,
    })
    .unwrap();
    let dop = render_dop(&scene);
    let dsm = rasterize_dsm(&scene);
    while samples.len() < 30 {
        let view = scale_matched_view(
            &scene,
            rng.random_range(5.0..25.0),
            rng.random_range(0.0..360.0),
            300.0,
            [rng.random_range(38.0..58.0), rng.random_range(38.0..58.0)],
        );
        let opts = PairOptions {
            expansion_m: 5.0,
            perturbation_m: 0.0,
            seed: rng.random_range(0..u64::MAX / 2),
        };
        if let Ok(mut s) = pair_sample_from(&scene, &dop, &dsm, &view, &opts) {
            s.id = format!("res_{:03}", samples.len());
            samples.push(s);
        }
    }
    let dir = std::env::temp_dir().join(format!("orl-acc6-{}", std::process::id()));
    let rows = ablate_resolution(&samples, &[1.0, 0.5, 0.25], false, &gt_bench(0.5, 66), &dir)
        .expect("resolution ablation runs");
    let te: Vec<f64> = rows
        .iter()
        .map(|r| r.summary.as_ref().unwrap().median_te_m.unwrap())
        .collect();
    println!(
        "criterion 6: resolution factors [1.0, 0.5, 0.25] -> median TE {:?} m",
        te
    );
    assert!(te[0] <= te[1] + 1e-12, "TE rose when refining: {te:?}");
    assert!(te[1] <= te[2] + 1e-12, "TE not monotone: {te:?}");

    // Covisibility: classical matching on the cropped reference loses
    // spatial support; recall at 10% must fall strictly below 50%. The
    // batch uses smooth high-relief terrain without buildings: plenty of
    // depth variation to anchor the pose, no roof-edge match outliers, so
    // the half-coverage baseline sits comfortably inside the 1m-1deg gate
    // and the contrast is about coverage.
    let mut batch = Vec::new();
    let mut brng = ChaCha8Rng::seed_from_u64(660);
    let mut covis_scenes = Vec::new();
    for seed in 0..3u64 {
        let scene = Scene::new(SceneSpec {
            extent_m: (96.0, 96.0),
            base_elevation_m: 100.0,
            terrain: Some(TerrainSpec {
                amplitude_m: 5.0,
                feature_scale_m: 28.0,
                octaves: 2,
                seed: 660 + seed,
            }),
            buildings: vec![],
            texture: TextureSpec::Procedural {
                seed: 691 + seed,
                detail_m: 4.0,
                road_spacing_m: 28.0,
            },
            raster_scale_m: 0.3,
        })
        .unwrap();
        let dop = render_dop(&scene);
        let dsm = rasterize_dsm(&scene);
        covis_scenes.push((scene, dop, dsm));
    }
    let mut bi = 0usize;
    while batch.len() < 30 {
        let (scene, dop, dsm) = &covis_scenes[bi % covis_scenes.len()];
        bi += 1;
        let obliq: f64 = brng.random_range(0.0..12.0);
        let view = ViewSpec {
            altitude_m: 240.0 * scene.spec.raster_scale_m * obliq.to_radians().cos(),
            obliqueness_deg: obliq,
            azimuth_deg: brng.random_range(0.0..360.0),
            yaw_deg: 0.0,
            intrinsics: CameraIntrinsics::new_unchecked(240.0, 240.0, 120.0, 90.0, 240, 180),
            look_at: [
                brng.random_range(36.0..60.0),
                brng.random_range(36.0..60.0),
                scene.spec.base_elevation_m,
            ],
        };
        let opts = PairOptions {
            expansion_m: 6.0,
            perturbation_m: 0.0,
            seed: brng.random_range(0..u64::MAX / 2),
        };
        if let Ok(mut s) = pair_sample_from(scene, dop, dsm, &view, &opts) {
            s.id = format!("covis_{:03}", batch.len());
            batch.push(s);
        }
    }
    let ncc_cfg = BenchConfig {
        pipeline: PipelineConfig {
            matcher: MatcherChoice::Ncc(NccParams::default()),
            ..Default::default()
        },
        seed: 67,
    };
    let rows = ablate_covisibility(&batch, &[0.5, 0.1], &ncc_cfg, &dir).expect("covis runs");
    let r50 = rows[0].summary.as_ref().unwrap().recall_1m_1deg_pct;
    let r10 = rows[1].summary.as_ref().unwrap().recall_1m_1deg_pct;
    println!("criterion 6: recall@1m-1deg covis 0.5 -> {r50}%, covis 0.1 -> {r10}%");
    assert!(
        r10 < r50,
        "recall at covisibility 0.1 ({r10}%) not below 0.5 ({r50}%)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: determinism, exact round trips, anonymization invariance
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_determinism_io_anonymization() {
    // Bit-identical benchmark output for a fixed seed.
    let samples = facade_batch(6, (5.0, 30.0), 707);
    let cfg = gt_bench(0.5, 77);
    let (rec_a, _) = run_benchmark_samples(&samples, &cfg);
    let (rec_b, _) = run_benchmark_samples(&samples, &cfg);
    let csv_a = records_to_csv(&rec_a);
    assert_eq!(csv_a, records_to_csv(&rec_b), "results differ between runs");

    // Raster and sample round trips are bit-exact.
    let base = std::env::temp_dir().join(format!("orl-acc7-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    for (i, s) in samples.iter().take(2).enumerate() {
        let d1 = base.join(format!("a{i}"));
        let d2 = base.join(format!("b{i}"));
        ortholoc::io::save_sample(s, &d1).unwrap();
        let loaded = ortholoc::io::load_sample(&d1).unwrap();
        ortholoc::io::save_sample(&loaded, &d2).unwrap();
        for name in [
            "query.orlr",
            "dop.orlr",
            "dsm.orlr",
            "pm_x.orlr",
            "pm_y.orlr",
            "pm_z.orlr",
            "camera.json",
            "keypoints.csv",
            "meta.json",
        ] {
            let f1 = std::fs::read(d1.join(name)).unwrap();
            let f2 = std::fs::read(d2.join(name)).unwrap();
            assert_eq!(f1, f2, "round trip of {name} not bit-exact");
        }
    }
    println!("criterion 7: benchmark CSV deterministic; sample round trips bit-exact");

    // Metric invariance under the anonymization transform.
    let pipeline = PipelineConfig {
        matcher: MatcherChoice::Gt(GtMatchParams {
            n: 250,
            gamma: 1.0,
            tau: 0.5,
        }),
        min_confidence: 0.0,
        seed: 9,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for (i, s) in samples.iter().take(4).enumerate() {
        let anon = anonymize(s, 900 + i as u64);
        let r1 = localize(s, &pipeline).unwrap();
        let r2 = localize(&anon, &pipeline).unwrap();
        let m1 = compute_metrics(&r1, s, false).unwrap();
        let m2 = compute_metrics(&r2, &anon, false).unwrap();
        worst = worst.max((m1.te_m - m2.te_m).abs());
        worst = worst.max((m1.re_deg - m2.re_deg).abs());
        worst = worst.max((m1.rpe_px.unwrap() - m2.rpe_px.unwrap()).abs());
        worst = worst.max((m1.me_px.unwrap() - m2.me_px.unwrap()).abs());
        assert_eq!(m1.recall_1m_1deg, m2.recall_1m_1deg);
    }
    println!("criterion 7: worst metric drift under anonymization {worst:.2e}");
    assert!(worst < 1e-9, "metric drift {worst} above 1e-9");
}
