//! Release gate: every acceptance criterion runs in order and prints one
//! PASS/FAIL line. The criteria are structural and relational (oracle
//! equivalence, gradient correctness, convergence, metric identities,
//! detector bias, scaling, reproducibility), each with the stated runtime
//! budget. Run with `--nocapture` to watch the lines appear.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swarm_density::baselines::{build_bbox_table, correlation_bias, ideal_detector_histogram, tilt_study};
use swarm_density::geometry::{CameraIntrinsics, GridSpec, UavPose};
use swarm_density::labeling::{raw_histogram, smooth_labels, LabelGrid, LabelMode, LabelSpec};
use swarm_density::metrics::{evaluate_pairs, per_image_errors};
use swarm_density::regressor::{
    backward, evaluate_loss, forward, forward_kink_report, image_to_input, train, ArchSpec,
    ConvStage, LossWeights, RegressorParams, TailKind, TrainConfig,
};
use swarm_density::scenegen::{
    generate_dataset, sample_scene, GenConfig, PipelineConfig, SplitKind,
};

#[test]
fn acceptance() {
    let criteria: &[(usize, &str, fn())] = &[
        (1, "label oracle equivalence on 1000 scenes", c1_label_oracle),
        (2, "analytic gradients match finite differences", c2_gradients),
        (3, "training converges and the LR schedule fires", c3_training),
        (4, "ideal detector: zero count error, positive bin error, tilt bias", c4_ideal_detector),
        (5, "metrics separate distance error from misdetection", c5_metric_relations),
        (6, "partial smoothing beats raw labels on close-range error", c6_ablation_ordering),
        (7, "grid costs under 15% parameters; 1x1 tail under fc", c7_param_scaling),
        (8, "150-target images process; label time stays linear", c8_high_density),
        (9, "CLI commands are byte-reproducible", c9_cli_reproducibility),
    ];

    let mut failures = Vec::new();
    for &(id, name, run) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let status = if result.is_ok() { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} {status} ({:6.1}s): {name}",
            start.elapsed().as_secs_f64()
        );
        if let Err(payload) = result {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic without message".into());
            failures.push(format!("criterion {id} ({name}): {msg}"));
        }
    }
    assert!(failures.is_empty(), "\n{}", failures.join("\n"));
}

fn desk_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(64.0, 64.0, 64.0, 64.0, 128, 128).unwrap()
}

fn desk_spec() -> LabelSpec {
    LabelSpec::new(1.0, 50, 1.0, 5).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Raw histograms equal an independent brute-force binning on 1000
//    scenes; smoothing conserves per-cell mass to 1e-9. Under 10 seconds.

fn c1_label_oracle() {
    let start = Instant::now();
    let cam = desk_camera();
    let spec = desk_spec();
    let cfg = GenConfig::default();
    let grids = [
        GridSpec::new(1, 1).unwrap(),
        GridSpec::new(3, 3).unwrap(),
        GridSpec::new(2, 2).unwrap(),
    ];

    for i in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000_000 + i);
        let scene = sample_scene(&mut rng, &cfg, &cam).unwrap();
        let grid = grids[(i % 3) as usize];

        // Brute force from first principles: pinhole projection, floor
        // division for the cell (right/bottom cells absorb remainder
        // pixels), Euclidean distance over bin width with a saturating
        // last bin.
        let cells = (grid.w_out * grid.h_out) as usize;
        let mut brute = vec![0.0f64; cells * spec.n_bin];
        let cw = (cam.width / grid.w_out) as f64;
        let ch = (cam.height / grid.h_out) as f64;
        for pose in &scene.poses {
            let [x, y, z] = pose.position;
            if z <= 0.0 {
                continue;
            }
            let u = cam.fx * x / z + cam.cx;
            let v = cam.fy * y / z + cam.cy;
            if !(0.0..=cam.width as f64).contains(&u) || !(0.0..=cam.height as f64).contains(&v) {
                continue;
            }
            let col = ((u / cw) as u32).min(grid.w_out - 1) as usize;
            let row = ((v / ch) as u32).min(grid.h_out - 1) as usize;
            let d = (x * x + y * y + z * z).sqrt();
            let bin = ((d / spec.delta_d) as usize).min(spec.n_bin - 1);
            brute[(row * grid.w_out as usize + col) * spec.n_bin + bin] += 1.0;
        }

        let raw = raw_histogram(&scene.poses, &cam, &grid, &spec);
        assert_eq!(raw.meta_vector(), &brute[..], "scene {i}: raw mismatch");

        for mode in [LabelMode::Partial, LabelMode::Full] {
            let smoothed = smooth_labels(&raw, &spec, mode);
            for cell in 0..cells {
                let lo = cell * spec.n_bin;
                let hi = lo + spec.n_bin;
                let raw_mass: f64 = raw.meta_vector()[lo..hi].iter().sum();
                let new_mass: f64 = smoothed.meta_vector()[lo..hi].iter().sum();
                assert!(
                    (raw_mass - new_mass).abs() <= 1e-9,
                    "scene {i} cell {cell} {mode:?}: mass {raw_mass} -> {new_mass}"
                );
            }
        }
    }
    assert!(
        start.elapsed().as_secs_f64() < 10.0,
        "label oracle sweep took {:?}",
        start.elapsed()
    );
}

// ---------------------------------------------------------------------------
// 2. Analytic gradients of the squared loss match central finite
//    differences to 1e-4 relative error over 24 instances spanning both
//    tails, multi-cell grids, and both weight profiles. Under 60 seconds.

fn c2_gradients() {
    let start = Instant::now();
    let archs = [
        toy_arch(8, &[(2, 2), (3, 2)], 4, (1, 1), TailKind::OneByOneConv),
        toy_arch(8, &[(2, 2), (3, 2)], 4, (1, 1), TailKind::FullyConnected),
        toy_arch(8, &[(2, 2), (3, 2)], 3, (2, 2), TailKind::OneByOneConv),
        toy_arch(8, &[(2, 2), (3, 2)], 3, (2, 2), TailKind::FullyConnected),
        toy_arch(8, &[(3, 2)], 5, (2, 2), TailKind::OneByOneConv),
        toy_arch(8, &[(3, 2)], 5, (2, 2), TailKind::FullyConnected),
        toy_arch(6, &[(2, 1), (2, 2)], 3, (1, 1), TailKind::OneByOneConv),
        toy_arch(6, &[(2, 1), (2, 2)], 3, (1, 1), TailKind::FullyConnected),
    ];

    // Inside a kink-free region the output is affine in any single
    // parameter, so the squared loss is exactly quadratic along the bumped
    // coordinate and central differences carry no truncation error. The
    // seed search only has to keep every ReLU input and active pool-window
    // gap beyond the reach of a +-h bump (at most ~10h in these stacks).
    let h = 1e-3;
    let mut instances = 0usize;
    let mut worst = 0.0f64;
    for (ai, arch) in archs.iter().enumerate() {
        for round in 0..3u64 {
            let n_bin = arch.n_bin;
            let weights = if round % 2 == 0 {
                LossWeights::near_emphasis(n_bin, 4.0, (n_bin / 2).max(1) as f64)
            } else {
                LossWeights::uniform(n_bin)
            };

            let base = 1_000_000 * ai as u64 + 100_000 * round;
            let mut seed = base;
            let (params, image, gt) = loop {
                let params = RegressorParams::init(arch, seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
                let npix = (arch.input_width * arch.input_height * 3) as usize;
                let image: Vec<f64> = (0..npix).map(|_| rng.gen_range(0.0..1.0)).collect();
                let gt: Vec<f64> = (0..arch.grid.cells() * n_bin)
                    .map(|_| rng.gen_range(0.0..2.0))
                    .collect();
                let report = forward_kink_report(&params, &image).unwrap();
                if report.min_relu_gap > 10.0 * h && report.min_pool_gap > 20.0 * h {
                    break (params, image, gt);
                }
                seed += 1;
                assert!(
                    seed - base < 20_000,
                    "arch {ai} round {round}: no kink-free instance found"
                );
            };

            let (_, grads) = backward(&params, &image, &gt, &weights).unwrap();
            let analytic = grads.to_flat();
            let flat = params.to_flat();
            let loss_sq = |theta: &[f64]| -> f64 {
                let mut probe = params.clone();
                probe.set_flat(theta).unwrap();
                let out = forward(&probe, &image).unwrap();
                out.meta_vector()
                    .iter()
                    .zip(&gt)
                    .enumerate()
                    .map(|(j, (&p, &g))| {
                        let w = weights.values()[j % n_bin];
                        let d = (p - g) * w;
                        d * d
                    })
                    .sum()
            };
            for idx in 0..flat.len() {
                let mut bumped = flat.clone();
                bumped[idx] = flat[idx] + h;
                let up = loss_sq(&bumped);
                bumped[idx] = flat[idx] - h;
                let down = loss_sq(&bumped);
                let numeric = (up - down) / (2.0 * h);
                let denom = analytic[idx].abs().max(numeric.abs()).max(1e-6);
                let rel = (analytic[idx] - numeric).abs() / denom;
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "arch {ai} round {round} param {idx}: analytic {} vs numeric {numeric} (rel {rel})",
                    analytic[idx]
                );
            }
            instances += 1;
        }
    }
    assert!(instances >= 20, "only {instances} gradient instances");
    assert!(
        start.elapsed().as_secs_f64() < 60.0,
        "gradient check took {:?} (worst rel {worst})",
        start.elapsed()
    );
}

fn toy_arch(
    input: u32,
    stages: &[(usize, usize)],
    n_bin: usize,
    grid: (u32, u32),
    tail: TailKind,
) -> ArchSpec {
    ArchSpec {
        input_width: input,
        input_height: input,
        stages: stages
            .iter()
            .map(|&(filters, pool)| ConvStage { filters, pool })
            .collect(),
        n_bin,
        grid: GridSpec::new(grid.0, grid.1).unwrap(),
        tail,
    }
}

// ---------------------------------------------------------------------------
// 3. On a seeded 1500-sample dataset (200 val / 100 test), 60 epochs end
//    below half the initial validation loss, and a deliberately stagnated
//    run triggers the plateau decay. Under 10 minutes.

fn c3_training() {
    let start = Instant::now();
    let dataset = training_dataset(1500, 200, 100, 20);
    let arch = ArchSpec::desk_default(50, GridSpec::new(1, 1).unwrap());
    let weights = LossWeights::near_emphasis(50, 4.0, 12.0);
    let train_set = dataset.examples(SplitKind::Train, LabelMode::Partial);
    let val_set = dataset.examples(SplitKind::Val, LabelMode::Partial);
    assert_eq!(train_set.len(), 1200);
    assert_eq!(val_set.len(), 200);

    let init = RegressorParams::init(&arch, 20).unwrap();
    let initial_val = evaluate_loss(&init, &val_set, &weights).unwrap();
    let cfg = TrainConfig {
        shuffle_seed: 20,
        ..TrainConfig::default()
    };
    let outcome = train(init, &train_set, &val_set, &weights, &cfg).unwrap();
    assert_eq!(outcome.history.len(), 60);
    let final_val = outcome.history.last().unwrap().val_loss;
    assert!(
        final_val < 0.5 * initial_val,
        "validation loss {initial_val} -> {final_val}, less than 2x improvement"
    );

    // Stagnated run: a step size this small cannot move the validation
    // loss past the improvement threshold, so the plateau rule must fire.
    let stalled_cfg = TrainConfig {
        epochs: 9,
        initial_lr: 1e-12,
        patience: 3,
        shuffle_seed: 20,
        ..TrainConfig::default()
    };
    let stalled_init = RegressorParams::init(&arch, 21).unwrap();
    let stalled = train(
        stalled_init,
        &train_set[..120],
        &val_set[..40],
        &weights,
        &stalled_cfg,
    )
    .unwrap();
    assert!(
        stalled.history.windows(2).any(|w| w[1].lr < w[0].lr),
        "learning rate never decayed on a stagnated run"
    );

    assert!(
        start.elapsed().as_secs_f64() < 600.0,
        "training criterion took {:?}",
        start.elapsed()
    );
}

fn training_dataset(
    n: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> swarm_density::scenegen::Dataset {
    let cfg = GenConfig {
        seed,
        ..GenConfig::default()
    };
    let mut pipe = PipelineConfig::desk_default(desk_spec(), GridSpec::new(1, 1).unwrap());
    pipe.n = n;
    pipe.n_val = n_val;
    pipe.n_test = n_test;
    generate_dataset(&cfg, &pipe).unwrap()
}

// ---------------------------------------------------------------------------
// 4. The ideal box detector preserves counts exactly (per-image count
//    error identically zero) while its bin placement errs, and observer
//    tilt biases it toward nearer bins while density labels stay exact.

fn c4_ideal_detector() {
    let dataset = training_dataset(120, 20, 40, 4);
    let train_samples: Vec<_> = dataset.split_samples(SplitKind::Train).cloned().collect();
    let table = build_bbox_table(&train_samples, &dataset.manifest.label_spec).unwrap();

    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for s in dataset.split_samples(SplitKind::Test) {
        preds.push(ideal_detector_histogram(s, &table).unwrap());
        gts.push(s.raw.clone());
    }
    let report = evaluate_pairs(&preds, &gts, (2, 11)).unwrap();
    assert!(
        report.per_image_t.iter().all(|&t| t == 0.0),
        "a detection-complete detector must have zero count error"
    );
    assert_eq!(report.t_bar, 0.0);
    assert!(
        report.e_total > 0.0,
        "size-based ranging should misplace at least some targets"
    );

    // Tilt sweep on the fixed probe: 0 degrees sits in the table's own
    // regime; 45 degrees inflates the silhouette and drags the estimate
    // at least one bin nearer. Distance labels ignore attitude entirely.
    let cam = desk_camera();
    let spec = desk_spec();
    let rows = tilt_study(&cam, &spec, 6, &[0.0, 45.0]).unwrap();
    assert_eq!(rows[0].bbox_bin_error, 0, "untilted probe must match the table");
    assert!(
        rows[1].bbox_bin_error <= -1,
        "45-degree tilt must shift the estimate at least one bin nearer, got {}",
        rows[1].bbox_bin_error
    );
    assert!(rows.iter().all(|r| r.density_bin_error == 0));

    // The correlation-shift analogue: a fleet of tilted probes across bins
    // 4..=10 yields an estimated histogram whose best alignment against
    // the true one is at a negative (nearer) shift.
    let mut gt_hist = vec![0.0f64; spec.n_bin];
    let mut est_hist = vec![0.0f64; spec.n_bin];
    for bin in 4..=10usize {
        let rows = tilt_study(&cam, &spec, bin, &[45.0]).unwrap();
        gt_hist[bin] += 1.0;
        let est = (bin as i64 + rows[0].bbox_bin_error).clamp(0, spec.n_bin as i64 - 1);
        est_hist[est as usize] += 1.0;
    }
    let shift = correlation_bias(&est_hist, &gt_hist).unwrap();
    assert!(
        shift < 0,
        "tilt must bias the distance estimate toward the camera, got shift {shift}"
    );
}

// ---------------------------------------------------------------------------
// 5. The two error sources separate: a pure one-bin shift keeps the count
//    error at exactly zero with positive bin error; dropping 20% of
//    targets puts the mean count error at 0.2 within 0.01.

fn c5_metric_relations() {
    let cam = desk_camera();
    let spec = desk_spec();
    let grid = GridSpec::new(1, 1).unwrap();
    let cfg = GenConfig::default();

    let gts: Vec<LabelGrid> = (0..2000u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(5_000_000 + i);
            let scene = sample_scene(&mut rng, &cfg, &cam).unwrap();
            raw_histogram(&scene.poses, &cam, &grid, &spec)
        })
        .collect();

    // Shift every target one bin outward (the last bin saturates).
    let shifted: Vec<LabelGrid> = gts
        .iter()
        .map(|gt| {
            let mut pred = LabelGrid::zeros(&grid, spec.n_bin);
            for d in 0..spec.n_bin {
                let target = (d + 1).min(spec.n_bin - 1);
                pred.histogram_mut(0, 0)[target] += gt.meta_vector()[d];
            }
            pred
        })
        .collect();
    let report = evaluate_pairs(&shifted, &gts, (2, 11)).unwrap();
    assert_eq!(report.t_bar, 0.0, "shifting preserves every count");
    assert!(report.per_image_t.iter().all(|&t| t == 0.0));
    assert!(report.e_total > 0.0, "shifting must show up as bin error");

    // Drop each target independently with probability 0.2.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let dropped: Vec<LabelGrid> = gts
        .iter()
        .map(|gt| {
            let mut pred = LabelGrid::zeros(&grid, spec.n_bin);
            for (j, &count) in gt.meta_vector().iter().enumerate() {
                let kept = (0..count.round() as usize)
                    .filter(|_| rng.gen_bool(0.8))
                    .count();
                pred.histogram_mut(0, 0)[j] = kept as f64;
            }
            pred
        })
        .collect();
    let report = evaluate_pairs(&dropped, &gts, (2, 11)).unwrap();
    assert!(
        (report.t_bar - 0.2).abs() <= 0.01,
        "20% target dropout should read as mean count error 0.2, got {}",
        report.t_bar
    );
}

// ---------------------------------------------------------------------------
// 6. Trained on the same dataset, seed, and schedule, the partial-label
//    run's close-range bin error on the validation split does not exceed
//    the raw-label run's.

fn c6_ablation_ordering() {
    let dataset = training_dataset(400, 60, 40, 6);
    let arch = ArchSpec::desk_default(50, GridSpec::new(1, 1).unwrap());
    let weights = LossWeights::near_emphasis(50, 4.0, 12.0);
    let cfg = TrainConfig {
        epochs: 25,
        shuffle_seed: 6,
        ..TrainConfig::default()
    };

    let e_close_for = |mode: LabelMode| -> f64 {
        let train_set = dataset.examples(SplitKind::Train, mode);
        let val_set = dataset.examples(SplitKind::Val, mode);
        let init = RegressorParams::init(&arch, 6).unwrap();
        let outcome = train(init, &train_set, &val_set, &weights, &cfg).unwrap();

        let preds: Vec<LabelGrid> = dataset
            .split_samples(SplitKind::Val)
            .map(|s| {
                let input = image_to_input(&s.image.pixels, s.image.width, s.image.height);
                forward(&outcome.params, &input).unwrap()
            })
            .collect();
        let gts: Vec<LabelGrid> = dataset
            .split_samples(SplitKind::Val)
            .map(|s| s.raw.clone())
            .collect();
        evaluate_pairs(&preds, &gts, (2, 11)).unwrap().e_close
    };

    let partial = e_close_for(LabelMode::Partial);
    let raw = e_close_for(LabelMode::Raw);
    assert!(
        partial <= raw,
        "partial smoothing should not lose to raw labels close up: {partial} vs {raw}"
    );
}

// ---------------------------------------------------------------------------
// 7. Output-grid refinement must stay parameter-cheap (the per-cell head
//    is shared), and the 1x1-conv tail undercuts the fully connected one.

fn c7_param_scaling() {
    let p_1x1 = ArchSpec::desk_default(50, GridSpec::new(1, 1).unwrap()).param_count();
    let p_3x3 = ArchSpec::desk_default(50, GridSpec::new(3, 3).unwrap()).param_count();
    let ratio = p_3x3 as f64 / p_1x1 as f64;
    assert!(
        ratio < 1.15,
        "3x3 grid costs {p_3x3} params vs {p_1x1} (ratio {ratio})"
    );
    assert!(ratio >= 1.0, "finer grids never shrink the model");

    let mut fc = ArchSpec::desk_default(50, GridSpec::new(1, 1).unwrap());
    fc.tail = TailKind::FullyConnected;
    assert!(
        p_1x1 < fc.param_count(),
        "1x1 tail ({p_1x1}) must be smaller than fc ({})",
        fc.param_count()
    );
}

// ---------------------------------------------------------------------------
// 8. The pipeline handles 150-target images end to end, and label time per
//    image grows at most linearly in the target count (per-target cost at
//    150 targets within 2x of the cost at 10).

fn c8_high_density() {
    let cam = desk_camera();
    let spec = desk_spec();
    let grid = GridSpec::new(1, 1).unwrap();
    let cfg = GenConfig::high_density(8);

    // Find a scene with the full 150 targets; counts are uniform so this
    // takes about 150 draws.
    let mut dense = None;
    for seed in 0..5000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = sample_scene(&mut rng, &cfg, &cam).unwrap();
        if scene.poses.len() == cfg.max_count {
            dense = Some(scene);
            break;
        }
    }
    let dense = dense.expect("a 150-target scene within 5000 draws");
    assert_eq!(dense.poses.len(), 150);

    // Full processing chain: render, labels, boxes, metrics.
    let style = swarm_density::scenegen::RenderStyle::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let image = swarm_density::scenegen::render_scene(&dense, &cam, &style, &mut rng);
    let sample =
        swarm_density::scenegen::make_sample(image, dense.poses.clone(), cam, &spec, &grid)
            .unwrap();
    assert_eq!(sample.target_count(), 150, "every dense target stays in frame");
    let mass: f64 = sample.raw.meta_vector().iter().sum();
    assert_eq!(mass, 150.0);

    let mut pred = sample.raw.clone();
    pred.histogram_mut(0, 0).rotate_right(1);
    let (e, t) = per_image_errors(&pred, &sample.raw).unwrap();
    assert_eq!(e.len(), 50);
    assert!(t.is_finite());

    // Label-time slope: per-target time at 150 targets vs at 10. Fixed
    // per-call overhead only inflates the 10-target baseline, so an
    // superlinear implementation cannot hide behind it.
    let time_per_call = |poses: &[UavPose]| -> f64 {
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let start = Instant::now();
            for _ in 0..400 {
                let raw = raw_histogram(poses, &cam, &grid, &spec);
                let partial = smooth_labels(&raw, &spec, LabelMode::Partial);
                std::hint::black_box(partial);
            }
            best = best.min(start.elapsed().as_secs_f64() / 400.0);
        }
        best
    };
    let poses_10 = lattice_poses(10, &cam);
    let poses_150 = lattice_poses(150, &cam);
    let t10 = time_per_call(&poses_10);
    let t150 = time_per_call(&poses_150);
    let slope_ratio = (t150 / 150.0) / (t10 / 10.0);
    assert!(
        slope_ratio <= 2.0,
        "per-target label time grew {slope_ratio:.2}x from 10 to 150 targets"
    );
}

/// Evenly spread poses at a fixed depth, all projecting inside the frame.
fn lattice_poses(count: usize, cam: &CameraIntrinsics) -> Vec<UavPose> {
    let cols = (count as f64).sqrt().ceil() as usize;
    let z = 20.0;
    let span = 0.8 * z * (cam.width as f64 / 2.0) / cam.fx;
    (0..count)
        .map(|i| {
            let gx = (i % cols) as f64 / cols.max(1) as f64 - 0.5;
            let gy = (i / cols) as f64 / cols.max(1) as f64 - 0.5;
            UavPose::new([2.0 * span * gx, 2.0 * span * gy, z], [0.0, 0.1, 0.2])
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 9. Every CLI command, re-run with the same seed and relative paths in a
//    fresh directory, produces byte-identical artifacts.

fn c9_cli_reproducibility() {
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let config = "\
[pipeline]
n = 24
n_val = 6
n_test = 4

[gen]
max_count = 4
balance_cap = 4

[arch]
stages = [[4, 4], [8, 4]]

[train]
epochs = 2
batch_size = 8
";
    let commands: &[&[&str]] = &[
        &["gen", "--config", "cfg.toml", "--seed", "3", "--out", "d"],
        &["train", "--config", "cfg.toml", "--seed", "3", "--dataset", "d", "--out", "t"],
        &[
            "eval",
            "--config",
            "cfg.toml",
            "--checkpoint",
            "t/checkpoint.bin",
            "--dataset",
            "d",
            "--out",
            "e",
        ],
        &["eval", "--config", "cfg.toml", "--ideal", "--dataset", "d", "--out", "ei"],
        &["compare", "e", "ei", "--out", "c"],
        &["bias-study", "--config", "cfg.toml", "--seed", "3", "--out", "b"],
    ];

    for root in &roots {
        std::fs::write(root.path().join("cfg.toml"), config).unwrap();
        for args in commands {
            let out = Command::new(env!("CARGO_BIN_EXE_swarm-density"))
                .current_dir(root.path())
                .args(*args)
                .output()
                .expect("binary runs");
            assert!(
                out.status.success(),
                "{args:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
    }

    let files_a = walk_files(roots[0].path());
    let files_b = walk_files(roots[1].path());
    assert_eq!(files_a, files_b, "directory layouts differ");
    assert!(
        files_a.iter().any(|f| f.ends_with("checkpoint.bin")),
        "training artifacts missing"
    );
    for rel in &files_a {
        let a = std::fs::read(roots[0].path().join(rel)).unwrap();
        let b = std::fs::read(roots[1].path().join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
}

fn walk_files(root: &Path) -> Vec<String> {
    fn inner(dir: &Path, base: &Path, out: &mut Vec<String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                inner(&path, base, out);
            } else {
                out.push(
                    path.strip_prefix(base)
                        .unwrap()
                        .to_string_lossy()
                        .into_owned(),
                );
            }
        }
    }
    let mut out = Vec::new();
    inner(root, root, &mut out);
    out.sort();
    out
}
