//! The five pipeline commands. Each one writes its artifacts plus the
//! resolved run configuration into `--out`, and re-running with identical
//! inputs reproduces identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use swarm_density::baselines::{
    build_bbox_table, ideal_detector_histogram, tilt_study, tilt_study_csv,
};
use swarm_density::labeling::{raw_histogram, smooth_labels, LabelGrid};
use swarm_density::metrics::{
    evaluate_pairs, per_cell_bin_errors, read_report_csv, write_quartiles_csv, write_report_csv,
};
use swarm_density::regressor::{
    forward, image_to_input, load_checkpoint, save_checkpoint, train, write_history_csv,
    LossWeights, RegressorParams, TrainingExample,
};
use swarm_density::scenegen::{
    bin_mass_distribution, bucket_histogram, generate_dataset, read_dataset, write_dataset,
    Dataset, Sample, SplitKind,
};

use crate::config::{save_run_config, Resolved, RunConfig};
use crate::CliError;

/// Generates, balances, splits, and writes a dataset, then prints the
/// per-count histogram and the per-bin ground-truth mass distribution.
pub fn cmd_gen(cfg: &RunConfig, resolved: &Resolved, out: &Path) -> Result<(), CliError> {
    let dataset = generate_dataset(&resolved.gen, &resolved.pipe)?;
    fs::create_dir_all(out)?;
    write_dataset(&dataset, out)?;

    let hist = bucket_histogram(&dataset.samples);
    let mut hist_csv = String::from("target_count,n_samples\n");
    for (count, n) in &hist {
        hist_csv.push_str(&format!("{count},{n}\n"));
    }
    let masses = bin_mass_distribution(&dataset.samples, resolved.label_spec.n_bin);
    let mut dist_csv = String::from("bin_index,bin_lo_m,bin_hi_m,gt_mass\n");
    for (d, mass) in masses.iter().enumerate() {
        let (lo, hi) = resolved.label_spec.bin_bounds(d);
        dist_csv.push_str(&format!("{d},{lo},{hi},{mass}\n"));
    }
    fs::write(out.join("bucket_histogram.csv"), &hist_csv)?;
    fs::write(out.join("bin_distribution.csv"), &dist_csv)?;
    save_run_config(cfg, out)?;

    print!("{hist_csv}");
    print!("{dist_csv}");
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        dataset.samples.len(),
        dataset.manifest.splits.train.len(),
        dataset.manifest.splits.val.len(),
        dataset.manifest.splits.test.len(),
        out.display()
    );
    Ok(())
}

/// Labels a sample under the resolved spec, grid, and mode. Training and
/// evaluation both relabel from poses so one dataset serves every grid and
/// smoothing ablation; the stored labels are validated against this exact
/// computation when the dataset is read.
fn relabel(sample: &Sample, resolved: &Resolved) -> LabelGrid {
    let raw = raw_histogram(
        &sample.poses,
        &sample.camera,
        &resolved.grid,
        &resolved.label_spec,
    );
    smooth_labels(&raw, &resolved.label_spec, resolved.label_mode)
}

fn split_examples(dataset: &Dataset, split: SplitKind, resolved: &Resolved) -> Vec<TrainingExample> {
    dataset
        .split_samples(split)
        .map(|s| TrainingExample {
            image: image_to_input(&s.image.pixels, s.image.width, s.image.height),
            target: relabel(s, resolved).meta_vector().to_vec(),
        })
        .collect()
}

/// Trains the regressor on a dataset's train split, selecting weights by
/// validation loss, and writes checkpoint + history.
pub fn cmd_train(
    cfg: &RunConfig,
    resolved: &Resolved,
    dataset_dir: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let dataset = read_dataset(dataset_dir)?;
    let train_set = split_examples(&dataset, SplitKind::Train, resolved);
    let val_set = split_examples(&dataset, SplitKind::Val, resolved);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CliError::Data(format!(
            "dataset at {} has empty train or validation split",
            dataset_dir.display()
        )));
    }
    let expected_len = (resolved.arch.input_width * resolved.arch.input_height * 3) as usize;
    if train_set[0].image.len() != expected_len {
        return Err(CliError::Data(format!(
            "dataset images do not match the architecture input {}x{}",
            resolved.arch.input_width, resolved.arch.input_height
        )));
    }

    println!(
        "architecture: {} stages, {} tail, {}x{} grid, {} parameters",
        resolved.arch.stages.len(),
        resolved.arch.tail.name(),
        resolved.grid.w_out,
        resolved.grid.h_out,
        resolved.arch.param_count()
    );

    let weights = LossWeights::near_emphasis(
        resolved.label_spec.n_bin,
        resolved.loss.beta,
        resolved.loss.d_near,
    );
    let init = RegressorParams::init(&resolved.arch, resolved.seed)?;
    let outcome = train(init, &train_set, &val_set, &weights, &resolved.train)?;

    fs::create_dir_all(out)?;
    save_checkpoint(
        &out.join("checkpoint.bin"),
        &outcome.params,
        &outcome.history,
        outcome.best_epoch,
    )?;
    write_history_csv(&out.join("history.csv"), &outcome.history)?;
    save_run_config(cfg, out)?;

    let first = outcome.history.first().expect("at least one epoch");
    let best = &outcome.history[outcome.best_epoch - 1];
    println!(
        "trained {} epochs: val loss {} -> best {} at epoch {}",
        outcome.history.len(),
        first.val_loss,
        best.val_loss,
        outcome.best_epoch
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitOpt {
    Train,
    Val,
    Test,
}

impl From<SplitOpt> for SplitKind {
    fn from(s: SplitOpt) -> Self {
        match s {
            SplitOpt::Train => SplitKind::Train,
            SplitOpt::Val => SplitKind::Val,
            SplitOpt::Test => SplitKind::Test,
        }
    }
}

/// Sidecar consumed by `compare`: the report plus what it was measured on.
#[derive(Debug, Serialize, Deserialize)]
struct EvalMeta {
    params: usize,
    n_bin: usize,
    source: String,
}

/// Evaluates a checkpoint (or the ideal bounding-box detector) on one
/// dataset split and writes the metric report, per-bin quartiles, and a
/// per-cell breakdown for multi-cell grids.
pub fn cmd_eval(
    cfg: &RunConfig,
    resolved: &Resolved,
    dataset_dir: &Path,
    checkpoint: Option<&Path>,
    ideal: bool,
    split: SplitOpt,
    out: &Path,
) -> Result<(), CliError> {
    let dataset = read_dataset(dataset_dir)?;
    let samples: Vec<&Sample> = dataset.split_samples(split.into()).collect();
    if samples.is_empty() {
        return Err(CliError::Data(format!(
            "split {:?} of {} is empty",
            split,
            dataset_dir.display()
        )));
    }

    let (preds, gts, meta) = if ideal {
        // The size table comes from the training split; the stored raw
        // labels are the ground truth on the dataset's own grid.
        let train_samples: Vec<Sample> = dataset.split_samples(SplitKind::Train).cloned().collect();
        if train_samples.is_empty() {
            return Err(CliError::Data(
                "ideal-detector evaluation needs a training split for its size table".into(),
            ));
        }
        let table = build_bbox_table(&train_samples, &dataset.manifest.label_spec)?;
        let mut preds = Vec::with_capacity(samples.len());
        let mut gts = Vec::with_capacity(samples.len());
        for s in &samples {
            preds.push(ideal_detector_histogram(s, &table)?);
            gts.push(s.raw.clone());
        }
        let meta = EvalMeta {
            params: 0,
            n_bin: dataset.manifest.label_spec.n_bin,
            source: "ideal-detector".into(),
        };
        (preds, gts, meta)
    } else {
        let path = checkpoint.expect("clap requires --checkpoint unless --ideal");
        let ckpt = load_checkpoint(path)?;
        let arch = &ckpt.params.arch;
        if arch.n_bin != dataset.manifest.label_spec.n_bin {
            return Err(CliError::Data(format!(
                "checkpoint has {} bins, dataset labels have {}",
                arch.n_bin, dataset.manifest.label_spec.n_bin
            )));
        }
        let sample0 = samples[0];
        if (sample0.image.width, sample0.image.height) != (arch.input_width, arch.input_height) {
            return Err(CliError::Data(format!(
                "checkpoint expects {}x{} input, dataset images are {}x{}",
                arch.input_width, arch.input_height, sample0.image.width, sample0.image.height
            )));
        }
        // Ground truth is rebuilt on the checkpoint's own grid so a 3x3
        // model evaluates against 3x3 cells regardless of the stored grid.
        let mut preds = Vec::with_capacity(samples.len());
        let mut gts = Vec::with_capacity(samples.len());
        for s in &samples {
            let input = image_to_input(&s.image.pixels, s.image.width, s.image.height);
            preds.push(forward(&ckpt.params, &input)?);
            gts.push(raw_histogram(
                &s.poses,
                &s.camera,
                &arch.grid,
                &dataset.manifest.label_spec,
            ));
        }
        let meta = EvalMeta {
            params: ckpt.params.param_count(),
            n_bin: arch.n_bin,
            source: path.display().to_string(),
        };
        (preds, gts, meta)
    };

    let report = evaluate_pairs(&preds, &gts, resolved.window)?;
    fs::create_dir_all(out)?;
    write_report_csv(&report, &dataset.manifest.label_spec, &out.join("report.csv"))?;
    write_quartiles_csv(&report, &dataset.manifest.label_spec, &out.join("quartiles.csv"))?;

    let grid = gts[0].grid_spec();
    if grid.cells() > 1 {
        let cells = per_cell_bin_errors(&preds, &gts, resolved.window)?;
        let mut csv = String::from("cell_col,cell_row,bin_index,e_bar,gt_mass\n");
        for c in &cells {
            for d in 0..c.e_bar.len() {
                csv.push_str(&format!(
                    "{},{},{d},{:.8e},{:.8e}\n",
                    c.col, c.row, c.e_bar[d], c.gt_mass[d]
                ));
            }
        }
        fs::write(out.join("per_cell.csv"), csv)?;
    }

    fs::write(
        out.join("meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    save_run_config(cfg, out)?;

    println!(
        "evaluated {} images: T_bar = {}, E_bar = {}, E_bar_prime = {}",
        report.n_images, report.t_bar, report.e_total, report.e_close
    );
    Ok(())
}

/// Joins evaluation reports into one table with the two best runs marked
/// per metric column.
pub fn cmd_compare(report_dirs: &[std::path::PathBuf], out: &Path) -> Result<(), CliError> {
    struct Row {
        name: String,
        t_bar: f64,
        e_bar: f64,
        e_close: f64,
        params: usize,
    }
    let mut rows = Vec::new();
    let mut n_bin: Option<usize> = None;
    for dir in report_dirs {
        let summary = read_report_csv(&dir.join("report.csv"))?;
        let meta_text = fs::read_to_string(dir.join("meta.json"))?;
        let meta: EvalMeta = serde_json::from_str(&meta_text)?;
        match n_bin {
            None => n_bin = Some(meta.n_bin),
            Some(n) if n != meta.n_bin => {
                return Err(CliError::Data(format!(
                    "cannot compare reports with different bin counts ({n} vs {})",
                    meta.n_bin
                )));
            }
            _ => {}
        }
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        rows.push(Row {
            name,
            t_bar: summary.t_bar,
            e_bar: summary.e_total,
            e_close: summary.e_close,
            params: meta.params,
        });
    }

    // Two best (smallest) per column; first listed wins ties.
    let marks = |values: Vec<f64>| -> Vec<&'static str> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| {
            values[a]
                .partial_cmp(&values[b])
                .expect("finite metrics")
                .then(a.cmp(&b))
        });
        let mut out = vec![""; values.len()];
        if let Some(&i) = order.first() {
            out[i] = "best";
        }
        if let Some(&i) = order.get(1) {
            out[i] = "second";
        }
        out
    };
    let t_marks = marks(rows.iter().map(|r| r.t_bar).collect());
    let e_marks = marks(rows.iter().map(|r| r.e_bar).collect());
    let c_marks = marks(rows.iter().map(|r| r.e_close).collect());

    let mut csv = String::from(
        "name,t_bar,e_bar,e_bar_prime,params,t_bar_mark,e_bar_mark,e_bar_prime_mark\n",
    );
    for (i, r) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e},{},{},{},{}\n",
            r.name, r.t_bar, r.e_bar, r.e_close, r.params, t_marks[i], e_marks[i], c_marks[i]
        ));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("compare.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Sweeps observer tilt for a fixed-distance probe and reports how the
/// box-size detector's bin estimate drifts while the density label stays
/// exact.
pub fn cmd_bias_study(cfg: &RunConfig, resolved: &Resolved, out: &Path) -> Result<(), CliError> {
    let mut tilts = Vec::new();
    let mut t = 0.0;
    while t <= resolved.bias.tilt_max_deg + 1e-9 {
        tilts.push(t);
        t += resolved.bias.tilt_step_deg;
    }
    let rows = tilt_study(
        &resolved.camera,
        &resolved.label_spec,
        resolved.bias.probe_bin,
        &tilts,
    )?;
    let csv = tilt_study_csv(&rows);
    fs::create_dir_all(out)?;
    fs::write(out.join("bias_study.csv"), &csv)?;
    save_run_config(cfg, out)?;
    print!("{csv}");
    Ok(())
}
