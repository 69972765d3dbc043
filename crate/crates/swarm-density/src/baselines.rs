//! Idealized bounding-box baseline: a detector with perfect recall that
//! must infer distance from box size alone, plus a correlation diagnostic
//! for systematic distance shift.
//!
//! The baseline maps each ground-truth box to the distance bin whose mean
//! training box size is nearest in (width, height) space. Because it emits
//! exactly one detection per visible target, its per-image count error is
//! zero by construction; all of its error is distance misassignment, which
//! attitude changes amplify (a tilted airframe projects a taller box and
//! reads as nearer than it is).

use thiserror::Error;

use crate::geometry::{self, CameraIntrinsics, GeometryError, TargetModel, UavPose};
use crate::labeling::{LabelGrid, LabelSpec};
use crate::scenegen::Sample;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("no usable boxes: {0}")]
    EmptyTable(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
}

/// Mean ground-truth box dimensions per distance bin. Bins that received
/// no boxes are invalid and never chosen by lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct BboxStatTable {
    mean_w: Vec<f64>,
    mean_h: Vec<f64>,
    counts: Vec<u64>,
}

impl BboxStatTable {
    fn empty(n_bin: usize) -> Self {
        Self {
            mean_w: vec![0.0; n_bin],
            mean_h: vec![0.0; n_bin],
            counts: vec![0; n_bin],
        }
    }

    fn add(&mut self, bin: usize, w: f64, h: f64) {
        // Running mean keeps the accumulator well-scaled for any count.
        self.counts[bin] += 1;
        let k = self.counts[bin] as f64;
        self.mean_w[bin] += (w - self.mean_w[bin]) / k;
        self.mean_h[bin] += (h - self.mean_h[bin]) / k;
    }

    pub fn n_bin(&self) -> usize {
        self.counts.len()
    }

    /// Mean (width, height) for a bin, or None when the bin saw no boxes.
    pub fn mean_dims(&self, bin: usize) -> Option<(f64, f64)> {
        (self.counts[bin] > 0).then(|| (self.mean_w[bin], self.mean_h[bin]))
    }

    pub fn box_count(&self, bin: usize) -> u64 {
        self.counts[bin]
    }

    /// The valid bin whose mean box size is nearest to (w, h) in Euclidean
    /// terms; exact ties resolve to the smaller bin index.
    pub fn nearest_bin(&self, w: f64, h: f64) -> Result<usize, BaselineError> {
        let mut best: Option<(usize, f64)> = None;
        for bin in 0..self.counts.len() {
            let Some((mw, mh)) = self.mean_dims(bin) else {
                continue;
            };
            let d2 = (w - mw).powi(2) + (h - mh).powi(2);
            // Strict improvement only, so the lowest bin wins ties.
            if best.map_or(true, |(_, bd)| d2 < bd) {
                best = Some((bin, d2));
            }
        }
        best.map(|(bin, _)| bin)
            .ok_or_else(|| BaselineError::EmptyTable("no valid bins in table".into()))
    }

    /// One row per bin: index, meter range, mean box size, box count.
    pub fn to_csv(&self, spec: &LabelSpec) -> String {
        let mut out = String::from("bin_index,bin_lo_m,bin_hi_m,mean_w_px,mean_h_px,n_boxes\n");
        for bin in 0..self.counts.len() {
            let (lo, hi) = spec.bin_bounds(bin);
            out.push_str(&format!(
                "{bin},{lo},{hi},{},{},{}\n",
                self.mean_w[bin], self.mean_h[bin], self.counts[bin]
            ));
        }
        out
    }
}

/// Accumulates the per-bin mean box size over samples. Boxes clipped by
/// the image border are skipped: their stored extent is truncated and
/// would drag the mean toward smaller sizes.
pub fn build_bbox_table(
    samples: &[Sample],
    spec: &LabelSpec,
) -> Result<BboxStatTable, BaselineError> {
    let mut table = BboxStatTable::empty(spec.n_bin);
    for sample in samples {
        for entry in &sample.bboxes {
            if entry.bbox.clipped {
                continue;
            }
            let bin = spec.bin_of(sample.poses[entry.uav].distance());
            table.add(bin, entry.bbox.width(), entry.bbox.height());
        }
    }
    if table.counts.iter().all(|&c| c == 0) {
        return Err(BaselineError::EmptyTable(
            "no unclipped boxes in the provided samples".into(),
        ));
    }
    Ok(table)
}

/// Runs the idealized detector on one sample: every ground-truth box, at
/// its box center's grid cell, contributes one count at the distance bin
/// looked up from the size table. Total predicted mass therefore equals
/// ground-truth mass image by image.
pub fn ideal_detector_histogram(
    sample: &Sample,
    table: &BboxStatTable,
) -> Result<LabelGrid, BaselineError> {
    let grid = sample.raw.grid_spec();
    if table.n_bin() != sample.raw.n_bin() {
        return Err(BaselineError::Shape(format!(
            "table has {} bins, labels have {}",
            table.n_bin(),
            sample.raw.n_bin()
        )));
    }
    let mut out = LabelGrid::zeros(&grid, table.n_bin());
    for entry in &sample.bboxes {
        let (u, v) = entry.bbox.center();
        let Some((col, row)) = geometry::grid_cell_of(&sample.camera, &grid, u, v) else {
            // Boxes are clamped to the image, so their centers always fall
            // inside it.
            unreachable!("clamped box center left the image");
        };
        let bin = table.nearest_bin(entry.bbox.width(), entry.bbox.height())?;
        out.histogram_mut(col, row)[bin] += 1.0;
    }
    Ok(out)
}

/// Signed shift (in bins) that best aligns a predicted distance histogram
/// with the ground truth: the s maximizing sum over d of
/// pred[d] * gt[d - s]. Positive values mean the prediction puts mass at
/// larger distances than the truth (overestimation). Ties resolve to the
/// smallest magnitude, preferring the negative shift between equals.
pub fn correlation_bias(pred: &[f64], gt: &[f64]) -> Result<i64, BaselineError> {
    if pred.len() != gt.len() {
        return Err(BaselineError::Shape(format!(
            "pred has {} bins, gt has {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(BaselineError::Shape("empty histograms".into()));
    }
    let n = pred.len() as i64;
    let score = |s: i64| -> f64 {
        let mut acc = 0.0;
        for d in 0..n {
            let g = d - s;
            if (0..n).contains(&g) {
                acc += pred[d as usize] * gt[g as usize];
            }
        }
        acc
    };
    // Visit shifts by increasing magnitude so the first strict maximum is
    // also the minimal-|s| one.
    let mut best_s = 0;
    let mut best = score(0);
    for mag in 1..n {
        for s in [-mag, mag] {
            let sc = score(s);
            if sc > best {
                best = sc;
                best_s = s;
            }
        }
    }
    Ok(best_s)
}

/// Per-bin mean box sizes measured from untilted probes on the optical
/// axis at each bin center; the tilt study's reference detector.
pub fn reference_table(
    cam: &CameraIntrinsics,
    spec: &LabelSpec,
) -> Result<BboxStatTable, BaselineError> {
    let model = TargetModel::default();
    let mut table = BboxStatTable::empty(spec.n_bin);
    for bin in 0..spec.n_bin {
        let d = (bin as f64 + 0.5) * spec.delta_d;
        if d <= model.half_extents[2] {
            continue;
        }
        let pose = UavPose::new([0.0, 0.0, d], [0.0; 3]);
        let Some(bbox) = geometry::target_bbox(cam, &pose, &model)? else {
            continue;
        };
        if bbox.clipped {
            continue;
        }
        table.add(bin, bbox.width(), bbox.height());
    }
    if table.counts.iter().all(|&c| c == 0) {
        return Err(BaselineError::EmptyTable(
            "no probe distance yields an unclipped box".into(),
        ));
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltStudyRow {
    pub tilt_deg: f64,
    /// Estimated bin minus true bin for the box-size detector; negative
    /// means the tilted (taller) box reads as nearer than it is.
    pub bbox_bin_error: i64,
    /// Same quantity for the distance-binned density labels, which depend
    /// only on target position and are therefore immune to attitude.
    pub density_bin_error: i64,
}

/// Sweeps airframe tilt for a single on-axis probe target at the center of
/// `probe_bin`, comparing how the box-size detector and the density labels
/// assign its distance bin.
pub fn tilt_study(
    cam: &CameraIntrinsics,
    spec: &LabelSpec,
    probe_bin: usize,
    tilts_deg: &[f64],
) -> Result<Vec<TiltStudyRow>, BaselineError> {
    if probe_bin >= spec.n_bin {
        return Err(BaselineError::InvalidProbe(format!(
            "probe bin {probe_bin} out of {}",
            spec.n_bin
        )));
    }
    let table = reference_table(cam, spec)?;
    let model = TargetModel::default();
    let d = (probe_bin as f64 + 0.5) * spec.delta_d;
    let mut rows = Vec::with_capacity(tilts_deg.len());
    for &tilt in tilts_deg {
        let pose = UavPose::new([0.0, 0.0, d], [tilt.to_radians(), 0.0, 0.0]);
        let bbox = geometry::target_bbox(cam, &pose, &model)?
            .ok_or_else(|| BaselineError::InvalidProbe("probe behind camera".into()))?;
        if bbox.clipped {
            return Err(BaselineError::InvalidProbe(format!(
                "probe box clipped at tilt {tilt} deg; use a farther bin or wider camera"
            )));
        }
        let est = table.nearest_bin(bbox.width(), bbox.height())?;
        let density_bin = spec.bin_of(pose.distance());
        rows.push(TiltStudyRow {
            tilt_deg: tilt,
            bbox_bin_error: est as i64 - probe_bin as i64,
            density_bin_error: density_bin as i64 - probe_bin as i64,
        });
    }
    Ok(rows)
}

pub fn tilt_study_csv(rows: &[TiltStudyRow]) -> String {
    let mut out = String::from("tilt_deg,bbox_bin_error,density_bin_error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.tilt_deg, r.bbox_bin_error, r.density_bin_error
        ));
    }
    out
}
