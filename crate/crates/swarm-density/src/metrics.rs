//! Evaluation measures for distance-binned density predictions: per-image
//! per-bin errors, per-image integral (count) error, and dataset
//! aggregates with their CSV export.
//!
//! All errors are computed on cell-summed histograms so models with
//! different grid divisions are compared on the same footing; per-cell
//! breakdowns are available separately. Predictions are clamped at zero
//! first, densities being counts.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::labeling::{LabelGrid, LabelSpec};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero-UAV image: the count-error normalization is undefined")]
    ZeroMass,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("bad report file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Inclusive bin window for the close-range error sum.
pub const DEFAULT_CLOSE_WINDOW: (usize, usize) = (2, 11);

/// Sentinel stored in `e_bar` for bins with error mass but no ground-truth
/// mass anywhere in the dataset; such bins are excluded from the sums.
pub const UNDEFINED_E_BAR: f64 = f64::INFINITY;

/// Per-bin signed error and integral count error of one image, both over
/// cell-summed histograms with the prediction clamped at zero.
///
/// Rejects images without ground-truth targets: the count-error
/// normalization divides by the ground-truth mass.
pub fn per_image_errors(
    pred: &LabelGrid,
    gt_raw: &LabelGrid,
) -> Result<(Vec<f64>, f64), MetricsError> {
    if pred.grid_spec() != gt_raw.grid_spec() || pred.n_bin() != gt_raw.n_bin() {
        return Err(MetricsError::Shape(format!(
            "prediction {}x{}x{} vs ground truth {}x{}x{}",
            pred.grid_spec().w_out,
            pred.grid_spec().h_out,
            pred.n_bin(),
            gt_raw.grid_spec().w_out,
            gt_raw.grid_spec().h_out,
            gt_raw.n_bin()
        )));
    }
    if !pred.is_finite() {
        return Err(MetricsError::NonFinite("prediction".into()));
    }
    if !gt_raw.is_finite() {
        return Err(MetricsError::NonFinite("ground truth".into()));
    }
    let mut clamped = pred.clone();
    clamped.clamp_non_negative();
    let p = clamped.cell_sum();
    let g = gt_raw.cell_sum();
    let gt_total: f64 = g.iter().sum();
    if gt_total <= 0.0 {
        return Err(MetricsError::ZeroMass);
    }
    let e: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a - b).collect();
    let t = e.iter().sum::<f64>().abs() / gt_total;
    Ok((e, t))
}

/// Dataset-level evaluation aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Signed per-bin error of each image (cell-summed).
    pub per_image_e: Vec<Vec<f64>>,
    /// Integral count error of each image.
    pub per_image_t: Vec<f64>,
    /// Mean absolute per-bin error normalized by ground-truth bin mass;
    /// `UNDEFINED_E_BAR` marks bins with errors but no mass.
    pub e_bar: Vec<f64>,
    /// Total ground-truth mass per bin across the dataset.
    pub gt_mass: Vec<f64>,
    /// Mean integral count error.
    pub t_bar: f64,
    /// Sum of defined e_bar entries.
    pub e_total: f64,
    /// Sum of defined e_bar entries inside the close-range window.
    pub e_close: f64,
    /// Inclusive close-range bin window.
    pub window: (usize, usize),
    pub n_images: usize,
}

impl MetricsReport {
    pub fn n_bin(&self) -> usize {
        self.e_bar.len()
    }

    /// Whether a bin's normalized error is defined (no sentinel).
    pub fn bin_defined(&self, bin: usize) -> bool {
        self.e_bar[bin].is_finite()
    }
}

fn check_window(window: (usize, usize), n_bin: usize) -> Result<(), MetricsError> {
    if window.0 > window.1 || window.1 >= n_bin {
        return Err(MetricsError::Shape(format!(
            "close-range window [{}, {}] does not fit {} bins",
            window.0, window.1, n_bin
        )));
    }
    Ok(())
}

/// Shared reduction: numerator sum of |e|, denominator sum of gt mass.
fn bin_error_sums(num: &[f64], den: &[f64], window: (usize, usize)) -> (Vec<f64>, f64, f64) {
    let mut e_bar = Vec::with_capacity(num.len());
    let mut total = 0.0;
    let mut close = 0.0;
    for d in 0..num.len() {
        let value = if den[d] > 0.0 {
            num[d] / den[d]
        } else if num[d] == 0.0 {
            0.0
        } else {
            UNDEFINED_E_BAR
        };
        e_bar.push(value);
        if value.is_finite() {
            total += value;
            if d >= window.0 && d <= window.1 {
                close += value;
            }
        }
    }
    (e_bar, total, close)
}

/// Aggregates per-image (signed error, raw ground truth) pairs, both as
/// cell-summed per-bin vectors, into the dataset report.
pub fn aggregate(
    items: &[(Vec<f64>, Vec<f64>)],
    window: (usize, usize),
) -> Result<MetricsReport, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::EmptyInput("no images to aggregate".into()));
    }
    let n_bin = items[0].0.len();
    check_window(window, n_bin)?;

    let mut num = vec![0.0; n_bin];
    let mut den = vec![0.0; n_bin];
    let mut per_image_e = Vec::with_capacity(items.len());
    let mut per_image_t = Vec::with_capacity(items.len());
    for (i, (e, gt)) in items.iter().enumerate() {
        if e.len() != n_bin || gt.len() != n_bin {
            return Err(MetricsError::Shape(format!(
                "image {i} has {} error bins and {} gt bins, expected {n_bin}",
                e.len(),
                gt.len()
            )));
        }
        if e.iter().chain(gt).any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite(format!("image {i}")));
        }
        let gt_total: f64 = gt.iter().sum();
        if gt_total <= 0.0 {
            return Err(MetricsError::ZeroMass);
        }
        for d in 0..n_bin {
            num[d] += e[d].abs();
            den[d] += gt[d];
        }
        per_image_t.push(e.iter().sum::<f64>().abs() / gt_total);
        per_image_e.push(e.clone());
    }

    let (e_bar, e_total, e_close) = bin_error_sums(&num, &den, window);
    let t_bar = per_image_t.iter().sum::<f64>() / per_image_t.len() as f64;
    Ok(MetricsReport {
        per_image_e,
        per_image_t,
        e_bar,
        gt_mass: den,
        t_bar,
        e_total,
        e_close,
        window,
        n_images: items.len(),
    })
}

/// Convenience wrapper: per-image errors for each (prediction, raw ground
/// truth) pair, then aggregation.
pub fn evaluate_pairs(
    preds: &[LabelGrid],
    gts: &[LabelGrid],
    window: (usize, usize),
) -> Result<MetricsReport, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::Shape(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut items = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let (e, _) = per_image_errors(p, g)?;
        items.push((e, g.cell_sum()));
    }
    aggregate(&items, window)
}

/// Normalized per-bin error for each grid cell separately. The per-image
/// count error has no per-cell analogue (images may leave cells empty), so
/// only the mass-normalized bin errors are reported.
#[derive(Debug, Clone, PartialEq)]
pub struct CellBinErrors {
    pub col: u32,
    pub row: u32,
    pub e_bar: Vec<f64>,
    pub gt_mass: Vec<f64>,
    pub e_total: f64,
    pub e_close: f64,
}

pub fn per_cell_bin_errors(
    preds: &[LabelGrid],
    gts: &[LabelGrid],
    window: (usize, usize),
) -> Result<Vec<CellBinErrors>, MetricsError> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(MetricsError::EmptyInput(
            "need matching non-empty prediction and ground-truth lists".into(),
        ));
    }
    let grid = gts[0].grid_spec();
    let n_bin = gts[0].n_bin();
    check_window(window, n_bin)?;
    let mut out = Vec::new();
    for row in 0..grid.h_out {
        for col in 0..grid.w_out {
            let mut num = vec![0.0; n_bin];
            let mut den = vec![0.0; n_bin];
            for (p, g) in preds.iter().zip(gts) {
                if p.grid_spec() != grid || g.grid_spec() != grid || p.n_bin() != n_bin {
                    return Err(MetricsError::Shape("inconsistent grids in list".into()));
                }
                let mut cp = p.clone();
                cp.clamp_non_negative();
                let ph = cp.histogram(col, row);
                let gh = g.histogram(col, row);
                for d in 0..n_bin {
                    num[d] += (ph[d] - gh[d]).abs();
                    den[d] += gh[d];
                }
            }
            let (e_bar, e_total, e_close) = bin_error_sums(&num, &den, window);
            out.push(CellBinErrors {
                col,
                row,
                e_bar,
                gt_mass: den,
                e_total,
                e_close,
            });
        }
    }
    Ok(out)
}

/// Nine-significant-digit scientific formatting; stable across runs and
/// exact enough to reconstruct the report for comparison purposes.
fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Writes the report as CSV: one row per bin, then a one-row summary
/// section. Two exports of the same report are byte-identical.
pub fn write_report_csv(
    report: &MetricsReport,
    spec: &LabelSpec,
    path: &Path,
) -> Result<(), MetricsError> {
    let mut out = String::from("bin_index,bin_lo_m,bin_hi_m,e_bar,gt_mass\n");
    for d in 0..report.n_bin() {
        let (lo, hi) = spec.bin_bounds(d);
        out.push_str(&format!(
            "{d},{lo},{hi},{},{}\n",
            fmt9(report.e_bar[d]),
            fmt9(report.gt_mass[d])
        ));
    }
    out.push_str("T_bar,E_bar,E_bar_prime,n_images\n");
    out.push_str(&format!(
        "{},{},{},{}\n",
        fmt9(report.t_bar),
        fmt9(report.e_total),
        fmt9(report.e_close),
        report.n_images
    ));
    fs::write(path, out)?;
    Ok(())
}

/// The parts of a report reconstructible from its CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub e_bar: Vec<f64>,
    pub gt_mass: Vec<f64>,
    pub t_bar: f64,
    pub e_total: f64,
    pub e_close: f64,
    pub n_images: usize,
}

pub fn read_report_csv(path: &Path) -> Result<ReportSummary, MetricsError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "bin_index,bin_lo_m,bin_hi_m,e_bar,gt_mass" {
        return Err(MetricsError::Parse(format!("unexpected header: {header}")));
    }
    let mut e_bar = Vec::new();
    let mut gt_mass = Vec::new();
    let mut summary: Option<(f64, f64, f64, usize)> = None;
    while let Some(line) = lines.next() {
        if line == "T_bar,E_bar,E_bar_prime,n_images" {
            let row = lines
                .next()
                .ok_or_else(|| MetricsError::Parse("missing summary row".into()))?;
            let cols: Vec<&str> = row.split(',').collect();
            if cols.len() != 4 {
                return Err(MetricsError::Parse("summary row needs 4 columns".into()));
            }
            let f = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| MetricsError::Parse(format!("bad number {s}")))
            };
            summary = Some((
                f(cols[0])?,
                f(cols[1])?,
                f(cols[2])?,
                cols[3]
                    .parse()
                    .map_err(|_| MetricsError::Parse("bad image count".into()))?,
            ));
            break;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(MetricsError::Parse(format!("bad bin row: {line}")));
        }
        let idx: usize = cols[0]
            .parse()
            .map_err(|_| MetricsError::Parse(format!("bad bin index {}", cols[0])))?;
        if idx != e_bar.len() {
            return Err(MetricsError::Parse(format!(
                "bin rows out of order at index {idx}"
            )));
        }
        let f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| MetricsError::Parse(format!("bad number {s}")))
        };
        e_bar.push(f(cols[3])?);
        gt_mass.push(f(cols[4])?);
    }
    let (t_bar, e_total, e_close, n_images) =
        summary.ok_or_else(|| MetricsError::Parse("no summary section".into()))?;
    if e_bar.is_empty() {
        return Err(MetricsError::Parse("no bin rows".into()));
    }
    Ok(ReportSummary {
        e_bar,
        gt_mass,
        t_bar,
        e_total,
        e_close,
        n_images,
    })
}

/// Linear-interpolation quantile (the common "type 7" rule) of already
/// sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Per-bin quartiles (q1, median, q3) of the signed per-image errors; the
/// raw material for error box plots.
pub fn per_bin_quartiles(per_image_e: &[Vec<f64>]) -> Result<Vec<[f64; 3]>, MetricsError> {
    if per_image_e.is_empty() {
        return Err(MetricsError::EmptyInput("no per-image errors".into()));
    }
    let n_bin = per_image_e[0].len();
    let mut out = Vec::with_capacity(n_bin);
    for d in 0..n_bin {
        let mut column: Vec<f64> = per_image_e.iter().map(|e| e[d]).collect();
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        out.push([
            quantile_sorted(&column, 0.25),
            quantile_sorted(&column, 0.5),
            quantile_sorted(&column, 0.75),
        ]);
    }
    Ok(out)
}

pub fn write_quartiles_csv(
    report: &MetricsReport,
    spec: &LabelSpec,
    path: &Path,
) -> Result<(), MetricsError> {
    let quartiles = per_bin_quartiles(&report.per_image_e)?;
    let mut out = String::from("bin_index,bin_lo_m,bin_hi_m,q1,median,q3\n");
    for (d, q) in quartiles.iter().enumerate() {
        let (lo, hi) = spec.bin_bounds(d);
        out.push_str(&format!(
            "{d},{lo},{hi},{},{},{}\n",
            fmt9(q[0]),
            fmt9(q[1]),
            fmt9(q[2])
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
