//! Density-over-distance histograms: per grid cell, bin `i` holds the
//! (possibly fractional) count of UAVs at camera distance in
//! [i*delta_d, (i+1)*delta_d), with everything beyond the last bin edge
//! absorbed by the last bin.
//!
//! Raw histograms are integer counts. Partial smoothing spreads each count
//! originating in bins >= k with a discrete Gaussian while counts in the
//! closest k bins stay exact; full smoothing spreads everything. Smoothing
//! never changes a cell's total mass.

use crate::geometry::{grid_cell_of, project_point, CameraIntrinsics, GridSpec, UavPose};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("invalid label spec: {0}")]
    InvalidSpec(String),
    #[error("meta-vector length {got} does not match {cells} cells x {n_bin} bins")]
    MetaVectorLength {
        got: usize,
        cells: usize,
        n_bin: usize,
    },
}

/// Distance discretization and smoothing parameters shared by every
/// histogram in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    /// Bin width in meters.
    pub delta_d: f64,
    /// Number of distance bins.
    pub n_bin: usize,
    /// Gaussian smoothing standard deviation, in bins.
    pub sigma: f64,
    /// Number of closest bins kept exact under partial smoothing.
    pub k: usize,
}

impl LabelSpec {
    pub fn new(delta_d: f64, n_bin: usize, sigma: f64, k: usize) -> Result<Self, LabelError> {
        if !(delta_d > 0.0) || !delta_d.is_finite() {
            return Err(LabelError::InvalidSpec(format!(
                "bin width must be positive, got {delta_d}"
            )));
        }
        if n_bin < 1 {
            return Err(LabelError::InvalidSpec("need at least one bin".into()));
        }
        if k > n_bin {
            return Err(LabelError::InvalidSpec(format!(
                "identity region k={k} exceeds n_bin={n_bin}"
            )));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(LabelError::InvalidSpec(format!(
                "sigma must be non-negative, got {sigma}"
            )));
        }
        Ok(Self {
            delta_d,
            n_bin,
            sigma,
            k,
        })
    }

    /// Left edge of the last bin; distances beyond it are clamped into the
    /// last bin.
    pub fn d_max(&self) -> f64 {
        self.delta_d * (self.n_bin - 1) as f64
    }

    /// Bin index for a camera distance.
    pub fn bin_of(&self, distance: f64) -> usize {
        ((distance / self.delta_d) as usize).min(self.n_bin - 1)
    }

    /// Inclusive-exclusive meter range covered by a bin. The last bin's
    /// upper edge is unbounded in meaning but reported as lo + delta_d.
    pub fn bin_bounds(&self, bin: usize) -> (f64, f64) {
        let lo = bin as f64 * self.delta_d;
        (lo, lo + self.delta_d)
    }
}

impl Default for LabelSpec {
    fn default() -> Self {
        Self {
            delta_d: 1.0,
            n_bin: 50,
            sigma: 1.0,
            k: 5,
        }
    }
}

/// Which label variant to build or train against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Raw,
    Partial,
    Full,
}

impl LabelMode {
    pub fn name(&self) -> &'static str {
        match self {
            LabelMode::Raw => "raw",
            LabelMode::Partial => "partial",
            LabelMode::Full => "full",
        }
    }
}

/// A w_out x h_out grid of density histograms stored as one flat vector:
/// cells in row-major order, bins contiguous per cell. The flat storage is
/// exactly the meta-vector used by the training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGrid {
    w_out: u32,
    h_out: u32,
    n_bin: usize,
    values: Vec<f64>,
}

impl LabelGrid {
    pub fn zeros(grid: &GridSpec, n_bin: usize) -> Self {
        Self {
            w_out: grid.w_out,
            h_out: grid.h_out,
            n_bin,
            values: vec![0.0; grid.cells() * n_bin],
        }
    }

    pub fn w_out(&self) -> u32 {
        self.w_out
    }

    pub fn h_out(&self) -> u32 {
        self.h_out
    }

    pub fn n_bin(&self) -> usize {
        self.n_bin
    }

    pub fn cells(&self) -> usize {
        (self.w_out * self.h_out) as usize
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            w_out: self.w_out,
            h_out: self.h_out,
        }
    }

    fn cell_offset(&self, col: u32, row: u32) -> usize {
        debug_assert!(col < self.w_out && row < self.h_out);
        (row * self.w_out + col) as usize * self.n_bin
    }

    /// The density histogram of one cell.
    pub fn histogram(&self, col: u32, row: u32) -> &[f64] {
        let off = self.cell_offset(col, row);
        &self.values[off..off + self.n_bin]
    }

    pub fn histogram_mut(&mut self, col: u32, row: u32) -> &mut [f64] {
        let off = self.cell_offset(col, row);
        &mut self.values[off..off + self.n_bin]
    }

    /// The stacked meta-vector: every cell's histogram concatenated in
    /// row-major cell order.
    pub fn meta_vector(&self) -> &[f64] {
        &self.values
    }

    /// Rebuilds a grid from a stacked meta-vector.
    pub fn from_meta_vector(
        grid: &GridSpec,
        n_bin: usize,
        values: Vec<f64>,
    ) -> Result<Self, LabelError> {
        if values.len() != grid.cells() * n_bin {
            return Err(LabelError::MetaVectorLength {
                got: values.len(),
                cells: grid.cells(),
                n_bin,
            });
        }
        Ok(Self {
            w_out: grid.w_out,
            h_out: grid.h_out,
            n_bin,
            values,
        })
    }

    /// Histogram summed over all cells: the whole-image density.
    pub fn cell_sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_bin];
        for cell in self.values.chunks_exact(self.n_bin) {
            for (acc, v) in out.iter_mut().zip(cell) {
                *acc += v;
            }
        }
        out
    }

    /// Total mass across all cells and bins.
    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Per-cell total masses, row-major.
    pub fn cell_masses(&self) -> Vec<f64> {
        self.values
            .chunks_exact(self.n_bin)
            .map(|c| c.iter().sum())
            .collect()
    }

    /// Clamps negative entries to zero (inference reporting of raw network
    /// outputs; ground-truth labels are never negative).
    pub fn clamp_non_negative(&mut self) {
        for v in &mut self.values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Counts UAVs into per-cell distance histograms. A UAV contributes one
/// count to the cell its center projects into, at the bin of its Euclidean
/// distance; UAVs behind the camera or projecting outside the image are
/// excluded.
pub fn raw_histogram(
    poses: &[UavPose],
    cam: &CameraIntrinsics,
    grid: &GridSpec,
    spec: &LabelSpec,
) -> LabelGrid {
    let mut out = LabelGrid::zeros(grid, spec.n_bin);
    for pose in poses {
        let Some((u, v, _)) = project_point(cam, pose.position_vec()) else {
            continue;
        };
        let Some((col, row)) = grid_cell_of(cam, grid, u, v) else {
            continue;
        };
        let bin = spec.bin_of(pose.distance());
        out.histogram_mut(col, row)[bin] += 1.0;
    }
    out
}

/// Discrete Gaussian kernel over offsets -radius..=radius, normalized to
/// unit sum. Sigma zero yields the identity kernel.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= sum;
    }
    kernel
}

/// Applies the selected smoothing to every cell of a raw histogram grid.
///
/// Each source bin's count is treated independently: under `Partial`, counts
/// in bins below k are copied unchanged, while counts in bins >= k are spread
/// with the Gaussian kernel (they may spill into bins below k). Kernel mass
/// falling outside the histogram is redistributed by renormalizing over the
/// in-range window, so every cell's total is conserved.
pub fn smooth_labels(raw: &LabelGrid, spec: &LabelSpec, mode: LabelMode) -> LabelGrid {
    if mode == LabelMode::Raw {
        return raw.clone();
    }
    let kernel = gaussian_kernel(spec.sigma);
    let radius = (kernel.len() / 2) as i64;
    let n = spec.n_bin as i64;
    let identity_below = match mode {
        LabelMode::Partial => spec.k as i64,
        _ => 0,
    };

    let grid = raw.grid_spec();
    let mut out = LabelGrid::zeros(&grid, spec.n_bin);
    for row in 0..grid.h_out {
        for col in 0..grid.w_out {
            let src = raw.histogram(col, row);
            let dst = out.histogram_mut(col, row);
            for (s, &mass) in src.iter().enumerate() {
                debug_assert!(mass >= 0.0, "raw histogram entries must be non-negative");
                if mass == 0.0 {
                    continue;
                }
                let s = s as i64;
                if s < identity_below {
                    dst[s as usize] += mass;
                    continue;
                }
                let lo = (s - radius).max(0);
                let hi = (s + radius).min(n - 1);
                let window_sum: f64 = (lo..=hi)
                    .map(|j| kernel[(j - s + radius) as usize])
                    .sum();
                for j in lo..=hi {
                    dst[j as usize] += mass * kernel[(j - s + radius) as usize] / window_sum;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(300.0, 300.0, 150.0, 150.0, 300, 300).unwrap()
    }

    fn spec() -> LabelSpec {
        LabelSpec::default()
    }

    fn grid1() -> GridSpec {
        GridSpec::new(1, 1).unwrap()
    }

    fn on_axis(d: f64) -> UavPose {
        UavPose::new([0.0, 0.0, d], [0.0, 0.0, 0.0])
    }

    #[test]
    fn empty_scene_gives_zero_grid() {
        let grid = raw_histogram(&[], &cam(), &GridSpec::new(3, 3).unwrap(), &spec());
        assert_eq!(grid.total_mass(), 0.0);
        assert_eq!(grid.meta_vector().len(), 9 * 50);
    }

    #[test]
    fn sub_meter_uav_lands_in_first_bin() {
        let grid = raw_histogram(&[on_axis(0.5)], &cam(), &GridSpec::new(3, 3).unwrap(), &spec());
        assert_eq!(grid.histogram(1, 1)[0], 1.0);
        assert_eq!(grid.total_mass(), 1.0);
    }

    #[test]
    fn bins_by_norm_and_clamps_beyond_last_edge() {
        let poses = [on_axis(1.2), on_axis(1.9), on_axis(55.0)];
        let grid = raw_histogram(&poses, &cam(), &grid1(), &spec());
        let hist = grid.histogram(0, 0);

        // Independent direct-count oracle: explicit comparisons per bin.
        let mut oracle = vec![0.0; 50];
        for d in [1.2, 1.9, 55.0] {
            let mut bin = 49;
            for i in 0..50 {
                if d >= i as f64 && d < (i + 1) as f64 {
                    bin = i;
                    break;
                }
            }
            oracle[bin] += 1.0;
        }
        assert_eq!(hist, &oracle[..]);
        assert_eq!(hist[1], 2.0);
        assert_eq!(hist[49], 1.0);
    }

    #[test]
    fn bin_edges_belong_to_upper_bin() {
        let s = spec();
        assert_eq!(s.bin_of(0.0), 0);
        assert_eq!(s.bin_of(1.0), 1);
        assert_eq!(s.bin_of(48.999999), 48);
        assert_eq!(s.bin_of(49.0), 49);
        assert_eq!(s.bin_of(1e9), 49);
    }

    #[test]
    fn excludes_uavs_behind_camera_and_outside_image() {
        let behind = on_axis(-3.0);
        // Projects to u = 300*3/3 + 150 = 450, outside a 300 px image.
        let outside = UavPose::new([3.0, 0.0, 3.0], [0.0, 0.0, 0.0]);
        let grid = raw_histogram(&[behind, outside], &cam(), &grid1(), &spec());
        assert_eq!(grid.total_mass(), 0.0);
    }

    #[test]
    fn norm_not_depth_drives_binning() {
        // Depth 3 m but norm 5 m: a 3-4-5 triangle placed to stay in view.
        let pose = UavPose::new([0.8, 0.0, 3.0], [0.0, 0.0, 0.0]);
        let mut far = pose;
        far.position = [4.0, 0.0, 3.0];
        assert_eq!(spec().bin_of(far.distance()), 5);
        let grid = raw_histogram(&[pose], &cam(), &grid1(), &spec());
        assert_eq!(grid.histogram(0, 0)[3], 1.0);
    }

    #[test]
    fn partial_with_k_equal_n_bin_is_identity() {
        let mut raw = LabelGrid::zeros(&grid1(), 50);
        for (i, v) in raw.histogram_mut(0, 0).iter_mut().enumerate() {
            *v = (i % 3) as f64;
        }
        let s = LabelSpec::new(1.0, 50, 1.0, 50).unwrap();
        let smoothed = smooth_labels(&raw, &s, LabelMode::Partial);
        assert_eq!(smoothed, raw);
    }

    #[test]
    fn count_inside_identity_region_stays_exact() {
        let mut raw = LabelGrid::zeros(&grid1(), 50);
        raw.histogram_mut(0, 0)[0] = 1.0;
        let smoothed = smooth_labels(&raw, &spec(), LabelMode::Partial);
        assert_eq!(smoothed, raw);
    }

    #[test]
    fn single_count_smooths_to_frozen_gaussian_bump() {
        let mut raw = LabelGrid::zeros(&grid1(), 50);
        raw.histogram_mut(0, 0)[10] = 1.0;
        let s = LabelSpec::new(1.0, 50, 1.0, 3).unwrap();
        let smoothed = smooth_labels(&raw, &s, LabelMode::Partial);
        let hist = smoothed.histogram(0, 0);

        // Explicit discrete-convolution oracle, unit-sum kernel over +-4.
        let weights: Vec<f64> = (-4i64..=4).map(|t| (-(t * t) as f64 / 2.0).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut oracle = vec![0.0; 50];
        for (i, w) in weights.iter().enumerate() {
            oracle[10 - 4 + i] = w / total;
        }
        for (got, want) in hist.iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-15);
        }

        // Frozen kernel values for sigma = 1.
        assert!((hist[10] - 0.39894346935609776).abs() < 1e-12);
        assert!((hist[9] - 0.24197144565660073).abs() < 1e-12);
        assert!((hist[11] - 0.24197144565660073).abs() < 1e-12);
        assert!((hist[6] - 0.00013383062461474175).abs() < 1e-12);

        // Unimodal with the maximum at the source bin.
        let argmax = hist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 10);
        for i in 7..10 {
            assert!(hist[i] < hist[i + 1]);
        }
        for i in 10..14 {
            assert!(hist[i] > hist[i + 1]);
        }
        let sum: f64 = hist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_truncation_conserves_mass() {
        let mut raw = LabelGrid::zeros(&grid1(), 50);
        raw.histogram_mut(0, 0)[0] = 2.0;
        raw.histogram_mut(0, 0)[49] = 3.0;
        let smoothed = smooth_labels(&raw, &spec(), LabelMode::Full);
        assert!((smoothed.total_mass() - 5.0).abs() < 1e-12);
        assert!(smoothed.histogram(0, 0).iter().all(|&v| v >= 0.0));
        // Truncation piles mass toward the boundary; the source bins still
        // dominate their neighborhoods.
        assert!(smoothed.histogram(0, 0)[0] > smoothed.histogram(0, 0)[1]);
        assert!(smoothed.histogram(0, 0)[49] > smoothed.histogram(0, 0)[48]);
    }

    #[test]
    fn smoothed_mass_may_spill_below_k() {
        let mut raw = LabelGrid::zeros(&grid1(), 50);
        raw.histogram_mut(0, 0)[5] = 1.0;
        let smoothed = smooth_labels(&raw, &spec(), LabelMode::Partial);
        let below_k: f64 = smoothed.histogram(0, 0)[..5].iter().sum();
        assert!(below_k > 0.0);
        assert!((smoothed.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigma_zero_smoothing_degenerates_to_identity() {
        let mut raw = LabelGrid::zeros(&grid1(), 50);
        raw.histogram_mut(0, 0)[20] = 4.0;
        let s = LabelSpec::new(1.0, 50, 0.0, 5).unwrap();
        assert_eq!(smooth_labels(&raw, &s, LabelMode::Full), raw);
        assert_eq!(smooth_labels(&raw, &s, LabelMode::Partial), raw);
    }

    #[test]
    fn meta_vector_stacks_cells_row_major() {
        let grid = GridSpec::new(3, 3).unwrap();
        let mut labels = LabelGrid::zeros(&grid, 50);
        labels.histogram_mut(2, 0)[7] = 1.0;
        labels.histogram_mut(0, 1)[3] = 2.0;
        let stacked = labels.meta_vector();
        assert_eq!(stacked.len(), 450);
        assert_eq!(stacked[2 * 50 + 7], 1.0);
        assert_eq!(stacked[3 * 50 + 3], 2.0);

        let rebuilt = LabelGrid::from_meta_vector(&grid, 50, stacked.to_vec()).unwrap();
        assert_eq!(rebuilt, labels);
    }

    #[test]
    fn single_cell_meta_vector_is_the_histogram() {
        let mut labels = LabelGrid::zeros(&grid1(), 50);
        labels.histogram_mut(0, 0)[4] = 2.5;
        assert_eq!(labels.meta_vector(), labels.histogram(0, 0));
    }

    #[test]
    fn meta_vector_length_mismatch_is_rejected() {
        let grid = GridSpec::new(2, 2).unwrap();
        assert!(LabelGrid::from_meta_vector(&grid, 50, vec![0.0; 150]).is_err());
    }

    proptest! {
        /// Smoothing conserves each cell's mass in every mode.
        #[test]
        fn smoothing_conserves_cell_mass(
            masses in proptest::collection::vec(0.0f64..5.0, 50),
            sigma in 0.0f64..3.0,
            k in 0usize..50,
        ) {
            let grid = grid1();
            let mut raw = LabelGrid::zeros(&grid, 50);
            raw.histogram_mut(0, 0).copy_from_slice(&masses);
            let s = LabelSpec::new(1.0, 50, sigma, k).unwrap();
            let total: f64 = masses.iter().sum();
            for mode in [LabelMode::Raw, LabelMode::Partial, LabelMode::Full] {
                let out = smooth_labels(&raw, &s, mode);
                prop_assert!((out.total_mass() - total).abs() < 1e-9);
                prop_assert!(out.histogram(0, 0).iter().all(|&v| v >= 0.0));
            }
        }

        /// Smoothing is additive over histograms supported on bins >= k.
        #[test]
        fn smoothing_is_linear_above_k(
            a in proptest::collection::vec(0.0f64..3.0, 45),
            b in proptest::collection::vec(0.0f64..3.0, 45),
        ) {
            let s = spec();
            let grid = grid1();
            let fill = |tail: &[f64]| {
                let mut g = LabelGrid::zeros(&grid, 50);
                g.histogram_mut(0, 0)[5..].copy_from_slice(tail);
                g
            };
            let mut sum_tail = vec![0.0; 45];
            for (o, (x, y)) in sum_tail.iter_mut().zip(a.iter().zip(&b)) {
                *o = x + y;
            }
            let sa = smooth_labels(&fill(&a), &s, LabelMode::Partial);
            let sb = smooth_labels(&fill(&b), &s, LabelMode::Partial);
            let sab = smooth_labels(&fill(&sum_tail), &s, LabelMode::Partial);
            for i in 0..50 {
                let lhs = sa.histogram(0, 0)[i] + sb.histogram(0, 0)[i];
                prop_assert!((lhs - sab.histogram(0, 0)[i]).abs() < 1e-9);
            }
        }

        /// A unit mass away from the boundaries smooths to a unimodal bump
        /// with its argmax at the source bin.
        #[test]
        fn unit_mass_smooths_unimodally(source in 9usize..41, sigma in 0.3f64..2.0) {
            let s = LabelSpec::new(1.0, 50, sigma, 5).unwrap();
            let grid = grid1();
            let mut raw = LabelGrid::zeros(&grid, 50);
            raw.histogram_mut(0, 0)[source] = 1.0;
            let out = smooth_labels(&raw, &s, LabelMode::Full);
            let hist = out.histogram(0, 0);
            for i in 0..(50 - 1) {
                if i < source {
                    prop_assert!(hist[i] <= hist[i + 1]);
                } else {
                    prop_assert!(hist[i] >= hist[i + 1]);
                }
            }
            prop_assert!(hist[source] > hist[source.wrapping_sub(1)]);
        }
    }
}
