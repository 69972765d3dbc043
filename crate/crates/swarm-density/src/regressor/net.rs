//! Forward pass and analytic backpropagation.
//!
//! Feature maps are flat `Vec<f64>` in [channel][row][col] order. The
//! network is: per stage a 3x3 same-padding convolution, ReLU, and p x p max
//! pooling (stride p, remainder rows/cols dropped); then the tail (1x1
//! convolution or position-specific dense layer) with ReLU; then average
//! pooling over output-grid cell regions; then the final dense layer shared
//! across cells with identity activation.

use super::{ConvParams, LossWeights, NetError, RegressorParams, TailParams};
use crate::labeling::LabelGrid;

/// Converts an 8-bit RGB image (row-major, interleaved channels) into the
/// network's input layout: three [0,1]-scaled channel planes.
pub fn image_to_input(rgb: &[u8], width: u32, height: u32) -> Vec<f64> {
    let plane = (width * height) as usize;
    assert_eq!(rgb.len(), plane * 3, "RGB byte count must match dimensions");
    let mut out = vec![0.0; plane * 3];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    out
}

/// Local smoothness diagnostics of one forward pass, used by gradient
/// checks to reject instances where a finite-difference step would cross a
/// ReLU kink or flip a max-pool winner.
#[derive(Debug, Clone, Copy)]
pub struct KinkReport {
    /// Minimum |pre-activation| over every ReLU input.
    pub min_relu_gap: f64,
    /// Minimum (winner - runner-up) over max-pool windows with an active
    /// winner; all-zero windows cannot flip and are skipped.
    pub min_pool_gap: f64,
}

pub(crate) struct ForwardTrace {
    /// Post-ReLU, pre-pool activation of each stage.
    stage_act: Vec<Vec<f64>>,
    stage_act_dims: Vec<(usize, usize)>,
    /// Post-pool output of each stage.
    stage_out: Vec<Vec<f64>>,
    stage_out_dims: Vec<(usize, usize)>,
    /// Flat index into stage_act of each pooled element's winner.
    stage_argmax: Vec<Vec<usize>>,
    /// Post-ReLU tail output, [n_bin][mh][mw].
    tail_act: Vec<f64>,
    /// Per-cell averaged tail features, [cells][n_bin].
    cell_pooled: Vec<f64>,
    /// Final meta-vector, [cells * n_bin].
    pub(crate) output: Vec<f64>,
    min_relu_gap: f64,
    min_pool_gap: f64,
}

fn conv3x3(input: &[f64], dims: (usize, usize), p: &ConvParams, out: &mut [f64]) {
    let (w, h) = dims;
    let plane = w * h;
    debug_assert_eq!(input.len(), p.in_c * plane);
    debug_assert_eq!(out.len(), p.out_c * plane);
    for oc in 0..p.out_c {
        let out_plane = &mut out[oc * plane..(oc + 1) * plane];
        out_plane.fill(p.bias[oc]);
        for ic in 0..p.in_c {
            let in_plane = &input[ic * plane..(ic + 1) * plane];
            let wbase = (oc * p.in_c + ic) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy.max(0)) as usize;
                for kx in 0..3usize {
                    let wgt = p.weight[wbase + ky * 3 + kx];
                    let dx = kx as isize - 1;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)) as usize;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut out_plane[y * w + x0..y * w + x1];
                        let istart = (iy * w) as isize + x0 as isize + dx;
                        let irow = &in_plane[istart as usize..istart as usize + (x1 - x0)];
                        for (o, i) in orow.iter_mut().zip(irow) {
                            *o += wgt * i;
                        }
                    }
                }
            }
        }
    }
}

/// Scatters gradients back through the same shifted windows conv3x3 read
/// from: accumulates weight/bias gradients and, when `d_input` is given,
/// the gradient w.r.t. the layer input.
fn conv3x3_backward(
    input: &[f64],
    dims: (usize, usize),
    p: &ConvParams,
    d_out: &[f64],
    grad: &mut ConvParams,
    mut d_input: Option<&mut [f64]>,
) {
    let (w, h) = dims;
    let plane = w * h;
    for oc in 0..p.out_c {
        let dout_plane = &d_out[oc * plane..(oc + 1) * plane];
        grad.bias[oc] += dout_plane.iter().sum::<f64>();
        for ic in 0..p.in_c {
            let in_plane = &input[ic * plane..(ic + 1) * plane];
            let wbase = (oc * p.in_c + ic) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy.max(0)) as usize;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let drow = &dout_plane[y * w + x0..y * w + x1];
                        let istart = (iy * w) as isize + x0 as isize + dx;
                        let irow = &in_plane[istart as usize..istart as usize + (x1 - x0)];
                        for (d, i) in drow.iter().zip(irow) {
                            acc += d * i;
                        }
                    }
                    grad.weight[wbase + ky * 3 + kx] += acc;

                    if let Some(din) = d_input.as_deref_mut() {
                        let din_plane = &mut din[ic * plane..(ic + 1) * plane];
                        let wgt = p.weight[wbase + ky * 3 + kx];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let drow = &dout_plane[y * w + x0..y * w + x1];
                            let istart = (iy * w) as isize + x0 as isize + dx;
                            let dirow =
                                &mut din_plane[istart as usize..istart as usize + (x1 - x0)];
                            for (di, d) in dirow.iter_mut().zip(drow) {
                                *di += wgt * d;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn relu_in_place(values: &mut [f64], min_gap: &mut f64, track: bool) {
    if track {
        for v in values.iter() {
            let gap = v.abs();
            if gap < *min_gap {
                *min_gap = gap;
            }
        }
    }
    for v in values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn max_pool(
    input: &[f64],
    dims: (usize, usize),
    channels: usize,
    p: usize,
    out: &mut Vec<f64>,
    argmax: &mut Vec<usize>,
    min_gap: &mut f64,
    track: bool,
) -> (usize, usize) {
    let (w, h) = dims;
    let (ow, oh) = (w / p, h / p);
    let plane = w * h;
    out.clear();
    out.resize(channels * ow * oh, 0.0);
    argmax.clear();
    argmax.resize(channels * ow * oh, 0);
    for c in 0..channels {
        let in_plane = &input[c * plane..(c + 1) * plane];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for wy in 0..p {
                    for wx in 0..p {
                        let idx = (oy * p + wy) * w + ox * p + wx;
                        let v = in_plane[idx];
                        if v > best {
                            second = best;
                            best = v;
                            best_idx = idx;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                // Windows whose entries are all exactly zero (every unit
                // inactive) stay constant under a small parameter bump, as
                // each entry is pinned by its own ReLU margin; only windows
                // with an active winner can flip.
                if track && p > 1 && best > 0.0 {
                    let gap = best - second;
                    if gap < *min_gap {
                        *min_gap = gap;
                    }
                }
                let oidx = c * ow * oh + oy * ow + ox;
                out[oidx] = best;
                argmax[oidx] = c * plane + best_idx;
            }
        }
    }
    (ow, oh)
}

/// Extents of one output-grid cell region on the feature map: integer tile
/// sizes with the last cell per axis absorbing the remainder.
fn cell_region(
    map_dims: (usize, usize),
    grid: (usize, usize),
    cell: (usize, usize),
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let (mw, mh) = map_dims;
    let (gw, gh) = grid;
    let (cx, cy) = cell;
    let cw = mw / gw;
    let ch = mh / gh;
    let x1 = if cx == gw - 1 { mw } else { (cx + 1) * cw };
    let y1 = if cy == gh - 1 { mh } else { (cy + 1) * ch };
    (cx * cw..x1, cy * ch..y1)
}

pub(crate) fn forward_trace(
    params: &RegressorParams,
    image: &[f64],
    track_kinks: bool,
) -> Result<ForwardTrace, NetError> {
    let arch = &params.arch;
    let (iw, ih) = (arch.input_width as usize, arch.input_height as usize);
    if image.len() != 3 * iw * ih {
        return Err(NetError::ShapeMismatch(format!(
            "input length {} != 3x{iw}x{ih}",
            image.len()
        )));
    }

    let mut min_relu_gap = f64::INFINITY;
    let mut min_pool_gap = f64::INFINITY;

    let mut stage_act = Vec::with_capacity(params.stages.len());
    let mut stage_act_dims = Vec::with_capacity(params.stages.len());
    let mut stage_out = Vec::with_capacity(params.stages.len());
    let mut stage_out_dims = Vec::with_capacity(params.stages.len());
    let mut stage_argmax = Vec::with_capacity(params.stages.len());

    let mut current: &[f64] = image;
    let mut dims = (iw, ih);
    for (stage, spec) in params.stages.iter().zip(&arch.stages) {
        let mut act = vec![0.0; stage.out_c * dims.0 * dims.1];
        conv3x3(current, dims, stage, &mut act);
        relu_in_place(&mut act, &mut min_relu_gap, track_kinks);

        let (pooled, argmax, out_dims) = if spec.pool > 1 {
            let mut pooled = Vec::new();
            let mut argmax = Vec::new();
            let od = max_pool(
                &act,
                dims,
                stage.out_c,
                spec.pool,
                &mut pooled,
                &mut argmax,
                &mut min_pool_gap,
                track_kinks,
            );
            (pooled, argmax, od)
        } else {
            // Pool factor 1: identity, argmax maps each element to itself.
            (act.clone(), (0..act.len()).collect(), dims)
        };

        stage_act.push(act);
        stage_act_dims.push(dims);
        stage_out.push(pooled);
        stage_out_dims.push(out_dims);
        stage_argmax.push(argmax);
        dims = out_dims;
        current = stage_out.last().expect("just pushed");
    }

    let (mw, mh) = dims;
    let plane = mw * mh;
    let n_bin = arch.n_bin;

    // Tail: per-bin feature maps.
    let mut tail_act = vec![0.0; n_bin * plane];
    match &params.tail {
        TailParams::OneByOneConv(c) => {
            for o in 0..n_bin {
                let out_plane = &mut tail_act[o * plane..(o + 1) * plane];
                out_plane.fill(c.bias[o]);
                for ic in 0..c.in_c {
                    let wgt = c.weight[o * c.in_c + ic];
                    let in_plane = &current[ic * plane..(ic + 1) * plane];
                    for (ov, iv) in out_plane.iter_mut().zip(in_plane) {
                        *ov += wgt * iv;
                    }
                }
            }
        }
        TailParams::FullyConnected(d) => {
            debug_assert_eq!(d.in_dim, current.len());
            debug_assert_eq!(d.out_dim, tail_act.len());
            for (j, ov) in tail_act.iter_mut().enumerate() {
                let row = &d.weight[j * d.in_dim..(j + 1) * d.in_dim];
                let mut acc = d.bias[j];
                for (wv, iv) in row.iter().zip(current) {
                    acc += wv * iv;
                }
                *ov = acc;
            }
        }
    }
    relu_in_place(&mut tail_act, &mut min_relu_gap, track_kinks);

    // Average pooling over output-grid cell regions.
    let (gw, gh) = (arch.grid.w_out as usize, arch.grid.h_out as usize);
    let cells = gw * gh;
    let mut cell_pooled = vec![0.0; cells * n_bin];
    for cy in 0..gh {
        for cx in 0..gw {
            let (xr, yr) = cell_region((mw, mh), (gw, gh), (cx, cy));
            let area = (xr.len() * yr.len()) as f64;
            let cell = cy * gw + cx;
            for b in 0..n_bin {
                let plane_b = &tail_act[b * plane..(b + 1) * plane];
                let mut acc = 0.0;
                for y in yr.clone() {
                    for x in xr.clone() {
                        acc += plane_b[y * mw + x];
                    }
                }
                cell_pooled[cell * n_bin + b] = acc / area;
            }
        }
    }

    // Shared head: one dense n_bin -> n_bin map applied to every cell.
    let mut output = vec![0.0; cells * n_bin];
    for cell in 0..cells {
        let pooled = &cell_pooled[cell * n_bin..(cell + 1) * n_bin];
        let out = &mut output[cell * n_bin..(cell + 1) * n_bin];
        for o in 0..n_bin {
            let row = &params.head.weight[o * n_bin..(o + 1) * n_bin];
            let mut acc = params.head.bias[o];
            for (wv, pv) in row.iter().zip(pooled) {
                acc += wv * pv;
            }
            out[o] = acc;
        }
    }

    Ok(ForwardTrace {
        stage_act,
        stage_act_dims,
        stage_out,
        stage_out_dims,
        stage_argmax,
        tail_act,
        cell_pooled,
        output,
        min_relu_gap,
        min_pool_gap,
    })
}

/// Runs the network on a normalized image and returns the predicted density
/// grid. Outputs are raw (identity activation); clamp at reporting time.
pub fn forward(params: &RegressorParams, image: &[f64]) -> Result<LabelGrid, NetError> {
    let trace = forward_trace(params, image, false)?;
    if trace.output.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite {
            location: "forward output".into(),
        });
    }
    LabelGrid::from_meta_vector(&params.arch.grid, params.arch.n_bin, trace.output)
        .map_err(|e| NetError::ShapeMismatch(e.to_string()))
}

/// Forward pass diagnostics for finite-difference validity: how close the
/// instance sits to a ReLU kink or a max-pool tie.
pub fn forward_kink_report(params: &RegressorParams, image: &[f64]) -> Result<KinkReport, NetError> {
    let trace = forward_trace(params, image, true)?;
    Ok(KinkReport {
        min_relu_gap: trace.min_relu_gap,
        min_pool_gap: trace.min_pool_gap,
    })
}

/// Computes the training loss and the gradients of its square w.r.t. every
/// parameter. Returns (loss, gradients); the loss is the evaluation norm,
/// its square is what the gradients differentiate.
pub fn backward(
    params: &RegressorParams,
    image: &[f64],
    gt_meta: &[f64],
    weights: &LossWeights,
) -> Result<(f64, RegressorParams), NetError> {
    let trace = forward_trace(params, image, false)?;
    let n_bin = params.arch.n_bin;
    if gt_meta.len() != trace.output.len() {
        return Err(NetError::ShapeMismatch(format!(
            "ground truth length {} != output length {}",
            gt_meta.len(),
            trace.output.len()
        )));
    }
    if weights.n_bin() != n_bin {
        return Err(NetError::ShapeMismatch(format!(
            "loss weights have {} bins, architecture has {n_bin}",
            weights.n_bin()
        )));
    }

    let mut grads = params.zeros_like();

    // d(loss^2)/d(output): 2 w^2 (pred - gt), weights replicated per cell.
    let mut loss_sq = 0.0;
    let mut d_out = vec![0.0; trace.output.len()];
    for (j, (&p, &g)) in trace.output.iter().zip(gt_meta).enumerate() {
        let w = weights.values()[j % n_bin];
        let diff = (p - g) * w;
        loss_sq += diff * diff;
        d_out[j] = 2.0 * w * w * (p - g);
    }

    // Head backward (shared dense per cell).
    let cells = trace.output.len() / n_bin;
    let mut d_pooled = vec![0.0; trace.cell_pooled.len()];
    for cell in 0..cells {
        let pooled = &trace.cell_pooled[cell * n_bin..(cell + 1) * n_bin];
        let dout_cell = &d_out[cell * n_bin..(cell + 1) * n_bin];
        let dpool_cell = &mut d_pooled[cell * n_bin..(cell + 1) * n_bin];
        for o in 0..n_bin {
            let g = dout_cell[o];
            grads.head.bias[o] += g;
            let wrow = &params.head.weight[o * n_bin..(o + 1) * n_bin];
            let grow = &mut grads.head.weight[o * n_bin..(o + 1) * n_bin];
            for i in 0..n_bin {
                grow[i] += g * pooled[i];
                dpool_cell[i] += wrow[i] * g;
            }
        }
    }

    // Average-pool backward into the tail activation map.
    let (mw, mh) = *trace.stage_out_dims.last().expect("at least one stage");
    let plane = mw * mh;
    let (gw, gh) = (
        params.arch.grid.w_out as usize,
        params.arch.grid.h_out as usize,
    );
    let mut d_tail = vec![0.0; trace.tail_act.len()];
    for cy in 0..gh {
        for cx in 0..gw {
            let (xr, yr) = cell_region((mw, mh), (gw, gh), (cx, cy));
            let area = (xr.len() * yr.len()) as f64;
            let cell = cy * gw + cx;
            for b in 0..n_bin {
                let share = d_pooled[cell * n_bin + b] / area;
                let d_plane = &mut d_tail[b * plane..(b + 1) * plane];
                for y in yr.clone() {
                    for x in xr.clone() {
                        d_plane[y * mw + x] += share;
                    }
                }
            }
        }
    }

    // Tail ReLU mask.
    for (d, &a) in d_tail.iter_mut().zip(&trace.tail_act) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }

    // Tail backward into the last stage output.
    let last_out = trace.stage_out.last().expect("at least one stage");
    let mut d_stage = vec![0.0; last_out.len()];
    match (&params.tail, &mut grads.tail) {
        (TailParams::OneByOneConv(c), TailParams::OneByOneConv(gc)) => {
            for o in 0..n_bin {
                let d_plane = &d_tail[o * plane..(o + 1) * plane];
                gc.bias[o] += d_plane.iter().sum::<f64>();
                for ic in 0..c.in_c {
                    let in_plane = &last_out[ic * plane..(ic + 1) * plane];
                    let mut acc = 0.0;
                    for (d, i) in d_plane.iter().zip(in_plane) {
                        acc += d * i;
                    }
                    gc.weight[o * c.in_c + ic] += acc;

                    let wgt = c.weight[o * c.in_c + ic];
                    let din_plane = &mut d_stage[ic * plane..(ic + 1) * plane];
                    for (di, d) in din_plane.iter_mut().zip(d_plane) {
                        *di += wgt * d;
                    }
                }
            }
        }
        (TailParams::FullyConnected(d), TailParams::FullyConnected(gd)) => {
            for j in 0..d.out_dim {
                let g = d_tail[j];
                if g == 0.0 {
                    continue;
                }
                gd.bias[j] += g;
                let wrow = &d.weight[j * d.in_dim..(j + 1) * d.in_dim];
                let grow = &mut gd.weight[j * d.in_dim..(j + 1) * d.in_dim];
                for i in 0..d.in_dim {
                    grow[i] += g * last_out[i];
                    d_stage[i] += wrow[i] * g;
                }
            }
        }
        _ => unreachable!("gradient container mirrors parameter structure"),
    }

    // Stages in reverse: unpool, ReLU mask, conv backward.
    let mut d_current = d_stage;
    for si in (0..params.stages.len()).rev() {
        // Max-pool backward (identity when pool factor was 1: argmax holds
        // the identity index map in that case).
        let mut d_act = vec![0.0; trace.stage_act[si].len()];
        for (out_idx, &src_idx) in trace.stage_argmax[si].iter().enumerate() {
            d_act[src_idx] += d_current[out_idx];
        }

        // ReLU mask on the pre-pool activation.
        for (d, &a) in d_act.iter_mut().zip(&trace.stage_act[si]) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }

        let input: &[f64] = if si == 0 {
            image
        } else {
            &trace.stage_out[si - 1]
        };
        let dims = trace.stage_act_dims[si];
        if si == 0 {
            // The image gradient is never consumed.
            conv3x3_backward(input, dims, &params.stages[si], &d_act, &mut grads.stages[si], None);
            d_current = Vec::new();
        } else {
            let mut d_input = vec![0.0; input.len()];
            conv3x3_backward(
                input,
                dims,
                &params.stages[si],
                &d_act,
                &mut grads.stages[si],
                Some(&mut d_input),
            );
            d_current = d_input;
        }
    }
    let _ = d_current;

    if !loss_sq.is_finite() {
        return Err(NetError::NonFinite {
            location: "loss".into(),
        });
    }
    if !grads.is_finite() {
        return Err(NetError::NonFinite {
            location: "gradients".into(),
        });
    }
    Ok((loss_sq.sqrt(), grads))
}
