//! The density-histogram regressor: a small VGG-like convolutional feature
//! extractor, a per-bin weighting layer (1x1 convolution, or a fully
//! connected stand-in for ablation), per-cell average pooling down to the
//! output grid, and a final dense layer shared across cells.
//!
//! All computation is f64 and hand-written: the forward pass, analytic
//! backpropagation of the squared training loss, ADAM, and the training
//! loop. Everything is deterministic under a fixed seed.

mod adam;
mod checkpoint;
mod net;
mod train;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, write_history_csv, Checkpoint};
pub use net::{backward, forward, forward_kink_report, image_to_input, KinkReport};
pub(crate) use net::forward_trace;
pub use train::{
    evaluate_loss, lr_schedule_update, train, EpochRecord, TrainConfig, TrainOutcome,
    TrainingExample,
};

use crate::geometry::GridSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss weights must be positive, got {0} at bin {1}")]
    NonPositiveWeight(f64, usize),
    #[error("non-finite value detected in {location}")]
    NonFinite { location: String },
    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One feature-extractor stage: a 3x3 same-padding convolution with ReLU,
/// followed by max pooling with the given factor (1 = no pooling).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub filters: usize,
    pub pool: usize,
}

/// The layer that turns extractor features into per-bin feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailKind {
    /// A 1x1 convolution mapping C channels to n_bin channels at every
    /// feature-map position (weights shared across positions).
    OneByOneConv,
    /// A dense layer from the flattened feature map to a per-position
    /// n_bin map (position-specific weights); the ablation variant.
    FullyConnected,
}

impl TailKind {
    pub fn name(&self) -> &'static str {
        match self {
            TailKind::OneByOneConv => "1x1",
            TailKind::FullyConnected => "fc",
        }
    }
}

/// Full architecture description. The output head (average pooling over
/// grid cells + a dense n_bin -> n_bin layer shared across cells) is implied
/// and has no switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_width: u32,
    pub input_height: u32,
    pub stages: Vec<ConvStage>,
    pub n_bin: usize,
    pub grid: GridSpec,
    pub tail: TailKind,
}

impl ArchSpec {
    /// Feature-map size after all extractor stages.
    pub fn feature_map_dims(&self) -> (usize, usize) {
        let mut w = self.input_width as usize;
        let mut h = self.input_height as usize;
        for stage in &self.stages {
            w /= stage.pool;
            h /= stage.pool;
        }
        (w, h)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_width == 0 || self.input_height == 0 {
            return Err(NetError::InvalidArch("zero input size".into()));
        }
        if self.stages.is_empty() {
            return Err(NetError::InvalidArch("need at least one conv stage".into()));
        }
        if self.n_bin == 0 {
            return Err(NetError::InvalidArch("need at least one bin".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.filters == 0 || stage.pool == 0 {
                return Err(NetError::InvalidArch(format!(
                    "stage {i} has zero filters or pool factor"
                )));
            }
        }
        let mut w = self.input_width as usize;
        let mut h = self.input_height as usize;
        for (i, stage) in self.stages.iter().enumerate() {
            w /= stage.pool;
            h /= stage.pool;
            if w == 0 || h == 0 {
                return Err(NetError::InvalidArch(format!(
                    "feature map vanishes after stage {i}"
                )));
            }
        }
        if w < self.grid.w_out as usize || h < self.grid.h_out as usize {
            return Err(NetError::InvalidArch(format!(
                "feature map {w}x{h} is smaller than the {}x{} output grid",
                self.grid.w_out, self.grid.h_out
            )));
        }
        Ok(())
    }

    /// Channel count entering the tail layer.
    pub fn extractor_channels(&self) -> usize {
        self.stages.last().map(|s| s.filters).unwrap_or(3)
    }

    /// Total learnable parameter count.
    pub fn param_count(&self) -> usize {
        let (mw, mh) = self.feature_map_dims();
        let mut count = 0;
        let mut in_c = 3;
        for stage in &self.stages {
            count += stage.filters * in_c * 9 + stage.filters;
            in_c = stage.filters;
        }
        count += match self.tail {
            TailKind::OneByOneConv => self.n_bin * in_c + self.n_bin,
            TailKind::FullyConnected => {
                let flat = in_c * mw * mh;
                let out = self.n_bin * mw * mh;
                out * flat + out
            }
        };
        count += self.n_bin * self.n_bin + self.n_bin;
        count
    }

    /// Desk-scale default: 64x64 input, four small conv stages, a 1x1 tail
    /// and a single-cell grid.
    pub fn desk_default(n_bin: usize, grid: GridSpec) -> Self {
        Self {
            input_width: 64,
            input_height: 64,
            stages: vec![
                ConvStage { filters: 8, pool: 2 },
                ConvStage { filters: 16, pool: 2 },
                ConvStage { filters: 32, pool: 2 },
                ConvStage { filters: 32, pool: 2 },
            ],
            n_bin,
            grid,
            tail: TailKind::OneByOneConv,
        }
    }
}

/// Weights and bias of one convolution layer. Weight layout is
/// [out_c][in_c][ky][kx] for 3x3 stages and [out_c][in_c] for the 1x1 tail.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Weights and bias of a dense layer, weight layout [out][in].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TailParams {
    OneByOneConv(ConvParams),
    FullyConnected(DenseParams),
}

/// All learnable tensors of one regressor instance. The same container is
/// reused for gradients, which mirror the parameter shapes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub arch: ArchSpec,
    pub stages: Vec<ConvParams>,
    pub tail: TailParams,
    /// Final dense layer applied to every pooled cell vector; shared across
    /// cells, so the grid size does not change its shape.
    pub head: DenseParams,
}

impl RegressorParams {
    /// He-style fan-in initialization with a seeded RNG; biases start at 0.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self, NetError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = |fan_in: usize, n: usize| -> Vec<f64> {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is finite and positive");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };

        let mut stages = Vec::with_capacity(arch.stages.len());
        let mut in_c = 3;
        for stage in &arch.stages {
            let fan_in = in_c * 9;
            stages.push(ConvParams {
                in_c,
                out_c: stage.filters,
                kernel: 3,
                weight: sample(fan_in, stage.filters * in_c * 9),
                bias: vec![0.0; stage.filters],
            });
            in_c = stage.filters;
        }

        let (mw, mh) = arch.feature_map_dims();
        let tail = match arch.tail {
            TailKind::OneByOneConv => TailParams::OneByOneConv(ConvParams {
                in_c,
                out_c: arch.n_bin,
                kernel: 1,
                weight: sample(in_c, arch.n_bin * in_c),
                bias: vec![0.0; arch.n_bin],
            }),
            TailKind::FullyConnected => {
                let in_dim = in_c * mw * mh;
                let out_dim = arch.n_bin * mw * mh;
                TailParams::FullyConnected(DenseParams {
                    in_dim,
                    out_dim,
                    weight: sample(in_dim, out_dim * in_dim),
                    bias: vec![0.0; out_dim],
                })
            }
        };

        let head = DenseParams {
            in_dim: arch.n_bin,
            out_dim: arch.n_bin,
            weight: sample(arch.n_bin, arch.n_bin * arch.n_bin),
            bias: vec![0.0; arch.n_bin],
        };

        Ok(Self {
            arch: arch.clone(),
            stages,
            tail,
            head,
        })
    }

    /// Same shapes, all values zero; the gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for slice in out.tensors_mut() {
            for v in slice.1 {
                *v = 0.0;
            }
        }
        out
    }

    /// Every tensor in a fixed order as (name, data). The order defines the
    /// flat parameter vector used by ADAM, finite differences, and the
    /// checkpoint format.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.weight"), &s.weight));
            out.push((format!("stage{i}.bias"), &s.bias));
        }
        match &self.tail {
            TailParams::OneByOneConv(c) => {
                out.push(("tail.weight".into(), &c.weight));
                out.push(("tail.bias".into(), &c.bias));
            }
            TailParams::FullyConnected(d) => {
                out.push(("tail.weight".into(), &d.weight));
                out.push(("tail.bias".into(), &d.bias));
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{i}.weight"), s.weight.as_mut_slice()));
            out.push((format!("stage{i}.bias"), s.bias.as_mut_slice()));
        }
        match &mut self.tail {
            TailParams::OneByOneConv(c) => {
                out.push(("tail.weight".into(), c.weight.as_mut_slice()));
                out.push(("tail.bias".into(), c.bias.as_mut_slice()));
            }
            TailParams::FullyConnected(d) => {
                out.push(("tail.weight".into(), d.weight.as_mut_slice()));
                out.push(("tail.bias".into(), d.bias.as_mut_slice()));
            }
        }
        out.push(("head.weight".into(), self.head.weight.as_mut_slice()));
        out.push(("head.bias".into(), self.head.bias.as_mut_slice()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Concatenation of all tensors in the fixed order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), NetError> {
        if flat.len() != self.param_count() {
            return Err(NetError::ShapeMismatch(format!(
                "flat vector length {} != parameter count {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// In-place scale, used to turn accumulated batch gradients into means.
    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            for v in t {
                *v *= factor;
            }
        }
    }

    /// In-place element-wise add of another parameter set (gradient
    /// accumulation across a batch).
    pub fn add_assign(&mut self, other: &Self) {
        let other_tensors = other.tensors();
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other_tensors) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Per-bin loss weights, replicated across cells when applied to
/// meta-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    values: Vec<f64>,
}

impl LossWeights {
    pub fn new(values: Vec<f64>) -> Result<Self, NetError> {
        for (i, &w) in values.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(NetError::NonPositiveWeight(w, i));
            }
        }
        Ok(Self { values })
    }

    /// Default weighting emphasizing close bins: w[d] = 1 + beta *
    /// max(0, 1 - d/d_near), so bin 0 weighs 1 + beta and the emphasis
    /// fades linearly to 1 at d_near.
    pub fn near_emphasis(n_bin: usize, beta: f64, d_near: f64) -> Self {
        let values = (0..n_bin)
            .map(|d| 1.0 + beta * (1.0 - d as f64 / d_near).max(0.0))
            .collect();
        Self { values }
    }

    pub fn uniform(n_bin: usize) -> Self {
        Self {
            values: vec![1.0; n_bin],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_bin(&self) -> usize {
        self.values.len()
    }
}

/// The evaluation loss: Euclidean norm of the per-bin-weighted difference
/// between stacked meta-vectors. Training optimizes its square, which has
/// the same minimizers and a smooth gradient.
pub fn loss(pred: &[f64], gt: &[f64], weights: &LossWeights) -> Result<f64, NetError> {
    Ok(loss_squared(pred, gt, weights)?.sqrt())
}

pub fn loss_squared(pred: &[f64], gt: &[f64], weights: &LossWeights) -> Result<f64, NetError> {
    let n_bin = weights.n_bin();
    if pred.len() != gt.len() || pred.len() % n_bin != 0 {
        return Err(NetError::ShapeMismatch(format!(
            "loss over pred len {} vs gt len {} with {} bins",
            pred.len(),
            gt.len(),
            n_bin
        )));
    }
    let mut sum = 0.0;
    for (cell_p, cell_g) in pred.chunks_exact(n_bin).zip(gt.chunks_exact(n_bin)) {
        for ((p, g), w) in cell_p.iter().zip(cell_g).zip(weights.values()) {
            let d = (p - g) * w;
            sum += d * d;
        }
    }
    Ok(sum)
}
