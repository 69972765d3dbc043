//! Run configuration: a TOML file of key = value sections, flag overrides,
//! and resolution into the domain types used by the commands.
//!
//! Every command serializes the fully resolved configuration into its
//! output directory, so any artifact can be traced back to the exact
//! settings that produced it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use swarm_density::geometry::{CameraIntrinsics, GridSpec};
use swarm_density::labeling::{LabelMode, LabelSpec};
use swarm_density::regressor::{ArchSpec, ConvStage, TailKind, TrainConfig};
use swarm_density::scenegen::{CropConfig, GenConfig, PipelineConfig, RenderStyle};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; scene sampling, weight init, and shuffling derive from
    /// it. The `gen.seed` field is overwritten with this value on resolve.
    pub seed: u64,
    pub camera: CameraSection,
    pub labels: LabelSection,
    pub grid: GridSection,
    pub gen: GenConfig,
    pub pipeline: PipelineSection,
    pub arch: ArchSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub metrics: MetricsSection,
    pub style: RenderStyle,
    pub bias: BiasSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            camera: CameraSection::default(),
            labels: LabelSection::default(),
            grid: GridSection::default(),
            gen: GenConfig::default(),
            pipeline: PipelineSection::default(),
            arch: ArchSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            metrics: MetricsSection::default(),
            style: RenderStyle::default(),
            bias: BiasSection::default(),
        }
    }
}

/// Full-frame render camera; crops inherit shifted principal points.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            fx: 64.0,
            fy: 64.0,
            cx: 64.0,
            cy: 64.0,
            width: 128,
            height: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    pub delta_d: f64,
    pub n_bin: usize,
    pub sigma: f64,
    /// First bin index that receives smoothing under the partial mode.
    pub k_smooth_start: usize,
    pub mode: LabelMode,
}

impl Default for LabelSection {
    fn default() -> Self {
        Self {
            delta_d: 1.0,
            n_bin: 50,
            sigma: 1.0,
            k_smooth_start: 5,
            mode: LabelMode::Partial,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub w_out: u32,
    pub h_out: u32,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { w_out: 1, h_out: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub n: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub crop_width: u32,
    pub crop_height: u32,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            n: 1500,
            n_val: 200,
            n_test: 100,
            crop_width: 64,
            crop_height: 64,
        }
    }
}

/// Conv stages as (filters, pool) pairs plus the tail choice.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub stages: Vec<(usize, usize)>,
    pub tail: TailOpt,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            stages: vec![(8, 2), (16, 2), (32, 2), (32, 2)],
            tail: TailOpt::OneByOne,
        }
    }
}

/// Serializable tail switch, also usable as a flag value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum TailOpt {
    #[serde(rename = "1x1")]
    #[value(name = "1x1")]
    OneByOne,
    #[serde(rename = "fc")]
    #[value(name = "fc")]
    Fc,
}

impl From<TailOpt> for TailKind {
    fn from(t: TailOpt) -> Self {
        match t {
            TailOpt::OneByOne => TailKind::OneByOneConv,
            TailOpt::Fc => TailKind::FullyConnected,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub improve_threshold: f64,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            epochs: d.epochs,
            initial_lr: d.initial_lr,
            lr_decay: d.lr_decay,
            improve_threshold: d.improve_threshold,
            patience: d.patience,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
        }
    }
}

/// Loss weighting: bins below `d_near` meters get up to `1 + beta` weight,
/// fading linearly to 1 at `d_near`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub beta: f64,
    pub d_near: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            beta: 4.0,
            d_near: 12.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Inclusive close-range window in bin indices.
    pub close_lo: usize,
    pub close_hi: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            close_lo: 2,
            close_hi: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSection {
    /// Distance bin of the on-axis probe target.
    pub probe_bin: usize,
    pub tilt_max_deg: f64,
    pub tilt_step_deg: f64,
}

impl Default for BiasSection {
    fn default() -> Self {
        Self {
            probe_bin: 6,
            tilt_max_deg: 60.0,
            tilt_step_deg: 5.0,
        }
    }
}

/// Flag-level overrides shared by the subcommands; `None` keeps the config
/// file (or default) value.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub grid: Option<(u32, u32)>,
    pub labels: Option<LabelMode>,
    pub tail: Option<TailOpt>,
    pub balance_cap: Option<usize>,
    pub high_density: bool,
}

/// Domain-typed view of a fully resolved configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub camera: CameraIntrinsics,
    pub label_spec: LabelSpec,
    pub label_mode: LabelMode,
    pub grid: GridSpec,
    pub gen: GenConfig,
    pub pipe: PipelineConfig,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub loss: LossSection,
    pub window: (usize, usize),
    pub bias: BiasSection,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", p.display())))
        }
        None => Ok(RunConfig::default()),
    }
}

pub fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides) {
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(n) = ov.n {
        // Keep the configured split ratio so small -n runs stay valid:
        // val and test shrink with the total, each staying at least 1.
        let old = cfg.pipeline.n.max(1) as f64;
        let scaled = |part: usize| ((part as f64 * n as f64 / old).round() as usize).max(1);
        cfg.pipeline.n_val = scaled(cfg.pipeline.n_val);
        cfg.pipeline.n_test = scaled(cfg.pipeline.n_test);
        cfg.pipeline.n = n;
    }
    if let Some((w, h)) = ov.grid {
        cfg.grid = GridSection { w_out: w, h_out: h };
    }
    if let Some(mode) = ov.labels {
        cfg.labels.mode = mode;
    }
    if let Some(tail) = ov.tail {
        cfg.arch.tail = tail;
    }
    if let Some(cap) = ov.balance_cap {
        cfg.gen.balance_cap = cap;
    }
    if ov.high_density {
        let preset = GenConfig::high_density(cfg.seed);
        cfg.gen.max_count = preset.max_count;
        cfg.gen.max_group_size = preset.max_group_size;
        cfg.gen.depth_max = preset.depth_max;
        cfg.gen.high_density = true;
    }
}

pub fn resolve(cfg: &RunConfig) -> Result<Resolved, CliError> {
    let cam = &cfg.camera;
    let camera = CameraIntrinsics::new(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let label_spec = LabelSpec::new(
        cfg.labels.delta_d,
        cfg.labels.n_bin,
        cfg.labels.sigma,
        cfg.labels.k_smooth_start,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let grid = GridSpec::new(cfg.grid.w_out, cfg.grid.h_out)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut gen = cfg.gen.clone();
    gen.seed = cfg.seed;
    gen.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let pipe = PipelineConfig {
        n: cfg.pipeline.n,
        n_val: cfg.pipeline.n_val,
        n_test: cfg.pipeline.n_test,
        full_cam: camera,
        crop: CropConfig {
            width: cfg.pipeline.crop_width,
            height: cfg.pipeline.crop_height,
            near_threshold: gen.near_threshold,
            near_bias: gen.near_bias,
        },
        style: cfg.style.clone(),
        label_spec,
        grid,
    };

    let arch = ArchSpec {
        input_width: cfg.pipeline.crop_width,
        input_height: cfg.pipeline.crop_height,
        stages: cfg
            .arch
            .stages
            .iter()
            .map(|&(filters, pool)| ConvStage { filters, pool })
            .collect(),
        n_bin: cfg.labels.n_bin,
        grid,
        tail: cfg.arch.tail.into(),
    };
    arch.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let train = TrainConfig {
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        initial_lr: cfg.train.initial_lr,
        lr_decay: cfg.train.lr_decay,
        improve_threshold: cfg.train.improve_threshold,
        patience: cfg.train.patience,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        epsilon: cfg.train.epsilon,
        shuffle_seed: cfg.seed,
    };

    if cfg.metrics.close_lo > cfg.metrics.close_hi || cfg.metrics.close_hi >= cfg.labels.n_bin {
        return Err(CliError::Config(format!(
            "close-range window [{}, {}] does not fit {} bins",
            cfg.metrics.close_lo, cfg.metrics.close_hi, cfg.labels.n_bin
        )));
    }
    if cfg.bias.probe_bin >= cfg.labels.n_bin {
        return Err(CliError::Config(format!(
            "bias probe bin {} out of {} bins",
            cfg.bias.probe_bin, cfg.labels.n_bin
        )));
    }
    if !(cfg.bias.tilt_step_deg > 0.0) || cfg.bias.tilt_max_deg < 0.0 {
        return Err(CliError::Config("bad tilt sweep bounds".into()));
    }

    Ok(Resolved {
        seed: cfg.seed,
        camera,
        label_spec,
        label_mode: cfg.labels.mode,
        grid,
        gen,
        pipe,
        arch,
        train,
        loss: cfg.loss.clone(),
        window: (cfg.metrics.close_lo, cfg.metrics.close_hi),
        bias: cfg.bias.clone(),
    })
}

/// Writes the resolved configuration next to a command's outputs.
pub fn save_run_config(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))?;
    fs::write(out_dir.join("run-config.toml"), text)?;
    Ok(())
}
