//! JSON experiment configurations.
//!
//! Every command takes one JSON document. Deserialization is strict
//! (`deny_unknown_fields`), so a config is accepted exactly when it matches
//! the corresponding schema file in `schemas/`.

use serde::Deserialize;

use gridcnn::grid::{GridSpec, RectDomain};
use gridcnn::network::{LayerSpec, NetworkConfig};
use gridcnn::ops::{Activation, InterpKind, PoolKind};
use gridcnn::train::{AdamConfig, LossKind, TrainConfig};
use gridcnn::{Error, Result};

fn one() -> usize {
    1
}

/// One layer of a network, in resolution-free form: the physical kernel
/// support is derived from the pixel count and the resolution ladder.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerJson {
    pub kernel_px: [usize; 2],
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub s_d: usize,
    #[serde(default = "one")]
    pub s_u: usize,
    #[serde(default = "default_pool")]
    pub pooling: PoolKind,
    #[serde(default = "default_interp")]
    pub interp: InterpKind,
    pub activation: Activation,
    #[serde(default)]
    pub use_bn: bool,
    #[serde(default)]
    pub skip_from: Option<usize>,
}

fn default_pool() -> PoolKind {
    PoolKind::Average
}

fn default_interp() -> InterpKind {
    InterpKind::Bilinear
}

/// Network on the unit square with `n` x `n` input cells.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetJson {
    pub n: usize,
    pub layers: Vec<LayerJson>,
}

impl NetJson {
    /// Input grid spec (unit square, h = 1/n).
    pub fn input_spec(&self) -> Result<GridSpec> {
        GridSpec::new(RectDomain::unit(), 1.0 / self.n as f64)
    }

    /// Build the validated `NetworkConfig` and its input resolution.
    pub fn build(&self) -> Result<(NetworkConfig, f64)> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        let h0 = 1.0 / self.n as f64;
        // kernel supports follow the resolution ladder: layer l's convolution
        // runs at h_l / s_u, and its support is kernel_px cells at that h
        let mut layers = Vec::with_capacity(self.layers.len());
        let sd_su: Vec<(usize, usize)> = self.layers.iter().map(|l| (l.s_d, l.s_u)).collect();
        let ladder = gridcnn::resolution_ladder(h0, &sd_su);
        for (l, j) in self.layers.iter().enumerate() {
            if j.s_u == 0 || j.s_d == 0 {
                return Err(Error::LayerConfig { layer: l, msg: "sampling factors must be positive".into() });
            }
            let h_conv = ladder[l] / j.s_u as f64;
            layers.push(LayerSpec {
                kernel_support: RectDomain::centered(
                    j.kernel_px[1] as f64 * h_conv,
                    j.kernel_px[0] as f64 * h_conv,
                )?,
                kernel_px: (j.kernel_px[0], j.kernel_px[1]),
                in_channels: j.in_channels,
                out_channels: j.out_channels,
                s_d: j.s_d,
                s_u: j.s_u,
                pooling: j.pooling,
                interp: j.interp,
                activation: j.activation,
                use_bn: j.use_bn,
                skip_from: j.skip_from,
            });
        }
        let cfg = NetworkConfig::new(RectDomain::unit(), layers);
        cfg.validate(h0)?;
        Ok((cfg, h0))
    }
}

/// Training hyperparameters shared by the training commands.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJson {
    pub loss: LossKind,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub nu: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_true")]
    pub decay_bias_and_bn: bool,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_true() -> bool {
    true
}

impl TrainJson {
    pub fn to_train_config(&self, weight_decay: f64) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            lambda: self.lambda,
            nu: self.nu,
            adam: AdamConfig {
                lr: self.lr,
                weight_decay,
                decay_bias_and_bn: self.decay_bias_and_bn,
                ..Default::default()
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

/// Dataset geometry shared by the training commands: `count` noisy/clean
/// pairs at `n` x `n`, the last `test_count` held out.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataJson {
    pub train_count: usize,
    pub test_count: usize,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub n: usize,
    pub count: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub out_dir: String,
    #[serde(default = "default_true")]
    pub write_pgm: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub net: NetJson,
    pub data: DataJson,
    pub train: TrainJson,
    pub init_seed: u64,
    pub out_dir: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepWdConfig {
    pub net: NetJson,
    pub data: DataJson,
    pub train: TrainJson,
    pub init_seed: u64,
    pub wds: Vec<f64>,
    /// Exit with code 1 unless mean gradient energy is nonincreasing on at
    /// least 3 of the ordered decay levels and the max jump drops overall.
    #[serde(default)]
    pub enforce_gate: bool,
    pub out_dir: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepResConfig {
    pub net: NetJson,
    pub data: DataJson,
    pub train: TrainJson,
    pub init_seed: u64,
    /// Refinement factors; the base weight decay is divided by gamma^2.
    pub gammas: Vec<usize>,
    pub base_weight_decay: f64,
    /// Modulus radius in base-grid cells, evaluated at the matching physical
    /// radius on every refinement level.
    #[serde(default = "default_modulus_cells")]
    pub modulus_cells: usize,
    #[serde(default)]
    pub enforce_gate: bool,
    pub out_dir: String,
}

fn default_modulus_cells() -> usize {
    2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub net: NetJson,
    /// Parameter file produced by `train` (full-precision text). If absent,
    /// parameters are drawn from `init_seed`.
    #[serde(default)]
    pub params_file: Option<String>,
    #[serde(default)]
    pub init_seed: Option<u64>,
    /// Input selection: "meshgrid" (two coordinate ramps) or "circles".
    pub input: InputJson,
    pub gammas: Vec<usize>,
    /// Exit with code 1 unless sup differences are nonincreasing with 10%
    /// slack.
    #[serde(default)]
    pub enforce_gate: bool,
    pub out_dir: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum InputJson {
    Meshgrid,
    Circles { seed: u64 },
    Noise { channels: usize, amplitude: f64, seed: u64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipCommandConfig {
    pub net: NetJson,
    /// Channels and amplitude of the fixed random generator input.
    pub input_channels: usize,
    pub input_amplitude: f64,
    pub input_seed: u64,
    /// Target: noisy circle image.
    pub target_seed: u64,
    pub target_noise_std: f64,
    pub init_seed: u64,
    pub iters: usize,
    #[serde(default = "default_dip_lr")]
    pub lr: f64,
    #[serde(default = "default_input_sigma")]
    pub input_sigma: f64,
    pub dip_seed: u64,
    pub snapshot_every: usize,
    pub out_dir: String,
}

fn default_dip_lr() -> f64 {
    0.01
}

fn default_input_sigma() -> f64 {
    1.0 / 30.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub net: NetJson,
    pub init_seed: u64,
    pub input: InputJson,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Check only the first k entries of each tensor (all when absent).
    #[serde(default)]
    pub max_per_tensor: Option<usize>,
    pub out_dir: String,
}

fn default_step() -> f64 {
    1e-5
}

fn default_tol() -> f64 {
    1e-5
}

pub fn load<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
