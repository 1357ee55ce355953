//! TOML experiment configurations, one schema per subcommand.

use serde::{Deserialize, Serialize};
use skylos::channel::ChannelConfig;
use skylos::model::{ModelConfig, ModelError, ModelKind};
use skylos::scene::ScenarioSpec;
use skylos::sensing::CameraSpec;
use std::path::PathBuf;

fn default_camera_footprint() -> f64 {
    150.0
}
fn default_camera_resolution() -> usize {
    96
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraSection {
    #[serde(default = "default_camera_footprint")]
    pub footprint_side: f64,
    #[serde(default = "default_camera_resolution")]
    pub resolution: usize,
}

impl Default for CameraSection {
    fn default() -> Self {
        CameraSection {
            footprint_side: default_camera_footprint(),
            resolution: default_camera_resolution(),
        }
    }
}

impl CameraSection {
    pub fn to_spec(&self) -> CameraSpec {
        CameraSpec {
            footprint_side: self.footprint_side,
            resolution: self.resolution,
        }
    }
}

fn default_freq() -> f64 {
    28e9
}
fn default_max_order() -> usize {
    2
}
fn default_reflection_loss() -> f64 {
    0.3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelSection {
    #[serde(default = "default_freq")]
    pub freq_hz: f64,
    #[serde(default = "default_max_order")]
    pub max_order: usize,
    #[serde(default = "default_reflection_loss")]
    pub reflection_loss: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            freq_hz: default_freq(),
            max_order: default_max_order(),
            reflection_loss: default_reflection_loss(),
        }
    }
}

impl ChannelSection {
    pub fn to_config(&self) -> ChannelConfig {
        ChannelConfig {
            freq_hz: self.freq_hz,
            max_order: self.max_order,
            reflection_loss: self.reflection_loss,
        }
    }
}

/// Optional overrides on top of the desk-scale model defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelSection {
    pub image_side: Option<usize>,
    pub patch: Option<usize>,
    pub embed_dim: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub branch_channels: Option<usize>,
    pub grid: Option<usize>,
    pub fusion_depth: Option<usize>,
    pub classifier_depth: Option<usize>,
    #[serde(default)]
    pub paper_scale: bool,
}

impl ModelSection {
    pub fn to_config(&self) -> ModelConfig {
        let base = if self.paper_scale {
            ModelConfig::paper_scale()
        } else {
            ModelConfig::default()
        };
        ModelConfig {
            image_side: self.image_side.unwrap_or(base.image_side),
            patch: self.patch.unwrap_or(base.patch),
            embed_dim: self.embed_dim.unwrap_or(base.embed_dim),
            depth: self.depth.unwrap_or(base.depth),
            heads: self.heads.unwrap_or(base.heads),
            branch_channels: self.branch_channels.unwrap_or(base.branch_channels),
            grid: self.grid.unwrap_or(base.grid),
            fusion_depth: self.fusion_depth.unwrap_or(base.fusion_depth),
            classifier_depth: self.classifier_depth.unwrap_or(base.classifier_depth),
            paper_scale: self.paper_scale,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSection {
    pub altitude: f64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub scenario: ScenarioSpec,
    pub generation: GenSection,
    #[serde(default)]
    pub camera: CameraSection,
    #[serde(default)]
    pub channel: ChannelSection,
}

fn default_epochs() -> usize {
    15
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub dataset: PathBuf,
    pub test_route: u32,
    pub model: String,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    pub metrics_out: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfigFile {
    pub train: TrainSection,
    #[serde(default)]
    pub model_config: ModelSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub test_route: u32,
    pub per_snapshot_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfigFile {
    pub eval: EvalSection,
}

fn default_k_list() -> Vec<usize> {
    vec![0, 10, 25, 50, 100, 200]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_ft_epochs() -> usize {
    30
}
fn default_ft_lr() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewshotSection {
    pub source_dataset: PathBuf,
    pub source_test_route: u32,
    pub target_dataset: PathBuf,
    pub target_test_route: u32,
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub source_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_ft_epochs")]
    pub fine_tune_epochs: usize,
    #[serde(default = "default_ft_lr")]
    pub fine_tune_lr: f64,
    pub out: PathBuf,
    pub median_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewshotConfigFile {
    pub fewshot: FewshotSection,
    #[serde(default)]
    pub model_config: ModelSection,
}

fn default_variances() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSection {
    pub dataset: PathBuf,
    pub fusion_checkpoint: PathBuf,
    pub rgb_checkpoint: PathBuf,
    pub test_route: u32,
    #[serde(default = "default_variances")]
    pub variances: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfigFile {
    pub noise: NoiseSection,
}

fn default_random_k() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionSection {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub test_route: u32,
    #[serde(default = "default_random_k")]
    pub random_k: usize,
    #[serde(default)]
    pub seed: u64,
    pub out_prefix: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionConfigFile {
    pub position: PositionSection,
}

pub fn parse_model_kind(s: &str) -> Result<ModelKind, ModelError> {
    s.parse()
}
