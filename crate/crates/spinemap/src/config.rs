//! Pipeline configuration. Every reference hyper-parameter lives here as a
//! default value, never in code, so desk-scale runs and ablations only touch
//! the TOML file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::centroids::AnnotationUnits;
use crate::error::{Error, Result};
use crate::inference::TilingParams;
use crate::nets::{NetTopology, TrainConfig};
use crate::sampler::SamplerParams;
use crate::vertebra::RadiiTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub output_dir: PathBuf,
    pub annotation_units: AnnotationUnits,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: PathBuf::from("data/train"),
            test_dir: PathBuf::from("data/test"),
            output_dir: PathBuf::from("out"),
            annotation_units: AnnotationUnits::Mm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub detection_patches_per_scan: usize,
    pub identification_patches_per_scan: usize,
    #[serde(flatten)]
    pub params: SamplerParams,
    pub deform_sigma: f64,
    pub deform_grid: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            detection_patches_per_scan: 5,
            identification_patches_per_scan: 100,
            params: SamplerParams::default(),
            deform_sigma: 0.7,
            deform_grid: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub topology: NetTopology,
    /// Fraction of training scans held out for validation metrics.
    pub val_fraction: f64,
}

/// Partial `[detection]` / `[identification]` table; unset keys fall back to
/// that model's own reference defaults rather than a shared Default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
struct ModelPatch {
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    bn_momentum: Option<f64>,
    background_weight: Option<f64>,
    foreground_weight: Option<f64>,
    seed: Option<u64>,
    topology: Option<NetTopology>,
    val_fraction: Option<f64>,
}

impl ModelPatch {
    fn apply(self, mut base: ModelConfig) -> ModelConfig {
        if let Some(v) = self.learning_rate {
            base.train.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            base.train.batch_size = v;
        }
        if let Some(v) = self.epochs {
            base.train.epochs = v;
        }
        if let Some(v) = self.bn_momentum {
            base.train.bn_momentum = v;
        }
        if let Some(v) = self.background_weight {
            base.train.background_weight = v;
        }
        if let Some(v) = self.foreground_weight {
            base.train.foreground_weight = v;
        }
        if let Some(v) = self.seed {
            base.train.seed = v;
        }
        if let Some(v) = self.topology {
            base.topology = v;
        }
        if let Some(v) = self.val_fraction {
            base.val_fraction = v;
        }
        base
    }
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubConfig {
    /// Normalized-intensity threshold of the stub detector.
    pub detection_threshold: f32,
    /// Stub identifier maps normalized intensity v to `v * scale + offset`.
    pub identification_scale: f32,
    pub identification_offset: f32,
}

impl Default for StubConfig {
    fn default() -> Self {
        // Matches synthetic scans built as intensity = -1000 + 100 * label:
        // normalized n = label / 15 - 1, so n * 15 + 15 recovers the label and
        // the threshold halves the gap between labels 0 and 1.
        StubConfig {
            detection_threshold: -1.0 + 1.0 / 30.0,
            identification_scale: 15.0,
            identification_offset: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub data: DataConfig,
    /// Per-vertebra radius overrides, mm, keyed by name.
    pub radii: BTreeMap<String, f64>,
    pub sampling: SamplingConfig,
    pub detection: ModelConfig,
    pub identification: ModelConfig,
    pub tiling: TilingParams,
    pub stub: StubConfig,
}

/// Raw TOML shape: every table optional, model tables as patches.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct PipelineConfigPatch {
    seed: Option<u64>,
    data: Option<DataConfig>,
    radii: Option<BTreeMap<String, f64>>,
    sampling: Option<SamplingConfig>,
    detection: Option<ModelPatch>,
    identification: Option<ModelPatch>,
    tiling: Option<TilingParams>,
    stub: Option<StubConfig>,
}

impl<'de> Deserialize<'de> for PipelineConfig {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let patch = PipelineConfigPatch::deserialize(deserializer)?;
        let mut cfg = PipelineConfig::default();
        if let Some(v) = patch.seed {
            cfg.seed = v;
        }
        if let Some(v) = patch.data {
            cfg.data = v;
        }
        if let Some(v) = patch.radii {
            cfg.radii = v;
        }
        if let Some(v) = patch.sampling {
            cfg.sampling = v;
        }
        if let Some(p) = patch.detection {
            cfg.detection = p.apply(cfg.detection);
        }
        if let Some(p) = patch.identification {
            cfg.identification = p.apply(cfg.identification);
        }
        if let Some(v) = patch.tiling {
            cfg.tiling = v;
        }
        if let Some(v) = patch.stub {
            cfg.stub = v;
        }
        Ok(cfg)
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            data: DataConfig::default(),
            radii: BTreeMap::new(),
            sampling: SamplingConfig::default(),
            detection: ModelConfig {
                train: TrainConfig::detection_default(),
                topology: NetTopology::detection_default(),
                val_fraction: 0.1,
            },
            identification: ModelConfig {
                train: TrainConfig::identification_default(),
                topology: NetTopology::identification_default(),
                val_fraction: 0.1,
            },
            tiling: TilingParams::default(),
            stub: StubConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Other(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reject non-positive hyper-parameters before any heavy work starts.
    pub fn validate(&self) -> Result<()> {
        self.detection.train.validate()?;
        self.identification.train.validate()?;
        self.tiling.validate()?;
        if self.sampling.detection_patches_per_scan == 0
            || self.sampling.identification_patches_per_scan == 0
        {
            return Err(Error::InvalidConfig("per-scan sample counts must be >= 1".into()));
        }
        if self.sampling.params.max_attempts == 0 {
            return Err(Error::InvalidConfig("sampler attempt budget must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sampling.params.foreground_fraction) {
            return Err(Error::InvalidConfig(
                "foreground fraction must lie in [0, 1]".into(),
            ));
        }
        if self.sampling.params.detection_patch.contains(&0)
            || self.sampling.params.identification_patch.contains(&0)
        {
            return Err(Error::InvalidConfig("patch extents must be positive".into()));
        }
        if self.sampling.deform_sigma < 0.0 {
            return Err(Error::InvalidConfig("deform sigma must be >= 0".into()));
        }
        if self.sampling.deform_grid < 2 {
            return Err(Error::InvalidConfig("deform grid needs >= 2 points".into()));
        }
        for model in [&self.detection, &self.identification] {
            if !(0.0..1.0).contains(&model.val_fraction) {
                return Err(Error::InvalidConfig("val_fraction must lie in [0, 1)".into()));
            }
            if model.topology.channels.is_empty() || model.topology.channels.contains(&0) {
                return Err(Error::InvalidConfig("topology channels must be positive".into()));
            }
        }
        // Radii overrides must parse and stay in range.
        let _ = self.radii_table()?;
        Ok(())
    }

    pub fn radii_table(&self) -> Result<RadiiTable> {
        RadiiTable::with_overrides(&self.radii)
    }
}

/// Stable per-stage seed derivation from the root seed (FNV-1a over the tags).
pub fn derive_seed(root: u64, tags: &[&str]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64 ^ root;
    for tag in tags {
        for &b in tag.as_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash ^= 0xff;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
