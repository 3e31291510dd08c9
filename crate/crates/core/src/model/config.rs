use std::fmt;
use std::str::FromStr;

use crate::config::{format_list, parse_list, KvDocument};
use crate::error::{Error, Result};

/// Checkpoint schema version of the model configuration manifest.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// How the final feature map is turned into a descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Channel reduction followed by spatial reduction (two affine maps).
    Projection,
    /// Global average pooling over the spatial positions.
    AvgPool,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Projection => "projection",
            Aggregation::AvgPool => "avgpool",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(Aggregation::Projection),
            "avgpool" => Ok(Aggregation::AvgPool),
            other => Err(Error::config(format!(
                "unknown aggregation {other:?} (expected projection or avgpool)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
///
/// The defaults reproduce the published descriptor geometry: a 512×128 input
/// downsampled ×32 to a 16×4 map with 512 channels, four mixer blocks, and a
/// projection to 512 channels × 4 map dimensions = 2048 values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Output channels of each residual stage; the last entry is the feature map depth.
    pub backbone_stage_channels: Vec<usize>,
    pub backbone_blocks_per_stage: Vec<usize>,
    /// Number of feature mixer blocks; 0 removes the mixer.
    pub mixer_depth: usize,
    pub mixer_kernel_size: usize,
    pub mixer_expansion_ratio: usize,
    /// Whether each mixer block carries the second (channel MLP) residual branch.
    pub mixer_channel_mlp: bool,
    pub aggregation: Aggregation,
    pub projection_channels: usize,
    pub projection_map_dim: usize,
    pub num_classes: Option<usize>,
    pub dropout_p: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_height: 512,
            input_width: 128,
            input_channels: 3,
            backbone_stage_channels: vec![16, 32, 64, 512],
            backbone_blocks_per_stage: vec![1, 1, 1, 1],
            mixer_depth: 4,
            mixer_kernel_size: 3,
            mixer_expansion_ratio: 2,
            mixer_channel_mlp: true,
            aggregation: Aggregation::Projection,
            projection_channels: 512,
            projection_map_dim: 4,
            num_classes: None,
            dropout_p: 0.5,
            norm_eps: 1e-6,
        }
    }
}

/// Per-stage output shapes (channels, height, width) for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub input: [usize; 3],
    pub stem: [usize; 3],
    pub stages: Vec<[usize; 3]>,
    pub feature_map: [usize; 3],
    pub descriptor_dim: usize,
    pub logits: Option<usize>,
}

impl ModelConfig {
    /// Total spatial reduction: the stride-2 stem plus one stride-2 step per stage.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.backbone_stage_channels.len() + 1)
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_stage_channels.last().unwrap_or(&0)
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        let f = self.downsample_factor();
        (self.input_height / f, self.input_width / f)
    }

    pub fn descriptor_dim(&self) -> usize {
        match self.aggregation {
            Aggregation::Projection => self.projection_channels * self.projection_map_dim,
            Aggregation::AvgPool => self.feature_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.backbone_stage_channels.len();
        if stages == 0 {
            return Err(Error::config("backbone needs at least one stage"));
        }
        if self.backbone_blocks_per_stage.len() != stages {
            return Err(Error::config(format!(
                "{} stage widths but {} block counts",
                stages,
                self.backbone_blocks_per_stage.len()
            )));
        }
        if self.backbone_stage_channels.contains(&0) || self.backbone_blocks_per_stage.contains(&0) {
            return Err(Error::config("stage widths and block counts must be positive"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be positive"));
        }
        let f = self.downsample_factor();
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % f != 0
            || self.input_width % f != 0
        {
            return Err(Error::config(format!(
                "input {}×{} is not divisible by the backbone downsampling factor {f}",
                self.input_height, self.input_width
            )));
        }
        if self.mixer_depth > 0 {
            if self.mixer_kernel_size % 2 == 0 {
                return Err(Error::config(format!(
                    "mixer_kernel_size must be odd, got {}",
                    self.mixer_kernel_size
                )));
            }
            if self.mixer_expansion_ratio == 0 {
                return Err(Error::config("mixer_expansion_ratio must be positive"));
            }
        }
        if self.aggregation == Aggregation::Projection
            && (self.projection_channels == 0 || self.projection_map_dim == 0)
        {
            return Err(Error::config("projection dimensions must be positive"));
        }
        if let Some(k) = self.num_classes {
            if k < 2 {
                return Err(Error::config(format!("num_classes must be at least 2, got {k}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be positive"));
        }
        Ok(())
    }

    /// Predicts every stage's output shape without running the network.
    pub fn shape_plan(&self) -> Result<ShapePlan> {
        self.validate()?;
        let (mut h, mut w) = (self.input_height / 2, self.input_width / 2);
        let stem = [self.backbone_stage_channels[0], h, w];
        let mut stages = Vec::new();
        for &c in &self.backbone_stage_channels {
            h /= 2;
            w /= 2;
            stages.push([c, h, w]);
        }
        Ok(ShapePlan {
            input: [self.input_channels, self.input_height, self.input_width],
            stem,
            feature_map: *stages.last().unwrap(),
            stages,
            descriptor_dim: self.descriptor_dim(),
            logits: self.num_classes,
        })
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut d = KvDocument::new();
        d.set("schema_version", MODEL_SCHEMA_VERSION);
        d.set("input_height", self.input_height);
        d.set("input_width", self.input_width);
        d.set("input_channels", self.input_channels);
        d.set("backbone_stage_channels", format_list(&self.backbone_stage_channels));
        d.set("backbone_blocks_per_stage", format_list(&self.backbone_blocks_per_stage));
        d.set("mixer_depth", self.mixer_depth);
        d.set("mixer_kernel_size", self.mixer_kernel_size);
        d.set("mixer_expansion_ratio", self.mixer_expansion_ratio);
        d.set("mixer_channel_mlp", self.mixer_channel_mlp);
        d.set("aggregation", self.aggregation);
        d.set("projection_channels", self.projection_channels);
        d.set("projection_map_dim", self.projection_map_dim);
        d.set(
            "num_classes",
            self.num_classes.map_or_else(|| "none".to_string(), |k| k.to_string()),
        );
        d.set("dropout_p", self.dropout_p);
        d.set("norm_eps", self.norm_eps);
        d
    }

    /// Reads a configuration, starting from the defaults for absent keys.
    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        const KEYS: &[&str] = &[
            "schema_version",
            "input_height",
            "input_width",
            "input_channels",
            "backbone_stage_channels",
            "backbone_blocks_per_stage",
            "mixer_depth",
            "mixer_kernel_size",
            "mixer_expansion_ratio",
            "mixer_channel_mlp",
            "aggregation",
            "projection_channels",
            "projection_map_dim",
            "num_classes",
            "dropout_p",
            "norm_eps",
        ];
        doc.reject_unknown(KEYS)?;
        if let Some(v) = doc.parse_opt::<u32>("schema_version")? {
            if v != MODEL_SCHEMA_VERSION {
                return Err(Error::config(format!(
                    "model schema version {v} is not supported (expected {MODEL_SCHEMA_VERSION})"
                )));
            }
        }
        let mut c = ModelConfig::default();
        doc.read_into("input_height", &mut c.input_height)?;
        doc.read_into("input_width", &mut c.input_width)?;
        doc.read_into("input_channels", &mut c.input_channels)?;
        if let Some(raw) = doc.get("backbone_stage_channels") {
            c.backbone_stage_channels = parse_list(raw, "backbone_stage_channels")?;
        }
        if let Some(raw) = doc.get("backbone_blocks_per_stage") {
            c.backbone_blocks_per_stage = parse_list(raw, "backbone_blocks_per_stage")?;
        }
        doc.read_into("mixer_depth", &mut c.mixer_depth)?;
        doc.read_into("mixer_kernel_size", &mut c.mixer_kernel_size)?;
        doc.read_into("mixer_expansion_ratio", &mut c.mixer_expansion_ratio)?;
        doc.read_into("mixer_channel_mlp", &mut c.mixer_channel_mlp)?;
        if let Some(raw) = doc.get("aggregation") {
            c.aggregation = raw.parse()?;
        }
        doc.read_into("projection_channels", &mut c.projection_channels)?;
        doc.read_into("projection_map_dim", &mut c.projection_map_dim)?;
        match doc.get("num_classes") {
            None => {}
            Some("none") | Some("") => c.num_classes = None,
            Some(_) => c.num_classes = doc.parse_opt("num_classes")?,
        }
        doc.read_into("dropout_p", &mut c.dropout_p)?;
        doc.read_into("norm_eps", &mut c.norm_eps)?;
        c.validate()?;
        Ok(c)
    }
}
