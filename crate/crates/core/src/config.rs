use crate::error::{Error, Result};
use crate::tape::Precision;
use serde::{Deserialize, Serialize};

/// Which scorer architecture to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Transmatcher,
    TransformerCat,
    TransformerCross,
    PlainEmbed,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Transmatcher,
        Variant::TransformerCat,
        Variant::TransformerCross,
        Variant::PlainEmbed,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Transmatcher => "transmatcher",
            Variant::TransformerCat => "transformer_cat",
            Variant::TransformerCross => "transformer_cross",
            Variant::PlainEmbed => "plain_embed",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "transmatcher" => Ok(Variant::Transmatcher),
            "transformer_cat" => Ok(Variant::TransformerCat),
            "transformer_cross" => Ok(Variant::TransformerCross),
            "plain_embed" => Ok(Variant::PlainEmbed),
            other => Err(Error::Config(format!("unknown variant: {other}"))),
        }
    }
}

/// Conv stack standing in for a pretrained CNN: [conv 3x3 stride 2 ->
/// instance norm -> ReLU] per entry of `channels`, then a 3x3 neck conv to
/// the model dimension. Total stride is 2^len(channels).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![8, 16, 32],
        }
    }
}

/// All architecture hyperparameters shared by the four variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Model dimension d.
    pub d: usize,
    /// Feed-forward / MLP-head hidden dimension D.
    pub dim_ff: usize,
    /// Number of attention heads H (encoders only).
    pub heads: usize,
    /// Number of stacked layers N.
    pub layers: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub backbone: BackboneConfig,

    // Component ablation switches. mlphead2 is the minimal configuration and
    // must stay on.
    pub fc1: bool,
    pub bn1: bool,
    pub mlphead1: bool,
    pub mlphead2: bool,
    pub prior_embed: bool,
    pub pos_embed: bool,

    /// Pair decoder 1 with the raw backbone map and use layers-1 encoders.
    pub use_raw_first_pair: bool,
    /// Tie the cross-attention Q/K projections (transformer_cross only).
    pub shared_qk_fc: bool,
    /// Sum per-layer pooled scores (transformer_cross only).
    pub multiscale_fusion: bool,
    /// Sum the two GMP direction scores after BN3 (true) or between FC3 and
    /// BN3 (false).
    pub direction_sum_after_bn3: bool,
    /// Extra layer normalization after the encoder stack.
    pub extra_final_norm: bool,

    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_default()
    }
}

impl ModelConfig {
    /// Small configuration sized for CPU experiments: 48x16 images, stride-8
    /// backbone, 6x2 feature maps.
    pub fn desk_default() -> Self {
        ModelConfig {
            variant: Variant::Transmatcher,
            d: 32,
            dim_ff: 64,
            heads: 1,
            layers: 2,
            image_height: 48,
            image_width: 16,
            backbone: BackboneConfig::default(),
            fc1: true,
            bn1: true,
            mlphead1: true,
            mlphead2: true,
            prior_embed: true,
            pos_embed: false,
            use_raw_first_pair: true,
            shared_qk_fc: false,
            multiscale_fusion: false,
            direction_sum_after_bn3: true,
            extra_final_norm: false,
            precision: Precision::F64,
        }
    }

    /// Reference full-scale defaults: d=512, D=2048, H=1, N=3, 384x128 input.
    pub fn paper_default() -> Self {
        ModelConfig {
            d: 512,
            dim_ff: 2048,
            heads: 1,
            layers: 3,
            image_height: 384,
            image_width: 128,
            backbone: BackboneConfig {
                channels: vec![16, 32, 64, 128],
            },
            ..ModelConfig::desk_default()
        }
    }

    /// Memory-constrained preset used for the heavy cat/cross variants:
    /// d=128, D=512, N=2.
    pub fn table2_small(variant: Variant) -> Self {
        ModelConfig {
            variant,
            d: 128,
            dim_ff: 512,
            layers: 2,
            ..ModelConfig::desk_default()
        }
    }

    /// Feature-map geometry (h, w) after the backbone.
    pub fn feature_geometry(&self) -> Result<(usize, usize)> {
        let stride = self.backbone.stride();
        if self.image_height % stride != 0 || self.image_width % stride != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by backbone stride {stride}",
                self.image_height, self.image_width
            )));
        }
        Ok((self.image_height / stride, self.image_width / stride))
    }

    pub fn seq_len(&self) -> Result<usize> {
        let (h, w) = self.feature_geometry()?;
        Ok(h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if !self.mlphead2 {
            return Err(Error::Config(
                "mlphead2 is the minimal score head and cannot be disabled".into(),
            ));
        }
        self.feature_geometry()?;
        Ok(())
    }
}
