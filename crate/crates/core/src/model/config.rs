use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters of the two-stage encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub num_heads: usize,
    pub super_encoder_layers: usize,
    pub part_encoder_layers: usize,
    pub instance_enc_dim: usize,
    pub noise_dim: usize,
    pub head_hidden: [usize; 3],
    pub ff_dim: usize,
    pub max_parts: usize,
    /// Ablation switch: with the super-part encoder disabled, latent poses
    /// are identity and the cross-level keys/values are the raw aggregated
    /// super features.
    pub use_super_encoder: bool,
    /// Per-point MLP widths of the PointNet feature extractors; the last
    /// entry must equal `feat_dim`.
    pub pointnet_dims: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 256,
            num_heads: 8,
            super_encoder_layers: 2,
            part_encoder_layers: 6,
            instance_enc_dim: 40,
            noise_dim: 80,
            head_hidden: [256, 256, 1024],
            ff_dim: 512,
            max_parts: 20,
            use_super_encoder: true,
            pointnet_dims: [64, 128, 256],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.num_heads == 0 {
            return Err(Error::invalid("feat_dim and num_heads must be positive"));
        }
        if self.feat_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "feat_dim {} not divisible by num_heads {}",
                self.feat_dim, self.num_heads
            )));
        }
        let hidden = self.feat_dim + self.instance_enc_dim;
        if hidden % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "part hidden dim {} not divisible by num_heads {}",
                hidden, self.num_heads
            )));
        }
        if self.pointnet_dims[2] != self.feat_dim {
            return Err(Error::invalid(
                "last PointNet width must match feat_dim",
            ));
        }
        if self.head_hidden.iter().any(|&d| d == 0)
            || self.ff_dim == 0
            || self.max_parts == 0
            || self.noise_dim == 0
        {
            return Err(Error::invalid("all model dimensions must be positive"));
        }
        Ok(())
    }

    /// Hidden width of the within-level part encoder (features + instance
    /// encoding).
    pub fn part_hidden(&self) -> usize {
        self.feat_dim + self.instance_enc_dim
    }
}
