use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_norm_eps() -> f64 {
    1e-6
}

/// Architecture hyperparameters of the universal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_patches: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub separate_classifiers: bool,
    pub min_heads: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// Drop probability after the attention projection and the MLP output.
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// A ViT whose embedding width is `heads * head_dim` and whose MLP hidden
    /// width is `mlp_ratio` times that.
    #[allow(clippy::too_many_arguments)]
    pub fn vit(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        mlp_ratio: usize,
        image_size: usize,
        patch_size: usize,
        in_channels: usize,
        num_classes: usize,
    ) -> Self {
        let embed_dim = num_heads * head_dim;
        let side = image_size.checked_div(patch_size).unwrap_or(0);
        Self {
            num_layers,
            num_heads,
            head_dim,
            embed_dim,
            mlp_hidden: mlp_ratio * embed_dim,
            image_size,
            patch_size,
            in_channels,
            num_patches: side * side,
            num_classes,
            separate_classifiers: false,
            min_heads: 1,
            norm_eps: default_norm_eps(),
            dropout: 0.0,
        }
    }

    /// DeiT-base geometry (12 layers, 12 heads of width 64, 224px, 1000 classes).
    pub fn deit_base() -> Self {
        Self::vit(12, 12, 64, 4, 224, 16, 3, 1000)
    }

    /// The MNIST desk-scale model: 4 layers, 8 heads of width 8, patch 4 on 28×28.
    pub fn mnist_tiny() -> Self {
        Self { min_heads: 2, ..Self::vit(4, 8, 8, 4, 28, 4, 1, 10) }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("embed_dim", self.embed_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("num_patches", self.num_patches),
            ("num_classes", self.num_classes),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim != self.num_heads * self.head_dim {
            return Err(Error::config(format!(
                "embed_dim {} != num_heads {} x head_dim {}",
                self.embed_dim, self.num_heads, self.head_dim
            )));
        }
        if !self.mlp_hidden.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "mlp_hidden {} is not divisible by num_heads {}",
                self.mlp_hidden, self.num_heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        let side = self.image_size / self.patch_size;
        if self.num_patches != side * side {
            return Err(Error::config(format!("num_patches {} != ({side})^2", self.num_patches)));
        }
        if self.min_heads < 1 || self.min_heads > self.num_heads {
            return Err(Error::config(format!("min_heads {} not in [1, {}]", self.min_heads, self.num_heads)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn mlp_per_head(&self) -> usize {
        self.mlp_hidden / self.num_heads
    }

    /// Head counts that have a classifier (and a valid view): `[min_heads, H]`.
    pub fn supported_heads(&self) -> std::ops::RangeInclusive<usize> {
        self.min_heads..=self.num_heads
    }

    /// Configuration of the standalone model holding the first `k` heads.
    pub fn extracted(&self, k: usize) -> Result<ModelConfig> {
        if k == 0 || k > self.num_heads {
            return Err(Error::Range(format!("k = {k} not in [1, {}]", self.num_heads)));
        }
        Ok(ModelConfig {
            num_heads: k,
            embed_dim: k * self.head_dim,
            mlp_hidden: self.mlp_per_head() * k,
            min_heads: self.min_heads.min(k),
            separate_classifiers: false,
            ..self.clone()
        })
    }
}

/// Selects the subnetwork with the first `k` heads. Copying it copies no weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubnetworkView {
    pub k: usize,
    pub embed_width: usize,
    pub mlp_width: usize,
}

impl SubnetworkView {
    /// A view the universal model can run: `k` in `[min_heads, H]`.
    pub fn new(cfg: &ModelConfig, k: usize) -> Result<Self> {
        if !cfg.supported_heads().contains(&k) {
            return Err(Error::Range(format!(
                "k = {k} outside the supported range [{}, {}]",
                cfg.min_heads, cfg.num_heads
            )));
        }
        Ok(Self::any(cfg, k))
    }

    /// Any `k` in `[1, H]`, used for extraction and resource accounting.
    pub(crate) fn any(cfg: &ModelConfig, k: usize) -> Self {
        Self { k, embed_width: k * cfg.head_dim, mlp_width: cfg.mlp_per_head() * k }
    }

    pub fn full(cfg: &ModelConfig) -> Self {
        Self::any(cfg, cfg.num_heads)
    }
}
