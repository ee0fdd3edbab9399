//! Architecture hyperparameters shared by the base model and InfuseNet.

use crate::error::{InfuError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub heads: usize,
    /// Hidden width of every block MLP as a multiple of `token_dim`.
    pub mlp_ratio: usize,
    /// Base DiT blocks (M).
    pub base_blocks: usize,
    pub text_tokens: usize,
    /// InfuseNet blocks (N).
    pub infuse_blocks: usize,
    /// Base blocks served per InfuseNet block (i); `base_blocks == infuse_blocks * factor`.
    pub factor: usize,
    pub id_tokens: usize,
    pub id_dim: usize,
    /// One output head per InfuseNet block, repeated over its `factor` base
    /// blocks, instead of `factor` independent heads.
    pub shared_residual_heads: bool,
    /// Multiplier on every injected residual at inference and training time.
    pub residual_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            token_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            base_blocks: 8,
            text_tokens: 4,
            infuse_blocks: 2,
            factor: 4,
            id_tokens: 8,
            id_dim: 32,
            shared_residual_heads: false,
            residual_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(InfuError::Config(msg));
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("token_dim", self.token_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("base_blocks", self.base_blocks),
            ("text_tokens", self.text_tokens),
            ("infuse_blocks", self.infuse_blocks),
            ("factor", self.factor),
            ("id_tokens", self.id_tokens),
            ("id_dim", self.id_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.token_dim % self.heads != 0 {
            return fail(format!(
                "token_dim {} not divisible by heads {}",
                self.token_dim, self.heads
            ));
        }
        if self.token_dim % 2 != 0 {
            return fail(format!("token_dim {} must be even", self.token_dim));
        }
        if self.base_blocks != self.infuse_blocks * self.factor {
            return fail(format!(
                "base_blocks {} != infuse_blocks {} * factor {}",
                self.base_blocks, self.infuse_blocks, self.factor
            ));
        }
        if !self.residual_scale.is_finite() {
            return fail("residual_scale must be finite".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.token_dim * self.mlp_ratio
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}
