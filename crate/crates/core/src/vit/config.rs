use crate::error::{Error, Result};
use crate::quant::{MAX_BITS, MIN_BITS};

/// Architecture hyperparameters of the toy vision transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    /// Learned positional embedding added after the patch projection.
    pub pos_embed: bool,
    pub ln_eps: f64,
    pub bits: BitWidths,
}

/// Bit widths per model part.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitWidths {
    pub block_weight: u8,
    pub block_act: u8,
    pub embed_weight: u8,
    pub embed_act: u8,
    pub head_weight: u8,
    pub head_act: u8,
}

impl BitWidths {
    /// Encoder blocks at `w`/`a` bits, patch embedding and head at 8/8.
    pub fn blocks_at(w: u8, a: u8) -> Self {
        Self {
            block_weight: w,
            block_act: a,
            embed_weight: 8,
            embed_act: 8,
            head_weight: 8,
            head_act: 8,
        }
    }

    pub fn uniform(bits: u8) -> Self {
        Self {
            block_weight: bits,
            block_act: bits,
            embed_weight: bits,
            embed_act: bits,
            head_weight: bits,
            head_act: bits,
        }
    }

    pub fn all(&self) -> [u8; 6] {
        [
            self.block_weight,
            self.block_act,
            self.embed_weight,
            self.embed_act,
            self.head_weight,
            self.head_act,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        match self.all().iter().find(|b| !(MIN_BITS..=MAX_BITS).contains(*b)) {
            Some(b) => Err(Error::contract(format!(
                "bit width {b} outside [{MIN_BITS}, {MAX_BITS}]"
            ))),
            None => Ok(()),
        }
    }
}

impl Default for BitWidths {
    fn default() -> Self {
        Self::blocks_at(4, 4)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            heads: 4,
            blocks: 4,
            mlp_hidden: 128,
            classes: 10,
            pos_embed: true,
            ln_eps: 1e-6,
            bits: BitWidths::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::contract(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::contract(format!(
                "patch size {} does not divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::contract("layer norm eps must be positive"));
        }
        self.bits.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Patches per image.
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Length of one flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}
