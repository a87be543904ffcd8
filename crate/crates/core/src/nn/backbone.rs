//! Convolutional backbone: repeated [conv3×3 (pad 1) → batchnorm → relu →
//! maxpool 2×2] blocks followed by global average pooling, yielding one
//! D-dimensional embedding per image where D is the last block's channel
//! count (the Conv4-64 shape at default settings).

use super::layers::{BatchNorm2d, Conv2d};
use super::params::{Mounted, ParamStore};
use crate::autodiff::{Element, Rng, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output channels per block; the block count is the list length.
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub use_batchnorm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![64, 64, 64, 64],
            in_channels: 3,
            in_h: 32,
            in_w: 32,
            use_batchnorm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    /// Embedding dimension D = final channel count.
    pub fn embedding_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("backbone.channels: must be non-empty".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("backbone.channels: zero channels".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("backbone.in_channels: must be positive".into()));
        }
        let (mut h, mut w) = (self.in_h, self.in_w);
        for (i, _) in self.channels.iter().enumerate() {
            // conv3x3 pad 1 keeps the size; the 2x2/2 pool floors halving
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "backbone: spatial size underflows at block {i} ({h}x{w} before pool; \
                     input {}x{} supports fewer blocks)",
                    self.in_h, self.in_w
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }
}

struct ConvBlock {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

pub struct Backbone {
    blocks: Vec<ConvBlock>,
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        config: BackboneConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        let mut in_ch = config.in_channels;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            let conv = Conv2d::new(
                store,
                rng,
                &format!("{name}.block{i}.conv"),
                in_ch,
                out_ch,
                3,
                1,
                1,
            )?;
            let bn = if config.use_batchnorm {
                Some(BatchNorm2d::new(
                    store,
                    &format!("{name}.block{i}.bn"),
                    out_ch,
                    config.bn_momentum,
                    config.bn_eps,
                )?)
            } else {
                None
            };
            blocks.push(ConvBlock { conv, bn });
            in_ch = out_ch;
        }
        Ok(Backbone { blocks, config })
    }

    pub fn out_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        mut store: Option<&mut ParamStore<T>>,
        m: &Mounted,
        images: Var,
    ) -> Result<Var> {
        let s = tape.value(images).shape().to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "backbone: expected (B,{},H,W) images, got {s:?}",
                self.config.in_channels
            )));
        }
        let mut x = images;
        for block in &self.blocks {
            x = block.conv.forward(tape, m, x)?;
            if let Some(bn) = &block.bn {
                x = match store.as_deref_mut() {
                    Some(st) => bn.forward_train(tape, st, m, x)?,
                    None => bn.forward_eval(tape, m, x)?,
                };
            }
            x = tape.relu(x)?;
            x = tape.maxpool2d(x, 2, 2)?;
        }
        // Global average pool: (B, D, h, w) -> (B, D)
        tape.mean(x, &[2, 3], false)
    }

    /// Training mode: batchnorm uses batch statistics and updates the
    /// running buffers in `store`.
    pub fn forward_train<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        m: &Mounted,
        images: Var,
    ) -> Result<Var> {
        self.forward(tape, Some(store), m, images)
    }

    /// Eval mode: deterministic, running statistics only.
    pub fn forward_eval<T: Element>(
        &self,
        tape: &mut Tape<T>,
        m: &Mounted,
        images: Var,
    ) -> Result<Var> {
        self.forward(tape, None, m, images)
    }
}
