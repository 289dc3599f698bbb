//! Desk-scale vision-language network: patch-token visual encoder, text
//! encoder, cross-attention fusion encoder, projection/ITM/MLM heads, an
//! autoregressive answer decoder, and EMA momentum copies of both encoders.
//!
//! All parameters live in one [`ParamStore`] under hierarchical names:
//!
//! | prefix       | component                                   |
//! |--------------|---------------------------------------------|
//! | `visual.`    | visual encoder (patch embedding + blocks)   |
//! | `text.`      | text encoder                                |
//! | `fusion.`    | fusion encoder                              |
//! | `img_proj.`, `txt_proj.` | contrastive projections         |
//! | `itm_head.`, `mlm_head.` | pre-training heads              |
//! | `decoder.`   | answer decoder and its prediction head      |

mod checkpoint;
mod momentum;
mod net;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::synthdata::{Vocab, GRID};
use crate::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadReport};
pub use momentum::MomentumCopies;
pub use net::{Net, TextEncoding};

/// Architecture hyperparameters; stored in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub visual_depth: usize,
    pub text_depth: usize,
    pub fusion_depth: usize,
    pub decoder_depth: usize,
    pub contrastive_dim: usize,
    pub vocab_size: usize,
    /// Token positions in the text encoder, excluding `[CLS]`.
    pub max_text_len: usize,
    /// Decoder positions, including `[ANS]`.
    pub max_answer_len: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 4,
            ffn_mult: 4,
            visual_depth: 4,
            text_depth: 2,
            fusion_depth: 2,
            decoder_depth: 2,
            contrastive_dim: 16,
            vocab_size: Vocab::standard().len(),
            max_text_len: 24,
            max_answer_len: 8,
            image_size: GRID,
            patch_size: 2,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config("width must be a positive multiple of heads".into()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config("image size must be a multiple of patch size".into()));
        }
        if self.visual_depth != 2 * self.text_depth {
            return Err(Error::Config("visual depth must be twice the text depth".into()));
        }
        if self.max_answer_len < 2 || self.vocab_size == 0 {
            return Err(Error::Config(
                "answer length ≥ 2 and a non-empty vocabulary required".into(),
            ));
        }
        Ok(())
    }
}

/// Network parameters plus the architecture they instantiate.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalModel {
    pub config: ModelConfig,
    pub params: ParamStore<f64>,
}

struct Init<'r, R: Rng> {
    rng: &'r mut R,
    params: ParamStore<f64>,
}

impl<R: Rng> Init<'_, R> {
    /// Xavier-uniform weight `[fan_in, fan_out]` and zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-limit..limit))
            .collect();
        self.params.insert(
            format!("{name}.weight"),
            Tensor::new(vec![fan_in, fan_out], w).expect("positive dims"),
        );
        self.params.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
    }

    /// N(0, 0.02) embedding table.
    fn embedding(&mut self, name: &str, rows: usize, dim: usize) {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let w = (0..rows * dim).map(|_| normal.sample(self.rng)).collect();
        self.params.insert(
            name.to_string(),
            Tensor::new(vec![rows, dim], w).expect("positive dims"),
        );
    }

    fn layer_norm(&mut self, name: &str, dim: usize) {
        self.params
            .insert(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(vec![dim]));
    }

    fn attention(&mut self, name: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), d, d);
        }
    }

    fn block(&mut self, name: &str, cfg: &ModelConfig, cross: bool) {
        let d = cfg.width;
        self.layer_norm(&format!("{name}.ln1"), d);
        self.attention(&format!("{name}.attn"), d);
        if cross {
            self.layer_norm(&format!("{name}.ln_cross"), d);
            self.attention(&format!("{name}.cross"), d);
        }
        self.layer_norm(&format!("{name}.ln2"), d);
        self.linear(&format!("{name}.ffn.fc1"), d, d * cfg.ffn_mult);
        self.linear(&format!("{name}.ffn.fc2"), d * cfg.ffn_mult, d);
    }

    fn stack(&mut self, prefix: &str, depth: usize, cfg: &ModelConfig, cross: bool) {
        for i in 0..depth {
            self.block(&format!("{prefix}.layers.{i}"), cfg, cross);
        }
        self.layer_norm(&format!("{prefix}.ln_final"), cfg.width);
    }
}

impl MultiModalModel {
    /// Freshly initialized model. The answer decoder is only built when
    /// `with_decoder` is set (fine-tuning).
    pub fn new<R: Rng>(config: ModelConfig, with_decoder: bool, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng,
            params: ParamStore::new(),
        };
        let d = config.width;
        init.linear("visual.patch_embed", config.patch_dim(), d);
        init.embedding("visual.cls", 1, d);
        init.embedding("visual.pos", config.num_patches() + 1, d);
        init.stack("visual", config.visual_depth, &config, false);

        init.embedding("text.tok_embed", config.vocab_size, d);
        init.embedding("text.pos", config.max_text_len + 1, d);
        init.stack("text", config.text_depth, &config, false);

        init.stack("fusion", config.fusion_depth, &config, true);

        init.linear("img_proj", d, config.contrastive_dim);
        init.linear("txt_proj", d, config.contrastive_dim);
        init.linear("itm_head", d, 2);
        init.linear("mlm_head", d, config.vocab_size);

        if with_decoder {
            Self::init_decoder(&config, &mut init);
        }
        Ok(Self {
            config,
            params: init.params,
        })
    }

    fn init_decoder<R: Rng>(config: &ModelConfig, init: &mut Init<'_, R>) {
        init.embedding("decoder.tok_embed", config.vocab_size, config.width);
        init.embedding("decoder.pos", config.max_answer_len, config.width);
        init.stack("decoder", config.decoder_depth, config, true);
        init.linear("decoder.head", config.width, config.vocab_size);
    }

    /// Fresh decoder parameters for this architecture, in store order.
    pub fn fresh_decoder<R: Rng>(config: &ModelConfig, rng: &mut R) -> ParamStore<f64> {
        let mut init = Init {
            rng,
            params: ParamStore::new(),
        };
        Self::init_decoder(config, &mut init);
        init.params
    }

    pub fn has_decoder(&self) -> bool {
        self.params.contains("decoder.head.weight")
    }

    /// Names under a component prefix such as `"visual."`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.params.names().filter(move |n| n.starts_with(prefix))
    }
}

#[cfg(test)]
mod tests;
