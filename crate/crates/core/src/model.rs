//! The full detector: patch tokens, encoder with optional feature
//! interaction, multi-inquiry decoder and a shared prediction head.

use serde::{Deserialize, Serialize};

use crate::attention::BlockConfig;
use crate::decoder::{DecoderConfig, DecoderOutput, FusionKind, HeadMask, MiDecoder};
use crate::detection::{HeadOutput, PredictionHead};
use crate::encoder::{encoder_forward, ufi_fuse, EncoderFeatures, EncoderLayer, Ufi};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};
use crate::rng::{stream_rng, Stream};
use crate::synth::tokenize::PatchEmbed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub attn_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Inquiry heads per decoder layer `M`.
    pub heads: usize,
    pub n_queries: usize,
    pub lite: bool,
    pub fusion: FusionKind,
    pub ufi: bool,
    pub ufi_shared: bool,
    pub mask_rescale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch: 4,
            n_classes: 3,
            dim: 64,
            attn_heads: 8,
            ffn_dim: 256,
            enc_layers: 3,
            dec_layers: 3,
            heads: 4,
            n_queries: 25,
            lite: false,
            fusion: FusionKind::ConcatLinear,
            ufi: true,
            ufi_shared: false,
            mask_rescale: false,
        }
    }
}

impl ModelConfig {
    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.dec_layers,
            heads: self.heads,
            dim: self.dim,
            n_queries: self.n_queries,
            attn_heads: self.attn_heads,
            ffn_dim: self.ffn_dim,
            lite: self.lite,
            fusion: self.fusion,
            mask_rescale: self.mask_rescale,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            attn_heads: self.attn_heads,
            ffn_dim: self.ffn_dim,
        }
    }

    pub fn n_tokens(&self) -> usize {
        let g = self.image_size / self.patch.max(1);
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder().validate()?;
        if self.enc_layers == 0 {
            return Err(Error::config("encoder needs at least one layer"));
        }
        if self.enc_layers != self.dec_layers {
            return Err(Error::config(format!(
                "encoder depth {} must equal decoder depth {} so each decoder layer has an encoder level",
                self.enc_layers, self.dec_layers
            )));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::config(format!("model dim {} must be divisible by 4", self.dim)));
        }
        if self.n_classes == 0 {
            return Err(Error::config("need at least one class"));
        }
        Ok(())
    }

    /// Closed-form parameter counts per top-level module.
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let patch = crate::layers::Linear::param_count(self.patch * self.patch * 3, self.dim);
        let encoder = self.enc_layers * EncoderLayer::param_count(&self.block());
        let ufi = if self.ufi {
            Ufi::param_count(self.enc_layers, self.dim, self.ufi_shared)
        } else {
            0
        };
        let decoder = self.decoder().param_count();
        let head = PredictionHead::param_count(self.dim, self.n_classes);
        ParamBreakdown {
            patch,
            encoder,
            ufi,
            decoder,
            head,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub patch: usize,
    pub encoder: usize,
    pub ufi: usize,
    pub decoder: usize,
    pub head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.patch + self.encoder + self.ufi + self.decoder + self.head
    }

    /// Same breakdown enumerated from a live registry.
    pub fn from_registry(store: &ParamStore) -> Self {
        ParamBreakdown {
            patch: store.numel_under("patch"),
            encoder: store.numel_under("encoder"),
            ufi: store.numel_under("ufi"),
            decoder: store.numel_under("decoder"),
            head: store.numel_under("head"),
        }
    }
}

pub struct MiDetr {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub patch: PatchEmbed,
    pub encoder: Vec<EncoderLayer>,
    pub ufi: Option<Ufi>,
    pub decoder: MiDecoder,
    pub head: PredictionHead,
}

/// One forward pass over a batch.
pub struct ModelOutput {
    /// Predictions after every decoder layer.
    pub per_layer: Vec<HeadOutput>,
    pub decoder: DecoderOutput,
    pub features: EncoderFeatures,
    pub batch: usize,
}

impl ModelOutput {
    pub fn last(&self) -> &HeadOutput {
        self.per_layer.last().expect("at least one decoder layer")
    }
}

impl MiDetr {
    /// Fresh model with parameters drawn from the init stream of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut root = Scope::root(&mut store, &mut rng);
        let patch = PatchEmbed::new(&mut root.child("patch"), cfg.image_size, cfg.patch, cfg.dim)?;
        let block = cfg.block();
        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(&mut root.child("encoder").child(&format!("layer{i}")), &block))
            .collect::<Result<Vec<_>>>()?;
        let ufi = if cfg.ufi {
            Some(Ufi::new(&mut root.child("ufi"), cfg.enc_layers, cfg.dim, cfg.ufi_shared)?)
        } else {
            None
        };
        let decoder = MiDecoder::new(&mut root.child("decoder"), &cfg.decoder())?;
        let head = PredictionHead::new(&mut root.child("head"), cfg.dim, cfg.n_classes)?;
        Ok(MiDetr {
            cfg: *cfg,
            store,
            patch,
            encoder,
            ufi,
            decoder,
            head,
        })
    }

    pub fn full_mask(&self) -> HeadMask {
        HeadMask::all(self.cfg.heads)
    }

    pub fn forward(&self, images: &[&[f64]], mask: &HeadMask) -> Result<ModelOutput> {
        let batch = images.len();
        if batch == 0 {
            return Err(Error::contract("empty batch"));
        }
        let tokens = self.patch.forward(images)?;
        self.forward_tokens(&tokens, batch, mask)
    }

    /// Forward from already embedded tokens, `(batch * n_tokens) x C`.
    pub fn forward_tokens(&self, tokens: &Tensor, batch: usize, mask: &HeadMask) -> Result<ModelOutput> {
        let features = ufi_fuse(encoder_forward(tokens, &self.encoder, batch)?, self.ufi.as_ref())?;
        let decoder = self.decoder.forward(&features.fused, batch, mask)?;
        let per_layer = decoder
            .queries
            .iter()
            .map(|q| self.head.forward(q))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelOutput {
            per_layer,
            decoder,
            features,
            batch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch: 2,
            dim: 8,
            attn_heads: 2,
            ffn_dim: 16,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            n_queries: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn breakdown_matches_registry() {
        for ufi in [false, true] {
            for shared in [false, true] {
                for lite in [false, true] {
                    let cfg = ModelConfig {
                        ufi,
                        ufi_shared: shared,
                        lite,
                        ..tiny()
                    };
                    let m = MiDetr::new(&cfg, 0).unwrap();
                    let reg = ParamBreakdown::from_registry(&m.store);
                    assert_eq!(reg, cfg.param_breakdown());
                    assert_eq!(reg.total(), m.store.numel());
                }
            }
        }
        let m = MiDetr::new(&ModelConfig::default(), 0).unwrap();
        assert_eq!(ParamBreakdown::from_registry(&m.store), ModelConfig::default().param_breakdown());
    }

    #[test]
    fn depth_mismatch_is_rejected() {
        let cfg = ModelConfig {
            enc_layers: 3,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny();
        let m = MiDetr::new(&cfg, 3).unwrap();
        let img = vec![0.3; 8 * 8 * 3];
        let out = m.forward(&[&img, &img], &m.full_mask()).unwrap();
        assert_eq!(out.per_layer.len(), 2);
        assert_eq!(out.last().boxes.shape(), &[6, 4]);
        assert_eq!(out.decoder.feature_levels, vec![2, 1]);
        let again = MiDetr::new(&cfg, 3).unwrap().forward(&[&img, &img], &m.full_mask()).unwrap();
        assert_eq!(out.last().logits.to_vec(), again.last().logits.to_vec());
    }

    #[test]
    fn images_in_a_batch_do_not_interact() {
        let m = MiDetr::new(&tiny(), 4).unwrap();
        let a: Vec<f64> = (0..192).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let b: Vec<f64> = (0..192).map(|i| (i as f64 * 0.11).cos().abs()).collect();
        let pair = m.forward(&[&a, &b], &m.full_mask()).unwrap();
        let alone = m.forward(&[&b], &m.full_mask()).unwrap();
        let rows = pair.last().per_image(2).unwrap();
        let single = alone.last().per_image(1).unwrap();
        for (x, y) in rows[1].logits.iter().zip(&single[0].logits) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
