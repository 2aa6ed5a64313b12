//! Token encoder that keeps every layer's output, and the U-like feature
//! interaction that pairs encoder levels with decoder layers in reverse.

use crate::attention::{BlockConfig, FeedForward, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::Scope;
use crate::tensor::Tensor;

/// Post-norm self-attention + FFN layer over image tokens.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(scope: &mut Scope<'_>, cfg: &BlockConfig) -> Result<Self> {
        Ok(EncoderLayer {
            self_attn: MultiHeadAttention::new(&mut scope.child("self_attn"), cfg.dim, cfg.attn_heads)?,
            norm1: LayerNorm::new(&mut scope.child("norm1"), cfg.dim)?,
            ffn: FeedForward::new(&mut scope.child("ffn"), cfg.dim, cfg.ffn_dim)?,
            norm2: LayerNorm::new(&mut scope.child("norm2"), cfg.dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, batch: usize) -> Result<Tensor> {
        let sa = self.self_attn.forward(x, x, x, batch)?;
        let x1 = self.norm1.forward(&x.add(&sa)?)?;
        let ff = self.ffn.forward(&x1)?;
        self.norm2.forward(&x1.add(&ff)?)
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        MultiHeadAttention::param_count(cfg.dim)
            + FeedForward::param_count(cfg.dim, cfg.ffn_dim)
            + 2 * LayerNorm::param_count(cfg.dim)
    }
}

/// Encoder outputs `E_1 .. E_L` and their fused counterparts; index `j - 1`
/// holds level `j`.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    pub per_layer: Vec<Tensor>,
    pub fused: Vec<Tensor>,
    pub n_tokens: usize,
}

impl EncoderFeatures {
    pub fn depth(&self) -> usize {
        self.per_layer.len()
    }

    pub fn last(&self) -> &Tensor {
        self.per_layer.last().expect("encoder has at least one layer")
    }
}

/// Runs the encoder stack on position-encoded tokens. `fused` is left empty.
pub fn encoder_forward(tokens: &Tensor, layers: &[EncoderLayer], batch: usize) -> Result<EncoderFeatures> {
    if layers.is_empty() {
        return Err(Error::contract("encoder needs at least one layer"));
    }
    let (rows, _) = tokens.dims2()?;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::dim("encoder_forward", tokens.shape(), &[batch]));
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut x = tokens.clone();
    for layer in layers {
        x = layer.forward(&x, batch)?;
        per_layer.push(x.clone());
    }
    Ok(EncoderFeatures {
        per_layer,
        fused: Vec::new(),
        n_tokens: rows / batch,
    })
}

/// Maps `(2C) -> C` fusing level `j` with the last level, for `j < L`.
#[derive(Debug, Clone)]
pub enum Ufi {
    PerLevel(Vec<Linear>),
    Shared(Linear),
}

impl Ufi {
    pub fn new(scope: &mut Scope<'_>, levels: usize, dim: usize, shared: bool) -> Result<Self> {
        if shared {
            Ok(Ufi::Shared(Linear::new(&mut scope.child("shared"), 2 * dim, dim)?))
        } else {
            let maps = (1..levels)
                .map(|j| Linear::new(&mut scope.child(&format!("level{j}")), 2 * dim, dim))
                .collect::<Result<_>>()?;
            Ok(Ufi::PerLevel(maps))
        }
    }

    /// Map applied to one-based level `j < L`.
    pub fn map(&self, j: usize) -> Option<&Linear> {
        match self {
            Ufi::PerLevel(maps) => maps.get(j.checked_sub(1)?),
            Ufi::Shared(lin) => Some(lin),
        }
    }

    pub fn param_count(levels: usize, dim: usize, shared: bool) -> usize {
        let one = Linear::param_count(2 * dim, dim);
        if shared {
            one
        } else {
            levels.saturating_sub(1) * one
        }
    }
}

/// Fills `fused`: `W_j [E_j | E_L] + b_j` for `j < L`, `E_L` at `j = L`.
/// Without UFI every level is replaced by `E_L`.
pub fn ufi_fuse(mut ef: EncoderFeatures, ufi: Option<&Ufi>) -> Result<EncoderFeatures> {
    let l = ef.depth();
    let last = ef.last().clone();
    let mut fused = Vec::with_capacity(l);
    for j in 1..=l {
        let level = match ufi {
            Some(u) if j < l => {
                let map = u
                    .map(j)
                    .ok_or_else(|| Error::contract(format!("no feature-interaction map for level {j} of {l}")))?;
                map.forward(&Tensor::concat(&[ef.per_layer[j - 1].clone(), last.clone()], 1)?)?
            }
            _ => last.clone(),
        };
        fused.push(level);
    }
    ef.fused = fused;
    Ok(ef)
}

/// Encoder level consumed by decoder layer `i`, both one-based: `L - i + 1`.
pub fn pairing(i: usize, l: usize) -> Result<usize> {
    if i == 0 || i > l {
        return Err(Error::contract(format!("decoder layer {i} outside 1..={l}")));
    }
    Ok(l - i + 1)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;
    use crate::gradcheck::{check_leaves, DEFAULT_EPS};
    use crate::layers::{eye, fill};
    use crate::params::ParamStore;
    use crate::rng::{stream_rng, Stream};

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Eval, 7);
        Tensor::new((0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[rows, cols]).unwrap()
    }

    fn cfg() -> BlockConfig {
        BlockConfig {
            dim: 8,
            attn_heads: 2,
            ffn_dim: 16,
        }
    }

    fn build(levels: usize, shared: bool) -> (ParamStore, Vec<EncoderLayer>, Ufi) {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(3, Stream::Init, 0);
        let mut root = Scope::root(&mut store, &mut rng);
        let layers = (0..levels)
            .map(|i| EncoderLayer::new(&mut root.child(&format!("enc{i}")), &cfg()).unwrap())
            .collect();
        let ufi = Ufi::new(&mut root.child("ufi"), levels, 8, shared).unwrap();
        (store, layers, ufi)
    }

    #[test]
    fn pairing_examples() {
        assert_eq!(pairing(1, 6).unwrap(), 6);
        assert_eq!(pairing(6, 6).unwrap(), 1);
        assert_eq!(pairing(1, 1).unwrap(), 1);
        assert!(pairing(0, 3).is_err());
        assert!(pairing(4, 3).is_err());
    }

    proptest! {
        #[test]
        fn pairing_is_an_involutive_bijection(l in 1usize..40) {
            let mut seen: Vec<usize> = (1..=l).map(|i| pairing(i, l).unwrap()).collect();
            for i in 1..=l {
                prop_assert_eq!(pairing(pairing(i, l).unwrap(), l).unwrap(), i);
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (1..=l).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_layer_encoder() {
        let (_, layers, _) = build(1, false);
        let x = random(6, 8, 1);
        let ef = encoder_forward(&x, &layers, 1).unwrap();
        assert_eq!(ef.per_layer.len(), 1);
        assert_eq!(ef.per_layer[0].to_vec(), layers[0].forward(&x, 1).unwrap().to_vec());
    }

    #[test]
    fn levels_differ_on_random_init() {
        let (_, layers, _) = build(3, false);
        let ef = encoder_forward(&random(12, 8, 2), &layers, 2).unwrap();
        assert_eq!(ef.n_tokens, 6);
        assert_ne!(ef.per_layer[0].to_vec(), ef.per_layer[2].to_vec());
        assert_ne!(ef.per_layer[1].to_vec(), ef.per_layer[2].to_vec());
    }

    #[test]
    fn last_level_passes_through_and_per_layer_is_untouched() {
        let (_, layers, ufi) = build(3, false);
        let ef = encoder_forward(&random(6, 8, 3), &layers, 1).unwrap();
        let before: Vec<Vec<f64>> = ef.per_layer.iter().map(Tensor::to_vec).collect();
        let ef = ufi_fuse(ef, Some(&ufi)).unwrap();
        assert_eq!(ef.fused.len(), 3);
        assert_eq!(ef.fused[2].to_vec(), ef.per_layer[2].to_vec());
        assert_ne!(ef.fused[0].to_vec(), ef.per_layer[2].to_vec());
        let after: Vec<Vec<f64>> = ef.per_layer.iter().map(Tensor::to_vec).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn selector_weights_pick_either_side() {
        let (_, layers, ufi) = build(2, false);
        let map = ufi.map(1).unwrap();
        let ef = encoder_forward(&random(5, 8, 4), &layers, 1).unwrap();
        // [I; 0] selects E_j.
        fill(&map.weight, &eye(16, 8));
        let left = ufi_fuse(ef.clone(), Some(&ufi)).unwrap();
        assert_eq!(left.fused[0].to_vec(), ef.per_layer[0].to_vec());
        // [0; I] selects E_L.
        let mut right_sel = vec![0.0; 16 * 8];
        right_sel[64..].copy_from_slice(&eye(8, 8));
        fill(&map.weight, &right_sel);
        let right = ufi_fuse(ef.clone(), Some(&ufi)).unwrap();
        assert_eq!(right.fused[0].to_vec(), ef.per_layer[1].to_vec());
    }

    #[test]
    fn ufi_off_feeds_last_level_everywhere() {
        let (_, layers, _) = build(3, false);
        let ef = ufi_fuse(encoder_forward(&random(6, 8, 5), &layers, 1).unwrap(), None).unwrap();
        for f in &ef.fused {
            assert_eq!(f.to_vec(), ef.per_layer[2].to_vec());
        }
    }

    #[test]
    fn shared_map_counts() {
        let (store, _, ufi) = build(4, true);
        assert!(matches!(ufi, Ufi::Shared(_)));
        assert_eq!(store.numel_under("ufi"), Ufi::param_count(4, 8, true));
        let (store, _, _) = build(4, false);
        assert_eq!(store.numel_under("ufi"), Ufi::param_count(4, 8, false));
        assert_eq!(store.numel_under("enc0"), EncoderLayer::param_count(&cfg()));
    }

    #[test]
    fn two_layer_encoder_backward_matches_finite_differences() {
        let (store, layers, ufi) = build(2, false);
        let x = Tensor::leaf(random(5, 8, 6).to_vec(), &[5, 8]).unwrap();
        let w = random(5, 8, 7);
        let mut leaves = store.named_tensors();
        leaves.push(("tokens".into(), x.clone()));
        let reports = check_leaves(
            &leaves,
            || {
                let ef = ufi_fuse(encoder_forward(&x, &layers, 1)?, Some(&ufi))?;
                Ok(ef.fused[0].add(&ef.fused[1])?.mul(&w)?.mean())
            },
            DEFAULT_EPS,
        )
        .unwrap();
        for (name, r) in reports {
            assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
        }
    }
}
