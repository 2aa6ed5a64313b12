//! Multi-inquiry decoder: `M` parallel inquiry heads per layer whose query
//! sets are fused back into one, optionally sharing a single self-attention
//! block (Lite-MI).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{query_self_attention, BlockConfig, InquiryHead, MultiHeadAttention, QuerySet};
use crate::encoder::pairing;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Init, Scope};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    /// Elementwise sum of the head outputs.
    Add,
    /// Project each head to `C / M`, then concatenate.
    LinearConcat,
    /// Concatenate to `M * C`, then project to `C`.
    #[default]
    ConcatLinear,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::Add, FusionKind::LinearConcat, FusionKind::ConcatLinear];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Add => "add",
            FusionKind::LinearConcat => "linear-concat",
            FusionKind::ConcatLinear => "concat-linear",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown fusion kind {s:?} (add, linear-concat, concat-linear)")))
    }
}

/// Fusion parameters for one layer.
#[derive(Debug, Clone)]
pub enum Fusion {
    Add,
    LinearConcat(Vec<Linear>),
    ConcatLinear(Linear),
}

impl Fusion {
    pub fn new(scope: &mut Scope<'_>, kind: FusionKind, heads: usize, dim: usize) -> Result<Self> {
        Ok(match kind {
            FusionKind::Add => Fusion::Add,
            FusionKind::ConcatLinear => Fusion::ConcatLinear(Linear::new(scope, heads * dim, dim)?),
            FusionKind::LinearConcat => {
                if dim % heads != 0 {
                    return Err(Error::config(format!(
                        "linear-concat fusion needs model dim {dim} divisible by inquiry heads {heads}"
                    )));
                }
                let projs = (0..heads)
                    .map(|k| Linear::new(&mut scope.child(&format!("proj{k}")), dim, dim / heads))
                    .collect::<Result<_>>()?;
                Fusion::LinearConcat(projs)
            }
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Add => FusionKind::Add,
            Fusion::LinearConcat(_) => FusionKind::LinearConcat,
            Fusion::ConcatLinear(_) => FusionKind::ConcatLinear,
        }
    }

    pub fn param_count(kind: FusionKind, heads: usize, dim: usize) -> usize {
        match kind {
            FusionKind::Add => 0,
            FusionKind::LinearConcat => heads * Linear::param_count(dim, dim / heads),
            FusionKind::ConcatLinear => Linear::param_count(heads * dim, dim),
        }
    }
}

/// Which inquiry heads take part in a forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMask {
    enabled: Vec<bool>,
}

impl HeadMask {
    pub fn new(enabled: Vec<bool>) -> Result<Self> {
        if !enabled.iter().any(|&e| e) {
            return Err(Error::contract("head mask must enable at least one head"));
        }
        Ok(HeadMask { enabled })
    }

    pub fn all(heads: usize) -> Self {
        HeadMask {
            enabled: vec![true; heads.max(1)],
        }
    }

    /// Only head `k` (zero-based) enabled.
    pub fn only(heads: usize, k: usize) -> Result<Self> {
        if k >= heads {
            return Err(Error::contract(format!("head {k} out of range for {heads} heads")));
        }
        Self::new((0..heads).map(|i| i == k).collect())
    }

    pub fn len(&self) -> usize {
        self.enabled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enabled.is_empty()
    }

    pub fn is_enabled(&self, k: usize) -> bool {
        self.enabled.get(k).copied().unwrap_or(false)
    }

    pub fn enabled_count(&self) -> usize {
        self.enabled.iter().filter(|&&e| e).count()
    }

    pub fn is_full(&self) -> bool {
        self.enabled.iter().all(|&e| e)
    }

    pub fn bits(&self) -> &[bool] {
        &self.enabled
    }

    /// Compact label such as `1010`.
    pub fn label(&self) -> String {
        self.enabled.iter().map(|&e| if e { '1' } else { '0' }).collect()
    }
}

impl FromStr for HeadMask {
    type Err = Error;

    /// Parses `1010`-style bit strings.
    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::config(format!("head mask {s:?} must be a string of 0/1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.is_empty() {
            return Err(Error::config("empty head mask"));
        }
        Self::new(bits).map_err(|_| Error::config(format!("head mask {s:?} enables no head")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Decoder layers `L`.
    pub layers: usize,
    /// Inquiry heads per layer `M`.
    pub heads: usize,
    pub dim: usize,
    pub n_queries: usize,
    pub attn_heads: usize,
    pub ffn_dim: usize,
    pub lite: bool,
    pub fusion: FusionKind,
    /// Scale enabled fusion inputs by `M / |enabled|` when masking.
    #[serde(default)]
    pub mask_rescale: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 6,
            heads: 4,
            dim: 64,
            n_queries: 25,
            attn_heads: 8,
            ffn_dim: 256,
            lite: false,
            fusion: FusionKind::ConcatLinear,
            mask_rescale: false,
        }
    }
}

impl DecoderConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            attn_heads: self.attn_heads,
            ffn_dim: self.ffn_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("decoder needs at least one layer"));
        }
        if self.heads == 0 {
            return Err(Error::config("decoder needs at least one inquiry head"));
        }
        if self.n_queries == 0 {
            return Err(Error::config("decoder needs at least one query"));
        }
        self.block().validate()?;
        if self.fusion == FusionKind::LinearConcat && self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "linear-concat fusion needs model dim {} divisible by inquiry heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count of the decoder stack, including
    /// the learned query embeddings.
    pub fn param_count(&self) -> usize {
        let b = self.block();
        let heads = if self.lite {
            self.heads * InquiryHead::shared_param_count(&b)
                + MultiHeadAttention::param_count(self.dim)
                + LayerNorm::param_count(self.dim)
        } else {
            self.heads * InquiryHead::param_count(&b)
        };
        let per_layer = heads + Fusion::param_count(self.fusion, self.heads, self.dim);
        2 * self.n_queries * self.dim + self.layers * per_layer
    }
}

/// Shared self-attention of a Lite-MI layer.
#[derive(Debug, Clone)]
pub struct SharedSelfAttention {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct MiDecoderLayer {
    pub heads: Vec<InquiryHead>,
    pub shared: Option<SharedSelfAttention>,
    pub fusion: Fusion,
    pub mask_rescale: bool,
}

/// Per-layer forward diagnostics.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    pub self_attn_evals: usize,
    /// Pre-fusion query sets, `None` for disabled heads.
    pub head_outputs: Vec<Option<QuerySet>>,
}

impl MiDecoderLayer {
    pub fn new(scope: &mut Scope<'_>, cfg: &DecoderConfig) -> Result<Self> {
        let b = cfg.block();
        let (shared, heads) = if cfg.lite {
            let attn = MultiHeadAttention::new(&mut scope.child("shared_self_attn"), cfg.dim, cfg.attn_heads)?;
            let norm = LayerNorm::new(&mut scope.child("shared_norm1"), cfg.dim)?;
            let heads = (0..cfg.heads)
                .map(|k| InquiryHead::new_shared(&mut scope.child(&format!("head{k}")), &b, norm.clone()))
                .collect::<Result<Vec<_>>>()?;
            (Some(SharedSelfAttention { attn, norm }), heads)
        } else {
            let heads = (0..cfg.heads)
                .map(|k| InquiryHead::new(&mut scope.child(&format!("head{k}")), &b))
                .collect::<Result<Vec<_>>>()?;
            (None, heads)
        };
        let fusion = Fusion::new(&mut scope.child("fusion"), cfg.fusion, cfg.heads, cfg.dim)?;
        Ok(MiDecoderLayer {
            heads,
            shared,
            fusion,
            mask_rescale: cfg.mask_rescale,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn is_lite(&self) -> bool {
        self.shared.is_some()
    }

    pub fn forward(
        &self,
        q_prev: &QuerySet,
        memory: &Tensor,
        pos: Option<&Tensor>,
        batch: usize,
        mask: &HeadMask,
    ) -> Result<QuerySet> {
        Ok(self.forward_traced(q_prev, memory, pos, batch, mask)?.0)
    }

    pub fn forward_traced(
        &self,
        q_prev: &QuerySet,
        memory: &Tensor,
        pos: Option<&Tensor>,
        batch: usize,
        mask: &HeadMask,
    ) -> Result<(QuerySet, LayerTrace)> {
        if mask.len() != self.n_heads() {
            return Err(Error::contract(format!(
                "head mask has {} entries for {} inquiry heads",
                mask.len(),
                self.n_heads()
            )));
        }
        if mask.enabled_count() == 0 {
            return Err(Error::contract("head mask must enable at least one head"));
        }
        let mut trace = LayerTrace::default();
        let shared_sa = match &self.shared {
            Some(s) => {
                trace.self_attn_evals += 1;
                Some(query_self_attention(&s.attn, q_prev, pos, batch)?)
            }
            None => None,
        };
        for (k, head) in self.heads.iter().enumerate() {
            if !mask.is_enabled(k) {
                trace.head_outputs.push(None);
                continue;
            }
            if shared_sa.is_none() {
                trace.self_attn_evals += 1;
            }
            let out = head.forward(q_prev, memory, pos, batch, shared_sa.as_ref())?;
            trace.head_outputs.push(Some(out));
        }
        let scale = if self.mask_rescale {
            self.n_heads() as f64 / mask.enabled_count() as f64
        } else {
            1.0
        };
        let fused = fuse_slots(&trace.head_outputs, &self.fusion, scale)?;
        Ok((fused, trace))
    }
}

/// Fuses `M` query sets of equal shape.
pub fn fuse_queries(parts: &[Tensor], fusion: &Fusion) -> Result<Tensor> {
    let slots: Vec<Option<Tensor>> = parts.iter().cloned().map(Some).collect();
    fuse_slots(&slots, fusion, 1.0)
}

/// Fusion with disabled slots. A `None` slot contributes zeros to its
/// concatenation block (or nothing to the sum for `Add`).
fn fuse_slots(slots: &[Option<Tensor>], fusion: &Fusion, scale: f64) -> Result<Tensor> {
    let first = slots
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::contract("fusion needs at least one enabled query set"))?;
    let shape = first.shape().to_vec();
    for p in slots.iter().flatten() {
        if p.shape() != shape.as_slice() {
            return Err(Error::dim("fuse_queries", p.shape(), &shape));
        }
    }
    let (rows, dim) = first.dims2()?;
    let scaled = |t: &Tensor| if scale == 1.0 { t.clone() } else { t.scale(scale) };
    match fusion {
        Fusion::Add => {
            let mut parts = slots.iter().flatten();
            let mut acc = scaled(parts.next().expect("checked above"));
            for p in parts {
                acc = acc.add(&scaled(p))?;
            }
            Ok(acc)
        }
        Fusion::ConcatLinear(lin) => {
            if lin.in_dim() != slots.len() * dim {
                return Err(Error::dim("fuse_queries", &[rows, slots.len() * dim], lin.weight.shape()));
            }
            let blocks: Vec<Tensor> = slots
                .iter()
                .map(|s| match s {
                    Some(t) => scaled(t),
                    None => Tensor::zeros(&[rows, dim]),
                })
                .collect();
            lin.forward(&Tensor::concat(&blocks, 1)?)
        }
        Fusion::LinearConcat(projs) => {
            if projs.len() != slots.len() {
                return Err(Error::contract(format!(
                    "{} fusion projections for {} query sets",
                    projs.len(),
                    slots.len()
                )));
            }
            let blocks = slots
                .iter()
                .zip(projs)
                .map(|(s, p)| match s {
                    Some(t) => p.forward(&scaled(t)),
                    None => Ok(Tensor::zeros(&[rows, p.out_dim()])),
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::concat(&blocks, 1)
        }
    }
}

/// Everything a decoder pass produces.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `Q_1 .. Q_L`.
    pub queries: Vec<QuerySet>,
    /// One-based encoder level consumed by each layer.
    pub feature_levels: Vec<usize>,
    pub traces: Vec<LayerTrace>,
}

/// Runs `Q_i = layer_i(Q_{i-1}, fused[L - i + 1])` for `i = 1..L`.
///
/// `fused_features[j - 1]` holds encoder level `j`.
pub fn decoder_forward(
    q0: &QuerySet,
    pos: Option<&Tensor>,
    fused_features: &[Tensor],
    layers: &[MiDecoderLayer],
    mask: &HeadMask,
    batch: usize,
) -> Result<DecoderOutput> {
    let l = layers.len();
    if l == 0 || fused_features.len() != l {
        return Err(Error::contract(format!(
            "{} feature levels for {} decoder layers",
            fused_features.len(),
            l
        )));
    }
    let mut out = DecoderOutput {
        queries: Vec::with_capacity(l),
        feature_levels: Vec::with_capacity(l),
        traces: Vec::with_capacity(l),
    };
    let mut q = q0.clone();
    for (i, layer) in layers.iter().enumerate() {
        let j = pairing(i + 1, l)?;
        let (next, trace) = layer.forward_traced(&q, &fused_features[j - 1], pos, batch, mask)?;
        out.feature_levels.push(j);
        out.traces.push(trace);
        out.queries.push(next.clone());
        q = next;
    }
    Ok(out)
}

/// Learned queries plus the layer stack.
#[derive(Debug, Clone)]
pub struct MiDecoder {
    pub cfg: DecoderConfig,
    pub query_content: Tensor,
    pub query_pos: Tensor,
    pub layers: Vec<MiDecoderLayer>,
}

impl MiDecoder {
    pub fn new(scope: &mut Scope<'_>, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (query_content, query_pos) = {
            let mut qs = scope.child("query");
            (
                qs.param("content", &[cfg.n_queries, cfg.dim], Init::Xavier)?,
                qs.param("pos", &[cfg.n_queries, cfg.dim], Init::Xavier)?,
            )
        };
        let layers = (0..cfg.layers)
            .map(|i| MiDecoderLayer::new(&mut scope.child(&format!("layer{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(MiDecoder {
            cfg: *cfg,
            query_content,
            query_pos,
            layers,
        })
    }

    pub fn forward(&self, fused_features: &[Tensor], batch: usize, mask: &HeadMask) -> Result<DecoderOutput> {
        let q0 = self.query_content.tile_rows(batch)?;
        let pos = self.query_pos.tile_rows(batch)?;
        decoder_forward(&q0, Some(&pos), fused_features, &self.layers, mask, batch)
    }
}
