//! Transformer sub-blocks and the inquiry head.
//!
//! An inquiry head is one self-attention, cross-attention and feed-forward
//! pass of a set of object queries over image features, each sub-block
//! wrapped in a residual connection followed by layer normalization:
//!
//! ```text
//! x1  = LN1(q + SelfAttn(q + pos, q + pos, q))
//! x2  = LN2(x1 + CrossAttn(x1 + pos, e, e))
//! out = LN3(x2 + FFN(x2))
//! ```
//!
//! All activations are stacked over the batch along rows: a batch of `B`
//! query sets of `N` queries is a `(B * N) x C` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::Scope;
use crate::tensor::Tensor;

/// Object queries of one decoder stage, `(batch * n_q) x C`.
pub type QuerySet = Tensor;

/// Dimensions shared by every attention/FFN block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub attn_heads: usize,
    pub ffn_dim: usize,
}

impl BlockConfig {
    pub fn new(dim: usize, attn_heads: usize) -> Self {
        BlockConfig {
            dim,
            attn_heads,
            ffn_dim: 4 * dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.attn_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::config("block dimensions must be positive"));
        }
        if self.dim % self.attn_heads != 0 {
            return Err(Error::config(format!(
                "model dim {} must be divisible by attention heads {}",
                self.dim, self.attn_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(scope: &mut Scope<'_>, dim: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::config(format!(
                "model dim {dim} must be divisible by attention heads {n_heads}"
            )));
        }
        Ok(MultiHeadAttention {
            w_q: Linear::new(&mut scope.child("w_q"), dim, dim)?,
            w_k: Linear::new(&mut scope.child("w_k"), dim, dim)?,
            w_v: Linear::new(&mut scope.child("w_v"), dim, dim)?,
            w_o: Linear::new(&mut scope.child("w_o"), dim, dim)?,
            n_heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.in_dim()
    }

    fn check(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
        let c = self.dim();
        let (_, cq) = q.dims2()?;
        if cq != c {
            return Err(Error::dim("multi_head_attention", q.shape(), &[c, c]));
        }
        if k.shape() != v.shape() || k.dims2()?.1 != c {
            return Err(Error::dim("multi_head_attention", k.shape(), v.shape()));
        }
        Ok(())
    }

    /// `softmax(Q K^T / sqrt(d)) V` per attention head, heads concatenated and
    /// projected by `w_o`.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor, batch: usize) -> Result<Tensor> {
        self.check(q, k, v)?;
        let qp = self.w_q.forward(q)?;
        let kp = self.w_k.forward(k)?;
        let vp = self.w_v.forward(v)?;
        let ctx = Tensor::attention(&qp, &kp, &vp, batch, self.n_heads)?;
        self.w_o.forward(&ctx)
    }

    /// Attention weights `[batch][head][n_q][n_k]`.
    pub fn weights(&self, q: &Tensor, k: &Tensor, batch: usize) -> Result<Vec<f64>> {
        self.check(q, k, k)?;
        let qp = self.w_q.forward(q)?;
        let kp = self.w_k.forward(k)?;
        Tensor::attention_weights(&qp, &kp, batch, self.n_heads)
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(scope: &mut Scope<'_>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            w1: Linear::new(&mut scope.child("w1"), dim, hidden)?,
            w2: Linear::new(&mut scope.child("w2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.w2.forward(&self.w1.forward(x)?.gelu())
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden) + Linear::param_count(hidden, dim)
    }
}

/// Adds positional embeddings when present.
pub(crate) fn with_pos(x: &Tensor, pos: Option<&Tensor>) -> Result<Tensor> {
    match pos {
        Some(p) => x.add(p),
        None => Ok(x.clone()),
    }
}

/// Self-attention over a query set, with positions on queries and keys.
pub fn query_self_attention(
    attn: &MultiHeadAttention,
    queries: &Tensor,
    pos: Option<&Tensor>,
    batch: usize,
) -> Result<Tensor> {
    let qk = with_pos(queries, pos)?;
    attn.forward(&qk, &qk, queries, batch)
}

/// One self-attention / cross-attention / FFN pass.
///
/// Under Lite-MI the head owns no self-attention; `norm1` is then a handle to
/// the layer's shared normalization and the caller supplies the shared
/// self-attention output.
#[derive(Debug, Clone)]
pub struct InquiryHead {
    pub self_attn: Option<MultiHeadAttention>,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl InquiryHead {
    /// Full head with its own self-attention.
    pub fn new(scope: &mut Scope<'_>, cfg: &BlockConfig) -> Result<Self> {
        let self_attn = MultiHeadAttention::new(&mut scope.child("self_attn"), cfg.dim, cfg.attn_heads)?;
        let norm1 = LayerNorm::new(&mut scope.child("norm1"), cfg.dim)?;
        Self::assemble(scope, cfg, Some(self_attn), norm1)
    }

    /// Head that relies on a shared self-attention block and its norm.
    pub fn new_shared(scope: &mut Scope<'_>, cfg: &BlockConfig, shared_norm: LayerNorm) -> Result<Self> {
        Self::assemble(scope, cfg, None, shared_norm)
    }

    fn assemble(
        scope: &mut Scope<'_>,
        cfg: &BlockConfig,
        self_attn: Option<MultiHeadAttention>,
        norm1: LayerNorm,
    ) -> Result<Self> {
        Ok(InquiryHead {
            self_attn,
            norm1,
            cross_attn: MultiHeadAttention::new(&mut scope.child("cross_attn"), cfg.dim, cfg.attn_heads)?,
            norm2: LayerNorm::new(&mut scope.child("norm2"), cfg.dim)?,
            ffn: FeedForward::new(&mut scope.child("ffn"), cfg.dim, cfg.ffn_dim)?,
            norm3: LayerNorm::new(&mut scope.child("norm3"), cfg.dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.cross_attn.dim()
    }

    /// `SelfAtt(q_prev)` through this head's own block.
    pub fn self_attention(&self, q_prev: &Tensor, pos: Option<&Tensor>, batch: usize) -> Result<Tensor> {
        let attn = self
            .self_attn
            .as_ref()
            .ok_or_else(|| Error::contract("inquiry head has no self-attention of its own"))?;
        query_self_attention(attn, q_prev, pos, batch)
    }

    pub fn forward(
        &self,
        q_prev: &QuerySet,
        memory: &Tensor,
        pos: Option<&Tensor>,
        batch: usize,
        self_attn_override: Option<&Tensor>,
    ) -> Result<QuerySet> {
        let c = self.dim();
        let (_, cq) = q_prev.dims2()?;
        let (_, ce) = memory.dims2()?;
        if cq != c || ce != c {
            return Err(Error::dim("inquiry_head_forward", q_prev.shape(), memory.shape()));
        }
        let sa = match self_attn_override {
            Some(o) => {
                if o.shape() != q_prev.shape() {
                    return Err(Error::dim("inquiry_head_forward", o.shape(), q_prev.shape()));
                }
                o.clone()
            }
            None => self.self_attention(q_prev, pos, batch)?,
        };
        let x1 = self.norm1.forward(&q_prev.add(&sa)?)?;
        let ca = self
            .cross_attn
            .forward(&with_pos(&x1, pos)?, memory, memory, batch)?;
        let x2 = self.norm2.forward(&x1.add(&ca)?)?;
        let ff = self.ffn.forward(&x2)?;
        self.norm3.forward(&x2.add(&ff)?)
    }

    /// Parameters of a full head.
    pub fn param_count(cfg: &BlockConfig) -> usize {
        2 * MultiHeadAttention::param_count(cfg.dim)
            + FeedForward::param_count(cfg.dim, cfg.ffn_dim)
            + 3 * LayerNorm::param_count(cfg.dim)
    }

    /// Parameters owned by a head that shares its self-attention and norm.
    pub fn shared_param_count(cfg: &BlockConfig) -> usize {
        MultiHeadAttention::param_count(cfg.dim)
            + FeedForward::param_count(cfg.dim, cfg.ffn_dim)
            + 2 * LayerNorm::param_count(cfg.dim)
    }
}
