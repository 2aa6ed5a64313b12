//! Finite-difference verification suites at three granularities: single
//! tensor ops, individual layers, and a whole detector under its loss.

use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::{BlockConfig, InquiryHead, MultiHeadAttention};
use crate::decoder::{DecoderConfig, FusionKind, HeadMask, MiDecoderLayer};
use crate::detection::{detection_loss, match_layer, LossConfig, PredictionHead};
use crate::encoder::{encoder_forward, ufi_fuse, EncoderLayer, Ufi};
use crate::error::{Error, Result};
use crate::gradcheck::{check_leaves, finite_diff_check, GradCheck, DEFAULT_EPS};
use crate::model::{MiDetr, ModelConfig};
use crate::params::{ParamStore, Scope};
use crate::rng::{stream_rng, Rng, Stream};
use crate::synth::{scene_at, PatchEmbed, SceneConfig};
use crate::tensor::{no_grad, Tensor};

/// Pass bound on the max relative error of every target.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradScope {
    Op,
    Layer,
    Model,
}

impl FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(GradScope::Op),
            "layer" => Ok(GradScope::Layer),
            "model" => Ok(GradScope::Model),
            other => Err(Error::config(format!("unknown gradcheck scope {other:?} (op, layer, model)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

impl TargetReport {
    fn new(target: impl Into<String>, r: &GradCheck) -> Self {
        TargetReport {
            target: target.into(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            passed: r.max_rel_error < TOLERANCE,
        }
    }
}

pub fn run(scope: GradScope) -> Result<Vec<TargetReport>> {
    match scope {
        GradScope::Op => op_suite(),
        GradScope::Layer => layer_suite(),
        GradScope::Model => model_suite(),
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).expect("shape matches data")
}

/// Weighted mean keeps the scalar at unit scale for every op.
fn weighted(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(y.mul(w)?.mean())
}

fn op_suite() -> Result<Vec<TargetReport>> {
    let mut rng = stream_rng(0, Stream::Eval, 101);
    let a = random(&mut rng, &[4, 6]);
    let b = random(&mut rng, &[4, 6]);
    let m = random(&mut rng, &[6, 5]);
    let bias = random(&mut rng, &[6]);
    let gamma = random(&mut rng, &[6]);
    let w46 = random(&mut rng, &[4, 6]);
    let w45 = random(&mut rng, &[4, 5]);
    let w64 = random(&mut rng, &[6, 4]);
    let w86 = random(&mut rng, &[8, 6]);
    let w412 = random(&mut rng, &[4, 12]);
    let w24 = random(&mut rng, &[2, 4]);
    let q = random(&mut rng, &[6, 4]);
    let kv = random(&mut rng, &[10, 4]);
    let w_att = random(&mut rng, &[6, 4]);

    type OpFn<'a> = Box<dyn Fn(&Tensor) -> Result<Tensor> + 'a>;
    let cases: Vec<(&str, &Tensor, OpFn<'_>)> = vec![
        ("add", &a, Box::new(|x| weighted(&x.add(&b)?, &w46))),
        ("sub", &a, Box::new(|x| weighted(&b.sub(x)?, &w46))),
        ("mul", &a, Box::new(|x| weighted(&x.mul(&b)?, &w46))),
        ("add_bias", &bias, Box::new(|x| weighted(&a.add_bias(x)?, &w46))),
        ("scale", &a, Box::new(|x| weighted(&x.scale(-1.7), &w46))),
        ("relu", &a, Box::new(|x| weighted(&x.relu(), &w46))),
        ("gelu", &a, Box::new(|x| weighted(&x.gelu(), &w46))),
        ("sigmoid", &a, Box::new(|x| weighted(&x.sigmoid(), &w46))),
        ("matmul_lhs", &a, Box::new(|x| weighted(&x.matmul(&m)?, &w45))),
        ("matmul_rhs", &m, Box::new(|x| weighted(&a.matmul(x)?, &w45))),
        ("transpose", &a, Box::new(|x| weighted(&x.transpose()?, &w64))),
        ("reshape", &a, Box::new(|x| weighted(&x.reshape(&[6, 4])?, &w64))),
        ("tile_rows", &a, Box::new(|x| weighted(&x.tile_rows(2)?, &w86))),
        ("concat", &a, Box::new(|x| weighted(&Tensor::concat(&[x.clone(), b.clone()], 1)?, &w412))),
        ("slice", &a, Box::new(|x| weighted(&x.slice(0, 1, 2)?, &random(&mut stream_rng(1, Stream::Eval, 0), &[2, 6])))),
        ("split", &a, Box::new(|x| {
            let parts = x.split(1, &[2, 4])?;
            weighted(&parts[1], &w24.reshape(&[2, 4])?.tile_rows(2)?)
        })),
        ("sum", &a, Box::new(|x| Ok(x.mul(&w46)?.sum().scale(0.1)))),
        ("softmax_rows", &a, Box::new(|x| weighted(&x.softmax(1)?, &w46))),
        ("softmax_cols", &a, Box::new(|x| weighted(&x.softmax(0)?, &w46))),
        ("layer_norm_x", &a, Box::new(|x| weighted(&x.layer_norm(&gamma, &bias)?, &w46))),
        ("layer_norm_gamma", &gamma, Box::new(|x| weighted(&a.layer_norm(x, &bias)?, &w46))),
        ("attention_q", &q, Box::new(|x| weighted(&Tensor::attention(x, &kv, &kv, 2, 2)?, &w_att))),
        ("attention_kv", &kv, Box::new(|x| weighted(&Tensor::attention(&q, x, x, 2, 2)?, &w_att))),
    ];
    cases
        .into_iter()
        .map(|(name, x, f)| Ok(TargetReport::new(name, &finite_diff_check(f, x, DEFAULT_EPS)?)))
        .collect()
}

fn worst(name: &str, reports: Vec<(String, GradCheck)>) -> TargetReport {
    let mut r = reports
        .iter()
        .map(|(_, g)| *g)
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one leaf");
    r.checked = reports.iter().map(|(_, g)| g.checked).sum();
    TargetReport::new(name, &r)
}

fn layer_suite() -> Result<Vec<TargetReport>> {
    let block = BlockConfig {
        dim: 8,
        attn_heads: 2,
        ffn_dim: 16,
    };
    let mut rng = stream_rng(0, Stream::Eval, 202);
    let q = random(&mut rng, &[6, 8]);
    let pos = random(&mut rng, &[6, 8]);
    let mem = random(&mut rng, &[10, 8]);
    let w = random(&mut rng, &[6, 8]);
    let mut out = Vec::new();

    let mut check = |name: &str, build: &dyn Fn(&mut Scope<'_>) -> Result<Box<dyn Fn() -> Result<Tensor>>>| -> Result<()> {
        let mut store = ParamStore::new();
        let mut init = stream_rng(1, Stream::Init, 0);
        let f = build(&mut Scope::root(&mut store, &mut init))?;
        out.push(worst(name, check_leaves(&store.named_tensors(), f, DEFAULT_EPS)?));
        Ok(())
    };

    check("multi_head_attention", &|s| {
        let mha = MultiHeadAttention::new(s, 8, 2)?;
        let (q, mem, w) = (q.clone(), mem.clone(), w.clone());
        Ok(Box::new(move || weighted(&mha.forward(&q, &mem, &mem, 2)?, &w)))
    })?;
    check("inquiry_head", &|s| {
        let head = InquiryHead::new(s, &block)?;
        let (q, pos, mem, w) = (q.clone(), pos.clone(), mem.clone(), w.clone());
        Ok(Box::new(move || weighted(&head.forward(&q, &mem, Some(&pos), 2, None)?, &w)))
    })?;
    for lite in [false, true] {
        for kind in FusionKind::ALL {
            let name = format!("mi_layer_{}{}", kind.as_str(), if lite { "_lite" } else { "" });
            check(&name, &|s| {
                let cfg = DecoderConfig {
                    layers: 1,
                    heads: 2,
                    dim: 8,
                    n_queries: 3,
                    attn_heads: 2,
                    ffn_dim: 16,
                    lite,
                    fusion: kind,
                    mask_rescale: false,
                };
                let layer = MiDecoderLayer::new(s, &cfg)?;
                let (q, pos, mem, w) = (q.clone(), pos.clone(), mem.clone(), w.clone());
                Ok(Box::new(move || weighted(&layer.forward(&q, &mem, Some(&pos), 2, &HeadMask::all(2))?, &w)))
            })?;
        }
    }
    check("encoder_with_ufi", &|s| {
        let layers = (0..2)
            .map(|i| EncoderLayer::new(&mut s.child(&format!("enc{i}")), &block))
            .collect::<Result<Vec<_>>>()?;
        let ufi = Ufi::new(&mut s.child("ufi"), 2, 8, false)?;
        let (mem, w) = (mem.clone(), random(&mut stream_rng(2, Stream::Eval, 0), &[10, 8]));
        Ok(Box::new(move || {
            let ef = ufi_fuse(encoder_forward(&mem, &layers, 2)?, Some(&ufi))?;
            weighted(&ef.fused[0].add(&ef.fused[1])?, &w)
        }))
    })?;
    check("patch_embed", &|s| {
        let pe = PatchEmbed::new(s, 8, 4, 8)?;
        let sc = SceneConfig {
            image_size: 8,
            max_objects: 2,
            min_side: 0.25,
            max_side: 0.5,
            ..SceneConfig::default()
        };
        let img = scene_at(0, Stream::Eval, 0, &sc).image;
        let w = random(&mut stream_rng(3, Stream::Eval, 0), &[4, 8]);
        Ok(Box::new(move || weighted(&pe.forward(&[img.as_slice()])?, &w)))
    })?;
    check("prediction_head", &|s| {
        let head = PredictionHead::new(s, 8, 3)?;
        let q = q.clone();
        let wb = random(&mut stream_rng(4, Stream::Eval, 0), &[6, 4]);
        let wl = random(&mut stream_rng(5, Stream::Eval, 0), &[6, 3]);
        Ok(Box::new(move || {
            let o = head.forward(&q)?;
            Ok(weighted(&o.boxes, &wb)?.add(&weighted(&o.logits, &wl)?)?)
        }))
    })?;
    Ok(out)
}

/// Detector used by the model-level check: `C = 8`, `L = 2`, `M = 2`,
/// `N_q = 3` and 16 image tokens.
pub fn model_check_config() -> (ModelConfig, SceneConfig) {
    let mc = ModelConfig {
        image_size: 8,
        patch: 2,
        n_classes: 3,
        dim: 8,
        attn_heads: 2,
        ffn_dim: 16,
        enc_layers: 2,
        dec_layers: 2,
        heads: 2,
        n_queries: 3,
        ..ModelConfig::default()
    };
    let sc = SceneConfig {
        image_size: 8,
        max_objects: 3,
        min_side: 0.25,
        max_side: 0.5,
        ..SceneConfig::default()
    };
    (mc, sc)
}

fn model_suite() -> Result<Vec<TargetReport>> {
    let (mc, sc) = model_check_config();
    let model = MiDetr::new(&mc, 0)?;
    let scenes: Vec<_> = (0..2).map(|i| scene_at(0, Stream::Train, i, &sc)).collect();
    let images: Vec<&[f64]> = scenes.iter().map(|s| s.image.as_slice()).collect();
    let gts: Vec<_> = scenes.iter().map(|s| s.gt.clone()).collect();
    let loss_cfg = LossConfig::default();
    // Matching is piecewise constant in the parameters; fix it at the base point.
    let frozen = no_grad(|| -> Result<Vec<_>> {
        let out = model.forward(&images, &model.full_mask())?;
        out.per_layer.iter().map(|o| match_layer(o, &gts, &loss_cfg.weights)).collect()
    })?;
    let reports = check_leaves(
        &model.store.named_tensors(),
        || {
            let out = model.forward(&images, &model.full_mask())?;
            Ok(detection_loss(&out.per_layer, &gts, &loss_cfg, Some(&frozen))?.total)
        },
        DEFAULT_EPS,
    )?;
    let mut out: Vec<TargetReport> = reports.iter().map(|(n, r)| TargetReport::new(n.clone(), r)).collect();
    out.push(worst("model", reports));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_and_layer_suites_pass() {
        for scope in [GradScope::Op, GradScope::Layer] {
            for r in run(scope).unwrap() {
                assert!(r.passed, "{r:?}");
                assert!(r.checked > 0);
            }
        }
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("model".parse::<GradScope>().unwrap(), GradScope::Model);
        assert!("all".parse::<GradScope>().is_err());
    }
}
