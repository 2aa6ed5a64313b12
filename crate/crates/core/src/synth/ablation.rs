//! Ablation protocols: head subsets of a trained model, and families of
//! models trained under one recipe.

use serde::{Deserialize, Serialize};

use crate::decoder::{FusionKind, HeadMask};
use crate::error::Result;
use crate::model::{MiDetr, ModelConfig};

use super::eval::{evaluate_ap, EvalConfig, EvalReport};
use super::scene::SceneConfig;
use super::train::{train, TrainConfig};

/// One evaluated row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Head mask bits or variant name.
    pub label: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Every non-empty subset of `m` heads, ordered by size then bit pattern.
pub fn all_head_subsets(m: usize) -> Vec<HeadMask> {
    assert!(m > 0 && m < 16, "subset enumeration supports 1..16 heads");
    let mut codes: Vec<u32> = (1..(1u32 << m)).collect();
    codes.sort_by_key(|c| (c.count_ones(), (0..m).map(|k| c >> k & 1 == 0).collect::<Vec<_>>()));
    codes
        .into_iter()
        .map(|c| HeadMask::new((0..m).map(|k| c >> k & 1 == 1).collect()).expect("non-empty"))
        .collect()
}

/// Single heads followed by the full mask.
pub fn single_and_full(m: usize) -> Vec<HeadMask> {
    let mut v: Vec<HeadMask> = (0..m).map(|k| HeadMask::only(m, k).expect("k < m")).collect();
    if m > 1 {
        v.push(HeadMask::all(m));
    }
    v
}

/// Evaluates one trained model under each mask on the same held-out stream.
pub fn ablate_heads(
    model: &MiDetr,
    sc: &SceneConfig,
    ec: &EvalConfig,
    masks: &[HeadMask],
    seed: u64,
) -> Result<Vec<AblationRow>> {
    masks
        .iter()
        .map(|m| {
            Ok(AblationRow {
                label: m.label(),
                seed,
                report: evaluate_ap(model, sc, ec, m)?,
            })
        })
        .collect()
}

/// A named model configuration to train.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

/// Trains a fresh model, initialized and fed from `tc.seed`.
pub fn train_model(mc: &ModelConfig, tc: &TrainConfig, sc: &SceneConfig) -> Result<MiDetr> {
    let mut model = MiDetr::new(mc, tc.seed)?;
    train(&mut model, tc, sc)?;
    Ok(model)
}

/// Trains every variant under every seed and evaluates with all heads on.
pub fn train_variants(
    variants: &[Variant],
    seeds: &[u64],
    tc: &TrainConfig,
    sc: &SceneConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for v in variants {
        for &seed in seeds {
            let tc = TrainConfig { seed, ..*tc };
            let model = train_model(&v.model, &tc, sc)?;
            let report = evaluate_ap(&model, sc, &tc.eval, &model.full_mask())?;
            log::info!("{} seed {}: ap50 {:.4}", v.name, seed, report.ap50);
            rows.push(AblationRow {
                label: v.name.clone(),
                seed,
                report,
            });
        }
    }
    Ok(rows)
}

/// `base` with `M` set to each value; names are `M=<m>`.
pub fn head_number_variants(base: &ModelConfig, ms: &[usize]) -> Vec<Variant> {
    ms.iter()
        .map(|&m| Variant {
            name: format!("M={m}"),
            model: ModelConfig { heads: m, ..*base },
        })
        .collect()
}

/// The six on/off combinations of multi-inquiry, its lite form and feature
/// interaction. "Baseline" is a single-head decoder without interaction.
pub fn component_variants(base: &ModelConfig, m: usize) -> Vec<Variant> {
    let with = |heads: usize, lite: bool, ufi: bool| ModelConfig {
        heads,
        lite,
        ufi,
        ..*base
    };
    [
        ("baseline", with(1, false, false)),
        ("+MI", with(m, false, false)),
        ("+Lite-MI", with(m, true, false)),
        ("+UFI", with(1, false, true)),
        ("Lite-MI+UFI", with(m, true, true)),
        ("MI+UFI", with(m, false, true)),
    ]
    .into_iter()
    .map(|(name, model)| Variant {
        name: name.to_string(),
        model,
    })
    .collect()
}

pub fn fusion_variants(base: &ModelConfig) -> Vec<Variant> {
    FusionKind::ALL
        .iter()
        .map(|&k| Variant {
            name: k.as_str().to_string(),
            model: ModelConfig { fusion: k, ..*base },
        })
        .collect()
}

/// Mean ap50 of the rows carrying `label`.
pub fn mean_ap50(rows: &[AblationRow], label: &str) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.label == label).map(|r| r.report.ap50).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_cover_every_mask_once() {
        let s = all_head_subsets(4);
        assert_eq!(s.len(), 15);
        let labels: Vec<String> = s.iter().map(HeadMask::label).collect();
        assert_eq!(&labels[..4], ["1000", "0100", "0010", "0001"]);
        assert_eq!(labels[14], "1111");
        let mut uniq = labels.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 15);
    }

    #[test]
    fn single_and_full_for_one_head() {
        assert_eq!(single_and_full(1).len(), 1);
        assert_eq!(single_and_full(3).len(), 4);
    }

    #[test]
    fn component_grid_is_six_distinct_configs() {
        let v = component_variants(&ModelConfig::default(), 4);
        assert_eq!(v.len(), 6);
        for (i, a) in v.iter().enumerate() {
            a.model.validate().unwrap();
            for b in &v[i + 1..] {
                assert_ne!(a.model, b.model);
            }
        }
    }

    #[test]
    fn tiny_variant_training_produces_rows() {
        let base = ModelConfig {
            image_size: 8,
            patch: 4,
            dim: 8,
            attn_heads: 2,
            ffn_dim: 16,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            n_queries: 4,
            ..ModelConfig::default()
        };
        let sc = SceneConfig {
            image_size: 8,
            max_objects: 2,
            min_side: 0.25,
            max_side: 0.5,
            ..SceneConfig::default()
        };
        let tc = TrainConfig {
            steps: 2,
            batch: 2,
            eval: EvalConfig {
                n_scenes: 4,
                ..EvalConfig::default()
            },
            ..TrainConfig::default()
        };
        let rows = train_variants(&fusion_variants(&base), &[0, 1], &tc, &sc).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(mean_ap50(&rows, "add").is_some());
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.report.ap50)));
    }
}
