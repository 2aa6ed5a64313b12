//! Average precision with greedy score-ranked matching and 101-point
//! interpolation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::HeadMask;
use crate::detection::{iou, DetectionOutput, GroundTruth};
use crate::error::{Error, Result};
use crate::model::MiDetr;
use crate::rng::Stream;
use crate::tensor::{no_grad, sigmoid};

use super::scene::{scene_at, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed of the held-out scene stream.
    pub seed: u64,
    pub n_scenes: usize,
    pub iou_threshold: f64,
    /// Class scores below this are not reported as detections.
    pub score_threshold: f64,
    /// Also average AP over IoU thresholds .50:.95:.05.
    pub coco: bool,
    /// Scenes per forward pass.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            n_scenes: 500,
            iou_threshold: 0.5,
            score_threshold: 1e-3,
            coco: false,
            chunk: 50,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 || self.chunk == 0 {
            return Err(Error::config("evaluation needs at least one scene and a positive chunk"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::config("iou threshold must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::config("score threshold must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    /// `None` for classes without ground truth in the evaluated scenes.
    pub per_class_ap50: Vec<Option<f64>>,
    /// Interpolated precision at recall `0, 0.01, .., 1` per class.
    pub pr_curves: Vec<Vec<f64>>,
    pub ap_coco: Option<f64>,
    pub n_scenes: usize,
    pub n_gt: usize,
    pub n_detections: usize,
}

/// One ranked detection: `(score, is_true_positive)`.
pub type RankedHit = (f64, bool);

/// 101-point interpolated AP from detections already labeled TP/FP, in
/// descending score order. Returns the AP and the interpolated curve.
pub fn interpolated_ap(hits: &[RankedHit], n_pos: usize) -> (f64, Vec<f64>) {
    if n_pos == 0 {
        return (0.0, vec![0.0; 101]);
    }
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in hits {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_pos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // Monotone envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let curve: Vec<f64> = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r - 1e-12);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect();
    let ap = curve.iter().sum::<f64>() / 101.0;
    (ap, curve)
}

struct Candidate {
    image: usize,
    query: usize,
    score: f64,
}

/// Greedy matching per class: detections in descending score each take the
/// highest-IoU unmatched ground truth of their class in their image.
fn class_hits(
    preds: &[DetectionOutput],
    gts: &[GroundTruth],
    class: usize,
    iou_threshold: f64,
    score_threshold: f64,
) -> (Vec<RankedHit>, usize) {
    let mut cands: Vec<Candidate> = Vec::new();
    for (image, p) in preds.iter().enumerate() {
        for query in 0..p.n_queries() {
            let score = sigmoid(p.logit(query, class));
            if score >= score_threshold {
                cands.push(Candidate { image, query, score });
            }
        }
    }
    // Stable: ties keep image/query order.
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let n_pos = gts
        .iter()
        .map(|g| g.labels.iter().filter(|&&l| l == class).count())
        .sum();
    let hits = cands
        .iter()
        .map(|c| {
            let b = preds[c.image].boxes[c.query];
            let gt = &gts[c.image];
            let mut best: Option<(usize, f64)> = None;
            for (g, gb) in gt.boxes.iter().enumerate() {
                if gt.labels[g] != class || taken[c.image][g] {
                    continue;
                }
                let v = iou(&b, gb);
                if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[c.image][g] = true;
                    (c.score, true)
                }
                None => (c.score, false),
            }
        })
        .collect();
    (hits, n_pos)
}

/// AP report for per-image predictions against ground truth.
pub fn evaluate_detections(
    preds: &[DetectionOutput],
    gts: &[GroundTruth],
    n_classes: usize,
    iou_threshold: f64,
    score_threshold: f64,
    coco: bool,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::contract(format!("{} predictions for {} images", preds.len(), gts.len())));
    }
    let ap_at = |thr: f64| -> (Vec<Option<f64>>, Vec<Vec<f64>>, usize) {
        let mut aps = Vec::with_capacity(n_classes);
        let mut curves = Vec::with_capacity(n_classes);
        let mut n_det = 0;
        for class in 0..n_classes {
            let (hits, n_pos) = class_hits(preds, gts, class, thr, score_threshold);
            n_det += hits.len();
            let (ap, curve) = interpolated_ap(&hits, n_pos);
            aps.push((n_pos > 0).then_some(ap));
            curves.push(curve);
        }
        (aps, curves, n_det)
    };
    let mean = |aps: &[Option<f64>]| {
        let present: Vec<f64> = aps.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    let (per_class, curves, n_det) = ap_at(iou_threshold);
    let ap_coco = coco.then(|| {
        let aps: Vec<f64> = (0..10).map(|i| mean(&ap_at(0.5 + 0.05 * i as f64).0)).collect();
        aps.iter().sum::<f64>() / aps.len() as f64
    });
    Ok(EvalReport {
        ap50: mean(&per_class),
        per_class_ap50: per_class,
        pr_curves: curves,
        ap_coco,
        n_scenes: preds.len(),
        n_gt: gts.iter().map(GroundTruth::len).sum(),
        n_detections: n_det,
    })
}

/// Final-layer predictions for held-out scenes `0 .. n` of the eval stream.
pub fn predict_scenes(
    model: &MiDetr,
    sc: &SceneConfig,
    ec: &EvalConfig,
    mask: &HeadMask,
) -> Result<(Vec<DetectionOutput>, Vec<GroundTruth>)> {
    let chunks: Vec<(usize, usize)> = (0..ec.n_scenes)
        .step_by(ec.chunk)
        .map(|s| (s, (s + ec.chunk).min(ec.n_scenes)))
        .collect();
    let results = chunks
        .par_iter()
        .map(|&(a, b)| {
            no_grad(|| {
                let scenes: Vec<_> = (a..b).map(|i| scene_at(ec.seed, Stream::Eval, i as u64, sc)).collect();
                let images: Vec<&[f64]> = scenes.iter().map(|s| s.image.as_slice()).collect();
                let out = model.forward(&images, mask)?;
                let preds = out.last().per_image(images.len())?;
                Ok((preds, scenes.into_iter().map(|s| s.gt).collect::<Vec<_>>()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut preds = Vec::with_capacity(ec.n_scenes);
    let mut gts = Vec::with_capacity(ec.n_scenes);
    for (p, g) in results {
        preds.extend(p);
        gts.extend(g);
    }
    Ok((preds, gts))
}

pub fn evaluate_ap(model: &MiDetr, sc: &SceneConfig, ec: &EvalConfig, mask: &HeadMask) -> Result<EvalReport> {
    ec.validate()?;
    let (preds, gts) = predict_scenes(model, sc, ec, mask)?;
    evaluate_detections(&preds, &gts, model.cfg.n_classes, ec.iou_threshold, ec.score_threshold, ec.coco)
}
