//! Matching cost and the set-prediction loss: sigmoid focal classification
//! over all queries plus L1 and GIoU box terms on matched pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Function, Tensor};

use super::boxes::{giou, giou_and_grad, BoxPred};
use super::head::{DetectionOutput, HeadOutput};
use super::hungarian::{hungarian_match, CostMatrix, MatchResult};
use super::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.l1, self.giou].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Supervise every decoder layer rather than only the last.
    pub aux: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            aux: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.focal_alpha) || !(self.focal_gamma >= 0.0) {
            return Err(Error::config("focal alpha must lie in [0, 1] and gamma be non-negative"));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::tensor::sigmoid(x)
}

/// `cost[q][g] = -w.cls * sigmoid(logit[q][label_g]) + w.l1 * |b_q - b_g|_1 - w.giou * giou(b_q, b_g)`.
pub fn cost_matrix(pred: &DetectionOutput, gt: &GroundTruth, w: &LossWeights) -> CostMatrix {
    let n_q = pred.n_queries();
    let n_g = gt.len();
    let mut data = Vec::with_capacity(n_q * n_g);
    for q in 0..n_q {
        let b = pred.boxes[q];
        for (g, gb) in gt.boxes.iter().enumerate() {
            let p = sigmoid(pred.logit(q, gt.labels[g]));
            let l1: f64 = b.to_array().iter().zip(gb.to_array()).map(|(x, y)| (x - y).abs()).sum();
            data.push(-w.cls * p + w.l1 * l1 - w.giou * giou(&b, gb));
        }
    }
    CostMatrix {
        rows: n_q,
        cols: n_g,
        data,
    }
}

/// Focal binary cross-entropy of one logit and its derivative.
fn focal(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    // log p and log(1 - p) without cancellation.
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    if positive {
        let q = 1.0 - p;
        let qg = q.powf(gamma);
        let loss = -alpha * qg * log_p;
        // d/dx of -alpha (1-p)^g log p, with dp/dx = p q.
        let grad = alpha * qg * (gamma * p * log_p - q);
        (loss, grad)
    } else {
        let pg = p.powf(gamma);
        let loss = -(1.0 - alpha) * pg * log_q;
        let grad = -(1.0 - alpha) * pg * (gamma * (1.0 - p) * log_q - p);
        (loss, grad)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Unweighted loss terms, each divided by the number of targets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

/// One supervised layer's loss, with gradients computed alongside the value.
struct LayerLoss {
    grad_logits: Vec<f64>,
    grad_boxes: Vec<f64>,
}

impl Function for LayerLoss {
    fn backward(&self, _inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = grad[0];
        vec![
            Some(self.grad_logits.iter().map(|x| x * g).collect()),
            Some(self.grad_boxes.iter().map(|x| x * g).collect()),
        ]
    }
}

/// Loss of one layer under fixed per-image matches.
fn layer_loss(
    out: &HeadOutput,
    gts: &[GroundTruth],
    matches: &[MatchResult],
    cfg: &LossConfig,
    normalizer: f64,
) -> Result<(Tensor, LossComponents)> {
    let rows = out.rows();
    let k = out.n_classes();
    let n_q = rows / gts.len();
    let logits = out.logits.data();
    let boxes = out.boxes.data();
    let w = &cfg.weights;

    let mut target = vec![false; rows * k];
    for (b, m) in matches.iter().enumerate() {
        for &(q, g) in &m.pairs {
            target[(b * n_q + q) * k + gts[b].labels[g]] = true;
        }
    }
    let mut comps = LossComponents::default();
    let mut grad_logits = vec![0.0; rows * k];
    for (i, (&x, &t)) in logits.iter().zip(&target).enumerate() {
        let (l, d) = focal(x, t, cfg.focal_alpha, cfg.focal_gamma);
        comps.cls += l;
        grad_logits[i] = w.cls * d / normalizer;
    }
    let mut grad_boxes = vec![0.0; rows * 4];
    for (b, m) in matches.iter().enumerate() {
        for &(q, g) in &m.pairs {
            let r = b * n_q + q;
            let pred = BoxPred::new(boxes[r * 4], boxes[r * 4 + 1], boxes[r * 4 + 2], boxes[r * 4 + 3]);
            let gb = gts[b].boxes[g];
            for (j, (p, t)) in pred.to_array().iter().zip(gb.to_array()).enumerate() {
                comps.l1 += (p - t).abs();
                let s = if p > &t { 1.0 } else if p < &t { -1.0 } else { 0.0 };
                grad_boxes[r * 4 + j] += w.l1 * s / normalizer;
            }
            let (v, dg) = giou_and_grad(&pred, &gb);
            comps.giou += 1.0 - v;
            for j in 0..4 {
                grad_boxes[r * 4 + j] -= w.giou * dg[j] / normalizer;
            }
        }
    }
    comps.cls /= normalizer;
    comps.l1 /= normalizer;
    comps.giou /= normalizer;
    let value = w.cls * comps.cls + w.l1 * comps.l1 + w.giou * comps.giou;
    drop(logits);
    drop(boxes);
    let t = Tensor::from_function(
        vec![value],
        &[1],
        vec![out.logits.clone(), out.boxes.clone()],
        Box::new(LayerLoss {
            grad_logits,
            grad_boxes,
        }),
    )?;
    Ok((t, comps))
}

/// Loss over supervised layers plus diagnostics.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    /// Mean over supervised layers.
    pub components: LossComponents,
    pub supervised_layers: usize,
    /// `matches[layer][image]`, in supervised-layer order.
    pub matches: Vec<Vec<MatchResult>>,
}

/// Hungarian matching of every image of one layer.
pub fn match_layer(out: &HeadOutput, gts: &[GroundTruth], w: &LossWeights) -> Result<Vec<MatchResult>> {
    out.per_image(gts.len())?
        .iter()
        .zip(gts)
        .map(|(pred, gt)| {
            if gt.is_empty() {
                Ok(MatchResult::default())
            } else {
                hungarian_match(&cost_matrix(pred, gt, w))
            }
        })
        .collect()
}

/// Set-prediction loss. `per_layer` holds every decoder layer's predictions
/// in order; only the last is supervised unless `cfg.aux`. `frozen` replaces
/// Hungarian matching with given assignments (one entry per supervised layer).
pub fn detection_loss(
    per_layer: &[HeadOutput],
    gts: &[GroundTruth],
    cfg: &LossConfig,
    frozen: Option<&[Vec<MatchResult>]>,
) -> Result<LossOutput> {
    let last = per_layer
        .last()
        .ok_or_else(|| Error::contract("detection loss needs at least one layer"))?;
    if gts.is_empty() || last.rows() % gts.len() != 0 {
        return Err(Error::dim("detection_loss", last.boxes.shape(), &[gts.len()]));
    }
    let n_q = last.rows() / gts.len();
    for gt in gts {
        gt.validate()?;
        if gt.len() > n_q {
            return Err(Error::contract(format!("{} targets exceed {} queries", gt.len(), n_q)));
        }
    }
    let supervised: &[HeadOutput] = if cfg.aux {
        per_layer
    } else {
        &per_layer[per_layer.len() - 1..]
    };
    if let Some(f) = frozen {
        if f.len() != supervised.len() || f.iter().any(|m| m.len() != gts.len()) {
            return Err(Error::contract("frozen matches do not cover every supervised layer and image"));
        }
    }
    let n_gt: usize = gts.iter().map(GroundTruth::len).sum();
    let normalizer = n_gt.max(1) as f64;
    let scale = 1.0 / supervised.len() as f64;

    let mut total: Option<Tensor> = None;
    let mut comps = LossComponents::default();
    let mut all_matches = Vec::with_capacity(supervised.len());
    for (i, out) in supervised.iter().enumerate() {
        let matches = match frozen {
            Some(f) => f[i].clone(),
            None => match_layer(out, gts, &cfg.weights)?,
        };
        let (loss, c) = layer_loss(out, gts, &matches, cfg, normalizer)?;
        comps.cls += c.cls * scale;
        comps.l1 += c.l1 * scale;
        comps.giou += c.giou * scale;
        total = Some(match total {
            None => loss,
            Some(t) => t.add(&loss)?,
        });
        all_matches.push(matches);
    }
    let total = total.expect("at least one supervised layer").scale(scale);
    if !total.item().is_finite() {
        return Err(Error::NonFinite("detection loss".into()));
    }
    Ok(LossOutput {
        total,
        components: comps,
        supervised_layers: supervised.len(),
        matches: all_matches,
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::gradcheck::{finite_diff_check, relative_error, DEFAULT_EPS};
    use crate::rng::{stream_rng, Stream};

    fn gt_two() -> GroundTruth {
        GroundTruth {
            boxes: vec![BoxPred::new(0.3, 0.3, 0.2, 0.2), BoxPred::new(0.7, 0.6, 0.3, 0.4)],
            labels: vec![1, 0],
        }
    }

    fn random_output(rows: usize, k: usize, seed: u64) -> HeadOutput {
        let mut rng = stream_rng(seed, Stream::Eval, 21);
        let logits = (0..rows * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let boxes = (0..rows * 4).map(|_| rng.gen_range(0.1..0.6)).collect();
        HeadOutput {
            boxes: Tensor::leaf(boxes, &[rows, 4]).unwrap(),
            logits: Tensor::leaf(logits, &[rows, k]).unwrap(),
        }
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        for &x in &[-4.0, -0.7, 0.0, 0.3, 2.5, 9.0] {
            for t in [false, true] {
                let (_, d) = focal(x, t, 0.25, 2.0);
                let h = 1e-6;
                let num = (focal(x + h, t, 0.25, 2.0).0 - focal(x - h, t, 0.25, 2.0).0) / (2.0 * h);
                assert!(relative_error(d, num) < 1e-7, "x={x} t={t}: {d} vs {num}");
            }
        }
        assert!(focal(-800.0, true, 0.25, 2.0).0.is_finite());
        assert!(focal(800.0, false, 0.25, 2.0).0.is_finite());
    }

    #[test]
    fn perfect_prediction() {
        let gt = gt_two();
        let mut logits = vec![-20.0; 4 * 3];
        logits[3 + 1] = 20.0; // query 1 -> class 1
        logits[2 * 3] = 20.0; // query 2 -> class 0
        let mut boxes = vec![0.5; 16];
        boxes[4..8].copy_from_slice(&gt.boxes[0].to_array());
        boxes[8..12].copy_from_slice(&gt.boxes[1].to_array());
        let out = HeadOutput {
            boxes: Tensor::leaf(boxes, &[4, 4]).unwrap(),
            logits: Tensor::leaf(logits, &[4, 3]).unwrap(),
        };
        let cfg = LossConfig::default();
        let loss = detection_loss(&[out], &[gt], &cfg, None).unwrap();
        assert_eq!(loss.matches[0][0].pairs, vec![(1, 0), (2, 1)]);
        assert_eq!(loss.components.l1, 0.0);
        assert_eq!(loss.components.giou, 0.0);
        assert!(loss.components.cls < 1e-3);
    }

    #[test]
    fn aux_flag_controls_supervised_layers() {
        let outs: Vec<HeadOutput> = (0..6).map(|i| random_output(5, 3, i)).collect();
        let mut cfg = LossConfig {
            aux: false,
            ..LossConfig::default()
        };
        assert_eq!(detection_loss(&outs, &[gt_two()], &cfg, None).unwrap().supervised_layers, 1);
        cfg.aux = true;
        assert_eq!(detection_loss(&outs, &[gt_two()], &cfg, None).unwrap().supervised_layers, 6);
    }

    #[test]
    fn empty_ground_truth_is_classification_only() {
        let out = random_output(5, 3, 7);
        let empty = GroundTruth::default();
        let loss = detection_loss(&[out], &[empty], &LossConfig::default(), None).unwrap();
        assert_eq!(loss.components.l1, 0.0);
        assert_eq!(loss.components.giou, 0.0);
        assert!(loss.components.cls > 0.0);
    }

    #[test]
    fn matching_is_invariant_to_weight_scale() {
        let outs = random_output(12, 3, 8);
        let gts = [gt_two(), gt_two()];
        let w = LossWeights::default();
        let scaled = LossWeights {
            cls: 3.5 * w.cls,
            l1: 3.5 * w.l1,
            giou: 3.5 * w.giou,
        };
        assert_eq!(match_layer(&outs, &gts, &w).unwrap(), match_layer(&outs, &gts, &scaled).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences_with_frozen_matching() {
        let gts = [gt_two(), gt_two()];
        let cfg = LossConfig::default();
        let base = random_output(8, 3, 9);
        let frozen = vec![match_layer(&base, &gts, &cfg.weights).unwrap()];
        let logits = base.logits.clone();
        let r = finite_diff_check(
            |b| {
                let out = HeadOutput {
                    boxes: b.clone(),
                    logits: logits.clone(),
                };
                Ok(detection_loss(&[out], &gts, &cfg, Some(&frozen))?.total)
            },
            &base.boxes,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let boxes = base.boxes.clone();
        let r = finite_diff_check(
            |l| {
                let out = HeadOutput {
                    boxes: boxes.clone(),
                    logits: l.clone(),
                };
                Ok(detection_loss(&[out], &gts, &cfg, Some(&frozen))?.total)
            },
            &base.logits,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn box_terms_vanish_as_prediction_approaches_target() {
        let gt = gt_two();
        let cfg = LossConfig::default();
        let start = random_output(3, 3, 10);
        let frozen = vec![match_layer(&start, &[gt.clone()], &cfg.weights).unwrap()];
        let start_boxes = start.boxes.to_vec();
        let mut prev = f64::INFINITY;
        for t in [0.0, 0.5, 0.9, 1.0] {
            let mut b = start_boxes.clone();
            for &(q, g) in &frozen[0][0].pairs {
                for (j, target) in gt.boxes[g].to_array().iter().enumerate() {
                    b[q * 4 + j] = (1.0 - t) * b[q * 4 + j] + t * target;
                }
            }
            let out = HeadOutput {
                boxes: Tensor::new(b, &[3, 4]).unwrap(),
                logits: start.logits.clone(),
            };
            let c = detection_loss(&[out], &[gt.clone()], &cfg, Some(&frozen)).unwrap().components;
            let box_term = c.l1 + c.giou;
            assert!(box_term >= 0.0 && box_term <= prev);
            prev = box_term;
        }
        assert!(prev.abs() < 1e-12);
    }
}
