//! Box and class prediction shared by every decoder layer.

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::Scope;
use crate::tensor::Tensor;

use super::boxes::BoxPred;

#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub box_mlp: [Linear; 3],
    pub class: Linear,
}

/// Stacked head outputs for `rows = batch * n_q` queries.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `rows x 4`, sigmoid-squashed `(cx, cy, w, h)`.
    pub boxes: Tensor,
    /// `rows x K`.
    pub logits: Tensor,
}

/// Plain values for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub boxes: Vec<BoxPred>,
    /// Row-major `n_q x K`.
    pub logits: Vec<f64>,
    pub n_classes: usize,
}

impl DetectionOutput {
    pub fn n_queries(&self) -> usize {
        self.boxes.len()
    }

    pub fn logit(&self, q: usize, class: usize) -> f64 {
        self.logits[q * self.n_classes + class]
    }
}

impl HeadOutput {
    pub fn rows(&self) -> usize {
        self.boxes.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Splits the stacked rows into per-image outputs.
    pub fn per_image(&self, batch: usize) -> Result<Vec<DetectionOutput>> {
        let rows = self.rows();
        if batch == 0 || rows % batch != 0 {
            return Err(Error::dim("per_image", self.boxes.shape(), &[batch]));
        }
        let n_q = rows / batch;
        let k = self.n_classes();
        let boxes = self.boxes.data();
        let logits = self.logits.data();
        Ok((0..batch)
            .map(|b| DetectionOutput {
                boxes: boxes[b * n_q * 4..(b + 1) * n_q * 4]
                    .chunks_exact(4)
                    .map(|c| BoxPred::new(c[0], c[1], c[2], c[3]))
                    .collect(),
                logits: logits[b * n_q * k..(b + 1) * n_q * k].to_vec(),
                n_classes: k,
            })
            .collect())
    }
}

impl PredictionHead {
    pub fn new(scope: &mut Scope<'_>, dim: usize, n_classes: usize) -> Result<Self> {
        let mut mlp = scope.child("box_mlp");
        let box_mlp = [
            Linear::new(&mut mlp.child("fc0"), dim, dim)?,
            Linear::new(&mut mlp.child("fc1"), dim, dim)?,
            Linear::new(&mut mlp.child("fc2"), dim, 4)?,
        ];
        let class = Linear::new(&mut scope.child("class"), dim, n_classes)?;
        Ok(PredictionHead { box_mlp, class })
    }

    pub fn forward(&self, q: &Tensor) -> Result<HeadOutput> {
        let h = self.box_mlp[0].forward(q)?.relu();
        let h = self.box_mlp[1].forward(&h)?.relu();
        let boxes = self.box_mlp[2].forward(&h)?.sigmoid();
        let logits = self.class.forward(q)?;
        Ok(HeadOutput { boxes, logits })
    }

    pub fn param_count(dim: usize, n_classes: usize) -> usize {
        2 * Linear::param_count(dim, dim) + Linear::param_count(dim, 4) + Linear::param_count(dim, n_classes)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::gradcheck::{check_leaves, DEFAULT_EPS};
    use crate::params::ParamStore;
    use crate::rng::{stream_rng, Stream};

    fn build() -> (ParamStore, PredictionHead) {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(1, Stream::Init, 0);
        let head = PredictionHead::new(&mut Scope::root(&mut store, &mut rng), 8, 3).unwrap();
        (store, head)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Eval, 5);
        Tensor::new((0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[rows, cols]).unwrap()
    }

    #[test]
    fn zero_weights_give_centered_boxes() {
        let (store, head) = build();
        for p in store.params() {
            p.tensor.update_data(|d| d.fill(0.0));
        }
        let out = head.forward(&random(10, 8, 1)).unwrap();
        assert!(out.boxes.to_vec().iter().all(|&b| b == 0.5));
    }

    #[test]
    fn output_arity() {
        let (store, head) = build();
        let out = head.forward(&random(10, 8, 2)).unwrap();
        assert_eq!(out.boxes.shape(), &[10, 4]);
        assert_eq!(out.logits.shape(), &[10, 3]);
        let imgs = out.per_image(2).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[1].n_queries(), 5);
        assert_eq!(imgs[1].logit(4, 2), out.logits.to_vec()[29]);
        assert_eq!(store.numel(), PredictionHead::param_count(8, 3));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (store, head) = build();
        let q = Tensor::leaf(random(4, 8, 3).to_vec(), &[4, 8]).unwrap();
        let wb = random(4, 4, 4);
        let wl = random(4, 3, 5);
        let mut leaves = store.named_tensors();
        leaves.push(("q".into(), q.clone()));
        let reports = check_leaves(
            &leaves,
            || {
                let o = head.forward(&q)?;
                o.boxes.mul(&wb)?.mean().add(&o.logits.mul(&wl)?.mean())
            },
            DEFAULT_EPS,
        )
        .unwrap();
        for (name, r) in reports {
            assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
        }
    }
}
