//! Per-head query embeddings of one scene, with a 2-D PCA projection for
//! plotting.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MiDetr;
use crate::tensor::{no_grad, sigmoid};

use super::scene::Scene;

/// Principal components of a row-sample matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Leading unit directions, one per row.
    pub components: Vec<Vec<f64>>,
    /// Row scores on the leading directions, `n x k`.
    pub projection: Vec<Vec<f64>>,
    /// Population covariance eigenvalues in descending order, all of them.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Mean squared residual per row after reconstructing from the kept
    /// components.
    pub fn reconstruction_error(&self, rows: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (x, p) in rows.iter().zip(&self.projection) {
            for d in 0..self.mean.len() {
                let rec = self.mean[d] + self.components.iter().zip(p).map(|(c, s)| c[d] * s).sum::<f64>();
                total += (x[d] - rec).powi(2);
            }
        }
        total / rows.len() as f64
    }
}

/// PCA of `rows` keeping `k` components. Each direction's sign is fixed so
/// that its largest-magnitude loading is positive.
pub fn pca(rows: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::contract("pca needs a non-empty rectangular matrix"));
    }
    if k > d {
        return Err(Error::contract(format!("{k} components from {d} dimensions")));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut eigenvalues: Vec<f64> = order
        .iter()
        .map(|&i| svd.singular_values[i].powi(2) / n as f64)
        .collect();
    // Thin SVD yields min(n, d) values; the rest of the spectrum is zero.
    eigenvalues.resize(d, 0.0);
    let components: Vec<Vec<f64>> = order
        .iter()
        .take(k)
        .map(|&i| {
            let mut c: Vec<f64> = v_t.row(i).iter().copied().collect();
            let lead = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            c
        })
        .collect();
    // Rank-deficient inputs may return fewer directions than asked for.
    let components = {
        let mut c = components;
        while c.len() < k {
            c.push(vec![0.0; d]);
        }
        c
    };
    let projection = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| (0..d).map(|j| x[(i, j)] * c[j]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        projection,
        eigenvalues,
    })
}

/// Selected queries of one inquiry head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadQueries {
    pub head: usize,
    /// Query indices, highest score first.
    pub indices: Vec<usize>,
    /// Max class probability of each selected query.
    pub scores: Vec<f64>,
    /// `top_k x C` raw embeddings.
    pub vectors: Vec<Vec<f64>>,
    pub pca: Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryExport {
    /// Zero-based decoder layer.
    pub layer: usize,
    pub top_k: usize,
    pub heads: Vec<HeadQueries>,
}

/// Pre-fusion query sets of every head at `layer` for one scene; each head
/// keeps its `top_k` queries ranked by max class probability under the
/// shared prediction head.
pub fn export_queries(model: &MiDetr, scene: &Scene, layer: usize, top_k: usize) -> Result<QueryExport> {
    let l = model.cfg.dec_layers;
    if layer >= l {
        return Err(Error::contract(format!("layer {layer} outside 0..{l}")));
    }
    if top_k == 0 || top_k > model.cfg.n_queries {
        return Err(Error::contract(format!(
            "top_k {top_k} outside 1..={}",
            model.cfg.n_queries
        )));
    }
    no_grad(|| {
        let out = model.forward(&[scene.image.as_slice()], &model.full_mask())?;
        let trace = &out.decoder.traces[layer];
        let mut heads = Vec::with_capacity(trace.head_outputs.len());
        for (h, q) in trace.head_outputs.iter().enumerate() {
            let q = q.as_ref().ok_or_else(|| Error::contract(format!("head {h} produced no output")))?;
            let pred = model.head.forward(q)?;
            let k = model.cfg.n_classes;
            let logits = pred.logits.data();
            let scores: Vec<f64> = logits
                .chunks_exact(k)
                .map(|row| row.iter().map(|&z| sigmoid(z)).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            order.truncate(top_k);
            let c = q.shape()[1];
            let data = q.data();
            let vectors: Vec<Vec<f64>> = order.iter().map(|&i| data[i * c..(i + 1) * c].to_vec()).collect();
            heads.push(HeadQueries {
                head: h,
                scores: order.iter().map(|&i| scores[i]).collect(),
                indices: order,
                pca: pca(&vectors, 2.min(c))?,
                vectors,
            });
        }
        Ok(QueryExport { layer, top_k, heads })
    })
}
