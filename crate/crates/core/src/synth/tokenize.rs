//! Patch tokenizer with fixed 2-D sinusoidal position encodings.

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::Scope;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub image_size: usize,
    pub patch: usize,
    /// `n_tokens x C`.
    pub pos: Tensor,
}

/// DETR-style normalized sine encodings of a `grid x grid` token layout;
/// the first `C/2` channels encode the row, the rest the column.
pub fn sine_position_encoding(grid: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 4 != 0 {
        return Err(Error::config(format!("model dim {dim} must be divisible by 4 for 2-D sine encodings")));
    }
    let half = dim / 2;
    let scale = 2.0 * std::f64::consts::PI;
    let freq: Vec<f64> = (0..half)
        .map(|i| 10000f64.powf((2 * (i / 2)) as f64 / half as f64))
        .collect();
    let mut out = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            let y = (r + 1) as f64 / grid as f64 * scale;
            let x = (c + 1) as f64 / grid as f64 * scale;
            for coord in [y, x] {
                for (i, f) in freq.iter().enumerate() {
                    let v = coord / f;
                    out.push(if i % 2 == 0 { v.sin() } else { v.cos() });
                }
            }
        }
    }
    Ok(out)
}

impl PatchEmbed {
    pub fn new(scope: &mut Scope<'_>, image_size: usize, patch: usize, dim: usize) -> Result<Self> {
        if patch == 0 || image_size % patch != 0 {
            return Err(Error::config(format!(
                "image size {image_size} is not divisible by patch size {patch}"
            )));
        }
        let grid = image_size / patch;
        let pos = Tensor::new(sine_position_encoding(grid, dim)?, &[grid * grid, dim])?;
        Ok(PatchEmbed {
            proj: Linear::new(scope, patch * patch * 3, dim)?,
            image_size,
            patch,
            pos,
        })
    }

    pub fn n_tokens(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    /// Flattens `size x size x 3` images into `(batch * n_tokens) x (p*p*3)`
    /// patch rows, patches in raster order, pixels `(dy, dx, channel)`.
    pub fn patchify(&self, images: &[&[f64]]) -> Result<Tensor> {
        let (s, p) = (self.image_size, self.patch);
        let g = s / p;
        let width = p * p * 3;
        let mut data = Vec::with_capacity(images.len() * g * g * width);
        for img in images {
            if img.len() != s * s * 3 {
                return Err(Error::dim("patchify", &[img.len()], &[s, s, 3]));
            }
            for gy in 0..g {
                for gx in 0..g {
                    for dy in 0..p {
                        let row = (gy * p + dy) * s + gx * p;
                        data.extend_from_slice(&img[row * 3..(row + p) * 3]);
                    }
                }
            }
        }
        Tensor::new(data, &[images.len() * g * g, width])
    }

    /// Embedded tokens plus position encodings.
    pub fn forward(&self, images: &[&[f64]]) -> Result<Tensor> {
        let patches = self.patchify(images)?;
        self.proj.forward(&patches)?.add(&self.pos.tile_rows(images.len())?)
    }
}
