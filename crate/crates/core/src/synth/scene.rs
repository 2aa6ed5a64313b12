//! Rectangles-on-a-grid scenes with color-coded classes.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::detection::{BoxPred, GroundTruth};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub n_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Box side bounds as fractions of the image side.
    pub min_side: f64,
    pub max_side: f64,
    /// Amplitude of additive uniform pixel noise.
    pub noise: f64,
    pub background: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 32,
            n_classes: 3,
            min_objects: 1,
            max_objects: 5,
            min_side: 0.15,
            max_side: 0.6,
            noise: 0.05,
            background: 0.1,
        }
    }
}

impl SceneConfig {
    /// Inclusive side range in whole pixels.
    pub fn side_range_px(&self) -> (usize, usize) {
        let s = self.image_size as f64;
        let lo = (self.min_side * s - 1e-9).ceil().max(1.0) as usize;
        let hi = (self.max_side * s + 1e-9).floor() as usize;
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.n_classes == 0 {
            return Err(Error::config("scene needs a positive image size and class count"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("scene min_objects exceeds max_objects"));
        }
        if !(self.min_side > 0.0 && self.min_side <= self.max_side && self.max_side <= 1.0) {
            return Err(Error::config("box side fractions must satisfy 0 < min_side <= max_side <= 1"));
        }
        let (lo, hi) = self.side_range_px();
        if lo > hi || hi > self.image_size {
            return Err(Error::config(format!(
                "no whole-pixel box side fits [{}, {}] of a {} px image",
                self.min_side, self.max_side, self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.background) || !(self.noise >= 0.0) {
            return Err(Error::config("background must lie in [0, 1] and noise be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Row-major `size x size x 3`, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub gt: GroundTruth,
}

/// Base color of a class: evenly spaced hues at full saturation.
pub fn class_color(class: usize, n_classes: usize) -> [f64; 3] {
    let hue = class as f64 / n_classes as f64 * 6.0;
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    // Keep colors away from the background level.
    [0.15 + 0.8 * r, 0.15 + 0.8 * g, 0.15 + 0.8 * b]
}

pub fn generate_scene(rng: &mut Rng, cfg: &SceneConfig) -> Scene {
    let s = cfg.image_size;
    let (lo, hi) = cfg.side_range_px();
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut image = vec![cfg.background; s * s * 3];
    let mut gt = GroundTruth::default();
    for _ in 0..count {
        let label = rng.gen_range(0..cfg.n_classes);
        let w = rng.gen_range(lo..=hi);
        let h = rng.gen_range(lo..=hi);
        let x0 = rng.gen_range(0..=s - w);
        let y0 = rng.gen_range(0..=s - h);
        let color = class_color(label, cfg.n_classes);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                image[(y * s + x) * 3..(y * s + x) * 3 + 3].copy_from_slice(&color);
            }
        }
        let sf = s as f64;
        gt.boxes.push(BoxPred::from_corners(
            x0 as f64 / sf,
            y0 as f64 / sf,
            (x0 + w) as f64 / sf,
            (y0 + h) as f64 / sf,
        ));
        gt.labels.push(label);
    }
    if cfg.noise > 0.0 {
        for p in image.iter_mut() {
            *p = (*p + rng.gen_range(-cfg.noise..cfg.noise)).clamp(0.0, 1.0);
        }
    }
    Scene { image, gt }
}

/// Scene `index` of a seeded stream; scenes of different streams never share
/// generator state.
pub fn scene_at(seed: u64, stream: Stream, index: u64, cfg: &SceneConfig) -> Scene {
    generate_scene(&mut stream_rng(seed, stream, index), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(scene_at(4, Stream::Train, 9, &cfg), scene_at(4, Stream::Train, 9, &cfg));
        assert_ne!(scene_at(4, Stream::Train, 9, &cfg), scene_at(4, Stream::Eval, 9, &cfg));
    }

    #[test]
    fn fixed_side_fraction() {
        let cfg = SceneConfig {
            min_side: 0.5,
            max_side: 0.5,
            ..SceneConfig::default()
        };
        for i in 0..50 {
            for b in scene_at(0, Stream::Train, i, &cfg).gt.boxes {
                assert_eq!((b.w, b.h), (0.5, 0.5));
            }
        }
    }

    #[test]
    fn boxes_stay_inside_and_pixels_in_range() {
        let cfg = SceneConfig::default();
        assert_eq!(cfg.side_range_px(), (5, 19));
        for i in 0..200 {
            let sc = scene_at(1, Stream::Train, i, &cfg);
            assert!(sc.gt.boxes.iter().all(BoxPred::is_valid));
            assert!(sc.gt.labels.iter().all(|&l| l < 3));
            assert!(sc.image.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(sc.image.len(), 32 * 32 * 3);
        }
    }

    #[test]
    fn object_counts_are_uniform() {
        let cfg = SceneConfig::default();
        let n = 10_000;
        let mut hist = [0usize; 5];
        for i in 0..n {
            hist[scene_at(2, Stream::Train, i, &cfg).gt.len() - 1] += 1;
        }
        // Multinomial: mean n/5, variance n * (1/5) * (4/5).
        let mean = n as f64 / 5.0;
        let sd = (n as f64 * 0.2 * 0.8).sqrt();
        for c in hist {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{hist:?}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = SceneConfig {
            min_side: 0.7,
            max_side: 0.6,
            ..SceneConfig::default()
        };
        assert!(bad.validate().is_err());
        let tiny = SceneConfig {
            image_size: 4,
            min_side: 0.3,
            max_side: 0.4,
            ..SceneConfig::default()
        };
        assert!(tiny.validate().is_err());
        assert!(SceneConfig::default().validate().is_ok());
    }

    #[test]
    fn class_colors_are_distinct() {
        let c: Vec<[f64; 3]> = (0..3).map(|k| class_color(k, 3)).collect();
        assert_ne!(c[0], c[1]);
        assert_ne!(c[1], c[2]);
    }
}
