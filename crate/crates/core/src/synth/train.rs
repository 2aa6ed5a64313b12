//! Training loop over freshly generated batches.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decoder::HeadMask;
use crate::detection::{detection_loss, LossComponents, LossConfig};
use crate::error::{Error, Result};
use crate::model::MiDetr;
use crate::optim::{clip_grad_norm, AdamW};
use crate::rng::Stream;

use super::eval::{evaluate_ap, EvalConfig, EvalReport};
use super::scene::{scene_at, Scene, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamW,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip: f64,
    pub loss: LossConfig,
    /// Validation cadence in steps; `0` disables periodic evaluation.
    pub eval_every: usize,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 5000,
            batch: 8,
            optimizer: AdamW::default(),
            clip: 0.1,
            loss: LossConfig::default(),
            eval_every: 0,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("training needs at least one step"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::config("optimizer needs lr > 0, weight decay >= 0 and betas in [0, 1)"));
        }
        if !(self.clip >= 0.0) {
            return Err(Error::config("clip must be non-negative"));
        }
        self.loss.validate()?;
        self.eval.validate()
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub components: LossComponents,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<(usize, EvalReport)>,
}

/// Scenes of training step `step`: indices `step * batch ..`.
pub fn training_batch(seed: u64, step: usize, batch: usize, sc: &SceneConfig) -> Vec<Scene> {
    (0..batch)
        .map(|i| scene_at(seed, Stream::Train, (step * batch + i) as u64, sc))
        .collect()
}

/// Forward, loss and backward for one batch. Leaves gradients on the model.
pub fn loss_and_backward(model: &MiDetr, scenes: &[Scene], loss: &LossConfig) -> Result<(f64, LossComponents)> {
    let images: Vec<&[f64]> = scenes.iter().map(|s| s.image.as_slice()).collect();
    let gts: Vec<_> = scenes.iter().map(|s| s.gt.clone()).collect();
    let out = model.forward(&images, &model.full_mask())?;
    let l = detection_loss(&out.per_layer, &gts, loss, None)?;
    let value = l.total.item();
    l.total.backward()?;
    Ok((value, l.components))
}

/// Runs steps `start .. tc.steps`, appending to `trace` and optionally
/// streaming one JSON line per step into `log`.
pub fn train_from(
    model: &mut MiDetr,
    tc: &TrainConfig,
    sc: &SceneConfig,
    start: usize,
    trace: &mut TrainTrace,
    mut log: Option<&mut dyn Write>,
) -> Result<()> {
    tc.validate()?;
    sc.validate()?;
    if sc.n_classes != model.cfg.n_classes || sc.image_size != model.cfg.image_size {
        return Err(Error::config("scene classes and image size must match the model"));
    }
    if sc.max_objects > model.cfg.n_queries {
        return Err(Error::config(format!(
            "up to {} objects per scene but only {} queries",
            sc.max_objects, model.cfg.n_queries
        )));
    }
    for step in start..tc.steps {
        let scenes = training_batch(tc.seed, step, tc.batch, sc);
        model.store.zero_grad();
        let (loss, components) = loss_and_backward(model, &scenes, &tc.loss).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!(
                "{what} at step {step} (seed {}, scenes {}..{})",
                tc.seed,
                step * tc.batch,
                (step + 1) * tc.batch
            )),
            other => other,
        })?;
        let grad_norm = if tc.clip > 0.0 {
            clip_grad_norm(model.store.params(), tc.clip)
        } else {
            clip_grad_norm(model.store.params(), f64::INFINITY)
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm at step {step} (seed {}, scenes {}..{})",
                tc.seed,
                step * tc.batch,
                (step + 1) * tc.batch
            )));
        }
        tc.optimizer.step(model.store.params_mut());
        let rec = StepRecord {
            step,
            loss,
            components,
            grad_norm,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        trace.steps.push(rec);
        if tc.eval_every > 0 && (step + 1) % tc.eval_every == 0 {
            let report = evaluate_ap(model, sc, &tc.eval, &HeadMask::all(model.cfg.heads))?;
            log::info!("step {}: loss {:.4} ap50 {:.4}", step + 1, loss, report.ap50);
            trace.evals.push((step + 1, report));
        }
    }
    model.store.zero_grad();
    Ok(())
}

/// Trains from scratch for `tc.steps` steps.
pub fn train(model: &mut MiDetr, tc: &TrainConfig, sc: &SceneConfig) -> Result<TrainTrace> {
    let mut trace = TrainTrace::default();
    train_from(model, tc, sc, 0, &mut trace, None)?;
    Ok(trace)
}
