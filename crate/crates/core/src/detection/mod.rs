//! Set-prediction machinery: prediction head, Hungarian matching and loss.

pub mod boxes;
pub mod head;
pub mod hungarian;
pub mod loss;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use boxes::{giou, iou, BoxPred};
pub use head::{DetectionOutput, HeadOutput, PredictionHead};
pub use hungarian::{hungarian_match, CostMatrix, MatchResult};
pub use loss::{cost_matrix, detection_loss, match_layer, LossComponents, LossConfig, LossOutput, LossWeights};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<BoxPred>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::contract(format!(
                "{} boxes but {} labels",
                self.boxes.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }
}
