//! Synthetic detection benchmark: scenes, tokenizer, training, evaluation,
//! ablations and query export.

pub mod ablation;
pub mod eval;
pub mod export;
pub mod scene;
pub mod tokenize;
pub mod train;

pub use ablation::{ablate_heads, train_variants, AblationRow, Variant};
pub use eval::{evaluate_ap, evaluate_detections, EvalConfig, EvalReport};
pub use export::{export_queries, pca, Pca, QueryExport};
pub use scene::{class_color, generate_scene, scene_at, Scene, SceneConfig};
pub use tokenize::PatchEmbed;
pub use train::{train, train_from, TrainConfig, TrainTrace};
