//! Training, evaluation and inference on top of the library modules.

mod eval;
mod infer;
mod optim;
mod train;

pub use eval::{
    evaluate, input_scale, prepare_eval_set, DepthPredictor, EvalConfig, EvalTable, LevelReport,
    NearestFill,
};
pub use infer::{infer, infer_files, inference_size};
pub use optim::{cosine_factor, AdamW, AdamWConfig, StepOutcome};
pub use train::{train, train_step, EpochRecord, TrainConfig, TrainOutcome};

use crate::io::Sample;
use crate::synth::Scene;

impl Sample {
    /// GT-only sample from a generated scene.
    pub fn from_scene(id: impl Into<String>, scene: &Scene) -> Self {
        Self {
            id: id.into(),
            rgb: scene.rgb.clone(),
            gt: scene.depth.clone(),
            x: None,
        }
    }
}
