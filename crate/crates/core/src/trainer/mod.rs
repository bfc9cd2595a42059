//! Dense self-supervised pretraining with an EMA teacher.

mod config;
pub mod distill;
pub mod run;
mod state;
pub mod step;

pub use config::{model_from_map, model_to_map, scaled_scene, scene_from_map, scene_to_map, PretrainConfig};
pub use distill::{distill_step, run_distillation, student_model, DistillConfig, DistillOutput, FrozenTeacher};
pub use run::{load_checkpoint, run_pretraining, RunOptions, RunOutput, StepRecord};
pub use state::TrainState;
pub use step::{make_batch, pretrain_step, Sample, StepStats};
