pub mod tensor;
pub mod model;
pub mod losses;
pub mod geometry;
pub mod scenegen;
pub mod io;
pub mod eval;
pub mod relight;
pub mod pipeline;

pub use geometry::{Camera, Flow, PointCloudPBR};
pub use io::SceneRecord;
pub use model::{IntrinsicSet, Model, ModelConfig};
pub use pipeline::{Checkpoint, TrainConfig};
pub use scenegen::{SceneConfig, SceneSpec};
pub use tensor::{Tape, Tensor, Var};
