//! Symmetric fully convolutional auto-encoders: declarative specs, the
//! model itself and its end-to-end reconstruction training.

mod model;
mod spec;
mod train;

pub use model::{FcaeModel, ReconstructionProbe, StackTrace};
pub use spec::{LayerDesc, MapShape, NetworkSpec};
pub use train::{train_fcae, FcaeTrainConfig, TrainReport};
