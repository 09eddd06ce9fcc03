//! Physics-informed transformer for one-hour building indoor-temperature
//! forecasting, with a synthetic RC building simulator and the training and
//! evaluation protocol around it.

pub mod autodiff;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod training;

pub use autodiff::{Graph, Tensor, Var};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use datagen::{ClimateProfile, DatasetSpec, RcBuilding};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, SplitSpec};
pub use features::{BuildingStatic, Standardizer, TimeSeriesRecord, WindowConfig, WindowSample};
pub use model::{ModelConfig, ModelParams, PhysicsTransformer};
pub use training::TrainConfig;
