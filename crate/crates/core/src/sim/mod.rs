//! Room acoustics and scene synthesis.

pub mod dataset;
pub mod nonlinear;
pub mod rir;
pub mod room;
pub mod scene;
pub mod synth;

pub use dataset::{build_dataset, DatasetConfig, LoadedScene, Manifest, SceneRecord, Split};
pub use nonlinear::Nonlinearity;
pub use rir::RirSet;
pub use room::RoomSpec;
pub use scene::{mix_scene, Activity, SceneAudio, SceneSpec};
