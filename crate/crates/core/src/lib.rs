//! Mixture-of-Depths tuning: a decoder-only transformer whose prediction mixes the
//! exits of its top layers under a learned per-token router.

pub mod checkpoint;
pub mod config;
pub mod ctx;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod lora;
pub mod metrics;
pub mod mod_head;
pub mod model;
pub mod objectives;
pub mod params;
pub mod trainer;

pub use config::{LoraConfig, ModConfig, ModelConfig, Projection};
pub use ctx::Ctx;
pub use error::{CoreError, Result};
pub use mod_head::{ModHead, RoutedOutput};
pub use model::{ForwardTrace, TransformerModel};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use trainer::{Preset, TrainConfig, TrainOutcome};
