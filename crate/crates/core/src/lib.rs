pub mod ablation;
pub mod error;
pub mod export;
pub mod gating;
pub mod loss;
pub mod matching;
pub mod network;
pub mod prior;
pub mod schedule;
pub mod smoe;
pub mod tensor;
pub mod trainer;

pub use ablation::Ablations;
pub use error::{Error, Result};
pub use tensor::{GradMode, Graph, Tensor, Var};
/// Package version plus `git describe` of the build tree when available.
pub const BUILD_VERSION: &str = env!("SWITCHDIT_BUILD_VERSION");
