//! Level-guided multimodal fusion.
//!
//! Each modality is encoded by a three-level pyramid network whose levels get
//! their own prediction heads. A logistic meta-learner stacks the level
//! predictions, exact Shapley attribution over that meta-learner picks each
//! modality's best level, the two best-level representations meet in
//! cross-modal attention, and logistic stackers combine everything into one
//! final probability.

pub mod attention;
pub mod data;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod modality;
pub mod model_io;
pub mod numeric;
pub mod pfn;
pub mod pipeline;
pub mod shapley;

pub use error::{LemofError, Result};
