//! Model files, the private-inference orchestrator and benchmarking.

pub mod model_file;
pub mod orchestrator;
pub mod secure;

pub use model_file::{ModelFile, ModelFileError, Provenance};
pub use orchestrator::{run_private_inference, Endpoint, InferenceReport, Mode, RunError, Seeds};
pub use secure::{secure_forward, PublicModel};
