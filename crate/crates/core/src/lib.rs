//! Offline decoding of texture-touch EEG: synthetic sessions, zero-phase
//! filtering, CSP + one-versus-rest LDA, a compact EEGNet-style CNN, and
//! repeated stratified cross-validation.

pub mod cnn;
pub mod csp;
pub mod domain;
pub mod error;
pub mod eval;
pub mod filter;
pub mod io;
pub mod lda;
pub mod ovr;
pub mod preprocess;
pub mod report;
pub mod seed;
pub mod synth;

pub use domain::{
    class_code, code_to_class, validate_dataset, ChannelLayout, Condition, Dataset, Epoch,
    ProtocolSpec, Provenance, TextureClass, ValidationReport, N_CLASSES,
};
pub use error::{Error, Result};
pub use cnn::{CnnArch, CnnModel, Hyperparams};
pub use eval::{cross_validate, CspLdaPipeline, CvPlan, EegNetPipeline, EvalReport, Pipeline};
pub use ovr::CspLdaParams;
pub use preprocess::FilterSpec;
pub use report::{render_report, RenderedReport};
pub use synth::{generate_dataset, GenConfig};
