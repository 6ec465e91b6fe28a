//! Speech-noise diagnostics on layer activations: locate the layers where
//! environmental noise is encoded, extract an orthonormal noise basis, score
//! activations by the share of energy in that basis (SEE) and subtract it.
//!
//! Pipeline: [`tensor_io`] → [`calibrate`] → [`see`] / [`seen`] → [`stats`].
//! [`synth`] plants known subspaces for end-to-end validation.

pub mod calibrate;
pub mod error;
pub mod linalg;
pub mod see;
pub mod seen;
pub mod stats;
pub mod synth;
pub mod tensor_io;

pub use calibrate::{calibrate, CalibConfig, Calibration, LayerDiagnostics, Localization, SvMode};
pub use error::{Error, Result};
pub use see::{score_samples, see_score, SeeScore};
pub use seen::{neutralize, neutralize_sample, NeutralizeConfig};
pub use tensor_io::{ActivationDataset, ActivationSequence, NoiseBasisBundle, Sample, SampleKind};
