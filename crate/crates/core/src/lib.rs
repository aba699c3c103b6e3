//! Source-free domain adaptation by contrastive prototype generation and
//! adaptation.
//!
//! A source model (extractor plus weight-normalized classifier) is trained
//! on labeled source data and the classifier is frozen. A conditional
//! generator then learns class prototypes that the frozen classifier
//! recognizes, and finally the extractor is adapted to unlabeled target
//! data by pulling target features toward those prototypes.

pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod labeling;
pub mod linalg;
pub mod losses;
pub mod memory;
pub mod models;
pub mod nn;
pub mod params;
pub mod training;

pub use checkpoint::Checkpoint;
pub use datasets::{Dataset, DomainTag, ShiftConfig};
pub use error::{CpgaError, Result};
pub use losses::{LossToggles, Temperature, TradeOffs};
pub use memory::{BankInit, FeatureBank, PredictionBank};
pub use models::{Classifier, Component, Extractor, Generator, ModelDims, Projector};
pub use training::{run_pipeline, MetricsLog, RunConfig, RunOutput, TrainConfig};
