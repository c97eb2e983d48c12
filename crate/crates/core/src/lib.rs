//! Fairness-aware few-shot meta-learning.
//!
//! The crate bundles a small reverse-mode autodiff engine with
//! second-order support, a multilayer perceptron, the decision-boundary
//! covariance fairness measure, episodic task sampling and three
//! meta-learners (fair MAML plus prototype and matching baselines).
//!
//! ```
//! use fairmeta::fairness::{disparate_impact_from_rates};
//!
//! let di = disparate_impact_from_rates(0.25, 7.0 / 12.0).unwrap();
//! assert!((di.ratio - 0.428_571).abs() < 1e-5);
//! assert!(!di.eighty_percent_pass);
//! ```

pub mod autodiff;
pub mod episodes;
pub mod error;
pub mod fairness;
pub mod harness;
pub mod meta;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use autodiff::{GradientMap, Tape, Var};
pub use episodes::{Dataset, Episode, EpisodeSource, EpisodeSpec, TaskFamily};
pub use error::{Error, Result};
pub use fairness::{FairnessConfig, FairnessReport};
pub use harness::{RunConfig, RunOutcome};
pub use meta::{LearnerKind, MetaConfig, Trainer};
pub use metrics::MetricsRecord;
pub use nn::{MlpSpec, ParameterSet};
pub use tensor::Tensor;
