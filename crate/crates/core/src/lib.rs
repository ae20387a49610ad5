//! Ground-truth label distribution estimation from sparse, noisy annotators.
//!
//! Two families of estimators are provided:
//!
//! * a generative graph model that jointly soft-clusters items and annotators
//!   ([`pgm`]), learned either by simulated annealing ([`sa`]) or by EM with a
//!   loopy belief-propagation E-step ([`em`]); its cluster distributions are
//!   used to "snap" training targets and predictions ([`pipeline`]);
//! * a small encoder-decoder network ([`ldlnm`]) that predicts the gold
//!   label, the item label distribution and the annotator label distribution
//!   for an (item, annotator) pair.
//!
//! [`experiment`] wires everything into the train/dev/test protocol, and
//! [`genmodel`] samples planted-truth datasets from the generative process.

pub mod data;
pub mod em;
pub mod error;
pub mod experiment;
pub mod genmodel;
pub mod io;
pub mod ldlnm;
pub mod metrics;
pub mod pgm;
pub mod pipeline;
pub mod rng;
pub mod sa;

pub use data::{argmax_label, empirical_dist, kl_divergence, AnnotationMatrix, DatasetSplit, LabelDistribution};
pub use error::{Error, Result};
pub use genmodel::{gen_graph, random_assignment, GroundTruthModel, Hyperparams};
pub use pgm::{GraphModel, ModelParams, PgmState};
