//! Gaussian embeddings of visits and medical codes learned jointly from an
//! attributed visit–code bipartite graph and a recurrent temporal point
//! process over each patient's visit sequence.

pub mod autodiff;
pub mod checkpoint;
pub mod cohort;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod par;
pub mod params;
pub mod quadrature;
pub mod risk;
pub mod synth;
pub mod temporal;
pub mod trainer;

pub use autodiff::{grad_check, GradCheckReport, Mat, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use cohort::{load_cohort, load_dir, Cohort};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use synth::{generate, GenConfig};
pub use trainer::{train, Model, TrainConfig};
