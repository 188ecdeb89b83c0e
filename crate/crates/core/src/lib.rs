pub mod cam;
pub mod cvae;
pub mod error;
pub mod graph;
pub mod kinematics;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod perturb;
pub mod recnet;
pub mod seqdata;

pub use error::{Error, Result};
