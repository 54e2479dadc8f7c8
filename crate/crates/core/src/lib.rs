//! Joint video deblurring and bidirectional optical flow estimation.
//!
//! Each blurry frame is modelled as the time average of its sharp latent
//! frame moved along the forward and backward flows. Latent frames and flows
//! are recovered by alternately minimizing one variational energy over a
//! coarse-to-fine pyramid.

pub mod blur;
pub mod energy;
pub mod error;
pub mod evalkit;
pub mod flow;
pub mod image;
pub mod io;
pub mod latent;
pub mod params;
pub mod pipeline;
pub mod refine;
pub mod state;

pub use error::{Error, Result};
pub use image::{FlowField, Image};
pub use params::SolverParams;
pub use pipeline::{run, run_with_progress, EnergyRecord, RunOutput};
pub use state::{Direction, DualState, SequenceState};
