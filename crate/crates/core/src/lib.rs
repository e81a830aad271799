//! Joint spatiotemporal transformer for visit sequences.
//!
//! The model predicts the next visit's region with a categorical head, then
//! its travel time and duration with Gaussian-mixture heads that condition
//! on the predicted region (and, for duration, the arrival time). Infilling
//! of gaps is handled by reframing sequences so a left-to-right model can
//! fill BLANK spans after a SEP token.

pub mod encoders;
pub mod error;
pub mod gmm;
pub mod checkpoint;
pub mod infer;
pub mod ingest;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reframe;
pub mod synth;
pub mod tape;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{duration, travel_time, Point, ReframedSequence, RegionId, Seconds, Token, TokenKind, Visit, VisitSequence};
