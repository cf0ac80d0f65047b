//! Context classification for cloud-game streaming traffic.
//!
//! The pipeline: [`detector`] picks the streaming flow out of a capture,
//! [`grouper`] turns the first seconds of downstream traffic into a title
//! feature vector, [`tracker`] classifies the player's activity stage per
//! slot and infers the session's gameplay pattern, and [`qoe`] re-bands
//! objective QoE measurements using that context. [`forest`] is the
//! tree-ensemble learner shared by all three models, and [`synth`]
//! generates labeled sessions for training and evaluation.

pub mod capture;
pub mod config;
pub mod detector;
pub mod engine;
pub mod error;
pub mod forest;
pub mod grouper;
pub mod harness;
pub mod model;
pub mod par;
pub mod qoe;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
pub use par::Exec;
