//! Permutation-invariant cross-entropy training for multi-talker acoustic
//! models.
//!
//! A stack of bidirectional LSTM layers reads features of a single-channel
//! mixture and emits one senone posterior stream per talker. Training picks,
//! per utterance, the output-to-target assignment with the lowest
//! whole-sequence cross entropy and optimizes for that assignment only.

pub mod error;
pub mod eval;
pub mod mixer;
pub mod network;
pub mod pitloss;
pub mod tensorcore;
pub mod trainer;

pub use error::{Error, Result};
pub use tensorcore::{Graph, Matrix, NodeId};
