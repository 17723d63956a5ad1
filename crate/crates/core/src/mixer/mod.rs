//! Synthetic two-talker corpus: sources, mixing, features and storage.

mod corpus;
mod features;
mod mix;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{
    derive_seed, gen_corpus, Corpus, CorpusGenerator, CorpusManifest, CorpusSpec, GeneratedSample,
    MixtureSample, SampleRecord, SplitKind, SplitManifest, CLEAN_SPLITS, EVAL, EVAL_CLEAN,
    MIXTURE_SPLITS, TRAIN, TRAIN_CLEAN,
};
pub use features::{extract_features, hann, mel_filterbank, Cmvn, FeatureExtractor, LOG_FLOOR};
pub use mix::{mix_pair, realized_snr_db, snr_scale, MixMeta, MixedPair};
pub use synth::{
    energy, gen_utterance, SourceUtterance, SpeakerProfile, EDGE_SILENCE_FRAMES, SELF_TRANSITION,
    SILENCE,
};

/// Sampling and analysis grid shared by synthesis and feature extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameConfig {
    pub sample_rate: f64,
    pub frame_len: usize,
    pub hop: usize,
    pub num_filters: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            sample_rate: 8000.0,
            frame_len: 256,
            hop: 128,
            num_filters: 40,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate.is_nan() || self.sample_rate <= 0.0 || self.frame_len < 2 || self.num_filters == 0 {
            return Err(Error::validation(format!("bad frame config {self:?}")));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::validation(format!(
                "hop {} must lie in 1..={}",
                self.hop, self.frame_len
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Samples needed for exactly `frames` analysis windows.
    pub fn waveform_len(&self, frames: usize) -> usize {
        frames.saturating_sub(1) * self.hop + self.frame_len
    }

    pub fn num_frames(&self, samples: usize) -> Result<usize> {
        if samples < self.frame_len {
            return Err(Error::validation(format!(
                "{samples} samples is shorter than one {}-sample frame",
                self.frame_len
            )));
        }
        Ok((samples - self.frame_len) / self.hop + 1)
    }
}
