//! Synthetic single-talker sources.
//!
//! Each senone is rendered as a pair of sinusoids ("formants"); senone 0 is
//! silence and emits only the noise floor. Talkers share a common formant
//! layout and differ by small per-senone perturbations, a pitch offset that
//! shifts both formants, and their gain.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FrameConfig;
use crate::error::{Error, Result};
use crate::pitloss::LabelSequence;

pub const SILENCE: u32 = 0;
pub const SELF_TRANSITION: f64 = 0.9;
pub const EDGE_SILENCE_FRAMES: usize = 2;
const NOISE_FLOOR_DB: f64 = -30.0;
const SECOND_FORMANT_GAIN: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    pub base_gain: f64,
    /// `(f1, f2)` in Hz per senone; entry 0 (silence) is unused.
    pub formants: Vec<(f64, f64)>,
    pub pitch_offset: f64,
}

/// Shared formant layout: first formants evenly spaced over 300–900 Hz,
/// second formants spread over 1200–3000 Hz in a stride order so that
/// neighbouring senones differ in both.
fn base_formants(num_senones: usize) -> Vec<(f64, f64)> {
    let speech = num_senones.saturating_sub(1).max(1);
    let mut table = vec![(0.0, 0.0)];
    for j in 0..num_senones.saturating_sub(1) {
        let f1 = if speech > 1 {
            300.0 + 600.0 * j as f64 / (speech - 1) as f64
        } else {
            600.0
        };
        let stride = if speech.is_multiple_of(3) { 2 } else { 3 };
        let slot = (j * stride) % speech;
        let f2 = 1200.0 + 1800.0 * slot as f64 / speech as f64;
        table.push((f1, f2));
    }
    table
}

impl SpeakerProfile {
    /// Draws a talker: ±4% per-formant jitter, pitch offset in ±60 Hz and
    /// gain in [0.5, 1.5].
    pub fn generate(speaker_id: u32, num_senones: usize, rng: &mut impl Rng) -> Self {
        let pitch_offset = rng.random_range(-60.0..60.0);
        let base_gain = rng.random_range(0.5..1.5);
        let formants = base_formants(num_senones)
            .into_iter()
            .enumerate()
            .map(|(k, (f1, f2))| {
                if k == SILENCE as usize {
                    (0.0, 0.0)
                } else {
                    (
                        f1 * (1.0 + rng.random_range(-0.04..0.04)),
                        f2 * (1.0 + rng.random_range(-0.04..0.04)),
                    )
                }
            })
            .collect();
        SpeakerProfile {
            speaker_id,
            base_gain,
            formants,
            pitch_offset,
        }
    }

    pub fn num_senones(&self) -> usize {
        self.formants.len()
    }

    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        let nyquist = sample_rate / 2.0;
        for (k, &(f1, f2)) in self.formants.iter().enumerate().skip(1) {
            for f in [f1 + self.pitch_offset, f2 + self.pitch_offset] {
                if !(f > 0.0 && f < nyquist) {
                    return Err(Error::validation(format!(
                        "speaker {} senone {k}: {f} Hz outside (0, {nyquist})",
                        self.speaker_id
                    )));
                }
            }
        }
        if self.num_senones() < 2 {
            return Err(Error::validation("profile needs at least two senones"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceUtterance {
    pub waveform: Vec<f64>,
    pub labels: LabelSequence,
    pub speaker_id: u32,
    pub num_frames: usize,
}

impl SourceUtterance {
    pub fn energy(&self) -> f64 {
        energy(&self.waveform)
    }
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Markov chain over speech senones with two silence frames at each end.
fn senone_sequence(num_frames: usize, num_senones: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let speech = (num_senones - 1) as u32;
    let mut out = vec![SILENCE; num_frames];
    let mut state = rng.random_range(1..=speech);
    for slot in &mut out[EDGE_SILENCE_FRAMES..num_frames - EDGE_SILENCE_FRAMES] {
        *slot = state;
        if speech > 1 && rng.random::<f64>() >= SELF_TRANSITION {
            // Uniform over the other speech states.
            let mut next = rng.random_range(1..speech);
            if next >= state {
                next += 1;
            }
            state = next;
        }
    }
    out
}

/// Renders `num_frames` frames of a talker. Sample `n` belongs to the frame
/// whose analysis window is centred on it, so the label of frame `t`
/// describes the middle of window `t`.
pub fn gen_utterance(
    profile: &SpeakerProfile,
    num_frames: usize,
    frame: &FrameConfig,
    seed: u64,
) -> Result<SourceUtterance> {
    if num_frames < 2 * EDGE_SILENCE_FRAMES + 1 {
        return Err(Error::validation(format!(
            "utterance needs at least {} frames, got {num_frames}",
            2 * EDGE_SILENCE_FRAMES + 1
        )));
    }
    profile.validate(frame.sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let senones = senone_sequence(num_frames, profile.num_senones(), &mut rng);

    let len = frame.waveform_len(num_frames);
    let offset = (frame.frame_len - frame.hop) / 2;
    let sigma = profile.base_gain * 10f64.powf(NOISE_FLOOR_DB / 20.0);
    let noise = Normal::new(0.0, sigma).expect("finite noise level");
    let step = 2.0 * PI / frame.sample_rate;
    let (mut phase1, mut phase2) = (0.0f64, 0.0f64);
    let mut waveform = Vec::with_capacity(len);
    for n in 0..len {
        let t = (n.saturating_sub(offset) / frame.hop).min(num_frames - 1);
        let senone = senones[t] as usize;
        let mut x = noise.sample(&mut rng);
        if senone != SILENCE as usize {
            let (f1, f2) = profile.formants[senone];
            phase1 = (phase1 + step * (f1 + profile.pitch_offset)) % (2.0 * PI);
            phase2 = (phase2 + step * (f2 + profile.pitch_offset)) % (2.0 * PI);
            x += profile.base_gain * (phase1.sin() + SECOND_FORMANT_GAIN * phase2.sin());
        }
        waveform.push(x);
    }

    Ok(SourceUtterance {
        waveform,
        labels: LabelSequence::new(senones, 0),
        speaker_id: profile.speaker_id,
        num_frames,
    })
}
