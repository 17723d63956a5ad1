use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::synth::{energy, SourceUtterance, SILENCE};
use super::FrameConfig;
use crate::error::{Error, Result};
use crate::pitloss::LabelSequence;

const PADDING_NOISE_DB: f64 = -40.0;

/// Amplitude factor for the low-energy source so that
/// `10·log10(e_high / (a²·e_low)) = target_snr_db`.
pub fn snr_scale(e_high: f64, e_low: f64, target_snr_db: f64) -> Result<f64> {
    if !(e_high > 0.0 && e_low > 0.0) {
        return Err(Error::validation(format!(
            "energies must be positive, got {e_high} and {e_low}"
        )));
    }
    Ok((e_high / (e_low * 10f64.powf(target_snr_db / 10.0))).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixMeta {
    pub snr_db: f64,
    /// Index into the target list of the high-energy talker (always 0 here).
    pub high_energy_speaker: usize,
    pub speakers: Vec<u32>,
    /// Frame counts of the sources before padding.
    pub original_lengths: Vec<usize>,
    /// `(front, end)` padding in frames per source.
    pub padding: Vec<(usize, usize)>,
    pub low_scale: f64,
}

#[derive(Clone, Debug)]
pub struct MixedPair {
    pub mixture: Vec<f64>,
    /// The scaled, padded sources; `mixture` is their sample-wise sum.
    pub sources: Vec<Vec<f64>>,
    pub targets: Vec<LabelSequence>,
    pub meta: MixMeta,
}

impl MixedPair {
    pub fn num_frames(&self) -> usize {
        self.targets[0].len()
    }
}

/// Pads the shorter source with low-level noise (waveform) and silence
/// (labels), split half front / half end with the front getting the floor.
fn pad(
    waveform: &[f64],
    labels: &[u32],
    front: usize,
    end: usize,
    frame: &FrameConfig,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<u32>) {
    let mut w = Vec::with_capacity(waveform.len() + (front + end) * frame.hop);
    w.extend((0..front * frame.hop).map(|_| noise.sample(rng)));
    w.extend_from_slice(waveform);
    w.extend((0..end * frame.hop).map(|_| noise.sample(rng)));
    let mut l = vec![SILENCE; front];
    l.extend_from_slice(labels);
    l.extend(std::iter::repeat_n(SILENCE, end));
    (w, l)
}

/// Linearly mixes a caller-designated high-energy source with a low-energy
/// source at `target_snr_db`, measured over the unpadded signals.
pub fn mix_pair(
    high: &SourceUtterance,
    low: &SourceUtterance,
    target_snr_db: f64,
    frame: &FrameConfig,
    seed: u64,
) -> Result<MixedPair> {
    if high.speaker_id == low.speaker_id {
        return Err(Error::validation(format!(
            "both sources come from speaker {}",
            high.speaker_id
        )));
    }
    let (lh, ll) = (high.num_frames, low.num_frames);
    let (short, long) = (lh.min(ll), lh.max(ll));
    if 4 * short < 3 * long {
        return Err(Error::validation(format!(
            "source lengths {lh} and {ll} differ by more than 3:4"
        )));
    }
    for s in [high, low] {
        if s.waveform.len() != frame.waveform_len(s.num_frames) {
            return Err(Error::validation(format!(
                "speaker {} waveform does not match its {} frames",
                s.speaker_id, s.num_frames
            )));
        }
    }

    let e_high = high.energy();
    let scale = snr_scale(e_high, low.energy(), target_snr_db)?;
    let scaled_low: Vec<f64> = low.waveform.iter().map(|x| x * scale).collect();

    let rms_high = (e_high / high.waveform.len() as f64).sqrt();
    let noise = Normal::new(0.0, rms_high * 10f64.powf(PADDING_NOISE_DB / 20.0))
        .map_err(|e| Error::Numeric(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut sources = Vec::with_capacity(2);
    let mut targets = Vec::with_capacity(2);
    let mut padding = Vec::with_capacity(2);
    for (stream, (wave, src)) in [(&high.waveform, high), (&scaled_low, low)]
        .into_iter()
        .enumerate()
    {
        let missing = long - src.num_frames;
        let front = missing / 2;
        let end = missing - front;
        let (w, l) = pad(
            wave,
            &src.labels.senones,
            front,
            end,
            frame,
            &noise,
            &mut rng,
        );
        sources.push(w);
        targets.push(LabelSequence::new(l, stream));
        padding.push((front, end));
    }

    let mixture = sources[0]
        .iter()
        .zip(&sources[1])
        .map(|(a, b)| a + b)
        .collect();

    Ok(MixedPair {
        mixture,
        sources,
        targets,
        meta: MixMeta {
            snr_db: target_snr_db,
            high_energy_speaker: 0,
            speakers: vec![high.speaker_id, low.speaker_id],
            original_lengths: vec![lh, ll],
            padding,
            low_scale: scale,
        },
    })
}

/// Realized SNR of a mix, from the unpadded high source and the scaled,
/// unpadded low source.
pub fn realized_snr_db(pair: &MixedPair, frame: &FrameConfig) -> f64 {
    let strip = |w: &[f64], (front, end): (usize, usize)| -> f64 {
        energy(&w[front * frame.hop..w.len() - end * frame.hop])
    };
    let e_high = strip(&pair.sources[0], pair.meta.padding[0]);
    let e_low = strip(&pair.sources[1], pair.meta.padding[1]);
    10.0 * (e_high / e_low).log10()
}
