//! Log mel filterbank features.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::FrameConfig;
use crate::error::{Error, Result};
use crate::network::FeatureSequence;
use crate::tensorcore::Matrix;

pub const LOG_FLOOR: f64 = 1e-10;
const CMVN_EPSILON: f64 = 1e-8;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale from 0 Hz to Nyquist,
/// as a `bins × filters` matrix applied to magnitude spectra.
pub fn mel_filterbank(frame: &FrameConfig) -> Matrix {
    let bins = frame.num_bins();
    let nyquist = frame.sample_rate / 2.0;
    let m_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..frame.num_filters + 2)
        .map(|i| mel_to_hz(m_max * i as f64 / (frame.num_filters + 1) as f64))
        .collect();
    let mut bank = Matrix::zeros(bins, frame.num_filters);
    for j in 0..frame.num_filters {
        let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
        for k in 0..bins {
            let f = k as f64 * frame.sample_rate / frame.frame_len as f64;
            let w = if f > lo && f < mid {
                (f - lo) / (mid - lo)
            } else if f >= mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            bank.set(k, j, w);
        }
    }
    bank
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable STFT front end; holds the FFT plan, window and filterbank.
pub struct FeatureExtractor {
    frame: FrameConfig,
    window: Vec<f64>,
    bank: Matrix,
    fft: Arc<dyn Fft<f64>>,
}

impl FeatureExtractor {
    pub fn new(frame: &FrameConfig) -> Result<Self> {
        frame.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(frame.frame_len);
        Ok(FeatureExtractor {
            frame: frame.clone(),
            window: hann(frame.frame_len),
            bank: mel_filterbank(frame),
            fft,
        })
    }

    pub fn frame_config(&self) -> &FrameConfig {
        &self.frame
    }

    /// `frames × bins` magnitude spectra of the windowed frames.
    pub fn magnitudes(&self, waveform: &[f64]) -> Result<Matrix> {
        let frames = self.frame.num_frames(waveform.len())?;
        let bins = self.frame.num_bins();
        let mut out = Matrix::zeros(frames, bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.frame.frame_len];
        for t in 0..frames {
            let start = t * self.frame.hop;
            for (n, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(waveform[start + n] * self.window[n], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = buf[k].norm();
            }
        }
        Ok(out)
    }

    /// `frames × filters` log mel energies, `ln(max(·,0) + 1e-10)`.
    pub fn log_mel(&self, waveform: &[f64]) -> Result<Matrix> {
        let mut feats = self.magnitudes(waveform)?.matmul(&self.bank)?;
        for v in feats.as_mut_slice() {
            *v = (*v + LOG_FLOOR).ln();
        }
        Ok(feats)
    }

    pub fn extract(
        &self,
        waveform: &[f64],
        cmvn: Option<&Cmvn>,
        utterance_id: impl Into<String>,
    ) -> Result<FeatureSequence> {
        let mut feats = self.log_mel(waveform)?;
        if let Some(stats) = cmvn {
            stats.apply(&mut feats)?;
        }
        FeatureSequence::new(feats, utterance_id)
    }
}

/// One-shot feature extraction; prefer [`FeatureExtractor`] in loops.
pub fn extract_features(
    waveform: &[f64],
    frame: &FrameConfig,
    cmvn: Option<&Cmvn>,
) -> Result<FeatureSequence> {
    FeatureExtractor::new(frame)?.extract(waveform, cmvn, "")
}

/// Per-dimension mean and variance normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cmvn {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Cmvn {
    /// Population statistics over all frames of all matrices.
    pub fn estimate<'a>(feats: impl IntoIterator<Item = &'a Matrix>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for m in feats {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sum_sq = vec![0.0; m.cols()];
            } else if m.cols() != sum.len() {
                return Err(Error::validation(format!(
                    "feature dims {} and {} in one CMVN estimate",
                    sum.len(),
                    m.cols()
                )));
            }
            for t in 0..m.rows() {
                for (d, &x) in m.row(t).iter().enumerate() {
                    sum[d] += x;
                    sum_sq[d] += x * x;
                }
            }
            count += m.rows();
        }
        if count == 0 {
            return Err(Error::validation("CMVN needs at least one frame"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0))
            .collect();
        Ok(Cmvn { mean, var })
    }

    pub fn apply(&self, feats: &mut Matrix) -> Result<()> {
        if feats.cols() != self.mean.len() {
            return Err(Error::validation(format!(
                "CMVN has {} dims, features have {}",
                self.mean.len(),
                feats.cols()
            )));
        }
        let inv_std: Vec<f64> = self
            .var
            .iter()
            .map(|v| 1.0 / (v + CMVN_EPSILON).sqrt())
            .collect();
        for t in 0..feats.rows() {
            for (d, x) in feats.row_mut(t).iter_mut().enumerate() {
                *x = (*x - self.mean[d]) * inv_std[d];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(N²) DFT magnitude, independent of the FFT path.
    fn naive_dft_magnitudes(frame: &[f64], window: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, (&x, &w)) in frame.iter().zip(window).enumerate() {
                    let phase = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += x * w * phase.cos();
                    im += x * w * phase.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    fn tone(freq: f64, len: usize, sr: f64) -> Vec<f64> {
        (0..len)
            .map(|n| (2.0 * PI * freq * n as f64 / sr).sin())
            .collect()
    }

    #[test]
    fn frame_count_follows_hop() {
        let frame = FrameConfig::default();
        let fx = FeatureExtractor::new(&frame).unwrap();
        let feats = fx.log_mel(&vec![0.0; 256 + 128 * 9]).unwrap();
        assert_eq!(feats.shape(), (10, 40));
        assert!(fx.log_mel(&[0.0; 255]).is_err());
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let feats = extract_features(&[0.0; 1024], &FrameConfig::default(), None).unwrap();
        for v in feats.frames.as_slice() {
            assert_eq!(*v, LOG_FLOOR.ln());
        }
    }

    #[test]
    fn fft_magnitudes_match_naive_dft() {
        let frame = FrameConfig::default();
        let fx = FeatureExtractor::new(&frame).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wave: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = fx.magnitudes(&wave).unwrap();
        let slow = naive_dft_magnitudes(&wave, &hann(256));
        for (k, s) in slow.iter().enumerate() {
            assert!((fast.get(0, k) - s).abs() < 1e-9);
        }
    }

    #[test]
    fn sinusoid_peaks_at_its_bin() {
        let frame = FrameConfig::default();
        let fx = FeatureExtractor::new(&frame).unwrap();
        for freq in [500.0, 1000.0, 2250.0, 3000.0] {
            let wave = tone(freq, 256, 8000.0);
            let mags = fx.magnitudes(&wave).unwrap();
            let argmax = (0..129)
                .max_by(|&a, &b| mags.get(0, a).total_cmp(&mags.get(0, b)))
                .unwrap();
            let oracle = naive_dft_magnitudes(&wave, &hann(256));
            let oracle_argmax = (0..129)
                .max_by(|&a, &b| oracle[a].total_cmp(&oracle[b]))
                .unwrap();
            assert_eq!(argmax, oracle_argmax);
            assert_eq!(argmax, (freq / 8000.0 * 256.0).round() as usize);
        }
    }

    #[test]
    fn filterbank_triangles_are_bounded_and_cover_the_band() {
        let bank = mel_filterbank(&FrameConfig::default());
        assert_eq!(bank.shape(), (129, 40));
        for j in 0..40 {
            let peak = (0..129).map(|k| bank.get(k, j)).fold(0.0, f64::max);
            assert!(peak > 0.0 && peak <= 1.0, "filter {j} peak {peak}");
        }
        for k in 1..128 {
            let total: f64 = (0..40).map(|j| bank.get(k, j)).sum();
            assert!(total > 0.0, "bin {k} uncovered");
        }
    }

    #[test]
    fn mel_scale_round_trips() {
        for f in [0.0, 100.0, 1000.0, 4000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
    }

    #[test]
    fn cmvn_normalizes_its_own_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mats: Vec<Matrix> = (0..3)
            .map(|_| {
                let data = (0..20 * 5).map(|_| rng.random_range(-4.0..9.0)).collect();
                Matrix::from_vec(20, 5, data).unwrap()
            })
            .collect();
        let cmvn = Cmvn::estimate(&mats).unwrap();
        let mut all = Vec::new();
        for m in &mats {
            let mut m = m.clone();
            cmvn.apply(&mut m).unwrap();
            all.push(m);
        }
        for d in 0..5 {
            let xs: Vec<f64> = all.iter().flat_map(|m| (0..20).map(move |t| m.get(t, d))).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(mean.abs() < 1e-8);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cmvn_rejects_mismatched_dims() {
        let cmvn = Cmvn::estimate([&Matrix::zeros(3, 4)]).unwrap();
        assert!(cmvn.apply(&mut Matrix::zeros(2, 5)).is_err());
        assert!(Cmvn::estimate([&Matrix::zeros(3, 4), &Matrix::zeros(3, 2)]).is_err());
        assert!(Cmvn::estimate(std::iter::empty()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn features_are_finite(seed in any::<u64>(), frames in 1usize..6, amp in 0.0f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = 256 + 128 * (frames - 1);
            let wave: Vec<f64> = (0..len).map(|_| amp * rng.random_range(-1.0..1.0)).collect();
            let feats = extract_features(&wave, &FrameConfig::default(), None).unwrap();
            prop_assert_eq!(feats.frames.shape(), (frames, 40));
            prop_assert!(feats.frames.is_finite());
        }
    }
}
