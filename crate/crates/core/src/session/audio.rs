//! Audio feature aggregation: 16 kHz mono PCM to 25 feature frames per second.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const AUDIO_HZ: u32 = 16_000;
pub const FEATURE_RATE: u32 = 25;
/// Samples covered by one feature frame.
pub const SAMPLES_PER_FEATURE: usize = (AUDIO_HZ / FEATURE_RATE) as usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AudioError {
    #[error("sample rate {0} Hz unsupported, expected {AUDIO_HZ} Hz")]
    SampleRate(u32),
    #[error("feature dimension must be at least 1")]
    FeatureDim,
}

/// Features for samples `[index * 640, (index + 1) * 640)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioFeatureFrame {
    pub index: usize,
    /// `features[0]` is RMS, the rest are band energies.
    pub features: Vec<f64>,
}

impl AudioFeatureFrame {
    pub fn rms(&self) -> f64 {
        self.features.first().copied().unwrap_or(0.0)
    }
}

/// Toy stand-in for a speech encoder: RMS plus evenly spaced FFT band energies.
#[derive(Clone)]
pub struct FeatureExtractor {
    dim: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("dim", &self.dim).finish()
    }
}

impl FeatureExtractor {
    pub fn new(dim: usize) -> Result<Self, AudioError> {
        if dim == 0 {
            return Err(AudioError::FeatureDim);
        }
        let fft = FftPlanner::new().plan_fft_forward(SAMPLES_PER_FEATURE);
        Ok(Self { dim, fft })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Features of one window; short windows are zero-padded to 640 samples.
    pub fn frame(&self, index: usize, window: &[f32]) -> AudioFeatureFrame {
        let window = &window[..window.len().min(SAMPLES_PER_FEATURE)];
        let energy: f64 = window.iter().map(|&x| x as f64 * x as f64).sum();
        let rms = (energy / SAMPLES_PER_FEATURE as f64).sqrt();
        let mut features = Vec::with_capacity(self.dim);
        features.push(rms);
        let bands = self.dim - 1;
        if bands > 0 {
            let mut buf: Vec<Complex<f64>> = (0..SAMPLES_PER_FEATURE)
                .map(|i| Complex::new(window.get(i).copied().unwrap_or(0.0) as f64, 0.0))
                .collect();
            self.fft.process(&mut buf);
            // positive-frequency bins 1..=N/2, split evenly
            let nyquist = SAMPLES_PER_FEATURE / 2;
            let n2 = (SAMPLES_PER_FEATURE * SAMPLES_PER_FEATURE) as f64;
            for b in 0..bands {
                let lo = 1 + b * nyquist / bands;
                let hi = 1 + (b + 1) * nyquist / bands;
                let e: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>() / n2;
                features.push(e);
            }
        }
        AudioFeatureFrame { index, features }
    }

    /// One frame per 640 samples; the final partial window is zero-padded.
    pub fn aggregate(&self, pcm: &[f32]) -> Vec<AudioFeatureFrame> {
        pcm.chunks(SAMPLES_PER_FEATURE)
            .enumerate()
            .map(|(i, w)| self.frame(i, w))
            .collect()
    }
}

pub fn aggregate_audio(
    pcm: &[f32],
    sample_rate: u32,
    feature_dim: usize,
) -> Result<Vec<AudioFeatureFrame>, AudioError> {
    if sample_rate != AUDIO_HZ {
        return Err(AudioError::SampleRate(sample_rate));
    }
    Ok(FeatureExtractor::new(feature_dim)?.aggregate(pcm))
}

/// `seconds` of a sine at `freq` Hz and amplitude `amp`, sampled at 16 kHz.
pub fn sine(freq: f64, amp: f32, seconds: f64) -> Vec<f32> {
    let n = (seconds * AUDIO_HZ as f64).round() as usize;
    (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / AUDIO_HZ as f64).sin() as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_examples() {
        assert_eq!(aggregate_audio(&vec![0.0; 16_000], 16_000, 8).unwrap().len(), 25);
        assert!(aggregate_audio(&[], 16_000, 8).unwrap().is_empty());
        assert_eq!(aggregate_audio(&vec![0.0; 38_400], 16_000, 8).unwrap().len(), 60);
        assert_eq!(
            aggregate_audio(&[0.0; 10], 44_100, 8).unwrap_err(),
            AudioError::SampleRate(44_100)
        );
    }

    #[test]
    fn count_is_ceil_sweep() {
        let ex = FeatureExtractor::new(1).unwrap();
        let pcm = vec![0.1f32; 16_000 * 10];
        for n in (0..=pcm.len()).step_by(7) {
            assert_eq!(ex.aggregate(&pcm[..n]).len(), n.div_ceil(SAMPLES_PER_FEATURE));
        }
    }

    #[test]
    fn sine_features() {
        let ex = FeatureExtractor::new(8).unwrap();
        // 400 Hz completes 16 periods per window
        let frames = ex.aggregate(&sine(400.0, 1.0, 0.2));
        assert_eq!(frames.len(), 5);
        for f in &frames {
            assert_eq!(f.features.len(), 8);
            assert!((f.rms() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
            // 400 Hz is bin 16, inside the first band
            let total: f64 = f.features[1..].iter().sum();
            assert!(f.features[1] / total > 0.99);
        }
    }

    #[test]
    fn silence_is_zero() {
        let ex = FeatureExtractor::new(4).unwrap();
        let f = ex.frame(0, &[0.0; 100]);
        assert!(f.features.iter().all(|&x| x == 0.0));
    }
}
