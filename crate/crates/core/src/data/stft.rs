//! Short-time Fourier analysis with a sine window at 50% overlap, and
//! overlap-add resynthesis. Signal processing runs in `f64`.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{DvaeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default = "default_frame_len")]
    pub frame_len: usize,
    #[serde(default = "default_hop")]
    pub hop: usize,
}

fn default_sample_rate() -> u32 {
    16_000
}
fn default_frame_len() -> usize {
    512
}
fn default_hop() -> usize {
    256
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: default_sample_rate(),
            frame_len: default_frame_len(),
            hop: default_hop(),
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || self.frame_len % 2 != 0 {
            return Err(DvaeError::Config("frame_len must be even and >= 2".into()));
        }
        if self.hop * 2 != self.frame_len {
            return Err(DvaeError::Config(
                "the sine window reconstructs perfectly only at 50% overlap (hop = frame_len / 2)".into(),
            ));
        }
        if self.sample_rate == 0 {
            return Err(DvaeError::Config("sample_rate must be positive".into()));
        }
        Ok(())
    }

    /// Non-negative frequency bins: `frame_len / 2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// `w[n] = sin(π (n + ½) / N)`; `w²` sums to one across two frames
    /// half a window apart.
    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_len as f64;
        (0..self.frame_len).map(|i| (PI * (i as f64 + 0.5) / n).sin()).collect()
    }

    /// Frames produced from `samples` samples: `⌊(N − frame_len)/hop⌋ + 1`.
    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.frame_len {
            0
        } else {
            (samples - self.frame_len) / self.hop + 1
        }
    }

    /// Length of the signal resynthesized from `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len
        }
    }

    /// Samples covered by two overlapping frames, where overlap-add is exact.
    pub fn interior(&self, frames: usize) -> Range<usize> {
        if frames < 2 {
            return 0..0;
        }
        self.hop..frames * self.hop
    }

    /// Centre frequency of bin `k` in Hz.
    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate as f64 / self.frame_len as f64
    }
}

/// Frame-major power spectrogram with its phase (`frames × bins` each).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub power: Vec<Vec<f64>>,
    pub phase: Vec<Vec<f64>>,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.power.len()
    }

    pub fn n_bins(&self) -> usize {
        self.power.first().map_or(0, Vec::len)
    }
}

/// Reusable FFT plans for one configuration.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.frame_len),
            inverse: planner.plan_fft_inverse(cfg.frame_len),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Windowed DFT of every frame; power is the squared magnitude.
    pub fn analyze(&self, wave: &[f64]) -> Result<Spectrogram> {
        let n = self.cfg.frame_len;
        if wave.len() < n {
            return Err(DvaeError::Domain(format!(
                "waveform of {} samples is shorter than one frame ({n})",
                wave.len()
            )));
        }
        let frames = self.cfg.frame_count(wave.len());
        let bins = self.cfg.n_bins();
        let mut power = Vec::with_capacity(frames);
        let mut phase = Vec::with_capacity(frames);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for f in 0..frames {
            let start = f * self.cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(wave[start + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            power.push(buf[..bins].iter().map(|c| c.norm_sqr()).collect());
            phase.push(buf[..bins].iter().map(|c| c.arg()).collect());
        }
        Ok(Spectrogram { power, phase })
    }

    /// Inverse DFT of `sqrt(power)·e^{iφ}` per frame, sine-windowed and
    /// overlap-added.
    pub fn synthesize(&self, power: &[Vec<f64>], phase: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = self.cfg.frame_len;
        let bins = self.cfg.n_bins();
        if power.len() != phase.len() {
            return Err(DvaeError::dims("phase frames", power.len(), phase.len()));
        }
        let mut out = vec![0.0; self.cfg.signal_len(power.len())];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let scale = 1.0 / n as f64;
        for (f, (p, ph)) in power.iter().zip(phase).enumerate() {
            if p.len() != bins {
                return Err(DvaeError::dims("power bins", bins, p.len()));
            }
            if ph.len() != bins {
                return Err(DvaeError::dims("phase bins", bins, ph.len()));
            }
            for k in 0..bins {
                buf[k] = Complex::from_polar(p[k].max(0.0).sqrt(), ph[k]);
            }
            // Hermitian symmetry of a real frame; DC and Nyquist are real.
            buf[0].im = 0.0;
            buf[bins - 1].im = 0.0;
            for k in bins..n {
                buf[k] = buf[n - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = f * self.cfg.hop;
            for i in 0..n {
                out[start + i] += buf[i].re * scale * self.window[i];
            }
        }
        Ok(out)
    }
}

/// One-shot analysis with the given configuration.
pub fn stft_power(cfg: &StftConfig, wave: &[f64]) -> Result<Spectrogram> {
    Stft::new(*cfg)?.analyze(wave)
}

/// One-shot overlap-add resynthesis.
pub fn istft_overlap_add(cfg: &StftConfig, power: &[Vec<f64>], phase: &[Vec<f64>]) -> Result<Vec<f64>> {
    Stft::new(*cfg)?.synthesize(power, phase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_count_arithmetic() {
        let c = StftConfig::default();
        assert_eq!(c.frame_count(511), 0);
        assert_eq!(c.frame_count(512), 1);
        assert_eq!(c.frame_count(767), 1);
        assert_eq!(c.frame_count(768), 2);
        assert_eq!(c.frame_count(16000), (16000 - 512) / 256 + 1);
        assert_eq!(c.n_bins(), 257);
    }

    #[test]
    fn zero_signal_has_zero_power_and_resynthesizes_to_zero() {
        let c = StftConfig::default();
        let s = stft_power(&c, &vec![0.0; 2000]).unwrap();
        assert!(s.power.iter().flatten().all(|&p| p == 0.0));
        let w = istft_overlap_add(&c, &s.power, &s.phase).unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_signal_is_rejected() {
        assert!(stft_power(&StftConfig::default(), &[0.0; 100]).is_err());
    }

    #[test]
    fn doubling_power_scales_the_waveform_by_sqrt_two() {
        let c = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wave: Vec<f64> = (0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = stft_power(&c, &wave).unwrap();
        let doubled: Vec<Vec<f64>> = s.power.iter().map(|f| f.iter().map(|p| 2.0 * p).collect()).collect();
        let a = istft_overlap_add(&c, &s.power, &s.phase).unwrap();
        let b = istft_overlap_add(&c, &doubled, &s.phase).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - 2f64.sqrt() * x).abs() < 1e-12);
        }
    }
}
