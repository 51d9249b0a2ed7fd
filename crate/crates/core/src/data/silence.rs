//! Energy-threshold trimming of leading and trailing silence.

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SilenceConfig {
    /// Frames this far below the loudest frame count as silence.
    pub threshold_db: f64,
    /// Extra signal kept on each side of the active region.
    pub hangover_ms: f64,
    /// Length of the energy-measurement window.
    pub window_ms: f64,
}

impl Default for SilenceConfig {
    fn default() -> Self {
        Self {
            threshold_db: -40.0,
            hangover_ms: 100.0,
            window_ms: 10.0,
        }
    }
}

/// Sample range between the first and last active windows, widened by the
/// hangover. An entirely silent signal yields an empty range.
pub fn active_range(wave: &[f64], sample_rate: u32, cfg: &SilenceConfig) -> Range<usize> {
    let win = ((cfg.window_ms * sample_rate as f64 / 1000.0).round() as usize).max(1);
    let energies: Vec<f64> = wave
        .chunks(win)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64)
        .collect();
    let peak = energies.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return 0..0;
    }
    let floor = peak * 10f64.powf(cfg.threshold_db / 10.0);
    let first = energies.iter().position(|&e| e > floor).unwrap_or(0);
    let last = energies.iter().rposition(|&e| e > floor).unwrap_or(0);
    let hang = (cfg.hangover_ms * sample_rate as f64 / 1000.0).round() as usize;
    let start = (first * win).saturating_sub(hang);
    let end = ((last + 1) * win + hang).min(wave.len());
    start..end
}

pub fn trim_silence(wave: &[f64], sample_rate: u32, cfg: &SilenceConfig) -> Vec<f64> {
    wave[active_range(wave, sample_rate, cfg)].to_vec()
}
