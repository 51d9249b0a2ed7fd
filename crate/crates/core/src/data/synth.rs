//! Synthetic data: sequences from a known linear-Gaussian state-space model,
//! and a deterministic speech-like audio generator (source-filter synthesis
//! with gliding pitch and slowly moving formants).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DvaeError, Result};
use crate::lds::LdsParams;
use crate::tensor::Tensor;

/// Observations drawn from an LDS with the state trajectories that produced
/// them (for diagnostics only).
#[derive(Clone, Debug, PartialEq)]
pub struct LdsDataset {
    pub observations: Vec<Vec<Vec<f64>>>,
    pub states: Vec<Vec<Vec<f64>>>,
}

/// Lower-triangular `L` with `L Lᵀ = a` for positive semi-definite `a`;
/// directions of zero variance get zero columns.
fn psd_factor(a: &Tensor<f64>) -> Tensor<f64> {
    let n = a.rows();
    let mut l = Tensor::zeros(n, n);
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= tol {
            continue;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in j + 1..n {
            let s = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / dj;
        }
    }
    l
}

/// Estimate of the spectral radius from `‖A^(2^m)‖^(1/2^m)`.
pub fn spectral_radius(a: &Tensor<f64>) -> f64 {
    let mut m = a.clone();
    let mut log_scale = 0.0;
    let squarings = 12;
    for _ in 0..squarings {
        m = m.matmul(&m);
        let s = m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        if s == 0.0 {
            return 0.0;
        }
        m.scale_assign(1.0 / s);
        log_scale = 2.0 * log_scale + s.ln();
    }
    (log_scale / f64::powi(2.0, squarings)).exp()
}

fn draw(rng: &mut impl Rng, factor: &Tensor<f64>) -> Vec<f64> {
    let n = factor.rows();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (0..n).map(|i| (0..=i).map(|k| factor[(i, k)] * eps[k]).sum()).collect()
}

/// `n` sequences of length `len` from `z_1 = w_1`, `z_t = A z_{t−1} + m + w_t`,
/// `a_t = C z_t + n + v_t` (the state before the first step is zero, no
/// inputs). Noise covariances may be singular. An unstable transition is
/// reported through the log and sampled anyway.
pub fn synth_lds_dataset<R: Rng + ?Sized>(params: &LdsParams<f64>, n: usize, len: usize, rng: &mut R) -> Result<LdsDataset> {
    params.validate_shapes()?;
    if params.input_dim() != 0 {
        return Err(DvaeError::Config("synthetic LDS data is generated without inputs".into()));
    }
    let rho = spectral_radius(&params.transition);
    if rho >= 1.0 {
        log::warn!("transition spectral radius {rho:.4} >= 1: sequences may diverge");
    }
    let mut rng = rng;
    let state_f = psd_factor(&params.state_noise);
    let obs_f = psd_factor(&params.emission_noise);
    let lz = params.state_dim();
    let mut data = LdsDataset {
        observations: Vec::with_capacity(n),
        states: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let mut z = vec![0.0; lz];
        let mut zs = Vec::with_capacity(len);
        let mut xs = Vec::with_capacity(len);
        for t in 0..len {
            let w = draw(&mut rng, &state_f);
            z = (0..lz)
                .map(|i| {
                    let drift = if t == 0 {
                        0.0
                    } else {
                        (0..lz).map(|k| params.transition[(i, k)] * z[k]).sum::<f64>() + params.state_bias[i]
                    };
                    drift + w[i]
                })
                .collect();
            let v = draw(&mut rng, &obs_f);
            let x: Vec<f64> = (0..params.obs_dim())
                .map(|i| (0..lz).map(|k| params.emission[(i, k)] * z[k]).sum::<f64>() + params.emission_bias[i] + v[i])
                .collect();
            zs.push(z.clone());
            xs.push(x);
        }
        data.states.push(zs);
        data.observations.push(xs);
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeechSynthConfig {
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    /// Total audio to generate, in seconds.
    pub total_seconds: f64,
    #[serde(default = "default_min_utt")]
    pub min_utterance_seconds: f64,
    #[serde(default = "default_max_utt")]
    pub max_utterance_seconds: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sample_rate() -> u32 {
    16_000
}
fn default_min_utt() -> f64 {
    2.5
}
fn default_max_utt() -> f64 {
    5.0
}

impl SpeechSynthConfig {
    pub fn new(total_seconds: f64, seed: u64) -> Self {
        Self {
            sample_rate: default_sample_rate(),
            total_seconds,
            min_utterance_seconds: default_min_utt(),
            max_utterance_seconds: default_max_utt(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.total_seconds > 0.0) {
            return Err(DvaeError::Config("total_seconds must be positive".into()));
        }
        if !(self.min_utterance_seconds > 0.0 && self.max_utterance_seconds >= self.min_utterance_seconds) {
            return Err(DvaeError::Config("utterance duration range is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f64>,
}

/// Two-pole resonator with per-sample retuning.
#[derive(Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bandwidth: f64, fs: f64) -> f64 {
        let r = (-PI * bandwidth / fs).exp();
        let a1 = 2.0 * r * (2.0 * PI * freq / fs).cos();
        let a2 = -r * r;
        let y = (1.0 - r) * x + a1 * self.y1 + a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn lerp(a: f64, b: f64, u: f64) -> f64 {
    a + (b - a) * u
}

fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One utterance: syllables of voiced (glottal pulses through three
/// formant resonators) or unvoiced (noise through a high resonance) sound,
/// separated by short pauses, peak-normalized to 0.9.
pub fn synth_utterance<R: Rng>(rng: &mut R, sample_rate: u32, seconds: f64) -> Vec<f64> {
    let fs = sample_rate as f64;
    let total = (seconds * fs) as usize;
    let mut out = Vec::with_capacity(total);
    let base_f0 = rng.gen_range(90.0..220.0);
    let floor = 1e-4;
    let push_pause = |out: &mut Vec<f64>, rng: &mut R, secs: f64| {
        let n = (secs * fs) as usize;
        out.extend((0..n).map(|_| floor * rng.sample::<f64, _>(StandardNormal)));
    };
    let lead = rng.gen_range(0.1..0.3);
    push_pause(&mut out, rng, lead);
    let mut formants = [rng.gen_range(300.0..850.0), rng.gen_range(850.0..2400.0), rng.gen_range(2300.0..3300.0)];
    let mut res = [Resonator::default(), Resonator::default(), Resonator::default()];
    let mut noise_res = Resonator::default();
    let mut glottal = 0.0;
    let tail = (0.5 * fs) as usize;
    while out.len() + tail < total {
        let dur = rng.gen_range(0.12..0.35);
        let n = (dur * fs) as usize;
        let voiced = rng.gen_bool(0.75);
        let target = [rng.gen_range(300.0..850.0), rng.gen_range(850.0..2400.0), rng.gen_range(2300.0..3300.0)];
        let f0a = base_f0 * rng.gen_range(0.85..1.2);
        let f0b = base_f0 * rng.gen_range(0.8..1.15);
        let noise_centre = rng.gen_range(3000.0..6000.0);
        let level = rng.gen_range(0.3..1.0);
        let mut phase: f64 = 0.0;
        for i in 0..n {
            let u = i as f64 / n as f64;
            let env = level * (PI * u).sin().sqrt();
            let sample = if voiced {
                let f0 = lerp(f0a, f0b, u);
                phase += f0 / fs;
                let pulse = if phase >= 1.0 {
                    phase -= 1.0;
                    1.0
                } else {
                    0.0
                };
                glottal = 0.9 * glottal + pulse;
                let breath = 0.02 * rng.sample::<f64, _>(StandardNormal);
                let src = glottal + breath;
                let mut y = 0.0;
                for (k, r) in res.iter_mut().enumerate() {
                    let f = lerp(formants[k], target[k], u);
                    y += r.step(src, f, 60.0 + 50.0 * k as f64, fs) / (k + 1) as f64;
                }
                y
            } else {
                let w: f64 = rng.sample(StandardNormal);
                0.5 * noise_res.step(w, noise_centre, 1500.0, fs)
            };
            out.push(env * sample + floor * rng.sample::<f64, _>(StandardNormal));
        }
        formants = target;
        let gap = rng.gen_range(0.03..0.15);
        push_pause(&mut out, rng, gap);
    }
    while out.len() < total {
        out.push(floor * rng.sample::<f64, _>(StandardNormal));
    }
    out.truncate(total);
    super::audio::normalize_peak(&mut out, 0.9);
    out
}

/// Utterances totalling at least `total_seconds`, each derived from the
/// corpus seed and its index alone.
pub fn synth_speech_corpus(cfg: &SpeechSynthConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut acc = 0.0;
    while acc < cfg.total_seconds {
        let i = out.len();
        let mut rng = utterance_rng(cfg.seed, i);
        let secs = rng.gen_range(cfg.min_utterance_seconds..=cfg.max_utterance_seconds);
        out.push(Utterance {
            id: format!("synth_{i:05}"),
            samples: synth_utterance(&mut rng, cfg.sample_rate, secs),
        });
        acc += secs;
    }
    Ok(out)
}
