//! Analysis-resynthesis benchmark: reconstruct power spectrograms of test
//! utterances through a model, resynthesize with the original phase, and
//! score waveform RMSE and log-spectral distance.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{load_split, load_waveform, PreprocessConfig};
use crate::data::manifest::{DatasetManifest, Split};
use crate::data::stft::Stft;
use crate::error::{check_dim, DvaeError, Result};
use crate::graph::Graph;
use crate::model::{elbo, reconstruct, DynamicalVae, ElboOptions, ModelKind, Noise, SequenceBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spectra below this value are floored before taking logarithms.
pub const LSD_FLOOR: f64 = 1e-10;

/// RMSE of the published speech benchmark, used as a directional fixture.
pub const REFERENCE_RMSE: [(ModelKind, f64); 8] = [
    (ModelKind::Vae, 0.0510),
    (ModelKind::Dkf, 0.0344),
    (ModelKind::Storn, 0.0338),
    (ModelKind::Vrnn, 0.0267),
    (ModelKind::Srnn, 0.0248),
    (ModelKind::RvaeCausal, 0.0499),
    (ModelKind::RvaeNoncausal, 0.0479),
    (ModelKind::Dsae, 0.0469),
];

pub fn reference_rmse(kind: ModelKind) -> Option<f64> {
    REFERENCE_RMSE.iter().find(|(k, _)| *k == kind).map(|&(_, v)| v)
}

/// Root mean squared sample difference.
pub fn rmse_waveform(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_dim("waveform length", reference.len(), estimate.len())?;
    if reference.is_empty() {
        return Err(DvaeError::EmptyInput("empty waveform".into()));
    }
    let ss: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / reference.len() as f64).sqrt())
}

/// Mean over frames of the RMS difference between `10 log10` spectra, in dB.
pub fn log_spectral_distance(reference: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<f64> {
    check_dim("spectrogram frames", reference.len(), estimate.len())?;
    if reference.is_empty() {
        return Err(DvaeError::EmptyInput("empty spectrogram".into()));
    }
    let db = |v: f64| 10.0 * v.max(LSD_FLOOR).log10();
    let mut total = 0.0;
    for (r, e) in reference.iter().zip(estimate) {
        check_dim("spectrogram bins", r.len(), e.len())?;
        let ms: f64 = r.iter().zip(e).map(|(&a, &b)| (db(a) - db(b)).powi(2)).sum::<f64>() / r.len().max(1) as f64;
        total += ms.sqrt();
    }
    Ok(total / reference.len() as f64)
}

/// How test-time latents are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentChoice {
    #[default]
    PosteriorMean,
    PosteriorSample,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub latent: LatentChoice,
    pub seed: u64,
}

/// A test utterance: its power and phase spectrograms (frame-major) and the
/// waveform they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct TestItem {
    pub name: String,
    pub power: Vec<Vec<f64>>,
    pub phase: Vec<Vec<f64>>,
    pub waveform: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub model: String,
    pub item: String,
    pub rmse: f64,
    pub lsd: f64,
    pub neg_elbo_per_frame: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    pub model: String,
    pub rmse: f64,
    /// dB.
    pub lsd: f64,
    pub neg_elbo_per_frame: f64,
    pub n_items: usize,
}

impl MetricsRow {
    /// Unweighted mean over items.
    pub fn aggregate(model: &str, items: &[ItemMetrics]) -> Result<Self> {
        if items.is_empty() {
            return Err(DvaeError::EmptyInput("no evaluated items".into()));
        }
        let n = items.len() as f64;
        Ok(Self {
            model: model.into(),
            rmse: items.iter().map(|i| i.rmse).sum::<f64>() / n,
            lsd: items.iter().map(|i| i.lsd).sum::<f64>() / n,
            neg_elbo_per_frame: items.iter().map(|i| i.neg_elbo_per_frame).sum::<f64>() / n,
            n_items: items.len(),
        })
    }
}

/// Overlap-add resynthesis of `power` with `phase`, trimmed to the samples
/// covered by two frames.
pub fn resynthesize_interior(stft: &Stft, power: &[Vec<f64>], phase: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_dim("phase frames", power.len(), phase.len())?;
    let wave = stft.synthesize(power, phase)?;
    Ok(wave[stft.config().interior(power.len())].to_vec())
}

/// The interior of the item's waveform, aligned with
/// [`resynthesize_interior`].
pub fn reference_interior(stft: &Stft, item: &TestItem) -> Result<Vec<f64>> {
    let range = stft.config().interior(item.power.len());
    if item.waveform.len() < range.end {
        return Err(DvaeError::dims("reference waveform length", range.end, item.waveform.len()));
    }
    Ok(item.waveform[range].to_vec())
}

/// Test-split items with their cached spectrograms and (silence-trimmed)
/// reference waveforms.
pub fn load_test_items(manifest: &DatasetManifest, cfg: &PreprocessConfig, cache_dir: &Path) -> Result<Vec<TestItem>> {
    let records: Vec<_> = manifest.split(Split::Test).collect();
    load_split(manifest, cfg, cache_dir, Split::Test)?
        .into_iter()
        .map(|item| {
            let record = records
                .iter()
                .find(|r| r.path == item.path)
                .expect("cached items come from the manifest");
            Ok(TestItem {
                name: item.path,
                power: item.spectrogram.power,
                phase: item.spectrogram.phase,
                waveform: load_waveform(manifest, record, cfg)?,
            })
        })
        .collect()
}

fn item_batch<T: Scalar>(power: &[Vec<f64>]) -> Result<SequenceBatch<T>> {
    let seq: Vec<Vec<T>> = power.iter().map(|f| f.iter().map(|&v| T::lit(v)).collect()).collect();
    SequenceBatch::from_sequences(&[seq])
}

/// Reconstructed power spectrogram of one item: the decoder's expected
/// observation under the chosen latents.
pub fn reconstruct_power<T: Scalar, M: DynamicalVae<T> + ?Sized>(
    model: &M,
    power: &[Vec<f64>],
    noise: &mut Noise<'_>,
) -> Result<Vec<Vec<f64>>> {
    let batch = item_batch::<T>(power)?;
    let frames = reconstruct(model, &batch, noise)?;
    Ok(frames.iter().map(|f: &Tensor<T>| f.to_f64_vec()).collect())
}

fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Scores one item and returns the interior of its resynthesized waveform.
pub fn evaluate_item<T: Scalar, M: DynamicalVae<T> + ?Sized>(
    model: &M,
    model_name: &str,
    item: &TestItem,
    index: usize,
    stft: &Stft,
    cfg: &EvalConfig,
) -> Result<(ItemMetrics, Vec<f64>)> {
    check_dim("phase frames", item.power.len(), item.phase.len())?;
    let mut rng = item_rng(cfg.seed, index);
    let est = match cfg.latent {
        LatentChoice::PosteriorMean => reconstruct_power(model, &item.power, &mut Noise::Zero)?,
        LatentChoice::PosteriorSample => reconstruct_power(model, &item.power, &mut Noise::Rng(&mut rng))?,
    };
    check_dim("reconstructed frames", item.phase.len(), est.len())?;
    let resynth = resynthesize_interior(stft, &est, &item.phase)?;
    let reference = reference_interior(stft, item)?;
    let batch = item_batch::<T>(&item.power)?;
    let mut g = Graph::new();
    let eval = elbo(model, &mut g, &batch, ElboOptions::default(), &mut Noise::Rng(&mut rng))?;
    let metrics = ItemMetrics {
        model: model_name.into(),
        item: item.name.clone(),
        rmse: rmse_waveform(&reference, &resynth)?,
        lsd: log_spectral_distance(&item.power, &est)?,
        neg_elbo_per_frame: -eval.breakdown.per_frame().to_f64().unwrap_or(f64::NAN),
        frames: item.power.len(),
    };
    Ok((metrics, resynth))
}

/// Scores every item; returns the aggregate row and per-item metrics.
pub fn evaluate_model<T: Scalar, M: DynamicalVae<T> + ?Sized>(
    model: &M,
    model_name: &str,
    items: &[TestItem],
    stft: &Stft,
    cfg: &EvalConfig,
) -> Result<(MetricsRow, Vec<ItemMetrics>)> {
    let per_item = items
        .iter()
        .enumerate()
        .map(|(i, item)| evaluate_item(model, model_name, item, i, stft, cfg).map(|(m, _)| m))
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricsRow::aggregate(model_name, &per_item)?, per_item))
}

/// Rows sorted by model name, as an aligned text table and as one JSON
/// record per row.
pub fn comparison_table(rows: &[MetricsRow]) -> Result<(String, Vec<String>)> {
    if rows.is_empty() {
        return Err(DvaeError::EmptyInput("comparison needs at least one row".into()));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.model.cmp(&b.model));
    let width = sorted.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut table = String::new();
    let _ = writeln!(table, "{:<width$}  {:>8}  {:>8}  {:>12}  {:>6}", "model", "RMSE", "LSD(dB)", "-ELBO/frame", "items");
    for r in &sorted {
        let _ = writeln!(
            table,
            "{:<width$}  {:>8.4}  {:>8.3}  {:>12.4}  {:>6}",
            r.model, r.rmse, r.lsd, r.neg_elbo_per_frame, r.n_items
        );
    }
    let records = sorted
        .iter()
        .map(|r| serde_json::to_string(r).map_err(DvaeError::from))
        .collect::<Result<Vec<_>>>()?;
    Ok((table, records))
}
