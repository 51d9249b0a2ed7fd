use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dvae::data::{
    load_split, preprocess_corpus, training_sequences, write_cached, write_synthetic_corpus,
    write_wav, DatasetManifest, SpeechSynthConfig, Split, SplitFractions, Stft,
};
use dvae::evaluation::{comparison_table, evaluate_model, load_test_items, reference_rmse, LatentChoice, MetricsRow, TestItem};
use dvae::training::{Checkpoint, Trainer};
use dvae::{build_model, DvaeError, DynamicalVae, ModelKind, Noise, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Precision, Provenance, RunConfig, REVISION};

fn write_jsonl<S: Serialize>(path: &Path, provenance: &Provenance, records: &[S]) -> dvae::Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, &serde_json::json!({ "provenance": provenance }))?;
    writeln!(w)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    DatasetManifest::read(&cfg.manifest).with_context(|| format!("reading manifest {}", cfg.manifest.display()))
}

pub fn synth(out: &Path, seconds: f64, seed: u64) -> Result<()> {
    let manifest = write_synthetic_corpus(out, &SpeechSynthConfig::new(seconds, seed), SplitFractions::default())?;
    for split in Split::ALL {
        let n = manifest.split(split).count();
        let secs: f64 = manifest.split(split).map(|r| r.duration).sum();
        println!("{:<10} {n:>4} items {secs:>8.1} s", split.name());
    }
    println!("manifest: {}", out.join("manifest.jsonl").display());
    Ok(())
}

pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    let manifest = read_manifest(cfg)?;
    let cache = cfg.cache_dir()?;
    if manifest.records.is_empty() {
        log::warn!("manifest {} lists no items", cfg.manifest.display());
    }
    let report = preprocess_corpus(&manifest, &cfg.preprocess, &cache)?;
    println!(
        "cache {}: {} items, {} frames, {} cache hits, {} skipped",
        cache.display(),
        report.items,
        report.frames,
        report.cache_hits,
        report.skipped.len()
    );
    Ok(())
}

type Sequences<T> = Vec<Vec<Vec<T>>>;

fn to_scalar<T: Scalar>(seqs: Vec<Vec<Vec<f64>>>) -> Sequences<T> {
    seqs.into_iter()
        .map(|s| s.into_iter().map(|f| f.into_iter().map(T::lit).collect()).collect())
        .collect()
}

fn segmented<T: Scalar>(cfg: &RunConfig, manifest: &DatasetManifest, split: Split) -> Result<Sequences<T>> {
    let items = load_split(manifest, &cfg.preprocess, &cfg.cache_dir()?, split)?;
    let (seqs, report) = training_sequences(&items, cfg.preprocess.segment_len);
    if report.skipped_items > 0 {
        log::warn!(
            "{}: {} items shorter than {} frames skipped",
            split.name(),
            report.skipped_items,
            cfg.preprocess.segment_len
        );
    }
    if seqs.is_empty() {
        return Err(DvaeError::EmptyInput(format!(
            "no {} sequences of {} frames in the cache; run `dvae preprocess` first",
            split.name(),
            cfg.preprocess.segment_len
        ))
        .into());
    }
    Ok(to_scalar(seqs))
}

fn print_param_counts<T: Scalar>(model: &dyn DynamicalVae<T>) {
    println!("{} parameters:", model.kind().display_name());
    for (group, n) in model.params().counts_by_group() {
        println!("  {group:<10} {n:>10}");
    }
    println!("  {:<10} {:>10}", "total", model.params().num_scalars());
}

pub fn train(cfg: &RunConfig, dry_run: bool, resume: bool) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, dry_run, resume),
        Precision::F64 => train_as::<f64>(cfg, dry_run, resume),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig, dry_run: bool, resume: bool) -> Result<()> {
    let provenance = cfg.provenance()?;
    if dry_run {
        let model = build_model::<T>(&cfg.model, cfg.seed)?;
        print_param_counts(&*model);
        return Ok(());
    }
    let manifest = read_manifest(cfg)?;
    let train_set = segmented::<T>(cfg, &manifest, Split::Train)?;
    let val_set = segmented::<T>(cfg, &manifest, Split::Validation)?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.resolved.toml"), cfg.to_toml()?)?;
    fs::write(cfg.output_dir.join("run.json"), serde_json::to_vec_pretty(&provenance)?)?;
    let ckpt_path = cfg.checkpoint_path();
    let (mut model, state) = if resume && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        ckpt.verify(&cfg.model, &cfg.train)?;
        let model = ckpt.build_model::<T>()?;
        let state = ckpt.train_state(model.params())?;
        log::info!("resuming at epoch {}", state.epoch);
        (model, Some(state))
    } else {
        (build_model::<T>(&cfg.model, cfg.seed)?, None)
    };
    log::info!(
        "{}: {} training and {} validation sequences, {} parameters",
        cfg.model.kind.display_name(),
        train_set.len(),
        val_set.len(),
        model.params().num_scalars()
    );
    let mut trainer = match state {
        Some(s) => Trainer::with_state(&mut *model, cfg.model.clone(), cfg.train.clone(), s)?,
        None => Trainer::new(&mut *model, cfg.model.clone(), cfg.train.clone())?,
    };
    let save = |t: &Trainer<'_, T, dyn DynamicalVae<T>>| -> dvae::Result<()> {
        let mut ckpt = Checkpoint::capture(t.model(), t.model_config(), t.config(), t.state())?;
        ckpt.set_revision(REVISION);
        ckpt.save(&ckpt_path)?;
        write_jsonl(&cfg.output_dir.join("curves.jsonl"), &provenance, t.curve())?;
        Ok(())
    };
    let result = trainer.fit(&train_set, &val_set, |t| save(t));
    if let Err(e) = result {
        save(&trainer)?;
        return Err(e.into());
    }
    save(&trainer)?;
    let best = trainer.state().stopping;
    println!(
        "{}: best validation loss {:.5} at epoch {} ({} epochs run)",
        cfg.model.kind.display_name(),
        best.best,
        best.best_epoch.map_or(-1, |e| e as i64),
        trainer.curve().len()
    );
    Ok(())
}

fn test_items(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Vec<TestItem>> {
    Ok(load_test_items(manifest, &cfg.preprocess, &cfg.cache_dir()?)?)
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_path());
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ckpt.verify(&cfg.model, &cfg.train)?;
    Ok(ckpt)
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, recon: Option<LatentChoice>) -> Result<MetricsRow> {
    let mut cfg = cfg.clone();
    if let Some(r) = recon {
        cfg.eval.latent = r;
    }
    match cfg.precision {
        Precision::F32 => eval_as::<f32>(&cfg, checkpoint),
        Precision::F64 => eval_as::<f64>(&cfg, checkpoint),
    }
}

fn eval_as<T: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<MetricsRow> {
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let manifest = read_manifest(cfg)?;
    let items = test_items(cfg, &manifest)?;
    if items.is_empty() {
        return Err(DvaeError::EmptyInput("the test split has no preprocessed items".into()).into());
    }
    let model = ckpt.build_best_model::<T>()?;
    let stft = Stft::new(cfg.preprocess.stft)?;
    let name = cfg.model.kind.display_name();
    let (row, per_item) = evaluate_model(&*model, name, &items, &stft, &cfg.eval)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut records: Vec<serde_json::Value> = per_item.iter().map(serde_json::to_value).collect::<Result<_, _>>()?;
    records.push(serde_json::json!({ "aggregate": row }));
    write_jsonl(&cfg.output_dir.join("metrics.jsonl"), &cfg.provenance()?, &records)?;
    let (table, _) = comparison_table(std::slice::from_ref(&row))?;
    print!("{table}");
    Ok(row)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PhaseChoice {
    Zero,
    Random,
}

pub fn generate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    frames: usize,
    count: usize,
    phase: PhaseChoice,
) -> Result<()> {
    match cfg.precision {
        Precision::F32 => generate_as::<f32>(cfg, checkpoint, frames, count, phase),
        Precision::F64 => generate_as::<f64>(cfg, checkpoint, frames, count, phase),
    }
}

fn generate_as<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    frames: usize,
    count: usize,
    phase: PhaseChoice,
) -> Result<()> {
    if count == 0 {
        println!("nothing to generate");
        return Ok(());
    }
    if frames == 0 {
        bail!("--frames must be >= 1");
    }
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let model = ckpt.build_best_model::<T>()?;
    let stft = Stft::new(cfg.preprocess.stft)?;
    let hash = cfg.preprocess.stft_hash()?;
    let out: PathBuf = cfg.output_dir.join("generated");
    fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let generation = model.generate(frames, count, &mut Noise::Rng(&mut rng), None)?;
    let bins = stft.config().n_bins();
    for i in 0..count {
        let power: Vec<Vec<f64>> = (0..frames)
            .map(|t| generation.frames.frame(t).row(i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
            .collect();
        let phases: Vec<Vec<f64>> = (0..frames)
            .map(|_| match phase {
                PhaseChoice::Zero => vec![0.0; bins],
                PhaseChoice::Random => (0..bins).map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)).collect(),
            })
            .collect();
        let stem = out.join(format!("gen_{i:04}"));
        write_cached(&stem.with_extension("power.bin"), &power, &hash)?;
        let mut wave = stft.synthesize(&power, &phases)?;
        let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 1.0 {
            wave.iter_mut().for_each(|v| *v /= peak);
        }
        write_wav(&stem.with_extension("wav"), &wave, cfg.preprocess.stft.sample_rate)?;
    }
    fs::write(out.join("provenance.json"), serde_json::to_vec_pretty(&cfg.provenance()?)?)?;
    println!("wrote {count} sequences of {frames} frames to {}", out.display());
    Ok(())
}

pub fn compare(cfg: &RunConfig, models: Option<Vec<ModelKind>>, dry_run: bool) -> Result<()> {
    let models = models.unwrap_or_else(|| cfg.compare.models.clone());
    if models.is_empty() {
        return Err(DvaeError::EmptyInput("no models to compare".into()).into());
    }
    let mut rows = Vec::new();
    for &kind in &models {
        let run = cfg.for_model(kind);
        if dry_run {
            train(&run, true, false)?;
            continue;
        }
        train(&run, false, true)?;
        rows.push((kind, eval(&run, None, None)?));
    }
    if dry_run {
        return Ok(());
    }
    let plain: Vec<MetricsRow> = rows.iter().map(|(_, r)| r.clone()).collect();
    let (table, records) = comparison_table(&plain)?;
    let mut report = table.clone();
    if let Some((_, vae)) = rows.iter().find(|(k, _)| *k == ModelKind::Vae) {
        let worse: Vec<&str> = rows
            .iter()
            .filter(|(k, r)| k.is_dynamical() && r.rmse >= vae.rmse)
            .map(|(k, _)| k.display_name())
            .collect();
        report.push_str(&if worse.is_empty() {
            "every dynamical model has lower RMSE than the VAE\n".to_string()
        } else {
            format!("not below the VAE RMSE: {}\n", worse.join(", "))
        });
    }
    let mut ranked: Vec<&(ModelKind, MetricsRow)> = rows.iter().collect();
    ranked.sort_by(|a, b| a.1.rmse.total_cmp(&b.1.rmse));
    let top: Vec<ModelKind> = ranked.iter().take(2).map(|(k, _)| *k).collect();
    let expected_top = top.contains(&ModelKind::Srnn) && top.contains(&ModelKind::Vrnn);
    report.push_str(&format!(
        "top two by RMSE: {} (reference benchmark: SRNN, VRNN) -> {}\n",
        top.iter().map(|k| k.display_name()).collect::<Vec<_>>().join(", "),
        if expected_top { "same" } else { "different" }
    ));
    for (k, r) in &rows {
        if let Some(reference) = reference_rmse(*k) {
            report.push_str(&format!("  {:<15} {:.4}  (reference {:.4})\n", k.display_name(), r.rmse, reference));
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("comparison.txt"), &report)?;
    let values: Vec<serde_json::Value> = records.iter().map(|r| serde_json::from_str(r)).collect::<Result<_, _>>()?;
    write_jsonl(&cfg.output_dir.join("comparison.jsonl"), &cfg.provenance()?, &values)?;
    print!("{report}");
    Ok(())
}
