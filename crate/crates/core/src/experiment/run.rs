//! One experiment: for every seed, subset → encoder → encodings → CPC, then
//! aggregation and artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! encoders/<dataset>/seed-<s>/{stdp,autoencoder}.ckpt
//! <dataset>-<encoding>/seed-<s>/{metrics.csv,cpc.ckpt,encodings.txt}
//! <dataset>-<encoding>/{summary.json,curves.svg}
//! ```

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::{EncodingKind, ExperimentConfig};
use super::report::write_curves_svg;
use crate::autoencoder::{freeze_encoder, train_reconstruction, Autoencoder};
use crate::checkpoint::Checkpoint;
use crate::cpc::{self, write_metrics_csv, CpcConfig, CpcModel, StopReason, TrainOutcome};
use crate::data::{build_subset, load_idx, ClassBalancedSubset, ImagePool, MnistImage};
use crate::encoding::{build_table, random_encoding, write_encoding_dump, EncodingTable, FrozenEncoder, FrozenStdpEncoder, Standardizer};
use crate::seed;
use crate::stdp::{train_unsupervised, StdpNetworkState};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Subset,
    Encoder,
    Encoding,
    Cpc,
    Artifacts,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Subset => "subset",
            Stage::Encoder => "encoder",
            Stage::Encoding => "encoding",
            Stage::Cpc => "cpc",
            Stage::Artifacts => "artifacts",
        })
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("[{stage}] seed {seed:?}: {source}")]
    Stage {
        stage: Stage,
        seed: Option<u64>,
        #[source]
        source: BoxError,
    },
    #[error("missing encoder artifact {}: train it first (`cpc-snn {command} --seed {seed}`) or pass --train-encoders", path.display())]
    MissingArtifact { path: PathBuf, command: &'static str, seed: u64 },
    #[error("encoder artifact {} was trained with a different configuration (fingerprint {found}, expected {expected})", path.display())]
    StaleArtifact { path: PathBuf, found: String, expected: String },
    #[error("[{stage}] seed {seed}: frozen encoder parameters changed while encoding")]
    EncoderMutated { stage: Stage, seed: u64 },
}

fn stage<E: Into<BoxError>>(stage: Stage, seed: Option<u64>) -> impl FnOnce(E) -> ExperimentError {
    move |e| ExperimentError::Stage { stage, seed, source: e.into() }
}

/// Where frozen encoders come from.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderSource {
    /// Train from scratch and store the checkpoint under `<out>/encoders`.
    Train,
    /// Read checkpoints from `<dir>/<dataset>/seed-<s>/`.
    Load(PathBuf),
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub encoders: EncoderSource,
    /// Seeds processed concurrently.
    pub jobs: usize,
    pub log: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions { out_dir: out_dir.into(), encoders: EncoderSource::Train, jobs: 1, log: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub max_val_accuracy: f64,
    pub best_epoch: usize,
    pub stopping_epoch: usize,
    pub stop_reason: &'static str,
    /// Validation accuracy per epoch.
    pub val_accuracy: Vec<f64>,
}

impl SeedResult {
    pub fn from_outcome(seed: u64, out: &TrainOutcome) -> Self {
        SeedResult {
            seed,
            max_val_accuracy: out.max_val_accuracy,
            best_epoch: out.best_epoch,
            stopping_epoch: out.stopping_epoch,
            stop_reason: match out.stop_reason {
                StopReason::EarlyStop => "early_stop",
                StopReason::MaxEpochs => "max_epochs",
            },
            val_accuracy: out.validation().map(|m| m.accuracy).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub dataset: String,
    pub encoding: String,
    pub seeds: Vec<SeedResult>,
    pub mean_max_val_accuracy: f64,
    /// Sample standard deviation; `None` for a single seed.
    pub std_max_val_accuracy: Option<f64>,
    pub mean_stopping_epoch: f64,
    pub std_stopping_epoch: Option<f64>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `n − 1` denominator.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

impl RunSummary {
    pub fn aggregate(config: &ExperimentConfig, seeds: Vec<SeedResult>) -> Self {
        let acc: Vec<f64> = seeds.iter().map(|s| s.max_val_accuracy).collect();
        let ep: Vec<f64> = seeds.iter().map(|s| s.stopping_epoch as f64).collect();
        RunSummary {
            dataset: config.dataset.label().into(),
            encoding: config.encoding.label().into(),
            mean_max_val_accuracy: mean(&acc),
            std_max_val_accuracy: sample_std(&acc),
            mean_stopping_epoch: mean(&ep),
            std_stopping_epoch: sample_std(&ep),
            seeds,
        }
    }
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    generated_unix: u64,
    config: std::collections::BTreeMap<String, String>,
    summary: &'a RunSummary,
}

pub fn load_images(config: &ExperimentConfig) -> Result<Vec<MnistImage>, ExperimentError> {
    load_idx(&config.images_path, &config.labels_path).map_err(stage(Stage::Data, None))
}

pub fn seed_dir(out_dir: &Path, config: &ExperimentConfig, seed: u64) -> PathBuf {
    out_dir.join(config.run_name()).join(format!("seed-{seed}"))
}

pub fn encoder_path(root: &Path, config: &ExperimentConfig, kind: EncodingKind, seed: u64) -> PathBuf {
    let file = match kind {
        EncodingKind::Classifier => "stdp.ckpt",
        _ => "autoencoder.ckpt",
    };
    root.join(config.dataset.tag()).join(format!("seed-{seed}")).join(file)
}

/// Digest of every setting that shapes the trained encoder of `kind`.
pub fn encoder_fingerprint(config: &ExperimentConfig, kind: EncodingKind) -> String {
    let prefixes: &[&str] = match kind {
        EncodingKind::Classifier => &["stdp.", "coding.", "dataset", "validation_fraction"],
        EncodingKind::Autoencoder => &["ae.", "lif.", "dataset", "validation_fraction"],
        EncodingKind::Random => &["random_dim"],
    };
    let mut h = Sha256::new();
    for (k, v) in config.entries() {
        if prefixes.iter().any(|p| k.starts_with(p)) {
            h.update(format!("{k}={v}\n"));
        }
    }
    hex::encode(&h.finalize()[..8])
}

const FINGERPRINT: &str = "config_fingerprint";

fn save_checkpoint(ck: Checkpoint, path: &Path, fingerprint: &str, seed: u64) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(stage(Stage::Artifacts, Some(seed)))?;
    }
    ck.with_meta(FINGERPRINT, fingerprint).save(path).map_err(stage(Stage::Artifacts, Some(seed)))
}

fn load_checkpoint(path: &Path, fingerprint: &str, kind: EncodingKind, seed: u64) -> Result<Checkpoint, ExperimentError> {
    if !path.exists() {
        let command = match kind {
            EncodingKind::Classifier => "train-stdp",
            _ => "train-autoencoder",
        };
        return Err(ExperimentError::MissingArtifact { path: path.to_path_buf(), command, seed });
    }
    let ck = Checkpoint::load(path).map_err(stage(Stage::Encoder, Some(seed)))?;
    let found = ck.meta(FINGERPRINT).unwrap_or("none");
    if found != fingerprint {
        return Err(ExperimentError::StaleArtifact { path: path.to_path_buf(), found: found.into(), expected: fingerprint.into() });
    }
    Ok(ck)
}

/// Subset and `(train, validation)` split of one seed.
pub fn seed_subset(config: &ExperimentConfig, images: &[MnistImage], seed: u64) -> Result<ClassBalancedSubset, ExperimentError> {
    build_subset(images, config.dataset.per_class(), seed).map_err(stage(Stage::Subset, Some(seed)))
}

/// Trains the classifier encoder on the training split of `seed`.
pub fn train_stdp_encoder(
    config: &ExperimentConfig,
    subset: &ClassBalancedSubset,
    seed: u64,
) -> Result<StdpNetworkState, ExperimentError> {
    let (train, _) = subset.split_validation(config.validation_fraction).map_err(stage(Stage::Subset, Some(seed)))?;
    let mut rng = seed::stream(seed, "stdp-train", 0);
    train_unsupervised(&train, config.stdp_epochs, config.stdp.clone(), &config.coding, &mut rng)
        .map_err(stage(Stage::Encoder, Some(seed)))
}

/// Trains the autoencoder on the training split of `seed`.
pub fn train_autoencoder(
    config: &ExperimentConfig,
    subset: &ClassBalancedSubset,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Autoencoder<f32>, ExperimentError> {
    let (train, _) = subset.split_validation(config.validation_fraction).map_err(stage(Stage::Subset, Some(seed)))?;
    let mut model = Autoencoder::init(config.ae_arch.clone(), config.lif, &mut seed::stream(seed, "ae-init", 0))
        .map_err(stage(Stage::Encoder, Some(seed)))?;
    train_reconstruction(&mut model, &train, &config.ae_schedule, &mut seed::stream(seed, "ae-train", 0), |e, l| on_epoch(e, l))
        .map_err(stage(Stage::Encoder, Some(seed)))?;
    Ok(model)
}

/// Stores a trained encoder where [`EncoderSource::Load`] looks for it.
pub fn save_encoder(root: &Path, config: &ExperimentConfig, kind: EncodingKind, seed: u64, ck: Checkpoint) -> Result<PathBuf, ExperimentError> {
    let path = encoder_path(root, config, kind, seed);
    save_checkpoint(ck, &path, &encoder_fingerprint(config, kind), seed)?;
    Ok(path)
}

fn encode_frozen<E: FrozenEncoder>(encoder: &E, images: &[MnistImage], seed: u64) -> Result<EncodingTable, ExperimentError> {
    let before = encoder.checksum();
    let table = build_table(encoder, images).map_err(stage(Stage::Encoding, Some(seed)))?;
    if encoder.checksum() != before {
        return Err(ExperimentError::EncoderMutated { stage: Stage::Encoding, seed });
    }
    Ok(table)
}

/// Raw (unstandardised) encodings of every subset image.
pub fn encode_subset(
    config: &ExperimentConfig,
    subset: &ClassBalancedSubset,
    seed: u64,
    opts: &RunOptions,
) -> Result<EncodingTable, ExperimentError> {
    let kind = config.encoding;
    let fingerprint = encoder_fingerprint(config, kind);
    let log = |m: String| {
        if opts.log {
            eprintln!("[{} seed {seed}] {m}", config.run_name());
        }
    };
    match kind {
        EncodingKind::Random => {
            random_encoding(&subset.images, config.random_dim, seed).map_err(stage(Stage::Encoding, Some(seed)))
        }
        EncodingKind::Classifier => {
            let state = match &opts.encoders {
                EncoderSource::Train => {
                    log("training STDP encoder".into());
                    let s = train_stdp_encoder(config, subset, seed)?;
                    save_encoder(&opts.out_dir.join("encoders"), config, kind, seed, s.to_checkpoint())?;
                    s
                }
                EncoderSource::Load(dir) => {
                    let ck = load_checkpoint(&encoder_path(dir, config, kind, seed), &fingerprint, kind, seed)?;
                    StdpNetworkState::from_checkpoint(&ck).map_err(stage(Stage::Encoder, Some(seed)))?
                }
            };
            log("encoding".into());
            encode_frozen(&FrozenStdpEncoder::new(state, config.coding, seed), &subset.images, seed)
        }
        EncodingKind::Autoencoder => {
            let model = match &opts.encoders {
                EncoderSource::Train => {
                    let m = train_autoencoder(config, subset, seed, |e, l| log(format!("autoencoder epoch {e} loss {l:.5}")))?;
                    save_encoder(&opts.out_dir.join("encoders"), config, kind, seed, m.to_checkpoint())?;
                    m
                }
                EncoderSource::Load(dir) => {
                    let ck = load_checkpoint(&encoder_path(dir, config, kind, seed), &fingerprint, kind, seed)?;
                    Autoencoder::from_checkpoint(&ck).map_err(stage(Stage::Encoder, Some(seed)))?
                }
            };
            log("encoding".into());
            encode_frozen(&freeze_encoder(model), &subset.images, seed)
        }
    }
}

/// Subset of `seed` and its encodings, standardised with training-split
/// statistics when the configuration asks for it.
pub fn prepare_seed(
    config: &ExperimentConfig,
    images: &[MnistImage],
    seed: u64,
    opts: &RunOptions,
) -> Result<(ClassBalancedSubset, EncodingTable), ExperimentError> {
    let subset = seed_subset(config, images, seed)?;
    let raw = encode_subset(config, &subset, seed, opts)?;
    let (train, _) = subset.split_validation(config.validation_fraction).map_err(stage(Stage::Subset, Some(seed)))?;
    let table = if config.standardize {
        Standardizer::fit(&raw, train.iter().map(|im| im.index))
            .and_then(|s| s.apply(&raw))
            .map_err(stage(Stage::Encoding, Some(seed)))?
    } else {
        raw
    };
    Ok((subset, table))
}

/// Validation loss and accuracy of the stored CPC checkpoint of `seed` on
/// the same fixed validation pairs used during training.
pub fn evaluate_seed(
    config: &ExperimentConfig,
    images: &[MnistImage],
    seed: u64,
    opts: &RunOptions,
) -> Result<(f64, f64), ExperimentError> {
    let path = seed_dir(&opts.out_dir, config, seed).join("cpc.ckpt");
    if !path.exists() {
        return Err(ExperimentError::Stage {
            stage: Stage::Cpc,
            seed: Some(seed),
            source: format!("{} not found; run `cpc-snn train-cpc` first", path.display()).into(),
        });
    }
    let ck = Checkpoint::load(&path).map_err(stage(Stage::Cpc, Some(seed)))?;
    let model = CpcModel::<f32>::from_checkpoint(&ck).map_err(stage(Stage::Cpc, Some(seed)))?;
    let (subset, table) = prepare_seed(config, images, seed, opts)?;
    let (_, val) = subset.split_validation(config.validation_fraction).map_err(stage(Stage::Subset, Some(seed)))?;
    let val_pool = ImagePool::new(val.iter().copied());
    let pairs = cpc::validation_pairs(&val_pool, &config.schedule, &config.geometry, &mut seed::stream(seed, "cpc-val", 0))
        .map_err(stage(Stage::Cpc, Some(seed)))?;
    let refs: Vec<_> = pairs.iter().collect();
    cpc::evaluate(&model, &table, &refs, config.schedule.val_positives + config.schedule.val_negatives)
        .map_err(stage(Stage::Cpc, Some(seed)))
}

/// The full pipeline of one seed. Artifacts land in [`seed_dir`].
pub fn run_seed(
    config: &ExperimentConfig,
    images: &[MnistImage],
    seed: u64,
    opts: &RunOptions,
) -> Result<SeedResult, ExperimentError> {
    let dir = seed_dir(&opts.out_dir, config, seed);
    fs::create_dir_all(&dir).map_err(stage(Stage::Artifacts, Some(seed)))?;
    let (subset, table) = prepare_seed(config, images, seed, opts)?;
    let (train, val) = subset.split_validation(config.validation_fraction).map_err(stage(Stage::Subset, Some(seed)))?;
    if config.dump_encodings {
        let f = File::create(dir.join("encodings.txt")).map_err(stage(Stage::Artifacts, Some(seed)))?;
        write_encoding_dump(BufWriter::new(f), &table).map_err(stage(Stage::Artifacts, Some(seed)))?;
    }

    let cpc_stage = stage(Stage::Cpc, Some(seed));
    let train_pool = ImagePool::new(train.iter().copied());
    let val_pool = ImagePool::new(val.iter().copied());
    let val_pairs = cpc::validation_pairs(&val_pool, &config.schedule, &config.geometry, &mut seed::stream(seed, "cpc-val", 0))
        .map_err(stage(Stage::Cpc, Some(seed)))?;
    let cpc_config = CpcConfig {
        hidden: config.cpc_hidden,
        gain_init: config.cpc_gain_init,
        bias_init: config.cpc_bias_init,
        context_len: config.geometry.context_len,
        steps: config.geometry.prediction_len,
        ..CpcConfig::new(table.dim())
    };
    let mut model = CpcModel::<f32>::init(cpc_config, &mut seed::stream(seed, "cpc-init", 0)).map_err(stage(Stage::Cpc, Some(seed)))?;
    let tag = config.run_name();
    let outcome = cpc::train(
        &mut model,
        &table,
        &train_pool,
        &val_pairs,
        &config.schedule,
        &config.geometry,
        &mut seed::stream(seed, "cpc-train", 0),
        |m| {
            if opts.log {
                eprintln!("[{tag} seed {seed}] epoch {} val loss {:.4} acc {:.4} lr {:e}", m.epoch, m.loss, m.accuracy, m.learning_rate);
            }
        },
    )
    .map_err(cpc_stage)?;

    let f = File::create(dir.join("metrics.csv")).map_err(stage(Stage::Artifacts, Some(seed)))?;
    let mut w = BufWriter::new(f);
    write_metrics_csv(&mut w, &outcome.metrics).and_then(|_| w.flush()).map_err(stage(Stage::Artifacts, Some(seed)))?;
    model.to_checkpoint().save(dir.join("cpc.ckpt")).map_err(stage(Stage::Artifacts, Some(seed)))?;
    Ok(SeedResult::from_outcome(seed, &outcome))
}

/// Runs every seed of `config` (up to `opts.jobs` at a time), then writes
/// `summary.json` and `curves.svg`.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, ExperimentError> {
    config.validate().map_err(stage(Stage::Config, None))?;
    let images = load_images(config)?;
    run_experiment_on(config, &images, opts)
}

pub fn run_experiment_on(config: &ExperimentConfig, images: &[MnistImage], opts: &RunOptions) -> Result<RunSummary, ExperimentError> {
    let results = parallel_map(&config.seeds, opts.jobs, |&s| run_seed(config, images, s, opts));
    let seeds = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let summary = RunSummary::aggregate(config, seeds);
    write_summary(config, &summary, &opts.out_dir)?;
    Ok(summary)
}

pub fn write_summary(config: &ExperimentConfig, summary: &RunSummary, out_dir: &Path) -> Result<(), ExperimentError> {
    let dir = out_dir.join(config.run_name());
    fs::create_dir_all(&dir).map_err(stage(Stage::Artifacts, None))?;
    let file = SummaryFile {
        generated_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        config: config.entries().into_iter().collect(),
        summary,
    };
    let json = serde_json::to_string_pretty(&file).map_err(stage(Stage::Artifacts, None))?;
    fs::write(dir.join("summary.json"), json + "\n").map_err(stage(Stage::Artifacts, None))?;
    let title = format!("{} / {}", summary.dataset, summary.encoding);
    let curves: Vec<Vec<f64>> = summary.seeds.iter().map(|s| s.val_accuracy.clone()).collect();
    let f = File::create(dir.join("curves.svg")).map_err(stage(Stage::Artifacts, None))?;
    write_curves_svg(BufWriter::new(f), &title, &curves).map_err(stage(Stage::Artifacts, None))
}

/// Order-preserving map over at most `jobs` scoped worker threads.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                done.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}
