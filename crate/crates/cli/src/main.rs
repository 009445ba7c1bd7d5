use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cpc_snn::encoding::write_encoding_dump;
use cpc_snn::experiment::report::{ordering_checks, table1_rows, Table1Row};
use cpc_snn::experiment::run::{
    encoder_path, evaluate_seed, load_images, parallel_map, prepare_seed, save_encoder, seed_dir, seed_subset,
    train_autoencoder, train_stdp_encoder,
};
use cpc_snn::experiment::{
    gradcheck_all, render_table1, run_experiment, verify_data_dir, Dataset, EncoderSource, EncodingKind,
    ExperimentConfig, RunOptions,
};

#[derive(Parser)]
#[command(name = "cpc-snn", version, about = "Spiking-network encoders feeding a contrastive predictive coding model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the local IDX files against data/SHA256SUMS.
    FetchData {
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
    },
    /// Train the STDP classifier encoder for every seed.
    TrainStdp(Common),
    /// Train the LIF convolutional autoencoder for every seed.
    TrainAutoencoder(Common),
    /// Write the (standardised) encodings of every subset image.
    Encode(Pipeline),
    /// Train the CPC model on one encoding and aggregate over seeds.
    TrainCpc(Pipeline),
    /// Re-score stored CPC checkpoints on their validation pairs.
    Evaluate(Pipeline),
    /// Run the Table 1 configurations and print the comparison table.
    ReproduceTable1 {
        #[command(flatten)]
        pipeline: Pipeline,
        /// Restrict to rows such as `2500-autoencoder` (comma-separated).
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        /// Exit with an error if any band or ordering check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Finite-difference check of every backward kernel.
    Gradcheck {
        /// Double the analytic gradient of this check (negative control).
        #[arg(long)]
        inject: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    #[value(name = "2500")]
    D2500,
    #[value(name = "5000")]
    D5000,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncodingArg {
    Autoencoder,
    Classifier,
    Random,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Directory holding the IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Seeds processed in parallel.
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Clone)]
struct Pipeline {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    encoding: Option<EncodingArg>,
    /// Directory of trained encoder checkpoints [default: <out>/encoders].
    #[arg(long)]
    encoders: Option<PathBuf>,
    /// Train encoders instead of loading checkpoints.
    #[arg(long)]
    train_encoders: bool,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(d) = self.dataset {
            cfg.dataset = match d {
                DatasetArg::D2500 => Dataset::Mnist2500,
                DatasetArg::D5000 => Dataset::Mnist5000,
            };
        }
        if let Some(dir) = &self.data_dir {
            cfg.images_path = dir.join(cfg.images_path.file_name().unwrap_or_default());
            cfg.labels_path = dir.join(cfg.labels_path.file_name().unwrap_or_default());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn options(&self) -> RunOptions {
        RunOptions { jobs: self.jobs, log: !self.quiet, ..RunOptions::new(&self.out) }
    }
}

impl Pipeline {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.common.config()?;
        if let Some(e) = self.encoding {
            cfg.encoding = match e {
                EncodingArg::Autoencoder => EncodingKind::Autoencoder,
                EncodingArg::Classifier => EncodingKind::Classifier,
                EncodingArg::Random => EncodingKind::Random,
            };
        }
        Ok(cfg)
    }

    fn options(&self) -> RunOptions {
        let mut o = self.common.options();
        o.encoders = if self.train_encoders {
            EncoderSource::Train
        } else {
            EncoderSource::Load(self.encoders.clone().unwrap_or_else(|| self.common.out.join("encoders")))
        };
        o
    }
}

fn train_encoders(common: &Common, kind: EncodingKind) -> Result<()> {
    let cfg = common.config()?;
    let opts = common.options();
    let images = load_images(&cfg)?;
    let root = opts.out_dir.join("encoders");
    let results = parallel_map(&cfg.seeds, opts.jobs, |&seed| -> Result<_> {
        let t0 = Instant::now();
        let subset = seed_subset(&cfg, &images, seed)?;
        let ck = match kind {
            EncodingKind::Classifier => train_stdp_encoder(&cfg, &subset, seed)?.to_checkpoint(),
            _ => train_autoencoder(&cfg, &subset, seed, |e, l| {
                if opts.log {
                    eprintln!("[seed {seed}] epoch {e} reconstruction loss {l:.5}");
                }
            })?
            .to_checkpoint(),
        };
        let path = save_encoder(&root, &cfg, kind, seed, ck)?;
        Ok((path, t0.elapsed()))
    });
    for r in results {
        let (path, dt) = r?;
        println!("wrote {} ({:.1} s)", path.display(), dt.as_secs_f64());
    }
    Ok(())
}

fn encode(p: &Pipeline) -> Result<()> {
    let cfg = p.config()?;
    let opts = p.options();
    let images = load_images(&cfg)?;
    for &seed in &cfg.seeds {
        let (_, table) = prepare_seed(&cfg, &images, seed, &opts)?;
        let dir = seed_dir(&opts.out_dir, &cfg, seed);
        fs::create_dir_all(&dir)?;
        let path = dir.join("encodings.txt");
        write_encoding_dump(BufWriter::new(File::create(&path)?), &table)?;
        println!("wrote {} ({} images × {})", path.display(), table.len(), table.dim());
    }
    Ok(())
}

fn train_cpc(p: &Pipeline) -> Result<()> {
    let cfg = p.config()?;
    let summary = run_experiment(&cfg, &p.options())?;
    for s in &summary.seeds {
        println!("seed {}: max val accuracy {:.4} (epoch {}), stopped after {} epochs", s.seed, s.max_val_accuracy, s.best_epoch, s.stopping_epoch);
    }
    let std = |s: Option<f64>| s.map(|v| format!(" ± {v:.4}")).unwrap_or_default();
    println!(
        "{} / {}: {:.4}{} max val accuracy, {:.2}{} epochs",
        summary.dataset,
        summary.encoding,
        summary.mean_max_val_accuracy,
        std(summary.std_max_val_accuracy),
        summary.mean_stopping_epoch,
        std(summary.std_stopping_epoch)
    );
    println!("artifacts in {}", p.common.out.join(cfg.run_name()).display());
    Ok(())
}

fn evaluate(p: &Pipeline) -> Result<()> {
    let cfg = p.config()?;
    let opts = p.options();
    let images = load_images(&cfg)?;
    for &seed in &cfg.seeds {
        let (loss, acc) = evaluate_seed(&cfg, &images, seed, &opts)?;
        println!("{} seed {seed}: val loss {loss:.4} accuracy {acc:.4}", cfg.run_name());
    }
    Ok(())
}

fn reproduce_table1(p: &Pipeline, rows: &[String], strict: bool) -> Result<()> {
    let base = p.config()?;
    let opts = p.options();
    let selected: Vec<(Dataset, EncodingKind)> = table1_rows()
        .into_iter()
        .filter(|(d, k)| rows.is_empty() || rows.iter().any(|r| r == &format!("{}-{}", d.tag(), k.tag())))
        .collect();
    if selected.is_empty() {
        bail!("no Table 1 row matches {rows:?}; rows are named like 2500-autoencoder");
    }
    if let EncoderSource::Load(dir) = &opts.encoders {
        for &(d, k) in selected.iter().filter(|(_, k)| *k != EncodingKind::Random) {
            let cfg = ExperimentConfig { dataset: d, encoding: k, ..base.clone() };
            for &seed in &cfg.seeds {
                let path = encoder_path(dir, &cfg, k, seed);
                if !path.exists() {
                    bail!(
                        "missing encoder artifact {}: run `cpc-snn {} --dataset {} --seed {seed}` or pass --train-encoders",
                        path.display(),
                        if k == EncodingKind::Classifier { "train-stdp" } else { "train-autoencoder" },
                        d.tag()
                    );
                }
            }
        }
    }
    let mut table = Vec::new();
    for (d, k) in selected {
        let cfg = ExperimentConfig { dataset: d, encoding: k, ..base.clone() };
        let t0 = Instant::now();
        let summary = run_experiment(&cfg, &opts)?;
        eprintln!("{} done in {:.0} s", cfg.run_name(), t0.elapsed().as_secs_f64());
        table.push(Table1Row { dataset: d, encoding: k, summary });
    }
    let text = render_table1(&table);
    print!("{text}");
    fs::create_dir_all(&opts.out_dir)?;
    fs::write(opts.out_dir.join("table1.txt"), &text)?;
    if strict && (!table.iter().all(Table1Row::in_band) || !ordering_checks(&table).iter().all(|c| c.pass)) {
        bail!("Table 1 checks failed");
    }
    Ok(())
}

fn fetch_data(dir: &Path) -> Result<()> {
    let files = verify_data_dir(dir).with_context(|| {
        format!("verifying {}; scripts/export_mnist_5k.py regenerates the IDX files", dir.display())
    })?;
    for f in files {
        println!("ok  {}  {} bytes  {}", f.sha256, f.bytes, f.path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::FetchData { data_dir } => fetch_data(&data_dir),
        Command::TrainStdp(c) => train_encoders(&c, EncodingKind::Classifier),
        Command::TrainAutoencoder(c) => train_encoders(&c, EncodingKind::Autoencoder),
        Command::Encode(p) => encode(&p),
        Command::TrainCpc(p) => train_cpc(&p),
        Command::Evaluate(p) => evaluate(&p),
        Command::ReproduceTable1 { pipeline, rows, strict } => reproduce_table1(&pipeline, &rows, strict),
        Command::Gradcheck { inject } => {
            let report = gradcheck_all(inject.as_deref());
            print!("{}", report.render());
            if !report.passed() {
                bail!("gradient check failed");
            }
            Ok(())
        }
    }
}
