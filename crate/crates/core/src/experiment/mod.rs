//! End-to-end experiment harness: configuration, per-seed pipelines,
//! aggregation, reports and the gradient suite.

pub mod config;
pub mod gradsuite;
pub mod report;
pub mod run;

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{ConfigError, Dataset, EncodingKind, ExperimentConfig};
pub use gradsuite::{gradcheck_all, GradSuiteReport};
pub use report::{render_table1, table1_rows, Table1Row};
pub use run::{run_experiment, EncoderSource, ExperimentError, RunOptions, RunSummary, SeedResult};

/// File name of the checksum manifest inside the data directory, in
/// `sha256sum` format.
pub const CHECKSUM_MANIFEST: &str = "SHA256SUMS";

#[derive(Debug, Error)]
pub enum ChecksumError {
    #[error("cannot read {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: line {line} is not `<sha256>  <file>`", path.display())]
    Manifest { path: PathBuf, line: usize },
    #[error("{} is missing; copy the IDX files into {} first", path.display(), dir.display())]
    Missing { path: PathBuf, dir: PathBuf },
    #[error("{}: sha256 {found}, expected {expected}", path.display())]
    Mismatch { path: PathBuf, found: String, expected: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifiedFile {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64), ChecksumError> {
    let io = |source| ChecksumError::Io { path: path.to_path_buf(), source };
    let mut f = fs::File::open(path).map_err(io)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(io)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(h.finalize()), total))
}

/// Checks every file listed in `<dir>/SHA256SUMS`.
pub fn verify_data_dir(dir: &Path) -> Result<Vec<VerifiedFile>, ChecksumError> {
    let manifest = dir.join(CHECKSUM_MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(|source| ChecksumError::Io { path: manifest.clone(), source })?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (hash, name) = line
            .split_once(char::is_whitespace)
            .map(|(h, f)| (h.to_ascii_lowercase(), f.trim_start().trim_start_matches('*')))
            .filter(|(h, f)| h.len() == 64 && !f.is_empty())
            .ok_or(ChecksumError::Manifest { path: manifest.clone(), line: n + 1 })?;
        let path = dir.join(name);
        if !path.exists() {
            return Err(ChecksumError::Missing { path, dir: dir.to_path_buf() });
        }
        let (found, bytes) = sha256_file(&path)?;
        if found != hash {
            return Err(ChecksumError::Mismatch { path, found, expected: hash });
        }
        out.push(VerifiedFile { path, sha256: found, bytes });
    }
    Ok(out)
}
