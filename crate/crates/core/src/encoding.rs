//! Frozen image encoders and precomputed encoding tables.
//!
//! Every encoder is a pure function of `(image, encoder state)`. The spiking
//! classifier draws its Poisson input from a stream keyed by the image index,
//! so re-encoding an image reproduces its vector exactly.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autoencoder::{AutoencoderError, FrozenLifEncoder};
use crate::codec::RateCodingParams;
use crate::data::MnistImage;
use crate::seed;
use crate::stdp::{encode_image, StdpError, StdpNetworkState};

pub const ENCODING_DUMP_HEADER: &str = "cpc-snn-encodings v1";

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error(transparent)]
    Stdp(#[from] StdpError),
    #[error(transparent)]
    Autoencoder(#[from] AutoencoderError),
    #[error("encoding dimension must be positive")]
    ZeroDim,
    #[error("no encoding for image {index}")]
    Missing { index: u32 },
    #[error("encoding table: {0}")]
    Format(String),
    #[error("encoding dump i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Read-only image → vector map.
pub trait FrozenEncoder {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn encode(&self, image: &MnistImage) -> Result<Vec<f32>, EncodingError>;
    /// Digest of the parameters; constant for the lifetime of the handle.
    fn checksum(&self) -> u64;
}

/// The spike-count encoder: excitatory spike counts over one window.
#[derive(Clone, Debug)]
pub struct FrozenStdpEncoder {
    state: StdpNetworkState,
    coding: RateCodingParams,
    seed: u64,
}

impl FrozenStdpEncoder {
    pub fn new(state: StdpNetworkState, coding: RateCodingParams, seed: u64) -> Self {
        FrozenStdpEncoder { state, coding, seed }
    }

    pub fn state(&self) -> &StdpNetworkState {
        &self.state
    }
}

impl FrozenEncoder for FrozenStdpEncoder {
    fn name(&self) -> &'static str {
        "classifier"
    }

    fn dim(&self) -> usize {
        self.state.params.n_exc
    }

    fn encode(&self, image: &MnistImage) -> Result<Vec<f32>, EncodingError> {
        let mut rng = seed::stream(self.seed, "stdp-encode", image.index as u64);
        let v = encode_image(&self.state, image, &self.coding, &mut rng)?;
        Ok(v.counts.iter().map(|&c| c as f32).collect())
    }

    fn checksum(&self) -> u64 {
        self.state.checksum()
    }
}

impl FrozenEncoder for FrozenLifEncoder {
    fn name(&self) -> &'static str {
        "autoencoder"
    }

    fn dim(&self) -> usize {
        self.latent_dim()
    }

    fn encode(&self, image: &MnistImage) -> Result<Vec<f32>, EncodingError> {
        Ok(FrozenLifEncoder::encode(self, image)?.values)
    }

    fn checksum(&self) -> u64 {
        FrozenLifEncoder::checksum(self)
    }
}

/// Independent standard normal vector per image, keyed by image index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RandomEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl FrozenEncoder for RandomEncoder {
    fn name(&self) -> &'static str {
        "random"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, image: &MnistImage) -> Result<Vec<f32>, EncodingError> {
        if self.dim == 0 {
            return Err(EncodingError::ZeroDim);
        }
        let mut rng = seed::stream(self.seed, "random-encoding", image.index as u64);
        Ok((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    fn checksum(&self) -> u64 {
        seed::derive(self.seed, "random-encoding", self.dim as u64)
    }
}

/// Dense row-per-image table addressed by source image index.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodingTable {
    dim: usize,
    indices: Vec<u32>,
    labels: Vec<u8>,
    values: Vec<f32>,
    lookup: HashMap<u32, usize>,
}

impl EncodingTable {
    pub fn new(dim: usize) -> Self {
        EncodingTable { dim, indices: Vec::new(), labels: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    /// Adds or replaces the row of `index`.
    pub fn insert(&mut self, index: u32, label: u8, values: &[f32]) -> Result<(), EncodingError> {
        if values.len() != self.dim {
            return Err(EncodingError::Format(format!("row of length {} in a {}-d table", values.len(), self.dim)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EncodingError::Format(format!("non-finite encoding for image {index}")));
        }
        if let Some(&row) = self.lookup.get(&index) {
            self.labels[row] = label;
            self.values[row * self.dim..(row + 1) * self.dim].copy_from_slice(values);
        } else {
            self.lookup.insert(index, self.indices.len());
            self.indices.push(index);
            self.labels.push(label);
            self.values.extend_from_slice(values);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, index: u32) -> Result<&[f32], EncodingError> {
        let row = *self.lookup.get(&index).ok_or(EncodingError::Missing { index })?;
        Ok(&self.values[row * self.dim..(row + 1) * self.dim])
    }

    pub fn label(&self, index: u32) -> Option<u8> {
        self.lookup.get(&index).map(|&r| self.labels[r])
    }

    /// `(index, label, values)` in insertion order.
    pub fn rows(&self) -> impl Iterator<Item = (u32, u8, &[f32])> {
        self.indices
            .iter()
            .zip(&self.labels)
            .zip(self.values.chunks_exact(self.dim.max(1)))
            .map(|((&i, &l), v)| (i, l, v))
    }
}

pub fn build_table<'a, E: FrozenEncoder + ?Sized>(
    encoder: &E,
    images: impl IntoIterator<Item = &'a MnistImage>,
) -> Result<EncodingTable, EncodingError> {
    let mut table = EncodingTable::new(encoder.dim());
    for im in images {
        table.insert(im.index, im.label, &encoder.encode(im)?)?;
    }
    Ok(table)
}

/// One fixed standard normal vector per image of `images`.
pub fn random_encoding<'a>(
    images: impl IntoIterator<Item = &'a MnistImage>,
    dim: usize,
    seed: u64,
) -> Result<EncodingTable, EncodingError> {
    build_table(&RandomEncoder { dim, seed }, images)
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; constant dimensions get 1.
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over the rows of `indices` only.
    pub fn fit(table: &EncodingTable, indices: impl IntoIterator<Item = u32>) -> Result<Self, EncodingError> {
        let d = table.dim();
        let (mut sum, mut sq, mut n) = (vec![0.0f64; d], vec![0.0f64; d], 0usize);
        for i in indices {
            for (j, &v) in table.get(i)?.iter().enumerate() {
                sum[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
            n += 1;
        }
        if n == 0 {
            return Err(EncodingError::Format("cannot fit standardizer on zero rows".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n as f64 - m * m).max(0.0);
                if var > 1e-12 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, table: &EncodingTable) -> Result<EncodingTable, EncodingError> {
        if table.dim() != self.mean.len() {
            return Err(EncodingError::Format(format!("standardizer for {}-d applied to {}-d table", self.mean.len(), table.dim())));
        }
        let mut out = EncodingTable::new(table.dim());
        let mut row = vec![0.0f32; table.dim()];
        for (index, label, values) in table.rows() {
            for (j, &v) in values.iter().enumerate() {
                row[j] = ((v as f64 - self.mean[j]) / self.std[j]) as f32;
            }
            out.insert(index, label, &row)?;
        }
        Ok(out)
    }
}

/// Mean cosine similarity of same-label pairs and of different-label pairs,
/// over all unordered pairs of rows. A zero vector has similarity 0 with
/// everything.
pub fn class_separation(table: &EncodingTable) -> (f64, f64) {
    let rows: Vec<(u8, Vec<f64>)> = table
        .rows()
        .map(|(_, label, v)| {
            let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let unit = v.iter().map(|&x| if norm > 0.0 { x as f64 / norm } else { 0.0 }).collect();
            (label, unit)
        })
        .collect();
    let (mut within, mut n_within, mut between, mut n_between) = (0.0, 0u64, 0.0, 0u64);
    for (i, (la, a)) in rows.iter().enumerate() {
        for (lb, b) in &rows[i + 1..] {
            let c: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            if la == lb {
                within += c;
                n_within += 1;
            } else {
                between += c;
                n_between += 1;
            }
        }
    }
    (within / n_within.max(1) as f64, between / n_between.max(1) as f64)
}

/// ```text
/// cpc-snn-encodings v1
/// dim=<d>
/// index,label,values
/// <index>,<label>,<v0>;<v1>;...
/// ```
pub fn write_encoding_dump<W: Write>(mut out: W, table: &EncodingTable) -> Result<(), EncodingError> {
    writeln!(out, "{ENCODING_DUMP_HEADER}")?;
    writeln!(out, "dim={}", table.dim())?;
    writeln!(out, "index,label,values")?;
    for (index, label, values) in table.rows() {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{index},{label},{}", joined.join(";"))?;
    }
    Ok(())
}

pub fn read_encoding_dump<R: BufRead>(input: R) -> Result<EncodingTable, EncodingError> {
    let bad = |m: String| EncodingError::Format(m);
    let mut lines = input.lines();
    let mut next = || lines.next().transpose().map_err(EncodingError::from);
    if next()?.as_deref() != Some(ENCODING_DUMP_HEADER) {
        return Err(bad("missing encoding dump header".into()));
    }
    let dim: usize = next()?
        .as_deref()
        .and_then(|l| l.strip_prefix("dim="))
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| bad("missing dim line".into()))?;
    if next()?.as_deref() != Some("index,label,values") {
        return Err(bad("missing column line".into()));
    }
    let mut table = EncodingTable::new(dim);
    while let Some(line) = next()? {
        let mut cols = line.splitn(3, ',');
        let (Some(i), Some(l), Some(v)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(bad(format!("malformed row {line:?}")));
        };
        let values = v.split(';').map(|x| x.parse::<f32>()).collect::<Result<Vec<_>, _>>().map_err(|e| bad(e.to_string()))?;
        table.insert(i.parse().map_err(|_| bad(format!("bad index {i:?}")))?, l.parse().map_err(|_| bad(format!("bad label {l:?}")))?, &values)?;
    }
    Ok(table)
}
