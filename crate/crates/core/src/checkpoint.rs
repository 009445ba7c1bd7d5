//! Versioned binary checkpoints shared by every trained component.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CPCSNNCK"            8-byte magic
//! u32 version            currently 1
//! u32 manifest_len       bytes of UTF-8 manifest that follow
//! manifest               lines: `kind <name>`, `meta <key> <value>`,
//!                        `tensor <name> <d0>x<d1>x...`
//! payload                f64 little-endian, tensors concatenated in manifest order
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"CPCSNNCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint holds a `{found}` model, expected `{expected}`")]
    Kind { expected: String, found: String },
    #[error("checkpoint is missing `{0}`")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint { kind: kind.to_string(), meta: Vec::new(), tensors: Vec::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: impl IntoIterator<Item = f64>) {
        let values: Vec<f64> = values.into_iter().collect();
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.tensors.push((name.to_string(), shape.to_vec(), values));
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::Kind { expected: kind.into(), found: self.kind.clone() })
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CheckpointError::Missing(format!("meta {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| CheckpointError::Format(format!("meta {key} = `{raw}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64]), CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, v)| (s.as_slice(), v.as_slice()))
            .ok_or_else(|| CheckpointError::Missing(format!("tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("kind {}\n", self.kind);
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, shape, _) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {name} {}\n", dims.join("x")));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, _, values) in &self.tensors {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let manifest = bytes.get(16..16 + mlen).ok_or_else(|| fmt("truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| fmt("manifest is not UTF-8"))?;
        let mut ck = Checkpoint::new("");
        let mut offset = 16 + mlen;
        for line in manifest.lines() {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("kind"), Some(kind), None) => ck.kind = kind.to_string(),
                (Some("meta"), Some(k), v) => ck.meta.push((k.to_string(), v.unwrap_or("").to_string())),
                (Some("tensor"), Some(name), Some(dims)) => {
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| fmt("bad tensor dims")))
                        .collect::<Result<Vec<_>, _>>()?;
                    let n: usize = shape.iter().product();
                    let raw = bytes.get(offset..offset + 8 * n).ok_or_else(|| fmt("truncated payload"))?;
                    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    offset += 8 * n;
                    ck.tensors.push((name.to_string(), shape, values));
                }
                _ => return Err(CheckpointError::Format(format!("bad manifest line `{line}`"))),
            }
        }
        if offset != bytes.len() {
            return Err(fmt("trailing bytes after payload"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}
