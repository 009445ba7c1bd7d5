//! MNIST ingestion, class-balanced subsets, and digit-sequence pairs.

mod dump;
mod idx;
mod pairs;
mod subset;

pub use dump::{read_pairs_dump, write_pairs_dump, write_subset_dump, PAIRS_DUMP_HEADER, SUBSET_DUMP_HEADER};
pub use idx::{load_idx, parse_idx, to_idx, IMAGE_MAGIC, LABEL_MAGIC};
pub use pairs::{
    batch_iter, generate_pairs, is_continuation, make_pair, random_start_digit, ImagePool, SequenceGeometry,
    SequencePair,
};
pub use subset::{build_subset, ClassBalancedSubset};

use thiserror::Error;

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const CLASSES: usize = 10;

/// One 28×28 grayscale digit with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistImage {
    pub pixels: Vec<f32>,
    pub label: u8,
    /// Ordinal within the source file.
    pub index: u32,
}

impl MnistImage {
    pub fn new(pixels: Vec<f32>, label: u8, index: u32) -> Result<Self, DataError> {
        if pixels.len() != PIXELS {
            return Err(DataError::Length { what: "image pixels".into(), expected: PIXELS, found: pixels.len() });
        }
        if label > 9 {
            return Err(DataError::Format(format!("label {label} outside 0..=9")));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DataError::Format(format!("pixel intensity {p} outside [0, 1]")));
        }
        Ok(MnistImage { pixels, label, index })
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed IDX data: {0}")]
    Format(String),
    #[error("{what}: expected {expected} bytes, found {found}")]
    Length { what: String, expected: usize, found: usize },
    #[error("image file holds {images} entries but label file holds {labels}")]
    Consistency { images: usize, labels: usize },
    #[error("digit {digit}: {available} images available, {requested} requested")]
    Capacity { digit: u8, available: usize, requested: usize },
    #[error("{0}")]
    Invalid(String),
}
