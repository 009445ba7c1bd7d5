use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore};

use super::{DataError, MnistImage, CLASSES};

/// Shape of a digit sequence: `context_len` observed digits followed by
/// `prediction_len` digits whose encodings are predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceGeometry {
    pub context_len: usize,
    pub prediction_len: usize,
    /// Digit runs wrap modulo 10. Without wrap, a run must fit inside 0..=9.
    pub wrap: bool,
}

impl Default for SequenceGeometry {
    fn default() -> Self {
        SequenceGeometry { context_len: 4, prediction_len: 4, wrap: true }
    }
}

impl SequenceGeometry {
    pub fn run_len(&self) -> usize {
        self.context_len + self.prediction_len
    }

    /// Admissible first digits of a sequence.
    pub fn start_digits(&self) -> std::ops::RangeInclusive<u8> {
        if self.wrap {
            0..=9
        } else {
            0..=(CLASSES.saturating_sub(self.run_len())) as u8
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.context_len == 0 || self.prediction_len == 0 {
            return Err(DataError::Invalid("context and prediction lengths must be positive".into()));
        }
        if !self.wrap && self.run_len() > CLASSES {
            return Err(DataError::Invalid(format!("a run of {} digits cannot fit in 0..=9 without wrap", self.run_len())));
        }
        Ok(())
    }
}

/// Context run plus a candidate continuation. `label = true` iff the targets
/// are the true modular continuation of the context run.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePair<'a> {
    pub context_digits: Vec<u8>,
    pub target_digits: Vec<u8>,
    pub context_images: Vec<&'a MnistImage>,
    pub target_images: Vec<&'a MnistImage>,
    pub label: bool,
}

/// `true` iff `context` is a consecutive run (mod 10) and `target` continues it.
pub fn is_continuation(context: &[u8], target: &[u8]) -> bool {
    let Some(&first) = context.first() else { return false };
    context
        .iter()
        .chain(target)
        .enumerate()
        .all(|(k, &d)| d as usize == (first as usize + k) % CLASSES)
}

/// Per-digit image buckets borrowed from a subset (or a split of one).
#[derive(Clone, Debug)]
pub struct ImagePool<'a> {
    buckets: Vec<Vec<&'a MnistImage>>,
}

impl<'a> ImagePool<'a> {
    pub fn new(images: impl IntoIterator<Item = &'a MnistImage>) -> Self {
        let mut buckets = vec![Vec::new(); CLASSES];
        for im in images {
            buckets[im.label as usize].push(im);
        }
        ImagePool { buckets }
    }

    pub fn bucket(&self, digit: u8) -> &[&'a MnistImage] {
        &self.buckets[digit as usize]
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn draw<R: Rng + ?Sized>(&self, digit: u8, rng: &mut R) -> Result<&'a MnistImage, DataError> {
        self.buckets[digit as usize]
            .choose(rng)
            .copied()
            .ok_or_else(|| DataError::Capacity { digit, available: 0, requested: 1 })
    }
}

pub fn random_start_digit<R: Rng + ?Sized>(geometry: &SequenceGeometry, rng: &mut R) -> u8 {
    rng.random_range(geometry.start_digits())
}

pub fn make_pair<'a, R: Rng + ?Sized>(
    pool: &ImagePool<'a>,
    start_digit: u8,
    label: bool,
    geometry: &SequenceGeometry,
    rng: &mut R,
) -> Result<SequencePair<'a>, DataError> {
    geometry.validate()?;
    if !geometry.start_digits().contains(&start_digit) {
        return Err(DataError::Invalid(format!("start digit {start_digit} not admissible for {geometry:?}")));
    }
    let digit = |k: usize| ((start_digit as usize + k) % CLASSES) as u8;
    let context_digits: Vec<u8> = (0..geometry.context_len).map(digit).collect();
    let continuation: Vec<u8> = (geometry.context_len..geometry.run_len()).map(digit).collect();
    let target_digits = if label {
        continuation
    } else {
        loop {
            let candidate: Vec<u8> = (0..geometry.prediction_len).map(|_| rng.random_range(0..CLASSES as u8)).collect();
            if candidate != continuation {
                break candidate;
            }
        }
    };
    let context_images = context_digits.iter().map(|&d| pool.draw(d, rng)).collect::<Result<_, _>>()?;
    let target_images = target_digits.iter().map(|&d| pool.draw(d, rng)).collect::<Result<_, _>>()?;
    Ok(SequencePair { context_digits, target_digits, context_images, target_images, label })
}

/// `positives` label-1 and `negatives` label-0 pairs with uniformly random
/// start digits, in generation order (positives first).
pub fn generate_pairs<'a, R: Rng + ?Sized>(
    pool: &ImagePool<'a>,
    positives: usize,
    negatives: usize,
    geometry: &SequenceGeometry,
    rng: &mut R,
) -> Result<Vec<SequencePair<'a>>, DataError> {
    let mut out = Vec::with_capacity(positives + negatives);
    for k in 0..positives + negatives {
        let start = random_start_digit(geometry, rng);
        out.push(make_pair(pool, start, k < positives, geometry, rng)?);
    }
    Ok(out)
}

/// Splits `pairs` into batches of exactly `pos_per_batch` positives and
/// `neg_per_batch` negatives, shuffled within each batch. Pool order is
/// reshuffled from `rng` on every call; the incomplete tail is dropped.
pub fn batch_iter<'p, 'a, R: RngCore + ?Sized>(
    pairs: &'p [SequencePair<'a>],
    pos_per_batch: usize,
    neg_per_batch: usize,
    rng: &mut R,
) -> impl Iterator<Item = Vec<&'p SequencePair<'a>>> {
    let mut pos: Vec<&SequencePair> = pairs.iter().filter(|p| p.label).collect();
    let mut neg: Vec<&SequencePair> = pairs.iter().filter(|p| !p.label).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_batches = if pos_per_batch + neg_per_batch == 0 {
        0
    } else {
        let by_pos = pos.len().checked_div(pos_per_batch).unwrap_or(usize::MAX);
        let by_neg = neg.len().checked_div(neg_per_batch).unwrap_or(usize::MAX);
        by_pos.min(by_neg)
    };
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch: Vec<&SequencePair> = pos[b * pos_per_batch..(b + 1) * pos_per_batch]
            .iter()
            .chain(&neg[b * neg_per_batch..(b + 1) * neg_per_batch])
            .copied()
            .collect();
        batch.shuffle(rng);
        batches.push(batch);
    }
    batches.into_iter()
}
