use rand::seq::SliceRandom;

use super::{DataError, MnistImage, CLASSES};
use crate::seed;

/// An equal number of images per digit, sampled without replacement and
/// shuffled, fully determined by `(source, per_class_count, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBalancedSubset {
    pub per_class_count: usize,
    pub seed: u64,
    pub images: Vec<MnistImage>,
}

pub fn build_subset(images: &[MnistImage], per_class_count: usize, seed: u64) -> Result<ClassBalancedSubset, DataError> {
    if per_class_count == 0 {
        return Err(DataError::Invalid("per_class_count must be positive".into()));
    }
    let mut buckets: Vec<Vec<&MnistImage>> = vec![Vec::new(); CLASSES];
    for im in images {
        buckets[im.label as usize].push(im);
    }
    let mut rng = seed::stream(seed, "subset", 0);
    let mut chosen = Vec::with_capacity(per_class_count * CLASSES);
    for (digit, bucket) in buckets.iter_mut().enumerate() {
        if bucket.len() < per_class_count {
            return Err(DataError::Capacity { digit: digit as u8, available: bucket.len(), requested: per_class_count });
        }
        bucket.shuffle(&mut rng);
        chosen.extend(bucket[..per_class_count].iter().map(|&im| im.clone()));
    }
    chosen.shuffle(&mut rng);
    Ok(ClassBalancedSubset { per_class_count, seed, images: chosen })
}

impl ClassBalancedSubset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for im in &self.images {
            h[im.label as usize] += 1;
        }
        h
    }

    /// Holds out `round(per_class_count · fraction)` images of every digit
    /// (the first ones in subset order) and returns `(train, validation)`.
    pub fn split_validation(&self, fraction: f64) -> Result<(Vec<&MnistImage>, Vec<&MnistImage>), DataError> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(DataError::Invalid(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let held = (self.per_class_count as f64 * fraction).round() as usize;
        if fraction > 0.0 && (held == 0 || held >= self.per_class_count) {
            return Err(DataError::Invalid(format!(
                "validation fraction {fraction} leaves an empty split for {} images per class",
                self.per_class_count
            )));
        }
        let mut taken = [0usize; CLASSES];
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for im in &self.images {
            let t = &mut taken[im.label as usize];
            if *t < held {
                val.push(im);
            } else {
                train.push(im);
            }
            *t += 1;
        }
        Ok((train, val))
    }
}
