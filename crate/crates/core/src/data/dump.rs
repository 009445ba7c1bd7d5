//! Plain-text dumps of subsets and pair sets.
//!
//! Subset dump:
//! ```text
//! cpc-snn-subset v1
//! per_class_count=<n>,seed=<seed>
//! index,label
//! <index>,<label>          (one line per image, subset order)
//! ```
//!
//! Pairs dump (lists are `;`-joined, image columns hold source indices):
//! ```text
//! cpc-snn-pairs v1
//! label,context_digits,target_digits,context_images,target_images
//! 1,1;2;3;4,5;6;7;8,17;902;33;4410,12;7;801;96
//! ```

use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::{ClassBalancedSubset, DataError, MnistImage, SequencePair};

pub const SUBSET_DUMP_HEADER: &str = "cpc-snn-subset v1";
pub const PAIRS_DUMP_HEADER: &str = "cpc-snn-pairs v1";
const PAIRS_COLUMNS: &str = "label,context_digits,target_digits,context_images,target_images";

fn io_err(e: std::io::Error) -> DataError {
    DataError::Io { path: "<dump>".into(), source: e }
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn write_subset_dump<W: Write>(mut out: W, subset: &ClassBalancedSubset) -> Result<(), DataError> {
    writeln!(out, "{SUBSET_DUMP_HEADER}").map_err(io_err)?;
    writeln!(out, "per_class_count={},seed={}", subset.per_class_count, subset.seed).map_err(io_err)?;
    writeln!(out, "index,label").map_err(io_err)?;
    for im in &subset.images {
        writeln!(out, "{},{}", im.index, im.label).map_err(io_err)?;
    }
    Ok(())
}

pub fn write_pairs_dump<W: Write>(mut out: W, pairs: &[SequencePair<'_>]) -> Result<(), DataError> {
    writeln!(out, "{PAIRS_DUMP_HEADER}\n{PAIRS_COLUMNS}").map_err(io_err)?;
    for p in pairs {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.label as u8,
            join(&p.context_digits),
            join(&p.target_digits),
            join(p.context_images.iter().map(|im| im.index)),
            join(p.target_images.iter().map(|im| im.index)),
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Reads a pairs dump back, resolving image indices against `images`.
pub fn read_pairs_dump<'a, R: BufRead>(input: R, images: &'a [MnistImage]) -> Result<Vec<SequencePair<'a>>, DataError> {
    let by_index: HashMap<u32, &MnistImage> = images.iter().map(|im| (im.index, im)).collect();
    let mut lines = input.lines();
    let mut next = || lines.next().transpose().map_err(io_err);
    if next()?.as_deref() != Some(PAIRS_DUMP_HEADER) {
        return Err(DataError::Format(format!("pairs dump must start with `{PAIRS_DUMP_HEADER}`")));
    }
    if next()?.as_deref() != Some(PAIRS_COLUMNS) {
        return Err(DataError::Format("pairs dump column header missing".into()));
    }
    let mut pairs = Vec::new();
    while let Some(line) = next()? {
        let bad = || DataError::Format(format!("bad pairs dump row `{line}`"));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad());
        }
        let nums = |s: &str| s.split(';').map(|x| x.parse::<u32>().map_err(|_| bad())).collect::<Result<Vec<_>, _>>();
        let resolve = |ids: Vec<u32>| {
            ids.into_iter()
                .map(|i| by_index.get(&i).copied().ok_or_else(|| DataError::Format(format!("unknown image index {i}"))))
                .collect::<Result<Vec<_>, _>>()
        };
        let label = match cols[0] {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        let digits = |s| nums(s).map(|v| v.into_iter().map(|d| d as u8).collect::<Vec<u8>>());
        pairs.push(SequencePair {
            label,
            context_digits: digits(cols[1])?,
            target_digits: digits(cols[2])?,
            context_images: resolve(nums(cols[3])?)?,
            target_images: resolve(nums(cols[4])?)?,
        });
    }
    Ok(pairs)
}
