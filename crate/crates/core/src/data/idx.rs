use std::fs;
use std::path::Path;

use super::{DataError, MnistImage, PIXELS, SIDE};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Length { what: what.to_string(), expected: offset + 4, found: bytes.len() })
}

/// Loads an IDX image/label file pair in file order.
pub fn load_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<Vec<MnistImage>, DataError> {
    let read = |p: &Path| fs::read(p).map_err(|source| DataError::Io { path: p.display().to_string(), source });
    let images = read(image_path.as_ref())?;
    let labels = read(label_path.as_ref())?;
    parse_idx(&images, &labels)
}

/// Parses in-memory IDX buffers: big-endian magic, big-endian dimension
/// sizes, then row-major unsigned bytes.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Vec<MnistImage>, DataError> {
    let magic = read_u32(images, 0, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::Format(format!("image file magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let magic = read_u32(labels, 0, "label header")?;
    if magic != LABEL_MAGIC {
        return Err(DataError::Format(format!("label file magic {magic}, expected {LABEL_MAGIC}")));
    }
    let n_images = read_u32(images, 4, "image header")? as usize;
    let rows = read_u32(images, 8, "image header")? as usize;
    let cols = read_u32(images, 12, "image header")? as usize;
    let n_labels = read_u32(labels, 4, "label header")? as usize;
    if rows != SIDE || cols != SIDE {
        return Err(DataError::Format(format!("images are {rows}x{cols}, expected {SIDE}x{SIDE}")));
    }
    if n_images != n_labels {
        return Err(DataError::Consistency { images: n_images, labels: n_labels });
    }
    let pix_expected = 16 + n_images * PIXELS;
    if images.len() < pix_expected {
        return Err(DataError::Length { what: "image payload".into(), expected: pix_expected, found: images.len() });
    }
    if labels.len() < 8 + n_labels {
        return Err(DataError::Length { what: "label payload".into(), expected: 8 + n_labels, found: labels.len() });
    }
    (0..n_images)
        .map(|i| {
            let label = labels[8 + i];
            if label > 9 {
                return Err(DataError::Format(format!("label {label} at entry {i}")));
            }
            let raw = &images[16 + i * PIXELS..16 + (i + 1) * PIXELS];
            Ok(MnistImage {
                pixels: raw.iter().map(|&b| b as f32 / 255.0).collect(),
                label,
                index: i as u32,
            })
        })
        .collect()
}

/// Serialises images back into IDX buffers (used to write fixtures).
pub fn to_idx(images: &[MnistImage]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * PIXELS);
    for v in [IMAGE_MAGIC, images.len() as u32, SIDE as u32, SIDE as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    let mut lab = Vec::with_capacity(8 + images.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(images.len() as u32).to_be_bytes());
    for im in images {
        img.extend(im.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
        lab.push(im.label);
    }
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn saturated_single_image() {
        let mut img = header(IMAGE_MAGIC, &[1, 28, 28]);
        img.extend(std::iter::repeat_n(255u8, PIXELS));
        let mut lab = header(LABEL_MAGIC, &[1]);
        lab.push(3);
        let out = parse_idx(&img, &lab).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].label, 3);
        assert!(out[0].pixels.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut img = header(LABEL_MAGIC, &[1, 28, 28]);
        img.extend(std::iter::repeat_n(0u8, PIXELS));
        let lab = [header(LABEL_MAGIC, &[1]), vec![0]].concat();
        assert!(matches!(parse_idx(&img, &lab), Err(DataError::Format(_))));
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let mut img = header(IMAGE_MAGIC, &[2, 28, 28]);
        img.extend(std::iter::repeat_n(0u8, PIXELS + 10));
        let lab = [header(LABEL_MAGIC, &[2]), vec![0, 1]].concat();
        assert!(matches!(parse_idx(&img, &lab), Err(DataError::Length { .. })));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let mut img = header(IMAGE_MAGIC, &[1, 28, 28]);
        img.extend(std::iter::repeat_n(0u8, PIXELS));
        let lab = [header(LABEL_MAGIC, &[2]), vec![0, 1]].concat();
        assert!(matches!(parse_idx(&img, &lab), Err(DataError::Consistency { images: 1, labels: 2 })));
    }

    #[test]
    fn header_count_is_echoed() {
        let n = 10_000;
        let mut img = header(IMAGE_MAGIC, &[n, 28, 28]);
        img.resize(16 + n as usize * PIXELS, 7);
        let mut lab = header(LABEL_MAGIC, &[n]);
        lab.extend((0..n).map(|i| (i % 10) as u8));
        let out = parse_idx(&img, &lab).unwrap();
        assert_eq!(out.len(), 10_000);
        assert_eq!(out[9_999].index, 9_999);
    }
}
