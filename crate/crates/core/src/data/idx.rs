//! Big-endian IDX files as used by MNIST-style datasets.

use std::path::Path;

use ndarray::Array2;

use super::Dataset;
use crate::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx { path: path.to_path_buf(), reason: reason.into() }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| bad(path, "truncated header"))
}

/// Parses an unsigned-byte image file. Returns `(count, rows * cols, pixels)`
/// with pixels scaled to `[0, 1]`, row-major.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(bad(path, format!("expected image magic {IDX_IMAGE_MAGIC:#010x}, found {magic:#010x}")));
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let pixels_per_image = rows * cols;
    let body = &bytes[16..];
    let expected = count * pixels_per_image;
    if body.len() < expected {
        return Err(bad(path, format!("truncated: header promises {expected} pixel bytes, found {}", body.len())));
    }
    if body.len() > expected {
        return Err(bad(path, format!("{} trailing bytes after {count} images", body.len() - expected)));
    }
    Ok((count, pixels_per_image, body.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(bad(path, format!("expected label magic {IDX_LABEL_MAGIC:#010x}, found {magic:#010x}")));
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(bad(path, format!("truncated: header promises {count} labels, found {}", body.len())));
    }
    if body.len() > count {
        return Err(bad(path, format!("{} trailing bytes after {count} labels", body.len() - count)));
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image/label IDX pair. The class count is one more than the
/// largest label present.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (count, dims, pixels) = parse_idx_images(&image_bytes, images_path)?;
    let labels = parse_idx_labels(&label_bytes, labels_path)?;
    if count == 0 {
        return Err(bad(images_path, "file contains zero images"));
    }
    if dims == 0 {
        return Err(bad(images_path, "images have zero pixels"));
    }
    if labels.len() != count {
        return Err(bad(labels_path, format!("{} labels for {count} images", labels.len())));
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let features = Array2::from_shape_vec((count, dims), pixels).expect("checked length");
    Dataset::new(features, labels, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGE_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn labels(magic: u32, values: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        b.extend_from_slice(&(values.len() as u32).to_be_bytes());
        b.extend_from_slice(values);
        b
    }

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn loads_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(&dir, "img", &images(2, 2, 2, &[0, 51, 102, 255, 255, 0, 1, 254]));
        let lab = write(&dir, "lab", &labels(IDX_LABEL_MAGIC, &[3, 1]));
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dims(), 4);
        assert_eq!(ds.labels(), &[3, 1]);
        assert_eq!(ds.class_count(), 4);
        let expected = [0.0, 0.2, 0.4, 1.0, 1.0, 0.0, 1.0 / 255.0, 254.0 / 255.0];
        assert_eq!(ds.features().iter().copied().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn rejects_wrong_label_magic() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(&dir, "img", &images(1, 1, 2, &[1, 2]));
        let lab = write(&dir, "lab", &labels(IDX_IMAGE_MAGIC, &[0]));
        let err = load_idx(&img, &lab).unwrap_err();
        assert!(err.to_string().contains("label magic"), "{err}");
    }

    #[test]
    fn rejects_zero_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(&dir, "img", &images(0, 28, 28, &[]));
        let lab = write(&dir, "lab", &labels(IDX_LABEL_MAGIC, &[]));
        assert!(load_idx(&img, &lab).unwrap_err().to_string().contains("zero images"));
    }

    #[test]
    fn rejects_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let short = write(&dir, "short", &images(2, 2, 2, &[0; 7]));
        let lab2 = write(&dir, "lab2", &labels(IDX_LABEL_MAGIC, &[0, 1]));
        assert!(load_idx(&short, &lab2).unwrap_err().to_string().contains("truncated"));

        let img = write(&dir, "img", &images(2, 2, 2, &[0; 8]));
        let lab3 = write(&dir, "lab3", &labels(IDX_LABEL_MAGIC, &[0, 1, 1]));
        assert!(load_idx(&img, &lab3).unwrap_err().to_string().contains("3 labels for 2 images"));

        let header_only = write(&dir, "hdr", &IDX_IMAGE_MAGIC.to_be_bytes()[..3]);
        assert!(load_idx(&header_only, &lab2).is_err());
        assert!(matches!(load_idx(dir.path().join("missing"), &lab2), Err(Error::Io { .. })));
    }
}
