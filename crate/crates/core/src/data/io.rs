//! CSV and IDX dataset files.
//!
//! CSV: UTF-8, comma separated, one header row. The label column (named
//! `label` by default) holds integer class ids; every other column is a
//! numeric feature.
//!
//! IDX: big-endian containers as used by MNIST. Labels use magic
//! `0x00000801` (unsigned bytes, one dimension); images use `0x00000803`
//! (unsigned bytes, three dimensions). Pixels are scaled to `[0, 1]` and each
//! image is flattened row-major.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub label_column: String,
    /// Expected class count; inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { label_column: "label".into(), num_classes: None }
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema, split: Split) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| Error::parse(path, format!("header has no '{}' column", schema.label_column)))?;
    let width = headers.len() - 1;
    if width == 0 {
        return Err(Error::parse(path, "no feature columns"));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        for (col, field) in record.iter().enumerate() {
            if col == label_idx {
                let label: usize = field
                    .parse()
                    .map_err(|_| Error::parse(path, format!("line {line}: label '{field}' is not a class id")))?;
                labels.push(label);
            } else {
                let value: f64 = field
                    .parse()
                    .map_err(|_| Error::parse(path, format!("line {line}, column {}: '{field}' is not a number", col + 1)))?;
                if !value.is_finite() {
                    return Err(Error::parse(path, format!("line {line}, column {}: non-finite value", col + 1)));
                }
                data.push(value);
            }
        }
    }
    let num_classes = resolve_classes(path, &labels, schema.num_classes)?;
    let inputs = Tensor::matrix(labels.len(), width, data)?;
    let name = path.file_stem().map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(inputs, labels, num_classes, split, name)
}

pub fn write_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut header: Vec<String> = (1..=ds.input_dim()).map(|j| format!("x_{j}")).collect();
    header.push("label".into());
    writer.write_record(&header).map_err(|e| Error::parse(path, e.to_string()))?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.inputs.row(i).iter().map(|v| v.to_string()).collect();
        row.push(ds.labels[i].to_string());
        writer.write_record(&row).map_err(|e| Error::parse(path, e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

fn resolve_classes(path: &Path, labels: &[usize], expected: Option<usize>) -> Result<usize> {
    let inferred = labels.iter().max().map_or(0, |&m| m + 1);
    match expected {
        Some(c) if inferred > c => Err(Error::parse(
            path,
            format!("label cardinality mismatch: found label {} but {} classes expected", inferred - 1, c),
        )),
        Some(c) => Ok(c),
        None => Ok(inferred),
    }
}

struct IdxHeader {
    dims: Vec<usize>,
    payload_offset: usize,
}

fn read_idx_header(path: &Path, bytes: &[u8], magic: u32) -> Result<IdxHeader> {
    if bytes.len() < 4 {
        return Err(Error::parse(path, format!("truncated header: expected at least 4 bytes, found {}", bytes.len())));
    }
    let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if found != magic {
        return Err(Error::parse(path, format!("bad magic number 0x{found:08x} at offset 0, expected 0x{magic:08x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(Error::parse(
            path,
            format!("truncated header: expected {} bytes, found {}", header_len, bytes.len()),
        ));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let expected = header_len + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::parse(
            path,
            format!("expected {} bytes for dimensions {:?}, found {}", expected, dims, bytes.len()),
        ));
    }
    Ok(IdxHeader { dims, payload_offset: header_len })
}

/// Loads an IDX image file and its matching label file.
pub fn load_idx(images: &Path, labels: &Path, num_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let image_bytes = fs::read(images)?;
    let label_bytes = fs::read(labels)?;
    let ih = read_idx_header(images, &image_bytes, IDX_IMAGES_MAGIC)?;
    let lh = read_idx_header(labels, &label_bytes, IDX_LABELS_MAGIC)?;
    let (count, rows, cols) = (ih.dims[0], ih.dims[1], ih.dims[2]);
    if lh.dims[0] != count {
        return Err(Error::parse(labels, format!("{} labels for {} images", lh.dims[0], count)));
    }
    let pixels: Vec<f64> = image_bytes[ih.payload_offset..].iter().map(|&b| b as f64 / 255.0).collect();
    let label_vec: Vec<usize> = label_bytes[lh.payload_offset..].iter().map(|&b| b as usize).collect();
    let classes = resolve_classes(labels, &label_vec, num_classes)?;
    let inputs = Tensor::matrix(count, rows * cols, pixels)?;
    let name = images.file_stem().map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(inputs, label_vec, classes, split, name)
}

/// Writes `count × rows × cols` unsigned-byte images.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows * cols == 0 || !pixels.len().is_multiple_of(rows * cols) {
        return Err(Error::InvalidArgument(format!("{} pixels do not tile {}x{} images", pixels.len(), rows, cols)));
    }
    let count = pixels.len() / (rows * cols);
    let mut out = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [count, rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}
